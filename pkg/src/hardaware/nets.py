"""Reference architectures: LeNet-5, a small multi-label CNN, and the
conditional multi-resolution GAN (generator + per-rung discriminators).

All builders are pure: the same spec and seed produce bit-identical initial
parameters. Classifier heads emit raw logits; losses own the sigmoid and
softmax. The generator emits one image per resolution rung in a single
forward pass, and exposes the first block's output as the injection point
for complementary-sample perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ShapeError
from .layers import (
    Activation,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Layer,
    Linear,
    Sequential,
)
from .tensor import Tensor


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[str, ...]
    n_classes: int = 0       # categorical head width (0: no head)
    n_attributes: int = 0    # binary multi-label head width (0: no head)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": list(self.layers),
            "n_classes": self.n_classes,
            "n_attributes": self.n_attributes,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassifierSpec":
        return ClassifierSpec(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(d["layers"]),
            n_classes=d["n_classes"],
            n_attributes=d["n_attributes"],
            seed=d["seed"],
        )


@dataclass
class ClassifierOutput:
    cat_logits: Tensor | None
    attr_logits: Tensor | None


class Classifier:
    """Trunk plus up to two linear heads (categorical and/or binary)."""

    def __init__(self, spec: ClassifierSpec, trunk: Sequential,
                 head_cat: Linear | None, head_attr: Linear | None):
        self.spec = spec
        self.trunk = trunk
        self.head_cat = head_cat
        self.head_attr = head_attr

    def params(self) -> list[tuple[str, Tensor]]:
        out = [(f"trunk.{n}", p) for n, p in self.trunk.params()]
        if self.head_cat is not None:
            out += [(f"head_cat.{n}", p) for n, p in self.head_cat.params()]
        if self.head_attr is not None:
            out += [(f"head_attr.{n}", p) for n, p in self.head_attr.params()]
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"trunk.{n}", b) for n, b in self.trunk.buffers()]

    def param_count(self) -> int:
        return sum(p.size for _, p in self.params())

    def train(self) -> None:
        self.trunk.train()

    def eval(self) -> None:
        self.trunk.eval()

    def reset_dropout(self, seed: int) -> None:
        for layer in self.trunk.layers:
            if isinstance(layer, Dropout):
                layer.reset_rng(seed)

    def forward(self, x) -> ClassifierOutput:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        feats = self.trunk(x)
        cat = self.head_cat(feats) if self.head_cat is not None else None
        attr = self.head_attr(feats) if self.head_attr is not None else None
        return ClassifierOutput(cat_logits=cat, attr_logits=attr)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> ClassifierOutput:
        """Eval-mode forward over a full set, returning stacked logit arrays."""
        self.eval()
        cats, attrs = [], []
        with T.no_grad():
            for start in range(0, images.shape[0], batch_size):
                out = self.forward(images[start : start + batch_size])
                if out.cat_logits is not None:
                    cats.append(out.cat_logits.data)
                if out.attr_logits is not None:
                    attrs.append(out.attr_logits.data)
        cat = Tensor(np.concatenate(cats)) if cats else None
        attr = Tensor(np.concatenate(attrs)) if attrs else None
        return ClassifierOutput(cat_logits=cat, attr_logits=attr)


def build_lenet5(seed: int = 0) -> Classifier:
    """Classic LeNet-5 with ReLU activations for 1x28x28 inputs, 10-way head."""
    rng = np.random.default_rng(seed)
    trunk = Sequential(
        Conv2d(1, 6, 5, rng, stride=1, padding=2),
        Activation("relu"),
        AvgPool2d(2),
        Conv2d(6, 16, 5, rng, stride=1, padding=0),
        Activation("relu"),
        AvgPool2d(2),
        Flatten(),
        Linear(400, 120, rng),
        Activation("relu"),
        Linear(120, 84, rng),
        Activation("relu"),
    )
    head = Linear(84, 10, rng)
    spec = ClassifierSpec(
        input_shape=(1, 28, 28),
        layers=("conv1-6x5x5-p2", "pool2", "conv6-16x5x5", "pool2", "fc400-120", "fc120-84", "fc84-10"),
        n_classes=10,
        seed=seed,
    )
    return Classifier(spec, trunk, head_cat=head, head_attr=None)


def lenet_features(model: Classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Penultimate (84-dim for LeNet-5) activations, for the Frechet proxy."""
    model.eval()
    feats = []
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            feats.append(model.trunk(Tensor(images[start : start + batch_size])).data)
    return np.concatenate(feats)


def build_multilabel_cnn(
    input_shape: tuple[int, int, int],
    n_attributes: int,
    n_classes: int = 0,
    seed: int = 0,
    width: int = 24,
    dropout_p: float = 0.5,
) -> Classifier:
    """Small conv trunk ending in two padding-free 3x3 convs, global average
    pooling, dropout, and linear heads of width ``n_classes`` / ``n_attributes``."""
    if n_attributes <= 0 and n_classes <= 0:
        raise ConfigError("multilabel cnn needs at least one head")
    c, h, w = input_shape
    if h < 16 or w < 16:
        raise ShapeError(f"input {input_shape} too small for the two padding-free 3x3 convolutions")
    rng = np.random.default_rng(seed)
    trunk = Sequential(
        Conv2d(c, width, 3, rng, padding=1),
        Activation("relu"),
        AvgPool2d(2),
        Conv2d(width, 2 * width, 3, rng, padding=1),
        Activation("relu"),
        AvgPool2d(2),
        Conv2d(2 * width, 3 * width, 3, rng, padding=0),
        Activation("relu"),
        Conv2d(3 * width, 4 * width, 3, rng, padding=0),
        Activation("relu"),
        GlobalAvgPool(),
        Dropout(dropout_p, seed=seed),
    )
    head_cat = Linear(4 * width, n_classes, rng) if n_classes > 0 else None
    head_attr = Linear(4 * width, n_attributes, rng) if n_attributes > 0 else None
    spec = ClassifierSpec(
        input_shape=input_shape,
        layers=(
            f"conv{c}-{width}x3x3-p1", "pool2", f"conv{width}-{2*width}x3x3-p1", "pool2",
            f"conv{2*width}-{3*width}x3x3-p0", f"conv{3*width}-{4*width}x3x3-p0",
            "gap", f"dropout{dropout_p}",
        ),
        n_classes=n_classes,
        n_attributes=n_attributes,
        seed=seed,
    )
    return Classifier(spec, trunk, head_cat=head_cat, head_attr=head_attr)


# ---------------------------------------------------------------------------
# MR-GAN
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MRGanSpec:
    latent_dim: int = 64
    cond_dim: int = 10
    resolutions: tuple[int, ...] = (4, 8, 16, 32)
    channels: tuple[int, ...] = (128, 128, 64, 64)
    image_channels: int = 1
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if len(self.resolutions) < 1 or len(self.resolutions) != len(self.channels):
            raise ConfigError("resolutions and channels must align and be non-empty")
        for lo, hi in zip(self.resolutions, self.resolutions[1:]):
            if hi != 2 * lo:
                raise ConfigError(f"resolution ladder must strictly double, got {self.resolutions}")
        if self.image_channels not in (1, 3):
            raise ConfigError("image_channels must be 1 or 3")
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be >= 2")

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "cond_dim": self.cond_dim,
            "resolutions": list(self.resolutions),
            "channels": list(self.channels),
            "image_channels": self.image_channels,
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "MRGanSpec":
        return MRGanSpec(
            latent_dim=d["latent_dim"],
            cond_dim=d["cond_dim"],
            resolutions=tuple(d["resolutions"]),
            channels=tuple(d["channels"]),
            image_channels=d["image_channels"],
            leaky_slope=d["leaky_slope"],
            seed=d["seed"],
        )


class Generator:
    """Latent+condition projection to the base grid, then one upsampling
    block and one tanh image head per rung. The projection block's output is
    the perturbation injection point for complementary sampling."""

    def __init__(self, spec: MRGanSpec, rng: np.random.Generator):
        self.spec = spec
        base = spec.resolutions[0]
        in_dim = spec.latent_dim + spec.cond_dim
        slope = spec.leaky_slope
        self.project = ConvTranspose2d(in_dim, spec.channels[0], base, rng, stride=1, padding=0)
        self.project_bn = BatchNorm2d(spec.channels[0])
        self.blocks: list[Sequential] = []
        for i in range(1, len(spec.resolutions)):
            self.blocks.append(Sequential(
                ConvTranspose2d(spec.channels[i - 1], spec.channels[i], 4, rng, stride=2, padding=1),
                BatchNorm2d(spec.channels[i]),
                Activation("leaky_relu", slope),
            ))
        self.heads: list[Sequential] = []
        for ch in spec.channels:
            self.heads.append(Sequential(
                Conv2d(ch, spec.image_channels, 3, rng, stride=1, padding=1),
                Activation("tanh"),
            ))
        self._slope = slope

    def params(self) -> list[tuple[str, Tensor]]:
        out = [(f"project.{n}", p) for n, p in self.project.params()]
        out += [(f"project_bn.{n}", p) for n, p in self.project_bn.params()]
        for i, blk in enumerate(self.blocks):
            out += [(f"block{i + 1}.{n}", p) for n, p in blk.params()]
        for i, head in enumerate(self.heads):
            out += [(f"head{i}.{n}", p) for n, p in head.params()]
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"project_bn.{n}", b) for n, b in self.project_bn.buffers()]
        for i, blk in enumerate(self.blocks):
            out += [(f"block{i + 1}.{n}", b) for n, b in blk.buffers()]
        return out

    def train(self) -> None:
        self.project_bn.train()
        for blk in self.blocks:
            blk.train()
        for head in self.heads:
            head.train()

    def eval(self) -> None:
        self.project_bn.eval()
        for blk in self.blocks:
            blk.eval()
        for head in self.heads:
            head.eval()

    def projection_kernel(self) -> Tensor:
        """The latent->feature transposed-convolution weight (decorrelation target)."""
        return self.project.w

    def injection_shape(self, batch: int) -> tuple[int, int, int, int]:
        return (batch, self.spec.channels[0], self.spec.resolutions[0], self.spec.resolutions[0])

    def forward(self, z: np.ndarray | Tensor, c: np.ndarray | Tensor | None,
                perturb: np.ndarray | None = None) -> list[Tensor]:
        """Returns one image tensor per rung, low resolution first."""
        z_t = z if isinstance(z, Tensor) else Tensor(z)
        if self.spec.cond_dim > 0:
            if c is None:
                raise ConfigError("generator is conditional but no condition batch was given")
            c_t = c if isinstance(c, Tensor) else Tensor(c)
            zc = T.concat([z_t, c_t], axis=1)
        else:
            zc = z_t
        B = zc.shape[0]
        x = T.reshape(zc, (B, zc.shape[1], 1, 1))
        x = self.project(x)
        x = self.project_bn(x)
        x = T.leaky_relu(x, self._slope)
        if perturb is not None:
            if perturb.shape != x.shape:
                raise ShapeError(f"perturbation {perturb.shape} does not match injection point {x.shape}")
            x = T.add(x, Tensor(perturb))
        images = [self.heads[0](x)]
        for blk, head in zip(self.blocks, self.heads[1:]):
            x = blk(x)
            images.append(head(x))
        return images


class Discriminator:
    """Per-rung real/fake critic; the condition vector is tiled spatially and
    concatenated as extra input channels."""

    def __init__(self, spec: MRGanSpec, rung: int, rng: np.random.Generator):
        self.spec = spec
        self.rung = rung
        res = spec.resolutions[rung]
        in_ch = spec.image_channels + spec.cond_dim
        slope = spec.leaky_slope
        layers: list[Layer] = []
        if rung == 0:
            layers += [Conv2d(in_ch, spec.channels[0], 3, rng, stride=1, padding=1),
                       Activation("leaky_relu", slope)]
            ch = spec.channels[0]
        else:
            ch = in_ch
            for i in range(rung, 0, -1):
                out_ch = spec.channels[i - 1]
                layers.append(Conv2d(ch, out_ch, 4, rng, stride=2, padding=1))
                if i != rung:  # no batchnorm on the first discriminator layer
                    layers.append(BatchNorm2d(out_ch))
                layers.append(Activation("leaky_relu", slope))
                ch = out_ch
        layers.append(Conv2d(ch, 1, spec.resolutions[0], rng, stride=1, padding=0))
        self.net = Sequential(*layers)
        self.res = res

    def params(self) -> list[tuple[str, Tensor]]:
        return self.net.params()

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return self.net.buffers()

    def train(self) -> None:
        self.net.train()

    def eval(self) -> None:
        self.net.eval()

    def forward(self, images: Tensor, cond: np.ndarray | None) -> Tensor:
        """(B, img_ch, r, r) [+ condition] -> (B,) real/fake logits."""
        x = images
        if self.spec.cond_dim > 0:
            if cond is None:
                raise ConfigError("discriminator is conditional but no condition batch was given")
            B = images.shape[0]
            tiled = np.broadcast_to(
                np.asarray(cond, dtype=np.float64)[:, :, None, None],
                (B, self.spec.cond_dim, self.res, self.res),
            ).copy()
            x = T.concat([images, Tensor(tiled)], axis=1)
        out = self.net(x)
        return T.reshape(out, (out.shape[0],))


def build_mrgan(spec: MRGanSpec) -> tuple[Generator, list[Discriminator]]:
    """Deterministic generator + one discriminator per rung from one seed."""
    rng = np.random.default_rng(spec.seed)
    gen = Generator(spec, rng)
    discs = [Discriminator(spec, r, rng) for r in range(len(spec.resolutions))]
    return gen, discs


# ---------------------------------------------------------------------------
# complementary sampling
# ---------------------------------------------------------------------------

INJECTION_POINT = "block0.out"  # output of the latent projection block


@dataclass
class GeneratorBundle:
    spec: MRGanSpec
    generator: Generator
    sigma_p: float = 0.0
    injection_point: str = INJECTION_POINT

    def __post_init__(self):
        if self.sigma_p < 0:
            raise ConfigError(f"sigma_p must be >= 0, got {self.sigma_p}")

    def with_sigma(self, sigma_p: float) -> "GeneratorBundle":
        return replace(self, sigma_p=sigma_p)


def generate_complementary(bundle: GeneratorBundle, labels: np.ndarray, seed: int) -> np.ndarray:
    """Draw z ~ N(0, I), perturb the injection-point feature maps with
    N(0, sigma_p^2) noise, and return the highest-rung images.

    sigma_p = 0 returns ordinary conditional samples (bit-identical to the
    unperturbed generator under the same seed).
    """
    labels = np.asarray(labels, dtype=np.float64)
    B = labels.shape[0]
    spec = bundle.spec
    if spec.cond_dim > 0 and labels.shape != (B, spec.cond_dim):
        raise ShapeError(f"condition batch {labels.shape} does not match cond_dim {spec.cond_dim}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((B, spec.latent_dim))
    perturb = None
    if bundle.sigma_p > 0:
        perturb = rng.normal(0.0, bundle.sigma_p, bundle.generator.injection_shape(B))
    bundle.generator.eval()
    with T.no_grad():
        images = bundle.generator.forward(z, labels if spec.cond_dim > 0 else None, perturb=perturb)
    return images[-1].data


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def model_arrays(model) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in model.params()}
    for name, buf in model.buffers():
        arrays[f"buffer/{name}"] = buf
    return arrays


def load_model_arrays(model, arrays: dict[str, np.ndarray]) -> None:
    for name, p in model.params():
        if name not in arrays:
            raise ConfigError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise ShapeError(f"parameter {name!r}: checkpoint {arrays[name].shape} vs model {p.data.shape}")
        p.data = arrays[name].copy()
    for name, buf in model.buffers():
        key = f"buffer/{name}"
        if key in arrays:
            buf[...] = arrays[key]


def save_bundle(directory: str | Path, bundle: GeneratorBundle, extra_meta: dict | None = None) -> Path:
    meta = {
        "kind": "generator-bundle",
        "spec": bundle.spec.to_dict(),
        "sigma_p": bundle.sigma_p,
        "injection_point": bundle.injection_point,
    }
    if extra_meta:
        meta.update(extra_meta)
    return save_checkpoint(directory, model_arrays(bundle.generator), meta)


def load_bundle(directory: str | Path) -> GeneratorBundle:
    arrays, meta = load_checkpoint(directory)
    if meta.get("kind") != "generator-bundle":
        raise ConfigError(f"{directory} does not hold a generator bundle")
    spec = MRGanSpec.from_dict(meta["spec"])
    gen, _ = build_mrgan(spec)
    load_model_arrays(gen, arrays)
    return GeneratorBundle(
        spec=spec, generator=gen,
        sigma_p=float(meta.get("sigma_p", 0.0)),
        injection_point=meta.get("injection_point", INJECTION_POINT),
    )
