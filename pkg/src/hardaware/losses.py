"""The loss family for hard-aware training.

Node convention: a batch of M samples and N attributes yields M*N binary
output nodes, each holding a logit and a {0,1} label; a categorical head
contributes M further nodes. Every node has a target probability P (sigmoid
or softmax of its logit) and an error probability |y - P|**gamma used both
as a sampling-style loss weight and as the registry update signal.

Gradient semantics: the hard-aware weighted mean treats its weights and
normalizer as constants (sampling probabilities receive no gradient), while
focal loss differentiates through its modulating factor, matching each
method's conventional form. Both behaviors are switchable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import expit, log_softmax

from . import tensor as T
from .errors import ConfigError, LabelError, ShapeError
from .tensor import PROB_EPS, Tensor

if TYPE_CHECKING:
    from .registry import HardLabelRegistry


# ---------------------------------------------------------------------------
# probability mapping
# ---------------------------------------------------------------------------

def target_probability(y_hat, y) -> np.ndarray:
    """P = sigmoid(y_hat) for y=1 and sigmoid(-y_hat) for y=0, clamped away
    from {0, 1}. The two branches are exactly antisymmetric."""
    y_arr = np.asarray(y)
    if not np.isin(y_arr, (0, 1)).all():
        raise LabelError(f"binary labels must be 0 or 1, got values {np.unique(y_arr)}")
    x = np.asarray(y_hat, dtype=np.float64)
    signed = np.where(y_arr == 1, x, -x)
    return np.clip(expit(signed), PROB_EPS, 1.0 - PROB_EPS)


def ce_node_loss(p) -> np.ndarray:
    """-log(P) of an already-computed target probability, clamped input."""
    return -np.log(np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS))


def error_weight(p, y, gamma: float) -> np.ndarray:
    """|y - P|**gamma, the per-node probability-of-error weight."""
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    return np.abs(np.asarray(y, dtype=np.float64) - np.asarray(p, dtype=np.float64)) ** gamma


# ---------------------------------------------------------------------------
# batch container
# ---------------------------------------------------------------------------

@dataclass
class BatchOutput:
    """Logits and labels for one forward batch; P is derived lazily."""

    attr_logits: Tensor | None = None      # (M, N)
    attr_labels: np.ndarray | None = None  # (M, N) in {0, 1}
    cat_logits: Tensor | None = None       # (M, C)
    cat_labels: np.ndarray | None = None   # (M,) ints

    def __post_init__(self):
        if (self.attr_logits is None) != (self.attr_labels is None):
            raise ShapeError("attr logits and labels must be given together")
        if (self.cat_logits is None) != (self.cat_labels is None):
            raise ShapeError("cat logits and labels must be given together")
        if self.attr_logits is None and self.cat_logits is None:
            raise ShapeError("empty batch: no logits at all")
        if self.attr_logits is not None:
            self.attr_labels = np.asarray(self.attr_labels)
            if self.attr_labels.shape != self.attr_logits.shape:
                raise ShapeError(
                    f"attr labels {self.attr_labels.shape} vs logits {self.attr_logits.shape}"
                )
            if not np.isin(self.attr_labels, (0, 1)).all():
                raise LabelError("attribute labels must be binary")
        if self.cat_logits is not None:
            self.cat_labels = np.asarray(self.cat_labels)
            if self.cat_labels.shape != (self.cat_logits.shape[0],):
                raise ShapeError(
                    f"cat labels {self.cat_labels.shape} vs logits {self.cat_logits.shape}"
                )

    @property
    def m(self) -> int:
        ref = self.attr_logits if self.attr_logits is not None else self.cat_logits
        return ref.shape[0]

    @property
    def node_count(self) -> int:
        n = 0
        if self.attr_logits is not None:
            n += self.attr_logits.size
        if self.cat_logits is not None:
            n += self.cat_logits.shape[0]
        return n

    def attr_probs(self) -> np.ndarray:
        """Eq.-style target probabilities P_ij for the binary nodes (detached)."""
        return target_probability(self.attr_logits.data, self.attr_labels)

    def cat_probs(self) -> np.ndarray:
        """Softmax probability of the true class per sample (detached, clamped)."""
        logp = log_softmax(self.cat_logits.data, axis=1)
        rows = np.arange(self.cat_logits.shape[0])
        return np.clip(np.exp(logp[rows, self.cat_labels]), PROB_EPS, 1.0 - PROB_EPS)


def _node_losses(batch: BatchOutput, base: str = "ce", counts=None) -> Tensor:
    """All node CE losses as one differentiable 1-D vector (attr nodes first).

    base="wce-b" swaps the binary node loss for the single-ratio weighted BCE
    (the categorical nodes keep plain CE).
    """
    parts: list[Tensor] = []
    if batch.attr_logits is not None:
        if base == "ce":
            node = T.bce_with_logits(batch.attr_logits, batch.attr_labels)
        elif base == "wce-b":
            if counts is None:
                raise ConfigError("wce-b node loss needs dataset label counts")
            n_pos, n_neg = counts
            if n_pos.sum() < 1:
                raise ConfigError("wce-b: dataset has no positive labels at all")
            w = float(n_neg.sum() / n_pos.sum())
            node = _weighted_bce_nodes(batch.attr_logits, batch.attr_labels, np.full(batch.attr_logits.shape[1], w))
        else:
            raise ConfigError(f"unknown base node loss {base!r}")
        parts.append(T.reshape(node, (node.size,)))
    if batch.cat_logits is not None:
        parts.append(T.softmax_cross_entropy(batch.cat_logits, batch.cat_labels))
    return parts[0] if len(parts) == 1 else T.concat(parts)


def _node_error_probs(batch: BatchOutput) -> np.ndarray:
    """Detached |y - P| per node, aligned with ``_node_losses`` ordering."""
    parts = []
    if batch.attr_logits is not None:
        P = batch.attr_probs()
        parts.append(np.abs(batch.attr_labels - P).reshape(-1))
    if batch.cat_logits is not None:
        parts.append(np.abs(1.0 - batch.cat_probs()))
    return np.concatenate(parts)


def _node_error_factors(batch: BatchOutput, gamma: float) -> Tensor:
    """Differentiable |y - P|**gamma per node (for focal-style losses)."""
    parts: list[Tensor] = []
    if batch.attr_logits is not None:
        sign = 1.0 - 2.0 * batch.attr_labels.astype(np.float64)
        wrong = T.sigmoid(T.mul_const(batch.attr_logits, sign))  # P of the wrong label
        parts.append(T.reshape(T.pow_const(wrong, gamma), (wrong.size,)))
    if batch.cat_logits is not None:
        p_true = _softmax_target_prob(batch.cat_logits, batch.cat_labels)
        parts.append(T.pow_const(T.add_scalar(T.scale(p_true, -1.0), 1.0), gamma))
    return parts[0] if len(parts) == 1 else T.concat(parts)


def _softmax_target_prob(logits: Tensor, targets: np.ndarray) -> Tensor:
    """softmax(logits)[target] per row, differentiable."""
    t = np.asarray(targets)
    logp = log_softmax(logits.data, axis=1)
    rows = np.arange(logits.shape[0])
    p = np.exp(logp[rows, t])
    soft = np.exp(logp)
    out = T._make(p, (logits,), None, "softmax_target_prob")

    def backward(g):
        jac = -soft * p[:, None]
        jac[rows, t] += p
        T._accumulate(logits, jac * g[:, None])

    out.backward_fn = backward if out.requires_grad else None
    return out


def _weighted_bce_nodes(logits: Tensor, labels: np.ndarray, w_per_attr: np.ndarray) -> Tensor:
    """Per-node w_j*y*softplus(-x) + (1-y)*softplus(x) (weighted BCE, stable form)."""
    y = labels.astype(np.float64)
    w_pos = y * w_per_attr[None, :]
    pos = T.mul_const(T.softplus(T.scale(logits, -1.0)), w_pos)
    neg = T.mul_const(T.softplus(logits), 1.0 - y)
    return T.add(pos, neg)


# ---------------------------------------------------------------------------
# hard-aware weighted mean and its baselines
# ---------------------------------------------------------------------------

@dataclass
class HabpResult:
    value: Tensor
    weight_sum: float
    degenerate: bool = False


def habp_loss(
    batch: BatchOutput,
    gamma: float,
    base: str = "ce",
    counts=None,
    detach_weights: bool = True,
) -> HabpResult:
    """Error-probability weighted mean of node CE losses:
    sum(w * L) / sum(w) with w = |y - P|**gamma.

    With ``detach_weights`` (default) neither the weights nor the normalizer
    receive gradients, emulating node sampling. A perfect batch whose weight
    sum underflows to zero returns 0 with the degenerate flag set.
    """
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    losses = _node_losses(batch, base, counts)
    if detach_weights:
        w = _node_error_probs(batch) ** gamma
        wsum = float(w.sum())
        if wsum == 0.0:
            return HabpResult(Tensor(np.zeros(())), 0.0, degenerate=True)
        value = T.scale(T.weighted_sum(losses, w), 1.0 / wsum)
        return HabpResult(value, wsum)
    factors = _node_error_factors(batch, gamma)
    num = T.tensor_sum(T.mul(factors, losses))
    den = T.tensor_sum(factors)
    if float(den.data) == 0.0:
        return HabpResult(Tensor(np.zeros(())), 0.0, degenerate=True)
    return HabpResult(T.div(num, den), float(den.data))


def focal_loss(batch: BatchOutput, gamma: float, detach_factor: bool = False) -> Tensor:
    """sum(|y - P|**gamma * L) / (M*N): the hard-weighted mean without the
    output-dependent normalizer. The modulating factor is differentiated
    through unless ``detach_factor``."""
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    losses = _node_losses(batch)
    if detach_factor:
        w = _node_error_probs(batch) ** gamma
        return T.scale(T.weighted_sum(losses, w), 1.0 / losses.size)
    factors = _node_error_factors(batch, gamma)
    return T.scale(T.tensor_sum(T.mul(factors, losses)), 1.0 / losses.size)


def weighted_focal_loss(
    batch: BatchOutput, gamma: float, positive_priors: np.ndarray, detach_factor: bool = False
) -> Tensor:
    """Focal loss with attribute node j further scaled by exp(-a_j), where
    a_j is the attribute's prior positive frequency. Categorical nodes keep
    weight 1."""
    if batch.attr_logits is None:
        raise ConfigError("weighted focal loss needs attribute nodes")
    a = np.asarray(positive_priors, dtype=np.float64)
    if a.shape != (batch.attr_logits.shape[1],):
        raise ShapeError(f"priors {a.shape} do not match {batch.attr_logits.shape[1]} attributes")
    losses = _node_losses(batch)
    n_attr_nodes = batch.attr_logits.size
    scale_vec = np.ones(losses.size)
    scale_vec[:n_attr_nodes] = np.tile(np.exp(-a), batch.m)
    scaled = T.mul_const(losses, scale_vec)
    if detach_factor:
        w = _node_error_probs(batch) ** gamma
        return T.scale(T.weighted_sum(scaled, w), 1.0 / losses.size)
    factors = _node_error_factors(batch, gamma)
    return T.scale(T.tensor_sum(T.mul(factors, scaled)), 1.0 / losses.size)


def ohem_loss(batch: BatchOutput, ratio: float) -> Tensor:
    """Mean CE over the ceil(ratio * node_count) highest-loss nodes; only the
    selected nodes receive gradient (index tie-break, deterministic)."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"ohem ratio must be in (0, 1], got {ratio}")
    losses = _node_losses(batch)
    k = int(np.ceil(ratio * losses.size))
    order = np.argsort(-losses.data, kind="stable")
    mask = np.zeros(losses.size)
    mask[order[:k]] = 1.0
    return T.scale(T.weighted_sum(losses, mask), 1.0 / k)


def mean_ce_loss(batch: BatchOutput) -> Tensor:
    """Plain mean of node CE losses (the unweighted baseline)."""
    losses = _node_losses(batch)
    return T.mean(losses)


def weighted_ce(batch: BatchOutput, variant: str, n_pos: np.ndarray, n_neg: np.ndarray) -> Tensor:
    """Positive-weighted BCE averaged over attribute nodes.

    Variant "A" weights attribute j by log(n_neg_j / n_pos_j); variant "B"
    applies the single global ratio sum(n_neg) / sum(n_pos) to every
    attribute.
    """
    if batch.attr_logits is None:
        raise ConfigError("weighted CE needs attribute nodes")
    n_pos = np.asarray(n_pos, dtype=np.float64)
    n_neg = np.asarray(n_neg, dtype=np.float64)
    if variant == "A":
        zero = np.flatnonzero(n_pos < 1)
        if zero.size:
            raise ConfigError(f"weighted CE-A undefined: attribute {int(zero[0])} has no positive labels")
        w = np.log(n_neg / n_pos)
    elif variant == "B":
        if n_pos.sum() < 1:
            raise ConfigError("weighted CE-B undefined: no positive labels at all")
        w = np.full(n_pos.shape, n_neg.sum() / n_pos.sum())
    else:
        raise ConfigError(f"unknown weighted CE variant {variant!r}")
    node = _weighted_bce_nodes(batch.attr_logits, batch.attr_labels, w)
    return T.mean(node)


# ---------------------------------------------------------------------------
# deactivation losses for synthetic complementary samples
# ---------------------------------------------------------------------------

def deact_multiclass(logits: Tensor, threshold: float = -4.6) -> Tensor:
    """mean over classes (and samples) of max(y_hat - T, 0)^2: pushes every
    real-class output below the activation threshold."""
    shifted = T.relu(T.add_scalar(logits, -threshold))
    return T.mean(T.mul(shifted, shifted))


def deact_binary(logits: Tensor) -> Tensor:
    """mean of y_hat^2 per node: drives logits to 0, deactivating both labels."""
    return T.mean(T.mul(logits, logits))


def deact_weighted(
    synth_logits: Tensor, sampled_labels: np.ndarray, registry: "HardLabelRegistry"
) -> Tensor:
    """Registry-error weighted mean of per-node deactivation:
    sum(S_j(y_ij) * y_hat_ij^2) / sum(S_j(y_ij)), S treated as constants."""
    labels = np.asarray(sampled_labels)
    if labels.shape != synth_logits.shape:
        raise ShapeError(f"sampled labels {labels.shape} vs logits {synth_logits.shape}")
    s = registry.weights_for(labels)
    ssum = float(s.sum())
    if ssum == 0.0:
        warnings.warn("deactivation weights sum to zero; falling back to uniform", RuntimeWarning)
        s = np.ones_like(s)
        ssum = float(s.sum())
    sq = T.mul(synth_logits, synth_logits)
    return T.scale(T.weighted_sum(sq, s), 1.0 / ssum)


# ---------------------------------------------------------------------------
# configuration and the overall objective
# ---------------------------------------------------------------------------

LOSS_KINDS = ("ce", "habp", "fl", "wfl", "ohem", "wce-a", "wce-b")


@dataclass
class LossConfig:
    kind: str = "habp"
    gamma: float = 1.2
    lam: float = 1e-4               # weight of the deactivation term
    threshold: float = -4.6         # activation threshold for multiclass deactivation
    base_node_loss: str = "ce"      # node CE inside the hard-aware mean: ce | wce-b
    ohem_ratio: float = 0.17
    detach_weights: bool = True     # hard-aware mean weight semantics

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.lam < 0:
            raise ConfigError(f"deactivation weight must be >= 0, got {self.lam}")
        if not 0.0 < self.ohem_ratio <= 1.0:
            raise ConfigError(f"ohem_ratio must be in (0, 1], got {self.ohem_ratio}")
        if self.base_node_loss not in ("ce", "wce-b"):
            raise ConfigError(f"base_node_loss must be 'ce' or 'wce-b', got {self.base_node_loss!r}")


def primary_loss(batch: BatchOutput, cfg: LossConfig, counts=None) -> tuple[Tensor, bool]:
    """The configured real-batch loss; returns (value, degenerate_flag)."""
    if cfg.kind == "ce":
        return mean_ce_loss(batch), False
    if cfg.kind == "habp":
        res = habp_loss(batch, cfg.gamma, base=cfg.base_node_loss, counts=counts,
                        detach_weights=cfg.detach_weights)
        return res.value, res.degenerate
    if cfg.kind == "fl":
        return focal_loss(batch, cfg.gamma), False
    if cfg.kind == "wfl":
        if counts is None:
            raise ConfigError("weighted focal loss needs dataset label counts")
        n_pos, n_neg = counts
        priors = n_pos / np.maximum(n_pos + n_neg, 1)
        return weighted_focal_loss(batch, cfg.gamma, priors), False
    if cfg.kind == "ohem":
        return ohem_loss(batch, cfg.ohem_ratio), False
    if cfg.kind in ("wce-a", "wce-b"):
        if counts is None:
            raise ConfigError("weighted CE needs dataset label counts")
        n_pos, n_neg = counts
        return weighted_ce(batch, "A" if cfg.kind == "wce-a" else "B", n_pos, n_neg), False
    raise ConfigError(f"unhandled loss kind {cfg.kind!r}")


@dataclass
class CombinedLoss:
    total: Tensor
    base: Tensor
    deact: Tensor | None = None
    degenerate: bool = False

    @property
    def base_value(self) -> float:
        return float(self.base.data)

    @property
    def deact_value(self) -> float | None:
        return None if self.deact is None else float(self.deact.data)


def combined_loss(
    real_batch: BatchOutput,
    synth_batch: BatchOutput | None,
    cfg: LossConfig,
    registry: "HardLabelRegistry | None" = None,
    counts=None,
) -> CombinedLoss:
    """Overall objective: base loss plus lam * deactivation when a synthetic
    batch is present this step, base loss alone otherwise."""
    base, degenerate = primary_loss(real_batch, cfg, counts)
    if synth_batch is None:
        return CombinedLoss(total=base, base=base, degenerate=degenerate)
    parts: list[Tensor] = []
    if synth_batch.attr_logits is not None:
        if registry is None:
            raise ConfigError("binary deactivation weighting needs the hard-label registry")
        parts.append(deact_weighted(synth_batch.attr_logits, synth_batch.attr_labels, registry))
    if synth_batch.cat_logits is not None:
        parts.append(deact_multiclass(synth_batch.cat_logits, cfg.threshold))
    if not parts:
        raise ConfigError("synthetic batch carries no logits")
    deact = parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])
    total = T.add(base, T.scale(deact, cfg.lam))
    return CombinedLoss(total=total, base=base, deact=deact, degenerate=degenerate)
