"""Hard-aware training for imbalanced multi-label classification.

Provides a small float64 autodiff engine, the HABP / deactivation loss
family, an EMA hard-label registry, a conditional multi-resolution GAN with
decorrelation regularization, evaluation metrics, dataset tooling, and the
training pipeline that ties them together.
"""

from .tensor import Tensor, grad_check, no_grad

__all__ = ["Tensor", "grad_check", "no_grad"]
__version__ = "0.1.0"
