"""Self-supervised audio-visual representation learning at desk scale.

Feature-space space-time cropping as cheap augmentation, a masked
shallow transformer as the temporal pooling function, and a combined
within-modal / cross-modal noise-contrastive objective, trained and
verified end to end on synthetic data with a from-scratch float64
autodiff engine.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad_check  # noqa: F401
