"""invfuse: invertible fusion of two grayscale images via a coupling flow.

The forward map turns a source pair (x1, x2) into a fused image and a
noise-like latent image; the inverse map reconstructs both sources from the
fused image and any latent sample drawn from the prior.
"""

from .autodiff import Tape, Tensor, finite_diff_check

__all__ = ["Tape", "Tensor", "finite_diff_check"]
