"""Structure-preserving gray-level adversarial attacks, baselines and evaluation on a small numpy autodiff core."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
