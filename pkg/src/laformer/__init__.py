"""LAformer: rank-enhanced linear attention for image restoration, in numpy."""
from ._kernels import get_backend, set_backend, use_backend

__version__ = "0.1.0"
