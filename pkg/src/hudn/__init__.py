"""Joint user association and power control with a heterogeneous GraphSAGE."""

__version__ = "0.1.0"

from .estimator import BaselineAllocator, HGSAGEAllocator  # noqa: E402

__all__ = ["BaselineAllocator", "HGSAGEAllocator", "__version__"]
