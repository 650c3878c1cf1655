"""GCN / FAGCN node classifiers, GMNN EM training and a fair k-fold evaluation harness."""

from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
