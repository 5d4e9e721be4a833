"""Differentiable hybrid-attention architecture search at desk scale."""

__version__ = "0.1.0"

from .model import HybridArch, ModelHandle, ModelSpec, OperatorKind  # noqa: F401
from .search import ArchState, SearchConfig, realized_budget  # noqa: F401
