"""Internal Wasserstein distance: patch-level optimal transport for adversarial attack and defense."""

import importlib

from .errors import (ConvergenceError, FormatError, IWDError, NumericError, PathError,
                     ValidationError)

__version__ = "0.1.0"

# numeric submodules load on first use so the CLI can set thread counts first
_LAZY = {"PatchGrid": "patches", "extract_patches": "patches", "permute_patches": "patches",
         "exact_w1": "transport", "iwd": "transport", "sinkhorn_w1": "transport"}

__all__ = ["ConvergenceError", "FormatError", "IWDError", "NumericError", "PathError",
           "ValidationError", *_LAZY, "__version__"]


def __getattr__(name):
    if name in _LAZY:
        return getattr(importlib.import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
