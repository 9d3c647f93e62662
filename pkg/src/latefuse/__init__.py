"""Late visual fusion on a frozen toy language model.

Submodules are imported lazily so that entry points can pin BLAS thread
environment variables before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "bench",
    "checkpoint",
    "cli",
    "config",
    "errors",
    "fusion",
    "infer",
    "kernels",
    "optim",
    "percept",
    "pipeline",
    "seeding",
    "textlm",
    "world",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
