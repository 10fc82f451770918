"""Layer-parallel ADMM training for feed-forward networks.

Subpackages are imported lazily so that the CLI entry point can pin BLAS
thread counts before numpy is loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "linalg",
    "state",
    "solvers",
    "diagnostics",
    "trainer",
    "data",
    "cli",
    "report",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
