"""Numerical G2-structure calculus and Laplacian coflow integration on the
flat 7-torus.

Submodules load lazily so the command-line entry point can cap BLAS/OpenMP
threads before numpy is imported:

    algebra      pointwise structure algebra: metric, star, projections
    tensor_core  packed antisymmetric index conventions and small solvers
    fields       grid fields, derivatives, curvature, integration, snapshots
    torsion      torsion extraction, curvature and Laplacian identities
    coflow       time integration of the 4-form flow and its diagnostics
    symbols      principal-symbol evaluators and sampling certificates
    cli          command-line driver
"""
import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "algebra",
    "tensor_core",
    "fields",
    "torsion",
    "coflow",
    "symbols",
    "cli",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
