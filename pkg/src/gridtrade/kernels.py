"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback
takes over with identical results up to floating-point summation order.
``use_backend`` switches explicitly (tests and the benchmark use it).
"""
from __future__ import annotations

from gridtrade import _fallback

try:
    from gridtrade import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_active = _compiled if _compiled is not None else _fallback


def backend() -> str:
    """Name of the active backend: ``"compiled"`` or ``"python"``."""
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def available() -> list[str]:
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "compiled")
    return names


def use_backend(name: str) -> None:
    """Select ``"compiled"`` or ``"python"`` for subsequent kernel calls."""
    global _active
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        _active = _compiled
    elif name == "python":
        _active = _fallback
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def module(name: str | None = None):
    if name is None:
        return _active
    return _compiled if name == "compiled" else _fallback


def solve_cohorts(*args):
    return _active.solve_cohorts(*args)


def solve_type1_prox(*args):
    return _active.solve_type1_prox(*args)


def project_box_band(*args):
    return _active.project_box_band(*args)


def hildreth(*args, **kwargs):
    return _active.hildreth(*args, **kwargs)
