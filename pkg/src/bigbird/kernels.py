"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy/Python
fallback.  ``set_backend`` switches explicitly (tests and benchmarks use it
to compare the two).
"""
from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

_active = "compiled" if _ckernels is not None else "python"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name == "auto":
        name = "compiled" if _ckernels is not None else "python"
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    _active = name


def compact_attention(q, k, v, valid, scale, hardmax):
    return _BACKENDS[_active].compact_attention(q, k, v, valid, float(scale), bool(hardmax))


def bfs_all_pairs(indptr, indices, n):
    return _BACKENDS[_active].bfs_all_pairs(indptr, indices, n)
