"""Backend selection for the hot loops.

The Cython extension is used when it was built; otherwise the NumPy fallback.
Set ``LUPI_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("LUPI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"


def compiled_available() -> bool:
    return compiled_backend is not None


def use(name: str) -> None:
    """Switch backend at runtime (``"cython"`` or ``"python"``); used by the benchmark and tests."""
    global backend, BACKEND
    if name == "cython":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not built")
        backend = compiled_backend
    elif name == "python":
        backend = python_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def dropout_forward(h, sigma, eps):
    return backend.dropout_forward(h, sigma, eps)


def dropout_backward(g, h, sigma, eps):
    return backend.dropout_backward(g, h, sigma, eps)


def enumerate_paths(n_inputs, total, indptr, indptr_off, dst, weight, gate):
    return backend.enumerate_paths(n_inputs, total, indptr, indptr_off, dst, weight, gate)
