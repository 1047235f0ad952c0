"""Backend selection for the hot kernels.

The compiled Cython extension is used when it imports cleanly; otherwise the
pure-numpy fallback is used. Setting ``MIMOFAN_PURE_PYTHON=1`` forces the
fallback at import time; :func:`use_backend` switches at runtime.
"""

import os
from contextlib import contextmanager

from . import _pykernels

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

python_backend = _pykernels

if os.environ.get("MIMOFAN_PURE_PYTHON", "") not in ("", "0") or compiled_backend is None:
    _impl = _pykernels
else:
    _impl = compiled_backend


def backend_name() -> str:
    return "cython" if _impl is compiled_backend else "python"


def available_backends() -> list:
    return ["python"] + (["cython"] if compiled_backend is not None else [])


def set_backend(name: str) -> None:
    global _impl
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _impl = compiled_backend
    else:
        raise ValueError(f"unknown backend {name!r}")


@contextmanager
def use_backend(name: str):
    prev = backend_name()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _contig(x):
    return x if x.flags.c_contiguous else x.copy()


def im2col(x, kh, kw, stride=1, pad=0):
    return _impl.im2col(_contig(x), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride=1, pad=0):
    return _impl.col2im(_contig(cols), tuple(shape), kh, kw, stride, pad)


def upsample2(x):
    return _impl.upsample2(_contig(x))


def upsample2_backward(g):
    return _impl.upsample2_backward(_contig(g))


def tap_gather(y, kh, kw, oh, ow):
    return _impl.tap_gather(_contig(y), kh, kw, oh, ow)


def tap_scatter(g, kh, kw, hp, wp):
    return _impl.tap_scatter(_contig(g), kh, kw, hp, wp)
