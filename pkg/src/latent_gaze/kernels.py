"""Hot-kernel dispatch.

The compiled extension ``_ckernels`` is used when it was built and
``LGS_PURE_PYTHON`` is unset; otherwise the numpy versions in ``_pykernels``
are used.  ``BACKEND`` records which one was picked.
"""

import os

import numpy as np

from . import _pykernels
from .geometry import PATCH_SIZE

try:
    if os.environ.get("LGS_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels forced by LGS_PURE_PYTHON")
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKEND = "compiled" if _ckernels is not None else "python"


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def _module(backend):
    if backend is None:
        backend = BACKEND
    if backend == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built")
        return _ckernels
    if backend == "python":
        return _pykernels
    raise ValueError(f"unknown kernel backend {backend!r}")


def warp_batch(src, params, gain=1.0, out_size=PATCH_SIZE, out=None, backend=None):
    """Resample a batch of images with per-image (shift_y, shift_x, scale, flip).

    ``src`` is uint8 or float32 of shape (B, H, W); returns float32
    (B, out_size, out_size) scaled by ``gain`` with the circular aperture applied.
    """
    if src.dtype not in (np.uint8, np.float32):
        src = src.astype(np.float32)
    src = np.ascontiguousarray(src)
    params = np.ascontiguousarray(params, dtype=np.float64).reshape(-1, 4)
    if params.shape[0] != src.shape[0]:
        raise ValueError("one augmentation row per image is required")
    if out is None:
        out = np.empty((src.shape[0], out_size, out_size), dtype=np.float32)
    _module(backend).warp_into(src, params, float(gain), out)
    return out


def inference_engine(packed, backend=None):
    return _module(backend).InferenceEngine(packed)
