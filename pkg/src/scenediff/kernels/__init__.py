"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The active backend is chosen once at import from the ``SCENEDIFF_BACKEND``
environment variable (``"numba"`` or ``"numpy"``). Unset, numba is used when
it imports cleanly. ``set_backend`` switches at runtime (used by tests and
the benchmark); both backends are numerically interchangeable.
"""

import multiprocessing
import os

from . import numpy_backend

try:
    from . import numba_backend

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_backend = None
    _HAS_NUMBA = False

if _HAS_NUMBA:
    # the jitted kernels interleave with BLAS calls; leaving a core to the
    # BLAS pool avoids thread ping-pong on small machines
    import numba

    _want = os.environ.get("SCENEDIFF_NUMBA_THREADS", "").strip()
    if _want:
        numba.set_num_threads(max(1, int(_want)))
    else:
        numba.set_num_threads(max(1, multiprocessing.cpu_count() - 1))

_BACKENDS = {"numpy": numpy_backend}
if _HAS_NUMBA:
    _BACKENDS["numba"] = numba_backend

_active_name = os.environ.get("SCENEDIFF_BACKEND", "").strip().lower()
if not _active_name:
    _active_name = "numba" if _HAS_NUMBA else "numpy"
if _active_name not in _BACKENDS:
    raise ValueError(
        f"SCENEDIFF_BACKEND={_active_name!r} not available; "
        f"choose from {sorted(_BACKENDS)}"
    )
_active = _BACKENDS[_active_name]


def available_backends():
    return sorted(_BACKENDS)


def active_backend():
    return _active_name


def set_backend(name):
    """Switch the kernel backend; returns the previously active name."""
    global _active, _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {sorted(_BACKENDS)}")
    prev = _active_name
    _active_name = name
    _active = _BACKENDS[name]
    return prev


def attention_forward(q, k, v, key_valid):
    """Masked scaled-dot-product attention.

    q: (R, H, Tq, D), k/v: (R, H, Tk, D), key_valid: (R, Tk) bool.
    Returns (out (R, H, Tq, D), probs (R, H, Tq, Tk)). Rows whose key set is
    empty produce zero output (identity residual at the call site).
    """
    return _active.attention_forward(q, k, v, key_valid)


def attention_backward(q, k, v, key_valid, probs, d_out):
    """Gradients of attention_forward; returns (dq, dk, dv)."""
    return _active.attention_backward(q, k, v, key_valid, probs, d_out)


def rect_overlap_matrix(corners_a, corners_b):
    """Pairwise oriented-rectangle intersection tests.

    corners_a: (Na, 4, 2), corners_b: (Nb, 4, 2) rectangle corners in order.
    Returns (Na, Nb) bool; touching edges count as overlap.
    """
    return _active.rect_overlap_matrix(corners_a, corners_b)


def masked_softmax(scores, key_valid):
    """Softmax over the last axis restricted to valid keys; empty rows -> 0."""
    return _active.masked_softmax(scores, key_valid)


def softmax_backward_ds(probs, dp):
    """Backward of the masked softmax: p * (dp - sum(dp * p))."""
    return _active.softmax_backward_ds(probs, dp)


def layernorm_forward(x2d, gamma, beta, eps=1e-6):
    """Row-wise layernorm; returns (y, xhat, inv_std)."""
    return _active.layernorm_forward(x2d, gamma, beta, eps)


def layernorm_backward_dx(dy2d, xhat, inv, gamma):
    """Input gradient of layernorm_forward (parameter grads are cheap
    reductions left to the caller)."""
    return _active.layernorm_backward_dx(dy2d, xhat, inv, gamma)
