"""Dense complex linear-algebra primitives.

Everything in this package represents operators and densities as square
``complex128`` numpy arrays.  This module collects the handful of
primitives the rest of the code is built on: Kronecker products, partial
traces, Hermitian eigendecompositions, matrix exponentials and
Hilbert-Schmidt inner products.  All functions are pure and never mutate
their inputs.
"""

import os

import numpy as np
import scipy.linalg

from .errors import (
    ContractViolationError,
    DimensionLimitError,
    NormRangeError,
    ShapeError,
)

#: Relative Hilbert-Schmidt tolerance below which a matrix counts as Hermitian.
HERM_RTOL = 1e-12

#: Default cap on the full N-body dimension (overridable via SNBD_MAX_DIM).
DEFAULT_MAX_DIM = 4096

#: Frobenius-norm range for which matrix_exp guarantees 1e-10 relative error.
MAX_EXP_NORM = 50.0


def max_full_dim() -> int:
    """Configured cap on full-space dimensions (env var SNBD_MAX_DIM wins)."""
    raw = os.environ.get("SNBD_MAX_DIM")
    if raw is None:
        return DEFAULT_MAX_DIM
    try:
        value = int(raw)
    except ValueError as exc:
        raise ShapeError(f"SNBD_MAX_DIM={raw!r} is not an integer") from exc
    if value < 1:
        raise ShapeError(f"SNBD_MAX_DIM={value} must be >= 1")
    return value


def as_cmatrix(m, name="matrix") -> np.ndarray:
    """Coerce to a square C-contiguous complex128 array, validating shape."""
    a = np.ascontiguousarray(m, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name}: expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 1:
        raise ShapeError(f"{name}: dimension must be >= 1")
    return a


def frozen_cmatrix(m, name="matrix") -> np.ndarray:
    """Validated read-only copy, safe to share across workers."""
    a = as_cmatrix(m, name).copy()
    a.flags.writeable = False
    return a


def hs_norm(a) -> float:
    """Hilbert-Schmidt (Frobenius) norm."""
    return float(np.linalg.norm(a))


def herm_deviation(m) -> float:
    """Relative Hilbert-Schmidt distance of ``m`` from its own adjoint."""
    m = np.asarray(m)
    norm = hs_norm(m)
    if norm == 0.0:
        return 0.0
    return hs_norm(m - m.conj().T) / norm


def is_hermitian(m, rtol=HERM_RTOL) -> bool:
    return herm_deviation(m) <= rtol


def require_hermitian(m, name="matrix", rtol=HERM_RTOL) -> np.ndarray:
    a = as_cmatrix(m, name)
    dev = herm_deviation(a)
    if dev > rtol:
        raise ContractViolationError(
            f"{name}: not Hermitian (relative deviation {dev:.3e} > {rtol:.1e})"
        )
    return a


def kron(a, b) -> np.ndarray:
    """Kronecker product with a guard on the resulting dimension.

    The entry at ``(i*db + k, j*db + l)`` equals ``a[i, j] * b[k, l]``.
    """
    a = as_cmatrix(a, "a")
    b = as_cmatrix(b, "b")
    dim = a.shape[0] * b.shape[0]
    limit = max_full_dim()
    if dim > limit:
        raise DimensionLimitError(
            f"kron result dimension {dim} exceeds the configured maximum {limit}"
        )
    return np.kron(a, b)


def kron_all(mats) -> np.ndarray:
    """Left-to-right Kronecker product of a sequence of matrices."""
    mats = list(mats)
    if not mats:
        raise ShapeError("kron_all: empty sequence")
    out = as_cmatrix(mats[0], "factor 0")
    for i, m in enumerate(mats[1:], start=1):
        out = kron(out, as_cmatrix(m, f"factor {i}"))
    return out


def partial_trace(m, dims, keep) -> np.ndarray:
    """Trace out every tensor factor except ``keep``.

    Parameters
    ----------
    m : array
        Square matrix on the tensor-product space ``prod(dims)``.
    dims : sequence of int
        One-body dimensions, in tensor order.
    keep : int
        Index of the factor to keep.

    Returns
    -------
    The ``dims[keep]`` x ``dims[keep]`` reduced matrix; its trace equals
    the trace of ``m``.
    """
    m = as_cmatrix(m, "m")
    dims = [int(d) for d in dims]
    if any(d < 1 for d in dims):
        raise ShapeError(f"partial_trace: invalid dims {dims}")
    n = len(dims)
    total = int(np.prod(dims))
    if total != m.shape[0]:
        raise ShapeError(
            f"partial_trace: prod(dims)={total} does not match matrix dim {m.shape[0]}"
        )
    if not 0 <= keep < n:
        raise ShapeError(f"partial_trace: keep={keep} out of range for {n} factors")
    resh = m.reshape(dims + dims)
    rows = list(range(n))
    cols = [k if k != keep else n for k in range(n)]
    return np.einsum(resh, rows + cols, [keep, n])


def herm_eig(m, rtol=HERM_RTOL):
    """Eigendecomposition of a Hermitian matrix with a fixed phase convention.

    The input is checked against ``rtol`` and symmetrized before the
    decomposition so floating-point drift is absorbed without masking
    genuinely non-Hermitian inputs.  Eigenvalues come out ascending; each
    eigenvector is rotated so its largest-magnitude component is real and
    positive, which makes the output reproducible.

    Returns
    -------
    (eigenvalues, eigenvectors) : (real ndarray, complex ndarray)
        ``m == eigenvectors @ diag(eigenvalues) @ eigenvectors.conj().T``.
    """
    a = require_hermitian(m, "herm_eig input", rtol)
    a = 0.5 * (a + a.conj().T)
    w, v = np.linalg.eigh(a)
    v = v.copy()
    for j in range(v.shape[1]):
        col = v[:, j]
        idx = int(np.argmax(np.abs(col)))
        pivot = col[idx]
        mag = abs(pivot)
        if mag > 0.0:
            col *= pivot.conj() / mag
    return w, v


def matrix_exp(m) -> np.ndarray:
    """Matrix exponential via scipy's scaling-and-squaring Pade scheme.

    Guaranteed to 1e-10 relative accuracy only for Frobenius norms up to
    ``MAX_EXP_NORM``; larger inputs are rejected.
    """
    a = as_cmatrix(m, "matrix_exp input")
    norm = hs_norm(a)
    if not np.isfinite(norm):
        raise NormRangeError("matrix_exp: input has non-finite entries")
    if norm > MAX_EXP_NORM:
        raise NormRangeError(
            f"matrix_exp: norm {norm:.3g} above supported range {MAX_EXP_NORM:g}"
        )
    return scipy.linalg.expm(a)


def hs_inner(a, b) -> complex:
    """Hilbert-Schmidt inner product Tr{a^dag b}."""
    a = as_cmatrix(a, "a")
    b = as_cmatrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"hs_inner: shape mismatch {a.shape} vs {b.shape}")
    return complex(np.vdot(a, b))


def trace_distance(a, b) -> float:
    """(1/2) sum of absolute eigenvalues of the (Hermitian) difference."""
    a = as_cmatrix(a, "a")
    b = as_cmatrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"trace_distance: shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    diff = 0.5 * (diff + diff.conj().T)
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(diff))))
