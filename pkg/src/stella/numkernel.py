"""Dense linear-algebra kernels: SVD, QR, polar factor, matrix exponential.

Every routine works in float64. Matrices are plain ``numpy.ndarray`` objects;
the text serialization used for on-disk artifacts also lives here.
"""

from __future__ import annotations

import os
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg

from .errors import ContractError, NumericalError, SingularMatrixError

# smallest singular value must exceed RANK_RTOL * sigma_max * max(m, k)
RANK_RTOL = 1e-12


class SvdResult(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} has non-finite entries")
    return arr


def thin_svd(a) -> SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with ``k = min(m, n)``.

    Singular vector signs are fixed so that the largest-magnitude entry of
    each left singular vector is positive; this makes the output a
    deterministic function of the input.
    """
    a = as_matrix(a)
    try:
        u, sigma, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for {a.shape[0]}x{a.shape[1]} matrix") from exc
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return SvdResult(u * signs, sigma, vt.T * signs)


def _check_rank(sigma: np.ndarray, shape: tuple[int, int], index=None) -> None:
    m, k = shape
    smax = sigma[..., 0]
    smin = sigma[..., -1]
    if not smin > RANK_RTOL * smax * max(m, k):
        where = "" if index is None else f" (batch index {index})"
        raise SingularMatrixError(
            f"polar factor undefined: {m}x{k} input is rank deficient{where}, "
            f"sigma_min={smin:.3e}, sigma_max={smax:.3e}",
            index=index,
        )


def polar_factor(a) -> np.ndarray:
    """Orthonormal factor ``u @ v.T`` of the polar decomposition of a tall matrix.

    This is the closest matrix with orthonormal columns to ``a`` in the
    Frobenius norm. Rank-deficient inputs raise ``SingularMatrixError``
    because the factor is not unique there.
    """
    a = as_matrix(a)
    m, k = a.shape
    if m < k:
        raise ContractError(f"polar_factor needs m >= k, got {m}x{k}")
    try:
        u, sigma, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for {m}x{k} matrix") from exc
    _check_rank(sigma, (m, k))
    return u @ vt


def batched_polar_factor(stack: Sequence[np.ndarray] | np.ndarray, chunk_size: int | None = None):
    """Polar factors of a stack of equally shaped tall matrices.

    The SVDs are computed as one stacked call (per chunk of ``chunk_size``
    members, to bound memory). Element ``i`` of the result agrees with
    ``polar_factor(stack[i])``. A list input gives a list back; an array of
    shape ``(b, m, k)`` gives an array back.
    """
    return_list = not isinstance(stack, np.ndarray)
    if return_list:
        if len(stack) == 0:
            return []
        shapes = {np.shape(x) for x in stack}
        if len(shapes) != 1:
            raise ContractError(f"batch members must share one shape, got {sorted(shapes)}")
        arr = np.stack([np.asarray(x, dtype=np.float64) for x in stack])
    else:
        arr = np.asarray(stack, dtype=np.float64)
    if arr.ndim != 3:
        raise ContractError(f"batch must be 3-D (b, m, k), got shape {arr.shape}")
    b, m, k = arr.shape
    if m < k:
        raise ContractError(f"polar factor needs m >= k, got {m}x{k}")
    bad = ~np.all(np.isfinite(arr), axis=(1, 2))
    if np.any(bad):
        raise ContractError(f"batch member {int(np.argmax(bad))} has non-finite entries")

    out = np.empty_like(arr)
    step = b if not chunk_size else max(1, int(chunk_size))
    for start in range(0, b, step):
        block = arr[start : start + step]
        try:
            u, sigma, vt = np.linalg.svd(block, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"batched SVD did not converge for {m}x{k} members") from exc
        for j in range(block.shape[0]):
            _check_rank(sigma[j], (m, k), index=start + j)
        out[start : start + step] = u @ vt
    return list(out) if return_list else out


def matrix_exp(a) -> np.ndarray:
    """Matrix exponential (scaling and squaring with a Pade core)."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ContractError(f"matrix_exp needs a square matrix, got {a.shape}")
    if not np.any(a):
        return np.eye(a.shape[0])
    return scipy.linalg.expm(a)


def thin_qr(a) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR with a non-negative diagonal on ``r``.

    Works on a single ``m x k`` matrix or a stack ``(..., m, k)``. Rank
    deficient columns leave zeros on the diagonal of ``r``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-2] < a.shape[-1]:
        raise ContractError(f"thin_qr needs m >= k, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("thin_qr input has non-finite entries")
    q, r = np.linalg.qr(a, mode="reduced")
    d = np.sign(np.diagonal(r, axis1=-2, axis2=-1)).copy()
    d[d == 0] = 1.0
    q = q * d[..., None, :]
    r = r * d[..., :, None]
    return q, r


def random_orthonormal(m: int, k: int, seed) -> np.ndarray:
    """Random ``m x k`` matrix with orthonormal columns (Haar distributed).

    Q factor of a standard Gaussian matrix under the non-negative-diagonal
    QR convention. ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if k < 1 or m < k:
        raise ContractError(f"random_orthonormal needs m >= k >= 1, got m={m}, k={k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q, _ = thin_qr(rng.standard_normal((m, k)))
    return q


def orth_error(y) -> float:
    """``||y.T y - I||_F``."""
    y = np.asarray(y, dtype=np.float64)
    return float(np.linalg.norm(y.T @ y - np.eye(y.shape[1])))


# --- text serialization -----------------------------------------------------


def format_matrix(a) -> str:
    a = as_matrix(a)
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines.extend(" ".join(f"{x:.17g}" for x in row) for row in a)
    return "\n".join(lines) + "\n"


def parse_matrix(text: str, source: str = "<string>") -> np.ndarray:
    """Parse the ``<rows> <cols>`` header followed by one line per row."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{source}: empty matrix file")
    try:
        rows, cols = (int(t) for t in lines[0].split())
    except ValueError as exc:
        raise ValueError(f"{source}:1: expected '<rows> <cols>' header") from exc
    if rows < 1 or cols < 1:
        raise ValueError(f"{source}:1: matrix dimensions must be positive")
    if len(lines) - 1 != rows:
        raise ValueError(f"{source}: header says {rows} rows, found {len(lines) - 1}")
    out = np.empty((rows, cols))
    for i, line in enumerate(lines[1:]):
        fields = line.split()
        if len(fields) != cols:
            raise ValueError(f"{source}:{i + 2}: expected {cols} values, found {len(fields)}")
        try:
            out[i] = [float(f) for f in fields]
        except ValueError as exc:
            raise ValueError(f"{source}:{i + 2}: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{source}: matrix has non-finite entries")
    return out


def write_matrix(path: str | os.PathLike, a) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_matrix(a))


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return parse_matrix(fh.read(), source=str(path))
