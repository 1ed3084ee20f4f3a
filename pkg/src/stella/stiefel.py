"""Geometry of the Stiefel manifold St(k, n) of n x k orthonormal frames."""

from __future__ import annotations

from dataclasses import InitVar, dataclass

import numpy as np

from .errors import ContractError
from .numkernel import as_matrix, matrix_exp, polar_factor, thin_qr

MEMBERSHIP_TOL = 1e-8
TANGENCY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class StiefelPoint:
    """An ``n x k`` matrix with orthonormal columns."""

    y: np.ndarray
    check: InitVar[bool] = True

    def __post_init__(self, check):
        y = as_matrix(self.y, "Stiefel point")
        if y.shape[0] < y.shape[1]:
            raise ContractError(f"Stiefel point needs n >= k, got {y.shape}")
        if check and not is_on_manifold(y, MEMBERSHIP_TOL):
            raise ContractError(f"matrix is not on St({y.shape[1]}, {y.shape[0]}): "
                                f"||Y^T Y - I||_F = {_gram_residual(y):.3e}")
        object.__setattr__(self, "y", y)

    @property
    def shape(self):
        return self.y.shape


@dataclass(frozen=True, eq=False)
class TangentVector:
    """A tangent vector ``delta`` together with the point it is attached to."""

    base: StiefelPoint
    delta: np.ndarray
    check: InitVar[bool] = True

    def __post_init__(self, check):
        delta = as_matrix(self.delta, "tangent vector")
        if delta.shape != self.base.shape:
            raise ContractError(f"tangent shape {delta.shape} != base shape {self.base.shape}")
        if check:
            res = tangency_residual(self.base.y, delta)
            if res > TANGENCY_TOL * max(1.0, float(np.linalg.norm(delta))):
                raise ContractError(f"delta is not tangent at base: residual {res:.3e}")
        object.__setattr__(self, "delta", delta)


def _gram_residual(y: np.ndarray) -> float:
    return float(np.linalg.norm(y.T @ y - np.eye(y.shape[1])))


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _point(p) -> StiefelPoint:
    return p if isinstance(p, StiefelPoint) else StiefelPoint(p)


def _delta(p: StiefelPoint, d) -> np.ndarray:
    if isinstance(d, TangentVector):
        if not _same_base(d.base, p):
            raise ContractError("tangent vector is attached to a different base point")
        return d.delta
    d = as_matrix(d, "direction")
    if d.shape != p.shape:
        raise ContractError(f"direction shape {d.shape} != point shape {p.shape}")
    return d


def _same_base(a: StiefelPoint, b: StiefelPoint) -> bool:
    return a is b or (a.shape == b.shape and np.array_equal(a.y, b.y))


def tangency_residual(y: np.ndarray, delta: np.ndarray) -> float:
    """``||Y^T D + D^T Y||_F``; zero exactly on the tangent space."""
    m = y.T @ delta
    return float(np.linalg.norm(m + m.T))


def is_on_manifold(y, tol: float = MEMBERSHIP_TOL) -> bool:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < y.shape[1]:
        raise ContractError(f"expected an n x k matrix with n >= k, got shape {y.shape}")
    return _gram_residual(y) <= tol


def canonical_metric(p, d1: TangentVector, d2: TangentVector) -> float:
    """Canonical inner product ``tr(D1^T (I - Y Y^T / 2) D2)``."""
    p = _point(p)
    a, b = _delta(p, d1), _delta(p, d2)
    y = p.y
    # expanded to avoid forming the n x n matrix
    return float(np.sum(a * b) - 0.5 * np.sum((y.T @ a) * (y.T @ b)))


def euclidean_to_riemannian_grad(p, egrad) -> TangentVector:
    """Riemannian gradient ``G - Y G^T Y`` from the Euclidean gradient ``G``."""
    p = _point(p)
    g = _delta(p, egrad)
    return TangentVector(p, g - p.y @ (g.T @ p.y), check=False)


def project_to_tangent(p, d) -> TangentVector:
    """Orthogonal projection ``D - Y sym(Y^T D)`` onto the tangent space at ``p``."""
    p = _point(p)
    d = _delta(p, d)
    return TangentVector(p, d - p.y @ _sym(p.y.T @ d), check=False)


def retract_polar(p, d) -> StiefelPoint:
    """Polar retraction: the orthonormal polar factor of ``Y + D``."""
    p = _point(p)
    return StiefelPoint(polar_factor(p.y + _delta(p, d)), check=False)


def retract_exp(p, d) -> StiefelPoint:
    """Exponential map of the canonical metric.

    With ``Q R`` the thin QR of ``D - Y Y^T D`` and ``A = Y^T D``, the
    geodesic endpoint is ``Y M + Q N`` where ``[M; N]`` are the first ``k``
    columns of ``expm([[A, -R^T], [R, 0]])``.
    """
    p = _point(p)
    y = p.y
    delta = _delta(p, d)
    k = y.shape[1]
    a = y.T @ delta
    q, r = thin_qr(delta - y @ a)
    block = np.zeros((2 * k, 2 * k))
    block[:k, :k] = a
    block[:k, k:] = -r.T
    block[k:, :k] = r
    mn = matrix_exp(block)[:, :k]
    return StiefelPoint(y @ mn[:k] + q @ mn[k:], check=False)


RETRACTIONS = {"polar": retract_polar, "exp": retract_exp}


def retract(p, d, method: str = "polar") -> StiefelPoint:
    try:
        fn = RETRACTIONS[method]
    except KeyError:
        raise ContractError(f"unknown retraction {method!r}; choose from {sorted(RETRACTIONS)}") from None
    return fn(p, d)


def random_tangent(p, seed) -> TangentVector:
    """Unit-norm (Frobenius) random tangent vector at ``p``.

    The zero vector is returned when the tangent space is trivial (n = k = 1).
    """
    p = _point(p)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t = project_to_tangent(p, rng.standard_normal(p.shape)).delta
    norm = np.linalg.norm(t)
    if norm > 0:
        t = t / norm
    return TangentVector(p, t, check=False)
