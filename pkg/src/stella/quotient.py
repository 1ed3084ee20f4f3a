"""Preconditioned metric on the quotient of three-factor representations.

Only the inner product is provided; it weights the U and V directions by
``S S^T`` and ``S^T S`` and leaves the S direction Euclidean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numkernel import as_matrix


@dataclass(frozen=True)
class QuotientTangent:
    xi_u: np.ndarray
    xi_s: np.ndarray
    xi_v: np.ndarray

    def __post_init__(self):
        for name in ("xi_u", "xi_s", "xi_v"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        r = self.xi_s.shape[0]
        if self.xi_s.shape != (r, r) or self.xi_u.shape[1] != r or self.xi_v.shape[1] != r:
            raise ContractError(
                f"inconsistent tangent shapes: xi_u {self.xi_u.shape}, "
                f"xi_s {self.xi_s.shape}, xi_v {self.xi_v.shape}"
            )


def quotient_metric_blocks(s, t1: QuotientTangent, t2: QuotientTangent) -> tuple[float, float, float]:
    """The U, S and V contributions to ``quotient_metric`` separately."""
    s = as_matrix(s, "s")
    r = s.shape[0]
    if s.shape != (r, r) or t1.xi_s.shape != (r, r) or t2.xi_s.shape != (r, r):
        raise ContractError("S and tangent ranks disagree")
    if t1.xi_u.shape != t2.xi_u.shape or t1.xi_v.shape != t2.xi_v.shape:
        raise ContractError("tangent triples have different shapes")
    # tr(S S^T xi^T eta) = <xi S, eta S>_F ; tr(S^T S xi^T eta) = <xi S^T, eta S^T>_F
    g_u = float(np.sum((t1.xi_u @ s) * (t2.xi_u @ s)))
    g_s = float(np.sum(t1.xi_s * t2.xi_s))
    g_v = float(np.sum((t1.xi_v @ s.T) * (t2.xi_v @ s.T)))
    return g_u, g_s, g_v


def quotient_metric(s, t1: QuotientTangent, t2: QuotientTangent) -> float:
    """``tr(S S^T xi_U^T eta_U) + tr(xi_S^T eta_S) + tr(S^T S xi_V^T eta_V)``.

    Symmetric in the two tangents and positive definite when ``S`` has full
    rank. Degenerates to positive semi-definite for singular ``S``.
    """
    return sum(quotient_metric_blocks(s, t1, t2))
