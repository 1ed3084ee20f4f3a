import numpy as np
import pytest

from stella.errors import ContractError
from stella.quotient import QuotientTangent, quotient_metric, quotient_metric_blocks


def _tangent(rng, m=6, n=5, r=3):
    return QuotientTangent(rng.standard_normal((m, r)), rng.standard_normal((r, r)), rng.standard_normal((n, r)))


def _trace_oracle(s, a, b):
    return (np.trace(s @ s.T @ a.xi_u.T @ b.xi_u)
            + np.trace(a.xi_s.T @ b.xi_s)
            + np.trace(s.T @ s @ a.xi_v.T @ b.xi_v))


def test_identity_s_is_frobenius(rng):
    a, b = _tangent(rng), _tangent(rng)
    frob = np.sum(a.xi_u * b.xi_u) + np.sum(a.xi_s * b.xi_s) + np.sum(a.xi_v * b.xi_v)
    assert quotient_metric(np.eye(3), a, b) == pytest.approx(frob, rel=1e-13)


def test_zero_tangent(rng):
    a = _tangent(rng)
    zero = QuotientTangent(np.zeros((6, 3)), np.zeros((3, 3)), np.zeros((5, 3)))
    assert quotient_metric(rng.standard_normal((3, 3)), a, zero) == 0.0


def test_matches_trace_formula(rng):
    s = rng.standard_normal((3, 3))
    a, b = _tangent(rng), _tangent(rng)
    assert quotient_metric(s, a, b) == pytest.approx(_trace_oracle(s, a, b), rel=1e-12)


def test_symmetric(rng):
    for _ in range(20):
        s = rng.standard_normal((3, 3))
        a, b = _tangent(rng), _tangent(rng)
        assert abs(quotient_metric(s, a, b) - quotient_metric(s, b, a)) <= 1e-12 * max(1, abs(quotient_metric(s, a, b)))


def test_positive_definite_at_full_rank(rng):
    s = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    assert np.linalg.matrix_rank(s) == 3
    for _ in range(100):
        t = _tangent(rng)
        assert quotient_metric(s, t, t) > 0


def test_semidefinite_at_singular_s():
    s = np.diag([1.0, 0.0])
    t = QuotientTangent(np.array([[0.0, 1.0]]), np.zeros((2, 2)), np.array([[0.0, 1.0]]))
    assert quotient_metric(s, t, t) == 0.0


def test_s_scaling(rng):
    s = rng.standard_normal((3, 3))
    a, b = _tangent(rng), _tangent(rng)
    gu, gs, gv = quotient_metric_blocks(s, a, b)
    gu2, gs2, gv2 = quotient_metric_blocks(2.5 * s, a, b)
    assert gu2 == pytest.approx(6.25 * gu, rel=1e-12)
    assert gv2 == pytest.approx(6.25 * gv, rel=1e-12)
    assert gs2 == gs


def test_shape_errors(rng):
    with pytest.raises(ContractError):
        QuotientTangent(np.zeros((4, 2)), np.zeros((3, 3)), np.zeros((5, 3)))
    with pytest.raises(ContractError):
        quotient_metric(np.eye(2), _tangent(rng), _tangent(rng))
    with pytest.raises(ContractError):
        quotient_metric(np.eye(3), _tangent(rng), _tangent(rng, m=7))
