import numpy as np
import pytest

from stella.adapter import InitStrategy, merge
from stella.errors import ContractError, DivergenceError
from stella.numkernel import polar_factor, random_orthonormal
from stella.optim import STEP_KINDS, StepRule
from stella.tasks import (
    HISTORY_FIELDS,
    RunRecord,
    TaskSpec,
    eckart_young_tail,
    load_dataset,
    predict,
    read_history,
    run_classify,
    run_lowrank_recover,
    run_procrustes,
    run_stability_mc,
    split_indices,
    stability_gamma,
    synthetic_target,
    well_conditioned_matrix,
    write_blobs_dataset,
    write_history,
)

# --- procrustes ----------------------------------------------------------------------


def test_procrustes_self_target():
    m = random_orthonormal(6, 2, 11)
    spec = TaskSpec("procrustes", m=6, r=2, steps=200, seed=0, target=m)
    final, hist = run_procrustes(spec, StepRule("sgd", 0.1), "polar", "constant")
    assert hist[-1].loss < 1e-8
    assert np.linalg.norm(final.y - m) < 1e-4


def test_procrustes_positive_diagonal():
    m = np.zeros((4, 2))
    m[0, 0], m[1, 1] = 2.0, 3.0
    spec = TaskSpec("procrustes", m=4, r=2, steps=2000, seed=0, target=m)
    final, _ = run_procrustes(spec, StepRule("adam", 1e-2), "polar")
    np.testing.assert_allclose(final.y, np.eye(4)[:, :2], atol=1e-6)


@pytest.mark.parametrize("kind", STEP_KINDS)
@pytest.mark.parametrize("retraction", ["polar", "exp"])
def test_procrustes_reaches_polar_factor(kind, retraction):
    m = well_conditioned_matrix(32, 4, seed=5)
    lr = 1e-2 if kind.startswith("adam") else 5e-2
    spec = TaskSpec("procrustes", m=32, r=4, steps=1500, seed=1, target=m)
    final, hist = run_procrustes(spec, StepRule(kind, lr), retraction)
    assert np.linalg.norm(final.y - polar_factor(m)) < 1e-4
    assert max(max(h.orth_err_u, h.orth_err_v) for h in hist) <= 1e-8
    assert len(hist) == 1501 and hist[0].step == 0


def test_procrustes_is_deterministic():
    spec = TaskSpec("procrustes", m=10, r=3, steps=20, seed=4)
    _, h1 = run_procrustes(spec, StepRule("adamw", 1e-2), "exp")
    _, h2 = run_procrustes(spec, StepRule("adamw", 1e-2), "exp")
    assert [r.as_row() for r in h1] == [r.as_row() for r in h2]


# --- low-rank recovery ---------------------------------------------------------------------


def test_eckart_young_tail():
    t = synthetic_target(4, 4, [4.0, 3.0, 2.0, 1.0])
    assert eckart_young_tail(t, 2) == pytest.approx(5.0, rel=1e-14)
    rotated = synthetic_target(7, 5, [4.0, 3.0, 2.0, 1.0], seed=3)
    assert eckart_young_tail(rotated, 2) == pytest.approx(5.0, rel=1e-12)
    np.testing.assert_allclose(np.linalg.svd(rotated, compute_uv=False)[:4], [4, 3, 2, 1], rtol=1e-13)


def test_lowrank_exact_rank_target():
    t = synthetic_target(10, 8, [3.0, 1.5], seed=2)
    spec = TaskSpec("lowrank_recover", r=2, steps=3000, seed=0, target=t, alpha=2.0)
    adapter, hist = run_lowrank_recover(spec, StepRule("adamw", 1e-2), "polar", InitStrategy("nonzero", 0))
    assert hist[-1].loss < 1e-6
    assert max(h.orth_err_u for h in hist) <= 1e-8


def test_lowrank_diagonal_tail():
    t = synthetic_target(4, 4, [4.0, 3.0, 2.0, 1.0])
    spec = TaskSpec("lowrank_recover", r=2, steps=3000, seed=0, target=t, alpha=4.0)
    _, hist = run_lowrank_recover(spec, StepRule("adamw", 1e-2), "exp", InitStrategy("nonzero", 1))
    assert hist[-1].loss == pytest.approx(5.0, rel=0.01)


def test_svd_major_initial_loss_beats_nonzero():
    t = synthetic_target(12, 9, [5.0, 4.0, 3.0, 2.0, 1.0], seed=8)
    spec = TaskSpec("lowrank_recover", r=2, steps=0, seed=0, target=t, alpha=2.0, init_source="target")
    _, major = run_lowrank_recover(spec, StepRule("sgd", 1e-2), "polar", InitStrategy("svd_major", 0))
    _, nonzero = run_lowrank_recover(spec, StepRule("sgd", 1e-2), "polar", InitStrategy("nonzero", 0))
    assert len(major) == 1
    assert major[0].loss <= nonzero[0].loss


def test_lowrank_euclidean_geometry_runs():
    t = synthetic_target(6, 6, [2.0, 1.0], seed=1)
    spec = TaskSpec("lowrank_recover", r=2, steps=1500, seed=0, target=t, alpha=2.0)
    adapter, hist = run_lowrank_recover(spec, StepRule("adam", 1e-2), "none", InitStrategy("nonzero", 0),
                                        geometry="euclidean")
    assert hist[-1].loss < 1e-4


def test_divergence_keeps_history():
    t = synthetic_target(6, 6, [50.0, 40.0], seed=1)
    spec = TaskSpec("lowrank_recover", r=2, steps=200, seed=0, target=t, alpha=2.0)
    with pytest.raises(DivergenceError) as info:
        run_lowrank_recover(spec, StepRule("sgd", 10.0), "polar", InitStrategy("nonzero", 0), lr_schedule="constant")
    assert len(info.value.history) >= 1
    assert info.value.history[0].step == 0


# --- classification --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def blobs(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "blobs.csv"
    write_blobs_dataset(path, n_points=400, n_features=16, seed=0)
    return path


def test_blobs_are_separable_by_reference_model(blobs):
    sklearn = pytest.importorskip("sklearn.linear_model")
    data = load_dataset(blobs)
    train, test = split_indices(len(data.labels), 0)
    clf = sklearn.LogisticRegression().fit(data.features[train], data.labels[train])
    assert clf.score(data.features[test], data.labels[test]) >= 0.98


def test_classify_blobs(blobs):
    spec = TaskSpec("classify", r=2, batch=32, seed=0, steps=500, dataset_path=str(blobs))
    res = run_classify(spec, StepRule("adamw", 1e-2), "polar")
    assert res.accuracy >= 0.95
    assert res.history[-1].loss < res.history[0].loss
    assert max(max(h.orth_err_u, h.orth_err_v) for h in res.history) <= 1e-8


def test_classify_zero_init_matches_base(blobs):
    spec = TaskSpec("classify", r=2, seed=3, steps=1, dataset_path=str(blobs))
    res = run_classify(spec, StepRule("adamw", 1e-2), "polar", strategy=InitStrategy("zero", 3))
    np.testing.assert_array_equal(res.initial_predictions, res.base_predictions)


def test_classify_geometries_both_converge(blobs):
    spec = TaskSpec("classify", r=2, batch=32, seed=1, steps=300, dataset_path=str(blobs))
    st = run_classify(spec, StepRule("adamw", 1e-2), "polar", geometry="stiefel")
    eu = run_classify(spec, StepRule("adamw", 1e-2), "none", geometry="euclidean")
    assert len(st.history) == len(eu.history)
    assert st.accuracy >= 0.9 and eu.accuracy >= 0.9


def test_classify_class_count_mismatch(blobs):
    spec = TaskSpec("classify", m=3, r=1, steps=1, dataset_path=str(blobs))
    with pytest.raises(ContractError):
        run_classify(spec, StepRule())


@pytest.mark.parametrize("body,line", [
    ("a,b,label\n1,2,0\n1,x,1\n", 3),
    ("a,b,label\n1,2,0\n1,2\n", 3),
    ("a,b,label\n1,nan,0\n", 2),
])
def test_dataset_errors_name_line(tmp_path, body, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(ValueError, match=f"bad.csv:{line}:"):
        load_dataset(p)


def test_dataset_missing_label(tmp_path):
    p = tmp_path / "nolabel.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="label"):
        load_dataset(p)


def test_dataset_string_labels(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("label,a\ncat,1\ndog,2\ncat,3\n")
    d = load_dataset(p)
    assert d.classes == ["cat", "dog"]
    np.testing.assert_array_equal(d.labels, [0, 1, 0])
    np.testing.assert_array_equal(predict(np.array([[1.0], [-1.0]]), d.features), [0, 0, 0])


def test_split_is_deterministic():
    a = split_indices(100, 7)
    b = split_indices(100, 7)
    np.testing.assert_array_equal(a[0], b[0])
    assert len(a[1]) == 20 and not set(a[0]) & set(a[1])


# --- stability -------------------------------------------------------------------------------


def test_stability_expected_moments():
    m, n, r = 64, 32, 4
    gamma = 3.0
    fwd, bwd = run_stability_mc(m, n, r, gamma, 10_000, seed=0)
    assert fwd == pytest.approx(gamma**2 * r / m, rel=0.05)
    assert bwd == pytest.approx(gamma**2 * r / n, rel=0.05)


def test_stability_gamma_squared_scaling():
    f1, b1 = run_stability_mc(64, 64, 8, 1.0, 10_000, seed=1)
    f2, b2 = run_stability_mc(64, 64, 8, 2.0, 10_000, seed=1)
    assert f2 / f1 == pytest.approx(4.0, rel=1e-12)
    assert b2 / b1 == pytest.approx(4.0, rel=1e-12)


def test_stability_slopes():
    ms, rs = [32, 64, 128], [2, 4, 8]
    rows = []
    for m in ms:
        for r in rs:
            fwd, bwd = run_stability_mc(m, m, r, 1.0, 10_000, seed=m + r)
            rows.append((np.log(r), np.log(m), np.log(fwd)))
    design = np.array([[1.0, lr, lm] for lr, lm, _ in rows])
    coef, *_ = np.linalg.lstsq(design, np.array([y for *_, y in rows]), rcond=None)
    assert 0.95 <= coef[1] <= 1.05
    assert 0.95 <= -coef[2] <= 1.05


def test_stability_gamma_tokens():
    assert stability_gamma("forward", 256, 64, 16) == 4.0
    assert stability_gamma("backward", 256, 64, 16) == 2.0
    assert stability_gamma("lora", 256, 64, 16, alpha=32) == 2.0
    assert stability_gamma("1.5", 4, 4, 1) == 1.5
    with pytest.raises(ContractError):
        stability_gamma("huge", 4, 4, 1)


# --- history -------------------------------------------------------------------------------


def test_history_round_trip(tmp_path):
    hist = [RunRecord(0, 1 / 3, 1e-16, 0.0, 2.5, np.pi, 1e300), RunRecord(1, 0.1, 0, 0, 0, 0, 0)]
    path = tmp_path / "h.csv"
    write_history(path, hist)
    assert path.read_text().splitlines()[0] == ",".join(HISTORY_FIELDS)
    assert read_history(path) == hist
