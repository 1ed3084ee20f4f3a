"""Small objectives with known optima, used to exercise the whole pipeline.

* Procrustes: ``min ||Y - M||_F^2`` over St(k, m); the optimum is the polar
  factor of ``M``.
* Low-rank recovery: ``min ||(alpha/r) U S V^T - T||_F^2``; the optimal value
  is the energy in the singular values of ``T`` beyond ``r``.
* Classification: softmax regression through an adapted frozen weight on a
  CSV dataset.
* Stability: Monte Carlo second moments of the adapter's forward output and
  input gradient at initialization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapter as ad
from .errors import ContractError, DivergenceError
from .numkernel import as_matrix, orth_error, polar_factor, random_orthonormal, thin_qr
from .optim import GradScale, Riemannianizer, StepRule, grad_scale_factors, riemannian_step, scheduled_lr
from .optim import OptimizerState
from .stiefel import StiefelPoint

TASK_KINDS = ("procrustes", "lowrank_recover", "classify", "stability")
DIVERGENCE_LOSS = 1e6
HISTORY_FIELDS = ("step", "loss", "orth_err_u", "orth_err_v", "grad_norm_u", "grad_norm_s", "grad_norm_v")
HOLDOUT_FRACTION = 0.2


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    m: int = 0
    n: int = 0
    r: int = 1
    batch: int = 0
    seed: int = 0
    steps: int = 0
    alpha: float | None = None
    target: np.ndarray | None = field(default=None, compare=False)
    dataset_path: str | None = None
    # lowrank: which matrix the svd_* strategies decompose ("base" or "target")
    init_source: str = "base"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task {self.kind!r}; choose from {TASK_KINDS}")
        if self.steps < 0 or self.batch < 0:
            raise ContractError("steps and batch must be non-negative")
        if self.init_source not in ("base", "target"):
            raise ContractError(f"init_source must be 'base' or 'target', got {self.init_source!r}")

    @property
    def gamma_alpha(self) -> float:
        return float(self.r) if self.alpha is None else float(self.alpha)


@dataclass
class RunRecord:
    step: int
    loss: float
    orth_err_u: float
    orth_err_v: float
    grad_norm_u: float
    grad_norm_s: float
    grad_norm_v: float

    def as_row(self) -> list[str]:
        return [str(self.step)] + [f"{getattr(self, k):.17g}" for k in HISTORY_FIELDS[1:]]


def write_history(path, history: list[RunRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        writer.writerows(rec.as_row() for rec in history)


def read_history(path) -> list[RunRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTORY_FIELDS:
            raise ValueError(f"{path}: unexpected history header {reader.fieldnames}")
        return [RunRecord(int(row["step"]), *(float(row[k]) for k in HISTORY_FIELDS[1:])) for row in reader]


def _check_loss(loss: float, step: int, history: list[RunRecord]) -> None:
    if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
        raise DivergenceError(f"loss {loss:.3e} at step {step} exceeds divergence threshold", history)


# --- targets ------------------------------------------------------------------


def well_conditioned_matrix(m: int, k: int, seed: int, min_ratio: float = 0.1) -> np.ndarray:
    """Gaussian ``m x k`` matrix redrawn until ``sigma_min / sigma_max > min_ratio``."""
    rng = np.random.default_rng(seed)
    while True:
        a = rng.standard_normal((m, k))
        s = np.linalg.svd(a, compute_uv=False)
        if s[-1] > min_ratio * s[0]:
            return a


def synthetic_target(m: int, n: int, spectrum, seed: int | None = None) -> np.ndarray:
    """``m x n`` matrix with the given singular values.

    With ``seed=None`` the spectrum sits on the leading diagonal; otherwise
    it is rotated by random orthonormal frames.
    """
    spectrum = np.asarray(spectrum, dtype=np.float64)
    k = spectrum.size
    if k > min(m, n):
        raise ContractError(f"{k} singular values do not fit in a {m}x{n} matrix")
    if seed is None:
        t = np.zeros((m, n))
        t[np.arange(k), np.arange(k)] = spectrum
        return t
    rng = np.random.default_rng(seed)
    p = random_orthonormal(m, k, rng)
    q = random_orthonormal(n, k, rng)
    return (p * spectrum) @ q.T


def eckart_young_tail(target, r: int) -> float:
    """Smallest achievable ``||X - target||_F^2`` over rank-``r`` matrices ``X``."""
    s = np.linalg.svd(as_matrix(target), compute_uv=False)
    return float(np.sum(s[r:] ** 2))


# --- Procrustes ---------------------------------------------------------------


def run_procrustes(
    spec: TaskSpec,
    rule: StepRule,
    retraction: str = "polar",
    lr_schedule: str = "linear",
    grad_scale_d: int | None = None,
):
    """Minimize ``||Y - M||_F^2`` over ``m x r`` orthonormal frames.

    ``M`` is ``spec.target`` or a seeded well-conditioned Gaussian matrix.
    Returns ``(final StiefelPoint, history)``; the history holds one record
    per iterate, the last one for the returned point.
    """
    if spec.target is not None:
        target = as_matrix(spec.target, "target")
    else:
        target = well_conditioned_matrix(spec.m, spec.r, spec.seed)
    m, k = target.shape
    if m < k:
        raise ContractError(f"Procrustes target must be tall, got {m}x{k}")
    scale = None if grad_scale_d is None else math.sqrt(grad_scale_d / m)

    y = StiefelPoint(random_orthonormal(m, k, spec.seed))
    state = OptimizerState()
    history: list[RunRecord] = []
    for step in range(spec.steps + 1):
        resid = y.y - target
        loss = float(np.sum(resid * resid))
        egrad = 2.0 * resid
        history.append(RunRecord(step, loss, orth_error(y.y), 0.0, float(np.linalg.norm(egrad)), 0.0, 0.0))
        _check_loss(loss, step, history)
        if step == spec.steps:
            break
        lr = scheduled_lr(rule.learning_rate, lr_schedule, step, spec.steps)
        y, state = riemannian_step(rule, state, y, egrad, scale, retraction, lr)
    return y, history


def procrustes_optimum(target) -> np.ndarray:
    return polar_factor(target)


# --- adapter training loop ----------------------------------------------------


def _make_optimizer(adapter, rule, retraction, geometry, grad_scale_d):
    if geometry not in ("stiefel", "euclidean"):
        raise ContractError(f"geometry must be 'stiefel' or 'euclidean', got {geometry!r}")
    manifold = geometry == "stiefel"
    su = sv = None
    if manifold and grad_scale_d is not None:
        m, n = adapter.shape
        adapter.grad_scale = GradScale(grad_scale_d, m, n)
        su, sv = grad_scale_factors(adapter.grad_scale)
    # free parameters never retract, so any retraction label is accepted there
    opt = Riemannianizer(rule, retraction if manifold else "polar")
    opt.add("u", adapter.u, manifold, su)
    opt.add("s", adapter.s, False)
    opt.add("v", adapter.v, manifold, sv)
    return opt


def _train(adapter, loss_and_grad, rule, retraction, geometry, steps, lr_schedule, grad_scale_d):
    """Shared loop; ``loss_and_grad(adapter, step)`` returns ``(loss, dL/dW~)``."""
    opt = _make_optimizer(adapter, rule, retraction, geometry, grad_scale_d)
    history: list[RunRecord] = []
    for step in range(steps + 1):
        adapter.u, adapter.s, adapter.v = opt["u"], opt["s"], opt["v"]
        loss, g_tilde = loss_and_grad(adapter, step)
        gu, gs, gv = ad.factor_grads(adapter, g_tilde)
        history.append(RunRecord(
            step, loss, orth_error(adapter.u), orth_error(adapter.v),
            float(np.linalg.norm(gu)), float(np.linalg.norm(gs)), float(np.linalg.norm(gv)),
        ))
        _check_loss(loss, step, history)
        if step == steps:
            break
        opt.step({"u": gu, "s": gs, "v": gv}, scheduled_lr(rule.learning_rate, lr_schedule, step, steps))
    return history


# --- low-rank recovery ----------------------------------------------------------


def default_lowrank_target(m: int, n: int, r: int) -> np.ndarray:
    k = min(m, n, 2 * r)
    return synthetic_target(m, n, np.arange(k, 0, -1, dtype=float))


def base_weight(m: int, n: int, seed: int) -> np.ndarray:
    """Seeded stand-in for a pretrained weight, entries ``N(0, 1/n)``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA5E]))
    return rng.standard_normal((m, n)) / math.sqrt(n)


def run_lowrank_recover(
    spec: TaskSpec,
    rule: StepRule,
    retraction: str,
    strategy: ad.InitStrategy,
    geometry: str = "stiefel",
    lr_schedule: str = "linear",
    grad_scale_d: int | None = None,
):
    """Fit ``(alpha/r) U S V^T`` to a target ``T`` in Frobenius norm.

    The adapter sits on a seeded random base weight that plays the role of
    the pretrained matrix: ``svd_*`` strategies decompose it (or ``T`` when
    ``spec.init_source == "target"``). The base weight does not enter the
    loss. Returns ``(adapter, history)``.
    """
    target = as_matrix(spec.target, "target") if spec.target is not None else \
        default_lowrank_target(spec.m, spec.n, spec.r)
    m, n = target.shape
    w = base_weight(m, n, spec.seed)
    source = target if spec.init_source == "target" else None
    adapter = ad.init_adapter(w, spec.r, spec.gamma_alpha, strategy, source=source)

    def loss_and_grad(a, _step):
        resid = ad.delta_weight(a) - target
        return float(np.sum(resid * resid)), 2.0 * resid

    history = _train(adapter, loss_and_grad, rule, retraction, geometry, spec.steps, lr_schedule, grad_scale_d)
    return adapter, history


# --- classification -------------------------------------------------------------


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: list[str]


def load_dataset(path) -> Dataset:
    """CSV with a header row, a ``label`` column and numeric feature columns."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty dataset file") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise ValueError(f"{path}:1: header has no 'label' column")
        li = header.index("label")
        if len(header) < 2:
            raise ValueError(f"{path}:1: no feature columns")
        rows, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
            try:
                feats = [float(c) for i, c in enumerate(row) if i != li]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(x) for x in feats):
                raise ValueError(f"{path}:{lineno}: non-finite feature value")
            rows.append(feats)
            raw_labels.append(row[li].strip())
    if not rows:
        raise ValueError(f"{path}: no data rows")
    classes = sorted(set(raw_labels), key=_label_key)
    index = {c: i for i, c in enumerate(classes)}
    return Dataset(np.array(rows), np.array([index[c] for c in raw_labels]), classes)


def _label_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def write_blobs_dataset(path, n_points: int = 400, n_features: int = 16, seed: int = 0,
                        separation: float = 5.0) -> None:
    """Two Gaussian blobs at ``+-mu`` with ``||mu|| = separation / 2``."""
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal(n_features)
    mu *= 0.5 * separation / np.linalg.norm(mu)
    labels = rng.integers(0, 2, size=n_points)
    x = rng.standard_normal((n_points, n_features)) + np.where(labels[:, None] == 1, mu, -mu)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(n_features)] + ["label"])
        for row, lab in zip(x, labels):
            writer.writerow([f"{v:.17g}" for v in row] + [int(lab)])


def split_indices(count: int, seed: int, holdout: float = HOLDOUT_FRACTION):
    """Deterministic shuffled ``(train, test)`` index split."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5B1D])).permutation(count)
    n_test = max(1, int(round(holdout * count)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def predict(weight: np.ndarray, features: np.ndarray) -> np.ndarray:
    return np.argmax(weight @ features.T, axis=0)


@dataclass
class ClassifyResult:
    accuracy: float
    train_accuracy: float
    initial_accuracy: float
    history: list[RunRecord]
    adapter: ad.ThreeFactorAdapter
    base_predictions: np.ndarray
    initial_predictions: np.ndarray


def run_classify(
    spec: TaskSpec,
    rule: StepRule,
    retraction: str = "polar",
    geometry: str = "stiefel",
    strategy: ad.InitStrategy | None = None,
    lr_schedule: str = "linear",
    grad_scale_d: int | None = None,
) -> ClassifyResult:
    """Softmax regression with logits ``W~ x`` for a frozen random ``W``.

    ``W`` has one row per class (``m``) and one column per feature (``n``);
    nonzero ``spec.m``/``spec.n`` must match the data. Minibatches of
    ``spec.batch`` rows (0 for full batch) are drawn from an 80/20 split.
    """
    if spec.dataset_path is None:
        raise ContractError("classify needs a dataset path")
    data = load_dataset(spec.dataset_path)
    n_classes, n_features = len(data.classes), data.features.shape[1]
    if spec.m and spec.m != n_classes:
        raise ContractError(f"config says m={spec.m} classes, dataset has {n_classes}")
    if spec.n and spec.n != n_features:
        raise ContractError(f"config says n={spec.n} features, dataset has {n_features}")
    if n_classes < 2:
        raise ContractError("dataset needs at least two classes")
    strategy = strategy or ad.InitStrategy("nonzero", spec.seed)

    train_idx, test_idx = split_indices(len(data.labels), spec.seed)
    x_train, y_train = data.features[train_idx], data.labels[train_idx]
    x_test, y_test = data.features[test_idx], data.labels[test_idx]
    onehot = np.eye(n_classes)[y_train].T

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC1A55]))
    w = 0.01 * rng.standard_normal((n_classes, n_features))
    adapter = ad.init_adapter(w, spec.r, spec.gamma_alpha, strategy)
    base_predictions = predict(adapter.w, x_test)
    initial_predictions = predict(ad.merge(adapter), x_test)
    batch = spec.batch if 0 < spec.batch < len(y_train) else 0

    def loss_and_grad(a, _step):
        if batch:
            idx = rng.choice(len(y_train), size=batch, replace=False)
            xb, yb = x_train[idx], onehot[:, idx]
        else:
            xb, yb = x_train, onehot
        probs = _softmax(ad.merge(a) @ xb.T)
        loss = -float(np.mean(np.sum(yb * np.log(np.clip(probs, 1e-300, None)), axis=0)))
        return loss, (probs - yb) @ xb / xb.shape[0]

    history = _train(adapter, loss_and_grad, rule, retraction, geometry, spec.steps, lr_schedule, grad_scale_d)
    merged = ad.merge(adapter)
    return ClassifyResult(
        accuracy=float(np.mean(predict(merged, x_test) == y_test)),
        train_accuracy=float(np.mean(predict(merged, x_train) == y_train)),
        initial_accuracy=float(np.mean(initial_predictions == y_test)),
        history=history,
        adapter=adapter,
        base_predictions=base_predictions,
        initial_predictions=initial_predictions,
    )


# --- scale stability --------------------------------------------------------------


def run_stability_mc(m: int, n: int, r: int, gamma: float, trials: int, seed: int,
                     chunk: int = 256) -> tuple[float, float]:
    """Monte Carlo second moments ``(E[y_i^2], E[g_i^2])`` at initialization.

    Each trial draws Haar-random ``U`` (m x r), ``V`` (n x r) with ``S = I``
    and standard Gaussian ``x`` (n) and upstream gradient ``v`` (m); the
    forward output is ``y = gamma U V^T x`` and the input gradient is
    ``g = gamma V U^T v``. Expected values are ``gamma^2 r / m`` and
    ``gamma^2 r / n``.
    """
    if not 1 <= r <= min(m, n):
        raise ContractError(f"need 1 <= r <= min(m, n), got m={m}, n={n}, r={r}")
    if trials < 1:
        raise ContractError("trials must be positive")
    rng = np.random.default_rng(seed)
    fwd = bwd = 0.0
    done = 0
    while done < trials:
        c = min(chunk, trials - done)
        u, _ = thin_qr(rng.standard_normal((c, m, r)))
        v, _ = thin_qr(rng.standard_normal((c, n, r)))
        x = rng.standard_normal((c, n))
        up = rng.standard_normal((c, m))
        y = gamma * np.einsum("bmr,br->bm", u, np.einsum("bnr,bn->br", v, x))
        g = gamma * np.einsum("bnr,br->bn", v, np.einsum("bmr,bm->br", u, up))
        fwd += float(np.sum(y * y))
        bwd += float(np.sum(g * g))
        done += c
    return fwd / (trials * m), bwd / (trials * n)


def stability_gamma(token: str, m: int, n: int, r: int, alpha: float | None = None) -> float:
    """Resolve a gamma token: ``forward`` = sqrt(m/r), ``backward`` = sqrt(n/r),
    ``lora`` = alpha/r, or a literal number."""
    if token == "forward":
        return math.sqrt(m / r)
    if token == "backward":
        return math.sqrt(n / r)
    if token == "lora":
        return (2.0 * r if alpha is None else alpha) / r
    try:
        return float(token)
    except ValueError:
        raise ContractError(f"bad gamma {token!r}: use forward, backward, lora or a number") from None


# --- gradient check -------------------------------------------------------------------


def relative_error(analytic, reference) -> float:
    """``max |a - f| / max |f|``: entrywise error relative to the gradient's scale."""
    analytic, reference = np.asarray(analytic), np.asarray(reference)
    scale = float(np.max(np.abs(reference))) if reference.size else 0.0
    return float(np.max(np.abs(analytic - reference))) / max(scale, 1e-300)


def finite_difference(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn`` with respect to every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = fn(x)
        x[idx] = orig - h
        fm = fn(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def check_factor_grads(instances: int = 20, seed: int = 0, h: float = 1e-6,
                       max_dim: int = 16, max_rank: int = 4) -> float:
    """Max relative error of ``factor_grads`` against central differences.

    Each instance draws shapes ``m, n <= max_dim``, ``r <= max_rank`` and a
    quadratic loss ``||W~ X - T||_F^2``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        m, n = (int(v) for v in rng.integers(2, max_dim + 1, size=2))
        r = int(rng.integers(1, min(max_rank, m, n) + 1))
        batch = int(rng.integers(1, 6))
        a = ad.ThreeFactorAdapter(
            rng.standard_normal((m, n)), random_orthonormal(m, r, rng),
            rng.standard_normal((r, r)), random_orthonormal(n, r, rng),
            alpha=float(rng.uniform(0.5, 4.0)) * r,
        )
        x = rng.standard_normal((n, batch))
        t = rng.standard_normal((m, batch))

        def loss(u, s, v):
            wt = a.w + a.gamma * (u @ s @ v.T)
            d = wt @ x - t
            return float(np.sum(d * d))

        g_tilde = 2.0 * (ad.merge(a) @ x - t) @ x.T
        gu, gs, gv = ad.factor_grads(a, g_tilde)
        fu = finite_difference(lambda u: loss(u, a.s, a.v), a.u, h)
        fs = finite_difference(lambda s: loss(a.u, s, a.v), a.s, h)
        fv = finite_difference(lambda v: loss(a.u, a.s, v), a.v, h)
        worst = max(worst, relative_error(gu, fu), relative_error(gs, fs), relative_error(gv, fv))
    return worst
