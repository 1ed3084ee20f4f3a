"""Three-factor low-rank adapter ``W + (alpha/r) U S V^T`` and its LoRA baseline."""

from __future__ import annotations

import os
from dataclasses import InitVar, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .numkernel import as_matrix, random_orthonormal, read_matrix, thin_svd, write_matrix
from .optim import GradScale
from .stiefel import MEMBERSHIP_TOL, is_on_manifold

INIT_KINDS = ("nonzero", "zero", "pseudo_zero", "svd_major", "svd_minor")


@dataclass(frozen=True)
class InitStrategy:
    kind: str = "nonzero"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ContractError(f"unknown init strategy {self.kind!r}; choose from {INIT_KINDS}")


@dataclass
class ThreeFactorAdapter:
    """Frozen base ``w`` (m x n) plus trainable ``u`` (m x r), ``s`` (r x r), ``v`` (n x r).

    ``u`` and ``v`` must have orthonormal columns when the adapter is built,
    unless ``constrained=False`` (the unconstrained Euclidean baseline).
    """

    w: np.ndarray
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    alpha: float
    grad_scale: GradScale | None = None
    constrained: InitVar[bool] = True

    def __post_init__(self, constrained):
        self.w = as_matrix(self.w, "w")
        self.u = as_matrix(self.u, "u")
        self.s = as_matrix(self.s, "s")
        self.v = as_matrix(self.v, "v")
        m, n = self.w.shape
        r = self.s.shape[0]
        if self.s.shape != (r, r) or self.u.shape != (m, r) or self.v.shape != (n, r):
            raise ContractError(
                f"inconsistent factor shapes: w {self.w.shape}, u {self.u.shape}, "
                f"s {self.s.shape}, v {self.v.shape}"
            )
        if r > min(m, n):
            raise ContractError(f"rank {r} exceeds min(m, n) = {min(m, n)}")
        if not self.alpha > 0:
            raise ContractError("alpha must be positive")
        for name in ("u", "v") if constrained else ():
            if not is_on_manifold(getattr(self, name), MEMBERSHIP_TOL):
                raise ContractError(f"{name} does not have orthonormal columns")

    @property
    def r(self) -> int:
        return self.s.shape[0]

    @property
    def gamma(self) -> float:
        return self.alpha / self.r

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape


@dataclass
class TwoFactorAdapter:
    """LoRA baseline ``W + (alpha/r) B A^T`` with unconstrained ``b`` (m x r), ``a`` (n x r)."""

    w: np.ndarray
    b: np.ndarray
    a: np.ndarray
    alpha: float

    def __post_init__(self):
        self.w = as_matrix(self.w, "w")
        self.b = as_matrix(self.b, "b")
        self.a = as_matrix(self.a, "a")
        m, n = self.w.shape
        r = self.b.shape[1]
        if self.b.shape != (m, r) or self.a.shape != (n, r):
            raise ContractError(f"inconsistent shapes: w {self.w.shape}, b {self.b.shape}, a {self.a.shape}")

    @property
    def r(self) -> int:
        return self.b.shape[1]

    @property
    def gamma(self) -> float:
        return self.alpha / self.r


def _split_seed(seed: int) -> tuple[int, int]:
    children = np.random.SeedSequence(seed).spawn(2)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def init_adapter(w, r: int, alpha: float, strategy: InitStrategy, source=None) -> ThreeFactorAdapter:
    """Build an adapter on base weight ``w`` using one of the five init strategies.

    ``source`` is the matrix whose singular vectors seed the ``svd_*``
    strategies; it defaults to ``w``. ``svd_minor`` takes the trailing ``r``
    singular pairs among the numerically nonzero ones.
    """
    w = as_matrix(w, "w")
    m, n = w.shape
    if not 1 <= r <= min(m, n):
        raise ContractError(f"rank must satisfy 1 <= r <= min(m, n) = {min(m, n)}, got {r}")
    kind = strategy.kind

    if kind in ("svd_major", "svd_minor"):
        src = w if source is None else as_matrix(source, "source")
        if src.shape != w.shape:
            raise ContractError(f"init source shape {src.shape} != w shape {w.shape}")
        svd = thin_svd(src)
        tol = max(m, n) * np.finfo(float).eps * (svd.sigma[0] if svd.sigma.size else 0.0)
        nonzero = int(np.sum(svd.sigma > tol))
        if nonzero < r:
            raise ContractError(f"{kind} needs {r} nonzero singular values, matrix has {nonzero}")
        cols = slice(0, r) if kind == "svd_major" else slice(nonzero - r, nonzero)
        return ThreeFactorAdapter(w, svd.u[:, cols], np.eye(r), svd.v[:, cols], alpha)

    seed_u, seed_v = _split_seed(strategy.seed)
    u = random_orthonormal(m, r, seed_u)
    v = random_orthonormal(n, r, seed_v)
    if kind == "zero":
        return ThreeFactorAdapter(w, u, np.zeros((r, r)), v, alpha)
    s = np.eye(r)
    if kind == "pseudo_zero":
        w = w - (alpha / r) * (u @ s @ v.T)
    return ThreeFactorAdapter(w, u, s, v, alpha)


def delta_weight(adapter: ThreeFactorAdapter) -> np.ndarray:
    return adapter.gamma * (adapter.u @ adapter.s @ adapter.v.T)


def merge(adapter) -> np.ndarray:
    """Single dense weight equivalent to the adapted layer."""
    if isinstance(adapter, TwoFactorAdapter):
        return adapter.w + adapter.gamma * (adapter.b @ adapter.a.T)
    return adapter.w + delta_weight(adapter)


def forward(adapter, x) -> np.ndarray:
    """Apply the adapted layer to the columns of ``x`` without forming the merged weight."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(adapter, TwoFactorAdapter):
        return adapter.w @ x + adapter.gamma * (adapter.b @ (adapter.a.T @ x))
    return adapter.w @ x + adapter.gamma * (adapter.u @ (adapter.s @ (adapter.v.T @ x)))


def factor_grads(adapter: ThreeFactorAdapter, g_tilde):
    """Chain rule from ``dL/dW~`` to ``(dL/dU, dL/dS, dL/dV)``."""
    g = np.asarray(g_tilde, dtype=np.float64)
    if g.shape != adapter.shape:
        raise ContractError(f"g_tilde shape {g.shape} != weight shape {adapter.shape}")
    gam, u, s, v = adapter.gamma, adapter.u, adapter.s, adapter.v
    gv = g @ v
    gtu = g.T @ u
    return gam * gv @ s.T, gam * (u.T @ gv), gam * gtu @ s


def param_count(adapter) -> int:
    m, n = adapter.w.shape
    r = adapter.r
    if isinstance(adapter, TwoFactorAdapter):
        return r * (m + n)
    return r * (m + n) + r * r


# --- checkpoints -------------------------------------------------------------


def save_adapter(adapter: ThreeFactorAdapter, directory, strategy: InitStrategy | None = None,
                 constrained: bool = True) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("w", "u", "s", "v"):
        write_matrix(d / f"{name}.mat", getattr(adapter, name))
    meta = {"alpha": repr(float(adapter.alpha)), "r": str(adapter.r)}
    if not constrained:
        meta["geometry"] = "euclidean"
    if strategy is not None:
        meta["strategy"] = strategy.kind
        meta["seed"] = str(strategy.seed)
    with open(d / "meta", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{k} = {v}\n" for k, v in meta.items())


def load_adapter(directory: str | os.PathLike):
    """Returns ``(adapter, strategy or None)``."""
    d = Path(directory)
    meta = {}
    with open(d / "meta", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    mats = {name: read_matrix(d / f"{name}.mat") for name in ("w", "u", "s", "v")}
    constrained = meta.get("geometry", "stiefel") != "euclidean"
    adapter = ThreeFactorAdapter(alpha=float(meta["alpha"]), constrained=constrained, **mats)
    if "r" in meta and int(meta["r"]) != adapter.r:
        raise ContractError(f"meta rank {meta['r']} disagrees with factor shapes (r={adapter.r})")
    strategy = None
    if "strategy" in meta:
        strategy = InitStrategy(meta["strategy"], int(meta.get("seed", 0)))
    return adapter, strategy
