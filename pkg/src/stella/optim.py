"""Euclidean step rules and their conversion into Riemannian steps.

A Riemannian step on a Stiefel parameter runs the fixed pipeline

1. convert the Euclidean gradient to a Riemannian one,
2. optionally rescale it (gradient scaling),
3. hand it to an unmodified Euclidean step rule,
4. read back the update as ``tentative - current``,
5. project that update onto the tangent space,
6. retract.

Only step 3 depends on the chosen rule. Optimizer state is kept in ambient
coordinates and is never transported between tangent spaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .numkernel import batched_polar_factor
from .stiefel import (
    StiefelPoint,
    euclidean_to_riemannian_grad,
    project_to_tangent,
    retract,
)

STEP_KINDS = ("sgd", "sgd_momentum", "adam", "adamw")
LR_SCHEDULES = ("constant", "linear", "cosine")


@dataclass(frozen=True)
class StepRule:
    kind: str = "adamw"
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ContractError(f"unknown step rule {self.kind!r}; choose from {STEP_KINDS}")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        for name in ("beta1", "beta2", "momentum"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ContractError(f"{name} must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")

    def for_manifold(self) -> "StepRule":
        """Copy with weight decay disabled; decay would pull U, V off the manifold."""
        return self if self.weight_decay == 0 else replace(self, weight_decay=0.0)


@dataclass
class OptimizerState:
    step_count: int = 0
    slot_m: np.ndarray | None = None
    slot_v: np.ndarray | None = None
    slot_momentum: np.ndarray | None = None

    @classmethod
    def zeros(cls, shape) -> "OptimizerState":
        return cls(0, np.zeros(shape), np.zeros(shape), np.zeros(shape))

    def _filled(self, shape) -> "OptimizerState":
        z = np.zeros(shape)
        return OptimizerState(
            self.step_count,
            z if self.slot_m is None else self.slot_m,
            z if self.slot_v is None else self.slot_v,
            z if self.slot_momentum is None else self.slot_momentum,
        )


@dataclass(frozen=True)
class GradScale:
    """Reference dimension ``d`` and the row counts of U (``m``) and V (``n``)."""

    d: int
    m: int
    n: int

    def __post_init__(self):
        if min(self.d, self.m, self.n) < 1:
            raise ContractError(f"grad scale dimensions must be positive, got {self}")


def grad_scale_factors(scale: GradScale) -> tuple[float, float]:
    """``(sqrt(d/m), sqrt(d/n))``, the gradient multipliers for U and V."""
    return math.sqrt(scale.d / scale.m), math.sqrt(scale.d / scale.n)


def scheduled_lr(base_lr: float, schedule: str, step: int, total_steps: int) -> float:
    """Learning rate at ``step`` (0-based); linear and cosine decay reach 0 at ``total_steps``."""
    if schedule == "constant" or total_steps <= 0:
        return base_lr
    frac = min(step, total_steps) / total_steps
    if schedule == "linear":
        return base_lr * (1.0 - frac)
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ContractError(f"unknown lr schedule {schedule!r}; choose from {LR_SCHEDULES}")


def euclidean_step(rule: StepRule, state: OptimizerState, param, grad, lr: float | None = None):
    """One step of a Euclidean rule. Returns ``(new_param, new_state)``.

    Inputs are not modified. ``lr`` overrides ``rule.learning_rate`` (used by
    schedules).
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ContractError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise ContractError("gradient has non-finite entries; step refused")
    lr = rule.learning_rate if lr is None else lr
    st = state._filled(param.shape)
    t = st.step_count + 1
    kind, wd = rule.kind, rule.weight_decay
    m, v, buf = st.slot_m, st.slot_v, st.slot_momentum

    if kind == "sgd":
        g = grad + wd * param if wd else grad
        new = param - lr * g
    elif kind == "sgd_momentum":
        g = grad + wd * param if wd else grad
        buf = g.copy() if st.step_count == 0 else rule.momentum * buf + g
        new = param - lr * buf
    else:
        g = grad + wd * param if (kind == "adam" and wd) else grad
        base = param * (1.0 - lr * wd) if (kind == "adamw" and wd) else param
        m = rule.beta1 * m + (1.0 - rule.beta1) * g
        v = rule.beta2 * v + (1.0 - rule.beta2) * g * g
        m_hat = m / (1.0 - rule.beta1**t)
        v_hat = v / (1.0 - rule.beta2**t)
        new = base - lr * m_hat / (np.sqrt(v_hat) + rule.epsilon)

    return new, OptimizerState(t, m, v, buf)


def _tangent_update(rule, state, p: StiefelPoint, egrad, grad_scale, lr):
    """Steps 1-5 of the pipeline; returns ``(tangent delta, new_state)``."""
    egrad = np.asarray(egrad, dtype=np.float64)
    if egrad.shape != p.shape:
        raise ContractError(f"gradient shape {egrad.shape} != parameter shape {p.shape}")
    if not np.all(np.isfinite(egrad)):
        raise ContractError("gradient has non-finite entries; step refused")
    rgrad = euclidean_to_riemannian_grad(p, egrad).delta
    if grad_scale is not None:
        rgrad = grad_scale * rgrad
    tentative, new_state = euclidean_step(rule.for_manifold(), state, p.y, rgrad, lr)
    delta = project_to_tangent(p, tentative - p.y)
    return delta, new_state


def riemannian_step(
    rule: StepRule,
    state: OptimizerState,
    p,
    egrad,
    grad_scale: float | None = None,
    retraction: str = "polar",
    lr: float | None = None,
):
    """One Riemannian step of ``rule`` on a Stiefel parameter.

    ``grad_scale`` is the scalar multiplier for this parameter (see
    ``grad_scale_factors``); it is applied to the Riemannian gradient before
    the Euclidean step. Weight decay in ``rule`` is ignored here.

    Returns ``(new_point, new_state)``.
    """
    p = p if isinstance(p, StiefelPoint) else StiefelPoint(p)
    delta, new_state = _tangent_update(rule, state, p, egrad, grad_scale, lr)
    return retract(p, delta, retraction), new_state


@dataclass
class _Slot:
    value: np.ndarray
    manifold: bool
    grad_scale: float | None = None
    state: OptimizerState = field(default_factory=OptimizerState)


class Riemannianizer:
    """Drives a Euclidean step rule over a mix of Stiefel and free parameters.

    Parameters are registered by name. ``step`` takes a dict of Euclidean
    gradients, runs the Riemannian pipeline for manifold parameters and a
    plain step for the rest, and retracts all same-shape manifold
    parameters in one batched polar call.
    """

    def __init__(self, rule: StepRule, retraction: str = "polar", batched: bool = True):
        if retraction not in ("polar", "exp"):
            raise ContractError(f"unknown retraction {retraction!r}")
        self.rule = rule
        self.retraction = retraction
        self.batched = batched
        self._slots: dict[str, _Slot] = {}

    def add(self, name: str, value, manifold: bool, grad_scale: float | None = None) -> None:
        value = np.array(value, dtype=np.float64)
        if manifold:
            StiefelPoint(value)
        self._slots[name] = _Slot(value, manifold, grad_scale)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._slots[name].value

    def state(self, name: str) -> OptimizerState:
        return self._slots[name].state

    @property
    def names(self):
        return list(self._slots)

    def step(self, grads: dict, lr: float | None = None) -> None:
        missing = set(self._slots) - set(grads)
        if missing:
            raise ContractError(f"missing gradients for {sorted(missing)}")
        for name, g in grads.items():
            g = np.asarray(g)
            if not np.all(np.isfinite(g)):
                raise ContractError(f"gradient for {name!r} has non-finite entries; step refused")

        pending: dict[str, tuple[StiefelPoint, np.ndarray, OptimizerState]] = {}
        updates: dict[str, tuple[np.ndarray, OptimizerState]] = {}
        for name, slot in self._slots.items():
            if slot.manifold:
                p = StiefelPoint(slot.value, check=False)
                delta, st = _tangent_update(self.rule, slot.state, p, grads[name], slot.grad_scale, lr)
                pending[name] = (p, delta.delta, st)
            else:
                updates[name] = euclidean_step(self.rule, slot.state, slot.value, grads[name], lr)

        if self.retraction == "polar" and self.batched:
            groups: dict[tuple, list[str]] = {}
            for name, (p, _, _) in pending.items():
                groups.setdefault(p.shape, []).append(name)
            for names in groups.values():
                stack = np.stack([pending[n][0].y + pending[n][1] for n in names])
                for n, y in zip(names, batched_polar_factor(stack)):
                    updates[n] = (y, pending[n][2])
        else:
            for name, (p, delta, st) in pending.items():
                updates[name] = (retract(p, delta, self.retraction).y, st)

        # commit only after every parameter succeeded
        for name, (value, st) in updates.items():
            self._slots[name].value = value
            self._slots[name].state = st

