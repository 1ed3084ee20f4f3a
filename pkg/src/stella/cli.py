"""Command-line front end.

Subcommands: procrustes, lowrank, classify, stability, check-grad. Settings
come from a flat ``key = value`` config file, overridden by flags.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import adapter as ad
from . import tasks
from .errors import ContractError, NumericalError
from .numkernel import read_matrix, write_matrix
from .optim import LR_SCHEDULES, STEP_KINDS, StepRule

SUBCOMMANDS = ("procrustes", "lowrank", "classify", "stability", "check-grad")
TASK_OF = {"procrustes": "procrustes", "lowrank": "lowrank_recover", "classify": "classify",
           "stability": "stability"}
GRAD_CHECK_LIMIT = 1e-4
GRAD_CHECK_STEP = 1e-6


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending line or flag."""


def _intlist(text: str) -> tuple[int, ...]:
    vals = tuple(int(t) for t in text.replace(",", " ").split())
    if not vals:
        raise ValueError("empty list")
    return vals


def _strlist(text: str) -> tuple[str, ...]:
    vals = tuple(t for t in text.replace(",", " ").split())
    if not vals:
        raise ValueError("empty list")
    return vals


def _choice(*options):
    def conv(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return conv


def _grad_scale_d(text: str):
    if text in ("auto", "off"):
        return text
    d = int(text)
    if d < 1:
        raise ValueError("must be a positive integer, 'auto' or 'off'")
    return d


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (converter, default); None default means "unset"
KEYS = {
    "task": (_choice(*SUBCOMMANDS), None),
    "m": (_intlist, None),
    "n": (_intlist, None),
    "rank": (_intlist, (32,)),
    "batch": (int, 0),
    "seed": (int, 0),
    "steps": (int, None),
    "alpha": (float, None),
    "optimizer": (_choice(*STEP_KINDS), "adamw"),
    "lr": (float, 5e-4),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "momentum": (float, 0.9),
    "weight_decay": (float, 0.0),
    "geometry": (_choice("stiefel", "euclidean"), "stiefel"),
    "retraction": (_choice("polar", "exp", "none"), None),
    "init": (_choice(*ad.INIT_KINDS), "nonzero"),
    "init_source": (_choice("base", "target"), "base"),
    "grad_scale_d": (_grad_scale_d, None),
    "lr_schedule": (_choice(*LR_SCHEDULES), "linear"),
    "target": (str, None),
    "dataset": (str, None),
    "trials": (int, None),
    "gamma": (_strlist, None),
    "out": (str, None),
}

FLAG_KEYS = {
    "seed": "seed", "steps": "steps", "lr": "lr", "rank": "rank", "alpha": "alpha",
    "optimizer": "optimizer", "geometry": "geometry", "retraction": "retraction", "init": "init",
    "grad_scale_d": "grad_scale_d", "out": "out",
}


@dataclass(frozen=True)
class RunConfig:
    task: str | None = None
    m: tuple[int, ...] | None = None
    n: tuple[int, ...] | None = None
    rank: tuple[int, ...] = (32,)
    batch: int = 0
    seed: int = 0
    steps: int | None = None
    alpha: float | None = None
    optimizer: str = "adamw"
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    geometry: str = "stiefel"
    retraction: str | None = None
    init: str = "nonzero"
    init_source: str = "base"
    grad_scale_d: int | str | None = None
    lr_schedule: str = "linear"
    target: str | None = None
    dataset: str | None = None
    trials: int | None = None
    gamma: tuple[str, ...] | None = None
    out: str | None = None

    @property
    def rule(self) -> StepRule:
        return StepRule(self.optimizer, self.lr, self.beta1, self.beta2, self.eps, self.momentum,
                        self.weight_decay)

    @property
    def init_strategy(self) -> ad.InitStrategy:
        return ad.InitStrategy(self.init, self.seed)

    @property
    def effective_grad_scale_d(self) -> int | None:
        return self.grad_scale_d if isinstance(self.grad_scale_d, int) else None

    def task_spec(self, target=None) -> tasks.TaskSpec:
        return tasks.TaskSpec(
            kind=TASK_OF[self.task],
            m=_single(self, "m", 0), n=_single(self, "n", 0), r=_single(self, "rank", 1),
            batch=self.batch, seed=self.seed, steps=self.steps or 0, alpha=self.alpha,
            target=target, dataset_path=self.dataset, init_source=self.init_source,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                lines.append(f"{f.name} = {_fmt(value)}")
        return "\n".join(lines) + "\n"


def _single(cfg: RunConfig, key: str, default: int) -> int:
    vals = getattr(cfg, key)
    if vals is None:
        return default
    if len(vals) != 1:
        raise ConfigError(f"{key} takes a single value for task {cfg.task}, got {_fmt(vals)}")
    return vals[0]


def _convert(key: str, text: str, where: str):
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    conv = KEYS[key][0]
    try:
        return conv(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value {text!r} for {key}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a dict of converted values."""
    values, seen = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{lineno}"
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value'")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        values[key] = _convert(key, value, where)
    return values


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a ``RunConfig`` from a config file and flag overrides.

    ``overrides`` maps key to raw string; flags win over file values.
    """
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values = parse_config_text(fh.read(), str(path))
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = _convert(key, str(raw), f"flag --{key.replace('_', '-')}")
    return RunConfig(**values)


def resolve(cfg: RunConfig) -> RunConfig:
    """Validate ``cfg`` and fill every derived default explicitly."""
    if cfg.task is None:
        raise ConfigError("missing required key 'task'")
    task = cfg.task
    changes = {}
    for key in ("target", "dataset"):
        path = getattr(cfg, key)
        if path is not None and not os.path.isfile(path):
            raise ConfigError(f"{key} file not found: {path}")

    if cfg.geometry == "euclidean":
        if task in ("procrustes",):
            raise ConfigError("procrustes optimizes over the Stiefel manifold; geometry must be stiefel")
        if cfg.retraction not in (None, "none"):
            raise ConfigError(f"retraction {cfg.retraction!r} requires geometry = stiefel")
        if isinstance(cfg.grad_scale_d, int):
            raise ConfigError("gradient scaling applies to Stiefel factors; not allowed with geometry = euclidean")
        changes["retraction"] = "none"
        changes["grad_scale_d"] = "off"
    else:
        if cfg.retraction == "none":
            raise ConfigError("retraction 'none' is only valid with geometry = euclidean")
        changes["retraction"] = cfg.retraction or "polar"

    if task in ("procrustes", "lowrank", "classify"):
        if cfg.steps is None:
            raise ConfigError(f"missing required key 'steps' for task {task}")
        if cfg.steps < 0:
            raise ConfigError("steps must be non-negative")
        cfg.rule  # validates optimizer settings
    if task == "procrustes":
        if cfg.target is not None:
            tm = read_matrix(cfg.target)
            changes["m"], changes["rank"] = (tm.shape[0],), (tm.shape[1],)
        elif cfg.m is None:
            raise ConfigError("missing required key 'm' for task procrustes")
    elif task == "lowrank":
        if cfg.target is not None:
            tm = read_matrix(cfg.target)
            changes["m"], changes["n"] = (tm.shape[0],), (tm.shape[1],)
        elif cfg.m is None or cfg.n is None:
            raise ConfigError("missing required key 'm' or 'n' for task lowrank")
    elif task == "classify":
        if cfg.dataset is None:
            raise ConfigError("missing required key 'dataset' for task classify")
        data = tasks.load_dataset(cfg.dataset)
        n_classes, n_features = len(data.classes), data.features.shape[1]
        if cfg.m is not None and cfg.m != (n_classes,):
            raise ConfigError(f"m = {_fmt(cfg.m)} but dataset has {n_classes} classes")
        if cfg.n is not None and cfg.n != (n_features,):
            raise ConfigError(f"n = {_fmt(cfg.n)} but dataset has {n_features} features")
        changes["m"], changes["n"] = (n_classes,), (n_features,)
    elif task == "stability":
        if cfg.m is None or cfg.n is None:
            raise ConfigError("missing required key 'm' or 'n' for task stability")
        changes["trials"] = 100_000 if cfg.trials is None else cfg.trials
        changes["gamma"] = cfg.gamma or ("forward", "backward", "lora")
    elif task == "check-grad":
        changes["trials"] = 20 if cfg.trials is None else cfg.trials

    cfg = replace(cfg, **changes)
    if task in ("procrustes", "lowrank", "classify"):
        r = _single(cfg, "rank", 1)
        if cfg.alpha is None:
            cfg = replace(cfg, alpha=2.0 * r)
        if cfg.geometry == "stiefel" and cfg.grad_scale_d in (None, "auto"):
            # reference dimension defaults to the adapted layer's input size
            d = _single(cfg, "m", 0) if task == "procrustes" else _single(cfg, "n", 0)
            cfg = replace(cfg, grad_scale_d=d)
        elif cfg.grad_scale_d is None:
            cfg = replace(cfg, grad_scale_d="off")
        if cfg.out is None:
            cfg = replace(cfg, out=f"runs/{task}-seed{cfg.seed}")
    elif cfg.grad_scale_d is None:
        cfg = replace(cfg, grad_scale_d="off")
    if task in ("stability",) and cfg.alpha is None:
        cfg = replace(cfg, alpha=64.0)
    return cfg


# --- running -----------------------------------------------------------------


def _prepare_out(out, force: bool) -> Path | None:
    if out is None:
        return None
    path = Path(out)
    if path.exists() and (not path.is_dir() or any(path.iterdir())) and not force:
        raise ConfigError(f"output directory {out} exists and is not empty; use --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def run(cfg: RunConfig, force: bool = False) -> int:
    """Execute a resolved config. Returns the process exit status."""
    out = _prepare_out(cfg.out, force)
    if out is not None:
        (out / "config.resolved").write_text(cfg.to_text(), encoding="utf-8")
    task = cfg.task
    try:
        if task == "procrustes":
            return _run_procrustes(cfg, out)
        if task == "lowrank":
            return _run_lowrank(cfg, out)
        if task == "classify":
            return _run_classify(cfg, out)
        if task == "stability":
            return _run_stability(cfg, out)
        return _run_check_grad(cfg, out)
    except tasks.DivergenceError as exc:
        if out is not None:
            tasks.write_history(out / "history.csv", exc.history)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 1


def _run_procrustes(cfg, out) -> int:
    target = read_matrix(cfg.target) if cfg.target else None
    spec = cfg.task_spec(target)
    if target is None:
        target = tasks.well_conditioned_matrix(spec.m, spec.r, spec.seed)
        spec = replace(spec, target=target)
    final, history = tasks.run_procrustes(spec, cfg.rule, cfg.retraction, cfg.lr_schedule,
                                          cfg.effective_grad_scale_d)
    optimum = tasks.procrustes_optimum(target)
    gap = float(((final.y - optimum) ** 2).sum() ** 0.5)
    tasks.write_history(out / "history.csv", history)
    write_matrix(out / "target.mat", target)
    write_matrix(out / "final.mat", final.y)
    write_matrix(out / "optimum.mat", optimum)
    _write_metrics(out, {"final_loss": history[-1].loss, "distance_to_optimum": gap})
    print(f"procrustes: final loss {history[-1].loss:.6g}, ||Y - uf(M)||_F = {gap:.3e}")
    return 0


def _run_lowrank(cfg, out) -> int:
    target = read_matrix(cfg.target) if cfg.target else None
    spec = cfg.task_spec(target)
    if target is None:
        target = tasks.default_lowrank_target(spec.m, spec.n, spec.r)
        spec = replace(spec, target=target)
    adapter, history = tasks.run_lowrank_recover(
        spec, cfg.rule, cfg.retraction if cfg.geometry == "stiefel" else "polar",
        cfg.init_strategy, cfg.geometry, cfg.lr_schedule, cfg.effective_grad_scale_d)
    tail = tasks.eckart_young_tail(target, spec.r)
    tasks.write_history(out / "history.csv", history)
    write_matrix(out / "target.mat", target)
    ad.save_adapter(adapter, out / "adapter", cfg.init_strategy, constrained=cfg.geometry == "stiefel")
    _write_metrics(out, {"final_loss": history[-1].loss, "eckart_young_tail": tail})
    print(f"lowrank: final loss {history[-1].loss:.6g}, optimal {tail:.6g}")
    return 0


def _run_classify(cfg, out) -> int:
    spec = cfg.task_spec()
    res = tasks.run_classify(spec, cfg.rule, cfg.retraction if cfg.geometry == "stiefel" else "polar",
                             cfg.geometry, cfg.init_strategy, cfg.lr_schedule, cfg.effective_grad_scale_d)
    tasks.write_history(out / "history.csv", res.history)
    ad.save_adapter(res.adapter, out / "adapter", cfg.init_strategy, constrained=cfg.geometry == "stiefel")
    _write_metrics(out, {"accuracy": res.accuracy, "train_accuracy": res.train_accuracy,
                         "initial_accuracy": res.initial_accuracy, "final_loss": res.history[-1].loss})
    print(f"classify: held-out accuracy {res.accuracy:.4f} (train {res.train_accuracy:.4f})")
    return 0


STABILITY_FIELDS = ("m", "n", "r", "gamma_rule", "gamma", "forward_moment", "forward_expected",
                    "backward_moment", "backward_expected")


def _run_stability(cfg, out) -> int:
    rows = []
    for m in cfg.m:
        for n in cfg.n:
            for r in cfg.rank:
                for token in cfg.gamma:
                    gamma = tasks.stability_gamma(token, m, n, r, cfg.alpha)
                    fwd, bwd = tasks.run_stability_mc(m, n, r, gamma, cfg.trials, cfg.seed)
                    rows.append((m, n, r, token, gamma, fwd, gamma**2 * r / m, bwd, gamma**2 * r / n))
    lines = [",".join(STABILITY_FIELDS)]
    lines += [",".join(_fmt(v) if not isinstance(v, float) else f"{v:.17g}" for v in row) for row in rows]
    if out is not None:
        (out / "stability.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{'m':>6} {'n':>6} {'r':>4} {'gamma':>10} {'E[y^2]':>10} {'pred':>10} {'E[g^2]':>10} {'pred':>10}")
    for m, n, r, token, gamma, fwd, pf, bwd, pb in rows:
        print(f"{m:>6} {n:>6} {r:>4} {gamma:>10.4g} {fwd:>10.4g} {pf:>10.4g} {bwd:>10.4g} {pb:>10.4g}")
    return 0


def _run_check_grad(cfg, out) -> int:
    err = tasks.check_factor_grads(cfg.trials, cfg.seed, GRAD_CHECK_STEP)
    ok = err <= GRAD_CHECK_LIMIT
    print(f"check-grad: max relative error {err:.3e} over {cfg.trials} instances "
          f"({'ok' if ok else 'FAIL'}, limit {GRAD_CHECK_LIMIT:g})")
    if out is not None:
        _write_metrics(out, {"max_relative_error": err})
    return 0 if ok else 1


def _write_metrics(out, metrics: dict) -> None:
    text = "".join(f"{k} = {v:.17g}\n" for k, v in metrics.items())
    (out / "metrics").write_text(text, encoding="utf-8")


# --- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stella", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed")
        p.add_argument("--steps")
        p.add_argument("--lr")
        p.add_argument("--rank")
        p.add_argument("--alpha")
        p.add_argument("--optimizer")
        p.add_argument("--geometry")
        p.add_argument("--retraction")
        p.add_argument("--init")
        p.add_argument("--grad-scale-d", dest="grad_scale_d")
        p.add_argument("--out")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        overrides[key.strip()] = value.strip()
    overrides.update({key: getattr(args, attr) for attr, key in FLAG_KEYS.items()
                      if getattr(args, attr) is not None})
    try:
        cfg = parse_config(args.config, overrides)
        if cfg.task is not None and cfg.task != args.command:
            raise ConfigError(f"config task {cfg.task!r} does not match subcommand {args.command!r}")
        cfg = resolve(replace(cfg, task=args.command))
        return run(cfg, force=args.force)
    except (ConfigError, ContractError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
