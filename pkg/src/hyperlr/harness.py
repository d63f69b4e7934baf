"""Experiment harness: config parsing, the online training loop, random
hyperparameter sweeps, and deterministic artifact emission.

Runs are reproducible bit for bit: all randomness flows from the config seed
through labeled RngStream children, floats are serialized at full precision,
and wall-clock measurement is off by default (the wall_ms column is 0.0) so
repeated runs produce identical bytes.
"""
from __future__ import annotations

import json
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Batch, BatchSampler, Dataset, RngStream, full_batch,
                   holdout_split, load_idx_dataset, make_blobs)
from .dynamics import (DivergenceError, Dynamics, OptimizerState,
                       adam_dynamics, clipped_dynamics, sgd_dynamics,
                       sgdm_dynamics)
from .problems import (Mlp, MlpSpec, beale_objective,
                       bukin_smoothed_objective, mlp_objective,
                       quadratic_objective)
from .schedulers import (SchedulerState, ValGradSource, constant_schedule,
                         exponential_schedule, init_scheduler, marthe_step)

TRACE_HEADER = "t,eta,delta_eta,train_loss,val_loss,val_acc,z_norm,wall_ms"

PROBLEM_KINDS = ("quadratic", "beale", "bukin", "mlp")
DATASET_SOURCES = ("blobs", "idx")
DYNAMICS_KINDS = ("sgd", "sgdm", "adam")
SCHEDULER_KINDS = ("constant", "exponential", "hd", "rtho", "marthe")
VAL_GRAD_MODES = ("full", "minibatch")

# Epoch length used for patience accounting on problems without a dataset.
ANALYTIC_EPOCH_STEPS = 50


class ConfigError(ValueError):
    """Invalid configuration; collects every offending field path."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration: " + "; ".join(problems))
        self.problems = problems


class _Section:
    """Strict dict reader: typed field extraction plus unknown-key rejection."""

    def __init__(self, data, path: str, errors: list[str]):
        if not isinstance(data, dict):
            errors.append(f"{path}: expected an object")
            data = {}
        self.data = dict(data)
        self.path = path
        self.errors = errors

    def _fail(self, key, msg):
        self.errors.append(f"{self.path}.{key}: {msg}")

    def take(self, key, kind, default=..., choices=None, low=None, high=None):
        if key not in self.data:
            if default is ...:
                self._fail(key, "required field is missing")
                return None
            return default
        value = self.data.pop(key)
        if value is None and default is not ...:
            return default if default is not None else None
        if kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self._fail(key, f"expected a number, got {value!r}")
                return default if default is not ... else None
            value = float(value)
        elif kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                self._fail(key, f"expected an integer, got {value!r}")
                return default if default is not ... else None
        elif kind == "str":
            if not isinstance(value, str):
                self._fail(key, f"expected a string, got {value!r}")
                return default if default is not ... else None
        elif kind == "bool":
            if not isinstance(value, bool):
                self._fail(key, f"expected a boolean, got {value!r}")
                return default if default is not ... else None
        elif kind == "list":
            if not isinstance(value, list):
                self._fail(key, f"expected a list, got {value!r}")
                return default if default is not ... else None
        elif kind == "dict":
            if not isinstance(value, dict):
                self._fail(key, f"expected an object, got {value!r}")
                return default if default is not ... else None
        if choices is not None and value not in choices:
            self._fail(key, f"must be one of {list(choices)}, got {value!r}")
        if low is not None and isinstance(value, (int, float)) and value < low:
            self._fail(key, f"must be >= {low}, got {value!r}")
        if high is not None and isinstance(value, (int, float)) and value > high:
            self._fail(key, f"must be <= {high}, got {value!r}")
        return value

    def finish(self):
        for key in sorted(self.data):
            self._fail(key, "unknown field")


@dataclass(frozen=True)
class ProblemConfig:
    kind: str = "quadratic"
    a_diag: tuple = (1.0,)
    start: tuple | None = None
    eps: float = 1e-3
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    init_scale: float = 1.0
    weight_decay: float = 0.0


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "blobs"
    n: int = 1000
    num_classes: int = 10
    dim: int = 64
    spread: float = 0.3
    train_images: str = ""
    train_labels: str = ""
    n_train: int = 700
    n_val: int = 100
    n_test: int = 0


@dataclass(frozen=True)
class DynamicsConfig:
    kind: str = "sgd"
    rho: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = None


@dataclass(frozen=True)
class SchedulerConfig:
    kind: str = "constant"
    eta0: float = 0.01
    beta: float = 1e-4
    mu: float = 0.99
    gamma: float = 0.98


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    dataset: DatasetConfig | None = None
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    horizon: int = 100
    batch_size: int = 100
    batch_policy: str = "with_replacement"
    seed: int = 0
    val_grad: str = "full"
    eval_every: int = 1
    patience_epochs: int | None = None
    record_wall_time: bool = False

    def to_dict(self) -> dict:
        out = asdict(self)
        for section in ("problem", "dataset", "dynamics", "scheduler"):
            sec = out[section]
            if sec is None:
                continue
            for k, v in sec.items():
                if isinstance(v, tuple):
                    sec[k] = list(v)
        return out


def _parse_problem(data, errors) -> ProblemConfig:
    sec = _Section(data, "problem", errors)
    kind = sec.take("kind", "str", choices=PROBLEM_KINDS)
    a_diag = sec.take("a_diag", "list", default=[1.0])
    start = sec.take("start", "list", default=None)
    eps = sec.take("eps", "float", default=1e-3)
    hidden = sec.take("hidden", "list", default=[64, 64])
    activation = sec.take("activation", "str", default="tanh",
                          choices=("tanh", "softplus", "relu"))
    init_scale = sec.take("init_scale", "float", default=1.0)
    weight_decay = sec.take("weight_decay", "float", default=0.0, low=0.0)
    sec.finish()
    if kind == "quadratic" and a_diag is not None:
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in a_diag):
            errors.append("problem.a_diag: entries must be numbers")
            a_diag = [1.0]
    if hidden is not None:
        if not all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in hidden):
            errors.append("problem.hidden: entries must be positive integers")
            hidden = [64, 64]
    if eps is not None and eps <= 0:
        errors.append("problem.eps: must be positive")
        eps = 1e-3
    if init_scale is not None and init_scale <= 0:
        errors.append("problem.init_scale: must be positive")
        init_scale = 1.0
    return ProblemConfig(kind or "quadratic", tuple(a_diag or ()),
                         tuple(start) if start is not None else None,
                         eps, tuple(hidden or ()), activation or "tanh",
                         init_scale, weight_decay if weight_decay is not None else 0.0)


def _parse_dataset(data, errors) -> DatasetConfig:
    sec = _Section(data, "dataset", errors)
    source = sec.take("source", "str", default="blobs", choices=DATASET_SOURCES)
    n = sec.take("n", "int", default=1000, low=1)
    num_classes = sec.take("num_classes", "int", default=10, low=2)
    dim = sec.take("dim", "int", default=64, low=1)
    spread = sec.take("spread", "float", default=0.3, low=0.0)
    train_images = sec.take("train_images", "str", default="")
    train_labels = sec.take("train_labels", "str", default="")
    n_train = sec.take("n_train", "int", default=700, low=1)
    n_val = sec.take("n_val", "int", default=100, low=1)
    n_test = sec.take("n_test", "int", default=0, low=0)
    sec.finish()
    if source == "idx" and (not train_images or not train_labels):
        errors.append("dataset.train_images: required for idx source"
                      if not train_images else "dataset.train_labels: required for idx source")
    return DatasetConfig(source or "blobs", n, num_classes, dim, spread,
                         train_images or "", train_labels or "",
                         n_train, n_val, n_test)


def _parse_dynamics(data, errors) -> DynamicsConfig:
    sec = _Section(data, "dynamics", errors)
    kind = sec.take("kind", "str", default="sgd", choices=DYNAMICS_KINDS)
    rho = sec.take("rho", "float", default=0.9, low=0.0)
    beta1 = sec.take("beta1", "float", default=0.9, low=0.0)
    beta2 = sec.take("beta2", "float", default=0.999, low=0.0)
    eps = sec.take("eps", "float", default=1e-8)
    clip = sec.take("clip", "float", default=None)
    sec.finish()
    if rho is not None and rho >= 1.0:
        errors.append("dynamics.rho: must be < 1")
    if clip is not None and clip <= 0:
        errors.append("dynamics.clip: must be positive")
    return DynamicsConfig(kind or "sgd", rho, beta1, beta2, eps, clip)


def _parse_scheduler(data, errors) -> SchedulerConfig:
    sec = _Section(data, "scheduler", errors)
    kind = sec.take("kind", "str", choices=SCHEDULER_KINDS)
    eta0 = sec.take("eta0", "float", default=0.01, low=0.0)
    beta = sec.take("beta", "float", default=1e-4, low=0.0)
    mu = sec.take("mu", "float", default=0.99, low=0.0, high=1.0)
    gamma = sec.take("gamma", "float", default=0.98)
    sec.finish()
    if gamma is not None and not 0.0 < gamma <= 1.0:
        errors.append("scheduler.gamma: must lie in (0, 1]")
        gamma = 0.98
    return SchedulerConfig(kind or "constant", eta0, beta, mu, gamma)


def parse_experiment_config(data: dict) -> ExperimentConfig:
    """Parse and validate a config dict; raises ConfigError listing every
    offending field path (unknown keys included)."""
    errors: list[str] = []
    top = _Section(data, "config", errors)
    problem = _parse_problem(top.take("problem", "dict", default={}), errors)
    dataset_raw = top.take("dataset", "dict", default=None)
    dynamics = _parse_dynamics(top.take("dynamics", "dict", default={}), errors)
    scheduler = _parse_scheduler(top.take("scheduler", "dict", default={}), errors)
    horizon = top.take("horizon", "int", default=100, low=1)
    batch_size = top.take("batch_size", "int", default=100, low=1)
    batch_policy = top.take("batch_policy", "str", default="with_replacement",
                            choices=("with_replacement", "epoch_shuffle"))
    seed = top.take("seed", "int", default=0)
    val_grad = top.take("val_grad", "str", default="full", choices=VAL_GRAD_MODES)
    eval_every = top.take("eval_every", "int", default=1, low=1)
    patience = top.take("patience_epochs", "int", default=None)
    record_wall = top.take("record_wall_time", "bool", default=False)
    top.finish()
    dataset = None
    if problem.kind == "mlp":
        dataset = _parse_dataset(dataset_raw if dataset_raw is not None else {}, errors)
        if dataset.n_train + dataset.n_val + dataset.n_test > dataset.n and dataset.source == "blobs":
            errors.append("dataset.n: smaller than n_train + n_val + n_test")
        if batch_size is not None and dataset.n_train < batch_size:
            errors.append("config.batch_size: exceeds dataset.n_train")
    elif dataset_raw is not None:
        errors.append("config.dataset: only meaningful for the mlp problem")
    if patience is not None and patience < 1:
        errors.append("config.patience_epochs: must be positive when set")
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(problem, dataset, dynamics, scheduler, horizon,
                            batch_size, batch_policy, seed, val_grad,
                            eval_every, patience, record_wall)


def load_experiment_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_experiment_config(json.load(fh))


@dataclass
class TraceRecord:
    """One row per optimizer step; metrics are evaluated at the pre-step
    weights, z_norm is the tangent carried out of the step."""

    t: int
    eta: float
    delta_eta: float
    train_loss: float
    val_loss: float
    val_acc: float
    z_norm: float
    wall_ms: float


@dataclass
class ExperimentSetup:
    """Everything run_experiment (or an offline oracle) needs for one config."""

    config: ExperimentConfig
    dynamics: Dynamics
    s0: OptimizerState
    sampler: BatchSampler | None
    val_source: ValGradSource
    val_objective: object
    val_batch: Batch | None
    test_batch: Batch | None
    epoch_len: int
    classification: bool


def _build_dataset(cfg: ExperimentConfig, rng: RngStream) -> Dataset:
    ds_cfg = cfg.dataset
    if ds_cfg.source == "blobs":
        return make_blobs(ds_cfg.n, ds_cfg.num_classes, ds_cfg.dim,
                          ds_cfg.spread, rng.child("data"))
    return load_idx_dataset(ds_cfg.train_images, ds_cfg.train_labels)


def build_experiment(cfg: ExperimentConfig) -> ExperimentSetup:
    """Materialize the problem, dynamics, data, and outer objective."""
    rng = RngStream(cfg.seed)
    p = cfg.problem
    if p.kind == "mlp":
        ds_cfg = cfg.dataset
        full = _build_dataset(cfg, rng)
        held = ds_cfg.n_val + ds_cfg.n_test
        if ds_cfg.n_train + held > full.n:
            raise ConfigError(["dataset.n_train: split sizes exceed the dataset"])
        # The held-out pool is already a random permutation, so val and test
        # are consecutive slices of it.
        train_ds, pool = holdout_split(full, ds_cfg.n_train, held, rng.child("split"))
        val_ds = pool.subset(np.arange(ds_cfg.n_val))
        test_ds = (pool.subset(np.arange(ds_cfg.n_val, held))
                   if ds_cfg.n_test else None)
        spec = MlpSpec((train_ds.dim, *p.hidden, train_ds.num_classes),
                       activation=p.activation, init_scale=p.init_scale,
                       weight_decay=p.weight_decay)
        train_obj = mlp_objective(spec, "train")
        val_obj = mlp_objective(spec, "validation")
        w0 = train_obj.init_weights(rng.child("init"))
        sampler = BatchSampler(train_ds, cfg.batch_size, rng.child("batches"),
                               policy=cfg.batch_policy)
        val_batch = full_batch(val_ds)
        val_sampler = None
        if cfg.val_grad == "minibatch":
            val_sampler = BatchSampler(val_ds, min(cfg.batch_size, val_ds.n),
                                       rng.child("val-batches"),
                                       policy=cfg.batch_policy)
        val_source = ValGradSource(val_obj, batch=val_batch, sampler=val_sampler)
        test_batch = full_batch(test_ds) if test_ds is not None else None
        epoch_len = max(1, ds_cfg.n_train // cfg.batch_size)
        objective = train_obj
        classification = True
    else:
        if p.kind == "quadratic":
            objective = quadratic_objective(p.a_diag)
            default_start = tuple(1.0 for _ in range(objective.dim))
        elif p.kind == "beale":
            objective = beale_objective()
            default_start = (2.0, 1.0)
        else:
            objective = bukin_smoothed_objective(p.eps)
            default_start = (0.0, 2.0)
        start = p.start if p.start is not None else default_start
        if len(start) != objective.dim:
            raise ConfigError([f"problem.start: expected {objective.dim} entries"])
        w0 = np.array(start, dtype=np.float64)
        val_obj = objective
        sampler = None
        val_batch = None
        test_batch = None
        val_source = ValGradSource(objective)
        epoch_len = ANALYTIC_EPOCH_STEPS
        classification = False

    d = cfg.dynamics
    if d.kind == "sgd":
        dynamics = sgd_dynamics(objective)
    elif d.kind == "sgdm":
        dynamics = sgdm_dynamics(objective, d.rho)
    else:
        dynamics = adam_dynamics(objective, d.beta1, d.beta2, d.eps)
    if d.clip is not None:
        dynamics = clipped_dynamics(dynamics, d.clip)

    return ExperimentSetup(cfg, dynamics, dynamics.init_state(w0), sampler,
                           val_source, val_obj, val_batch, test_batch,
                           epoch_len, classification)


def _val_metrics(setup: ExperimentSetup, w: np.ndarray) -> tuple[float, float]:
    if setup.classification:
        return setup.val_objective.metrics(w, setup.val_batch)
    return setup.val_source.value(w), float("nan")


def run_experiment(cfg: ExperimentConfig) -> tuple[list[TraceRecord], dict]:
    """Run one configured experiment; returns the per-step trace and summary.

    Divergence does not raise: the run stops and the summary records the last
    finite step. Early stopping (patience_epochs) compares the validation
    metric at epoch boundaries.
    """
    setup = build_experiment(cfg)
    dynamics = setup.dynamics
    train_obj = dynamics.objective
    s = setup.s0
    sched: SchedulerState | None = None
    schedule_fn = None
    kind = cfg.scheduler.kind
    if kind in ("hd", "rtho", "marthe"):
        mu = {"hd": 0.0, "rtho": 1.0}.get(kind, cfg.scheduler.mu)
        sched = init_scheduler(cfg.scheduler.eta0, cfg.scheduler.beta, mu, s)
    elif kind == "constant":
        schedule_fn = constant_schedule(cfg.scheduler.eta0)
    else:
        schedule_fn = exponential_schedule(cfg.scheduler.eta0, cfg.scheduler.gamma)

    trace: list[TraceRecord] = []
    diverged = False
    divergence_step = None
    stopped_early = False
    best_metric = -math.inf
    best_val_loss = math.inf
    best_val_acc = float("nan")
    best_val_step = -1
    best_w = s.w.copy()
    best_train = math.inf
    bad_epochs = 0
    nan = float("nan")

    def consider_best(val_loss, val_acc, step, w):
        nonlocal best_metric, best_val_loss, best_val_acc, best_val_step, best_w
        metric = val_acc if setup.classification else -val_loss
        if metric > best_metric:
            best_metric = metric
            best_val_loss, best_val_acc = val_loss, val_acc
            best_val_step = step
            best_w = w.copy()
            return True
        return False

    # Divergence is detected by letting values overflow to inf/nan and then
    # checking finiteness, so the corresponding warnings are noise here.
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(cfg.horizon):
            batch = setup.sampler.next_batch() if setup.sampler is not None else None
            wall0 = time.perf_counter() if cfg.record_wall_time else 0.0
            train_loss, g = train_obj.loss_and_grad(s.w, batch)
            try:
                if sched is not None:
                    sched, s_new = marthe_step(sched, dynamics, s, batch,
                                               setup.val_source, g=g)
                    eta_t, delta_t, z_norm = sched.eta, sched.last_delta, sched.z.norm()
                else:
                    eta_t, delta_t, z_norm = schedule_fn(t), nan, nan
                    s_new = dynamics.step(s, eta_t, batch, g=g)
                    if not s_new.is_finite():
                        raise DivergenceError("optimizer state is not finite",
                                              step=t, last_finite_step=t - 1)
            except DivergenceError:
                diverged = True
                divergence_step = t
                break
            wall_ms = (time.perf_counter() - wall0) * 1e3 if cfg.record_wall_time else 0.0
            if t % cfg.eval_every == 0:
                val_loss, val_acc = _val_metrics(setup, s.w)
                consider_best(val_loss, val_acc, t, s.w)
            else:
                val_loss, val_acc = nan, nan
            best_train = min(best_train, float(train_loss))
            trace.append(TraceRecord(t, float(eta_t), float(delta_t),
                                     float(train_loss), float(val_loss),
                                     float(val_acc), float(z_norm), wall_ms))
            s = s_new
            if cfg.patience_epochs is not None and (t + 1) % setup.epoch_len == 0:
                epoch_loss, epoch_acc = _val_metrics(setup, s.w)
                if not consider_best(epoch_loss, epoch_acc, t + 1, s.w):
                    bad_epochs += 1
                    if bad_epochs >= cfg.patience_epochs:
                        stopped_early = True
                        break
                else:
                    bad_epochs = 0

        final_val_loss, final_val_acc = nan, nan
        final_train = nan
        if s.is_finite():
            final_val_loss, final_val_acc = _val_metrics(setup, s.w)
            full_train = full_batch(setup.sampler.dataset) if setup.sampler is not None else None
            final_train = float(train_obj.loss(s.w, full_train))
            best_train = min(best_train, final_train)
            consider_best(final_val_loss, final_val_acc, len(trace), s.w)

    test_acc = None
    if setup.test_batch is not None and np.all(np.isfinite(best_w)):
        test_acc = setup.val_objective.accuracy(best_w, setup.test_batch)

    finite_etas = [r.eta for r in trace if math.isfinite(r.eta)]
    summary = {
        "schema": "experiment-summary-v1",
        "version": version_string(),
        "config": cfg.to_dict(),
        "steps_run": len(trace),
        "diverged": diverged,
        "divergence_step": divergence_step,
        "stopped_early": stopped_early,
        "final_eta": finite_etas[-1] if finite_etas else None,
        "max_eta": max(finite_etas) if finite_etas else None,
        "hit_zero_eta": bool(any(e == 0.0 for e in finite_etas)),
        "final_train_loss": final_train,
        "best_train_loss": best_train,
        "final_val_loss": final_val_loss,
        "final_val_accuracy": final_val_acc,
        "best_val_loss": best_val_loss,
        "best_val_accuracy": best_val_acc,
        "best_val_step": best_val_step,
        "test_accuracy": test_acc,
    }
    return trace, summary


def _fmt(x: float) -> str:
    return format(x, ".17g")


def emit_trace_csv(trace: list[TraceRecord], path: str) -> None:
    """Write the trace with full-precision floats; bitwise stable across
    repeated runs of the same config."""
    lines = [TRACE_HEADER]
    for r in trace:
        lines.append(",".join([str(r.t), _fmt(r.eta), _fmt(r.delta_eta),
                               _fmt(r.train_loss), _fmt(r.val_loss),
                               _fmt(r.val_acc), _fmt(r.z_norm), _fmt(r.wall_ms)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace_csv(path: str) -> list[TraceRecord]:
    lines = Path(path).read_text().strip().split("\n")
    if lines[0] != TRACE_HEADER:
        raise ValueError(f"{path}: unexpected trace header {lines[0]!r}")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        out.append(TraceRecord(int(parts[0]), *(float(p) for p in parts[1:])))
    return out


def _json_safe(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _json_safe(obj.item())
    return obj


def emit_summary_json(summary: dict, path: str) -> None:
    """Strict JSON with sorted keys; non-finite floats become null."""
    Path(path).write_text(json.dumps(_json_safe(summary), indent=2,
                                     sort_keys=True) + "\n")


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return __version__


@dataclass(frozen=True)
class SweepConfig:
    """Random hyperparameter search: per-method wall-clock budget, fixed
    draw distributions, seeds cycled across trials."""

    experiment: ExperimentConfig
    methods: tuple = ("marthe",)
    budget_s: float = 60.0
    seeds: tuple = (0,)
    beta_log_range: tuple = (1e-6, 1e-3)
    mu_range: tuple = (0.9, 0.999)
    gamma_log_range: tuple = (0.9, 1.0)
    patience_epochs: int | None = 10
    max_trials: int | None = None
    sweep_seed: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["experiment"] = self.experiment.to_dict()
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


def _parse_pair(sec, key, default, errors, positive=True):
    pair = sec.take(key, "list", default=list(default))
    if pair is None:
        return default
    ok = (len(pair) == 2
          and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in pair)
          and pair[0] <= pair[1] and (not positive or pair[0] > 0))
    if not ok:
        errors.append(f"sweep.{key}: expected [lo, hi] with 0 < lo <= hi")
        return default
    return (float(pair[0]), float(pair[1]))


def parse_sweep_config(data: dict) -> SweepConfig:
    errors: list[str] = []
    sec = _Section(data, "sweep", errors)
    exp_raw = sec.take("experiment", "dict")
    methods = sec.take("methods", "list", default=["marthe"])
    budget_s = sec.take("budget_s", "float", default=60.0, low=0.0)
    seeds = sec.take("seeds", "list", default=[0])
    beta_rng = _parse_pair(sec, "beta_log_range", (1e-6, 1e-3), errors)
    mu_rng = _parse_pair(sec, "mu_range", (0.9, 0.999), errors, positive=False)
    gamma_rng = _parse_pair(sec, "gamma_log_range", (0.9, 1.0), errors)
    patience = sec.take("patience_epochs", "int", default=10)
    max_trials = sec.take("max_trials", "int", default=None)
    sweep_seed = sec.take("sweep_seed", "int", default=0)
    sec.finish()
    if methods is not None:
        bad = [m for m in methods if m not in SCHEDULER_KINDS]
        if bad or not methods:
            errors.append(f"sweep.methods: unknown scheduler kinds {bad}")
    if seeds is not None and (not seeds or not all(isinstance(x, int) and not isinstance(x, bool) for x in seeds)):
        errors.append("sweep.seeds: expected a nonempty list of integers")
        seeds = [0]
    experiment = None
    if exp_raw is not None:
        try:
            experiment = parse_experiment_config(exp_raw)
        except ConfigError as err:
            errors.extend("experiment " + p for p in err.problems)
    if errors:
        raise ConfigError(errors)
    return SweepConfig(experiment, tuple(methods), budget_s, tuple(seeds),
                       beta_rng, mu_rng, gamma_rng, patience, max_trials,
                       sweep_seed)


def _draw_params(method: str, gen: np.random.Generator, scfg: SweepConfig):
    beta = mu = gamma = None
    if method in ("hd", "rtho", "marthe"):
        lo, hi = scfg.beta_log_range
        beta = float(np.exp(gen.uniform(np.log(lo), np.log(hi))))
    if method == "marthe":
        mu = float(gen.uniform(*scfg.mu_range))
    if method == "exponential":
        lo, hi = scfg.gamma_log_range
        gamma = float(np.exp(gen.uniform(np.log(lo), np.log(hi))))
    return beta, mu, gamma


def random_sweep(scfg: SweepConfig) -> dict:
    """Random search per method under a wall-clock budget.

    The draw sequence is a pure function of (sweep_seed, method), so two
    sweeps differ only in how many trials the clock admitted; at least one
    trial always runs per method. Trial wall times are recorded and are the
    one intentionally non-reproducible part of the report.
    """
    base = scfg.experiment
    report_methods = {}
    for method in scfg.methods:
        gen = RngStream(scfg.sweep_seed, f"sweep/{method}").generator()
        start = time.monotonic()
        trials = []
        best = None
        index = 0
        while True:
            beta, mu, gamma = _draw_params(method, gen, scfg)
            seed = scfg.seeds[index % len(scfg.seeds)]
            sched = SchedulerConfig(
                kind=method,
                eta0=base.scheduler.eta0,
                beta=beta if beta is not None else base.scheduler.beta,
                mu=mu if mu is not None else base.scheduler.mu,
                gamma=gamma if gamma is not None else base.scheduler.gamma)
            cfg = replace(base, scheduler=sched, seed=int(seed),
                          patience_epochs=scfg.patience_epochs)
            t0 = time.monotonic()
            _, summary = run_experiment(cfg)
            seconds = time.monotonic() - t0
            acc = summary["best_val_accuracy"]
            metric = acc if math.isfinite(acc) else -summary["best_val_loss"]
            trial = {
                "index": index, "seed": int(seed),
                "beta": beta, "mu": mu, "gamma": gamma,
                "best_val_accuracy": acc,
                "best_val_loss": summary["best_val_loss"],
                "test_accuracy": summary["test_accuracy"],
                "final_eta": summary["final_eta"],
                "diverged": summary["diverged"],
                "stopped_early": summary["stopped_early"],
                "steps_run": summary["steps_run"],
                "seconds": seconds,
                "elapsed_s": time.monotonic() - start,
            }
            if best is None or metric > best["metric"]:
                best = {"metric": metric, "index": index}
            trial["best_so_far_metric"] = best["metric"]
            trials.append(trial)
            index += 1
            if time.monotonic() - start >= scfg.budget_s:
                break
            if scfg.max_trials is not None and index >= scfg.max_trials:
                break
        best_trial = trials[best["index"]]
        report_methods[method] = {"trials": trials, "n_trials": len(trials),
                                  "best": best_trial}
    return {"schema": "sweep-report-v1", "version": version_string(),
            "config": scfg.to_dict(), "methods": report_methods}


SWEEP_CSV_HEADER = ("method,index,seed,beta,mu,gamma,best_val_accuracy,"
                    "best_val_loss,test_accuracy,final_eta,diverged,"
                    "stopped_early,steps_run,seconds,elapsed_s,best_so_far_metric")


def emit_sweep_csv(report: dict, path: str) -> None:
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, bool):
            return str(int(v))
        if isinstance(v, float):
            return _fmt(v)
        return str(v)

    lines = [SWEEP_CSV_HEADER]
    for method, block in report["methods"].items():
        for tr in block["trials"]:
            lines.append(",".join([method] + [cell(tr[k]) for k in
                         ("index", "seed", "beta", "mu", "gamma",
                          "best_val_accuracy", "best_val_loss", "test_accuracy",
                          "final_eta", "diverged", "stopped_early", "steps_run",
                          "seconds", "elapsed_s", "best_so_far_metric")]))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class CompareConfig:
    """Grid comparison of schedulers over a shared problem."""

    experiment: ExperimentConfig
    methods: tuple = ("hd", "rtho")
    beta_grid: tuple = ()
    mu_grid: tuple = (0.99,)
    seeds: tuple = (0,)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["experiment"] = self.experiment.to_dict()
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


def parse_compare_config(data: dict) -> CompareConfig:
    errors: list[str] = []
    sec = _Section(data, "compare", errors)
    exp_raw = sec.take("experiment", "dict")
    methods = sec.take("methods", "list", default=["hd", "rtho"])
    grid_raw = sec.take("beta_grid", "list", default=None)
    grid_spec = sec.take("beta_grid_log", "dict", default=None)
    mu_grid = sec.take("mu_grid", "list", default=[0.99])
    seeds = sec.take("seeds", "list", default=[0])
    sec.finish()
    if methods is not None:
        bad = [m for m in methods if m not in SCHEDULER_KINDS]
        if bad or not methods:
            errors.append(f"compare.methods: unknown scheduler kinds {bad}")
    beta_grid = ()
    if grid_raw is not None:
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in grid_raw):
            errors.append("compare.beta_grid: entries must be positive numbers")
        else:
            beta_grid = tuple(float(x) for x in grid_raw)
    elif grid_spec is not None:
        gsec = _Section(grid_spec, "compare.beta_grid_log", errors)
        lo = gsec.take("lo", "float")
        hi = gsec.take("hi", "float")
        num = gsec.take("num", "int", low=2)
        gsec.finish()
        if lo is not None and hi is not None and num is not None and 0 < lo <= hi:
            beta_grid = tuple(float(b) for b in np.geomspace(lo, hi, num))
        else:
            errors.append("compare.beta_grid_log: need 0 < lo <= hi and num >= 2")
    else:
        errors.append("compare.beta_grid: a beta grid is required "
                      "(beta_grid list or beta_grid_log spec)")
    experiment = None
    if exp_raw is not None:
        try:
            experiment = parse_experiment_config(exp_raw)
        except ConfigError as err:
            errors.extend("experiment " + p for p in err.problems)
    if errors:
        raise ConfigError(errors)
    return CompareConfig(experiment, tuple(methods), beta_grid,
                         tuple(float(m) for m in mu_grid), tuple(seeds))


def compare_methods(ccfg: CompareConfig) -> list[dict]:
    """Run every (method, beta[, mu], seed) cell and collect outcome rows."""
    rows = []
    base = ccfg.experiment
    for method in ccfg.methods:
        betas = ccfg.beta_grid if method in ("hd", "rtho", "marthe") else (None,)
        mus = ccfg.mu_grid if method == "marthe" else (None,)
        for beta in betas:
            for mu in mus:
                for seed in ccfg.seeds:
                    sched = SchedulerConfig(
                        kind=method, eta0=base.scheduler.eta0,
                        beta=beta if beta is not None else base.scheduler.beta,
                        mu=mu if mu is not None else base.scheduler.mu,
                        gamma=base.scheduler.gamma)
                    cfg = replace(base, scheduler=sched, seed=int(seed))
                    trace, summary = run_experiment(cfg)
                    rows.append({
                        "method": method, "beta": beta, "mu": mu,
                        "seed": int(seed),
                        "best_objective": summary["best_train_loss"],
                        "final_objective": summary["final_train_loss"],
                        "final_eta": summary["final_eta"],
                        "max_eta": summary["max_eta"],
                        "hit_zero_eta": summary["hit_zero_eta"],
                        "diverged": summary["diverged"],
                        "steps_run": summary["steps_run"],
                    })
    return rows


COMPARE_CSV_HEADER = ("method,beta,mu,seed,best_objective,final_objective,"
                      "final_eta,max_eta,hit_zero_eta,diverged,steps_run")


def emit_compare_csv(rows: list[dict], path: str) -> None:
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, bool):
            return str(int(v))
        if isinstance(v, float):
            return _fmt(v)
        return str(v)

    lines = [COMPARE_CSV_HEADER]
    for r in rows:
        lines.append(",".join(cell(r[k]) for k in
                              ("method", "beta", "mu", "seed", "best_objective",
                               "final_objective", "final_eta", "max_eta",
                               "hit_zero_eta", "diverged", "steps_run")))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class ScheduleSearchConfig:
    """Offline schedule optimization over a configured experiment."""

    experiment: ExperimentConfig
    hyper_steps: int = 500
    hyper_lr: float = 0.02

    def to_dict(self) -> dict:
        return {"experiment": self.experiment.to_dict(),
                "hyper_steps": self.hyper_steps, "hyper_lr": self.hyper_lr}


def parse_schedule_search_config(data: dict) -> ScheduleSearchConfig:
    errors: list[str] = []
    sec = _Section(data, "oracle", errors)
    exp_raw = sec.take("experiment", "dict")
    hyper_steps = sec.take("hyper_steps", "int", default=500, low=1)
    hyper_lr = sec.take("hyper_lr", "float", default=0.02)
    sec.finish()
    if hyper_lr is not None and hyper_lr <= 0:
        errors.append("oracle.hyper_lr: must be positive")
    experiment = None
    if exp_raw is not None:
        try:
            experiment = parse_experiment_config(exp_raw)
        except ConfigError as err:
            errors.extend("experiment " + p for p in err.problems)
    if errors:
        raise ConfigError(errors)
    return ScheduleSearchConfig(experiment, hyper_steps, hyper_lr)


def run_schedule_search(ocfg: ScheduleSearchConfig) -> dict:
    """Optimize the whole schedule offline and evaluate the result.

    Starts from the constant schedule at the configured eta0, runs projected
    hypergradient descent (fresh mini-batches per outer iteration, the same
    weight init throughout), then scores a final trajectory on the optimized
    schedule.
    """
    from .oracle import lrs_opt, run_trajectory  # deferred: oracle imports schedulers

    cfg = ocfg.experiment
    setup = build_experiment(cfg)
    init = np.full(cfg.horizon, cfg.scheduler.eta0)
    schedule, history = lrs_opt(setup.dynamics, setup.s0, init,
                                ocfg.hyper_steps, ocfg.hyper_lr,
                                outer=setup.val_source, sampler=setup.sampler)
    traj = run_trajectory(setup.dynamics, setup.s0, schedule,
                          sampler=setup.sampler, record_grads=False)
    w_final = traj.states[-1].w
    val_loss, val_acc = _val_metrics(setup, w_final)
    return {"schema": "schedule-search-v1", "version": version_string(),
            "config": ocfg.to_dict(), "schedule": [float(e) for e in schedule],
            "history": [float(h) for h in history],
            "final_val_loss": val_loss, "final_val_accuracy": val_acc,
            "diverged_iterations": int(np.sum(~np.isfinite(history)))}


def emit_schedule_csv(schedule, path: str) -> None:
    lines = ["t,eta"] + [f"{t},{_fmt(float(e))}" for t, e in enumerate(schedule)]
    Path(path).write_text("\n".join(lines) + "\n")


def emit_history_csv(history, path: str) -> None:
    lines = ["iteration,objective"] + [f"{k},{_fmt(float(v))}" for k, v in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n")
