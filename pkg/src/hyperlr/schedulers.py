"""Online learning-rate adaptation driven by hypergradient estimates.

One scheduler step, given the incoming tangent Z_t and the outer-objective
gradient at the current weights, is:

  delta_t = < Z_t, grad E(w_t) >          (hypergradient estimate)
  eta_t   = max(eta_{t-1} - beta * delta_t, 0)
  Z_{t+1} = mu * A_t Z_t + B_t            (A, B evaluated at the new eta_t)
  w_{t+1} = Phi_t(w_t, eta_t)

with Z_0 = 0, so delta_0 = 0 and eta_0 passes through unchanged. mu = 0
discounts all history (the one-step scheduler, hd); mu = 1 keeps the full
tangent recursion (rtho); intermediate mu trades the two off.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Batch, BatchSampler
from .dynamics import Dynamics, DivergenceError, OptimizerState, Tangent
from .problems import Objective


@dataclass
class SchedulerState:
    """Carries the adapted learning rate and the tangent between steps."""

    eta: float
    z: Tangent
    beta: float
    mu: float
    step: int = 0
    last_delta: float = 0.0


def init_scheduler(eta0: float, beta: float, mu: float,
                   state: OptimizerState) -> SchedulerState:
    if eta0 < 0:
        raise ValueError("initial learning rate must be nonnegative")
    if beta < 0:
        raise ValueError("hyper learning rate beta must be nonnegative")
    if not 0.0 <= mu <= 1.0:
        raise ValueError("hyper momentum mu must lie in [0, 1]")
    return SchedulerState(float(eta0), Tangent.zeros_like(state), float(beta), float(mu))


class ValGradSource:
    """Supplies the outer objective E: its gradient, value, and accuracy.

    With a sampler, each grad call consumes a fresh validation mini-batch;
    otherwise the fixed batch (or none, for analytic objectives) is used.
    value/accuracy always use the fixed batch so reported metrics are stable.
    """

    def __init__(self, objective: Objective, batch: Batch | None = None,
                 sampler: BatchSampler | None = None):
        self.objective = objective
        self.batch = batch
        self.sampler = sampler

    def grad(self, w: np.ndarray) -> np.ndarray:
        if self.sampler is not None:
            return self.objective.grad(w, self.sampler.next_batch())
        return self.objective.grad(w, self.batch)

    def value(self, w: np.ndarray) -> float:
        return self.objective.loss(w, self.batch)

    def accuracy(self, w: np.ndarray) -> float:
        if self.batch is None or not hasattr(self.objective, "accuracy"):
            return float("nan")
        return self.objective.accuracy(w, self.batch)


def marthe_delta(z: Tangent, val_grad: np.ndarray) -> float:
    """Hypergradient estimate: weight block of Z dotted with grad E."""
    val_grad = np.asarray(val_grad, dtype=np.float64)
    if val_grad.shape != z.w.shape:
        raise ValueError(f"val_grad shape {val_grad.shape} does not match tangent {z.w.shape}")
    return z.dot_w(val_grad)


def hyper_update(eta: float, delta: float, beta: float) -> float:
    """Projected hypergradient descent step on the learning rate."""
    return max(eta - beta * delta, 0.0)


def marthe_tangent_update(z: Tangent, mu: float, dynamics: Dynamics,
                          s: OptimizerState, eta: float,
                          batch: Batch | None = None,
                          g: np.ndarray | None = None) -> Tangent:
    """Z <- mu * A(s, eta) Z + B(s, eta).

    mu = 0 skips the Jacobian product entirely, so that path performs exactly
    the float operations of the one-step scheduler.
    """
    col = dynamics.lr_col(s, eta, batch, g=g)
    if mu == 0.0:
        return col
    return mu * dynamics.jvp(s, eta, batch, z, g=g) + col


def marthe_step(sched: SchedulerState, dynamics: Dynamics, s: OptimizerState,
                batch: Batch | None, val_grad_source: ValGradSource,
                g: np.ndarray | None = None) -> tuple[SchedulerState, OptimizerState]:
    """One full scheduler + optimizer step; raises DivergenceError on blowup."""
    delta = marthe_delta(sched.z, val_grad_source.grad(s.w))
    if not np.isfinite(delta):
        raise DivergenceError("hypergradient estimate is not finite",
                              step=sched.step, last_finite_step=sched.step - 1)
    eta = hyper_update(sched.eta, delta, sched.beta)
    if g is None:
        g = dynamics.objective.grad(s.w, batch)
    z_new = marthe_tangent_update(sched.z, sched.mu, dynamics, s, eta, batch, g=g)
    s_new = dynamics.step(s, eta, batch, g=g)
    if not s_new.is_finite():
        raise DivergenceError("optimizer state is not finite",
                              step=sched.step, last_finite_step=sched.step - 1)
    return (SchedulerState(eta, z_new, sched.beta, sched.mu, sched.step + 1, delta),
            s_new)


def hd_delta(dynamics: Dynamics, s_prev: OptimizerState, eta_prev: float,
             batch_prev: Batch | None, val_grad: np.ndarray) -> float:
    """One-step hypergradient: derivative column of the previous update,
    dotted with the current outer gradient. Equals the mu = 0 tangent path."""
    col = dynamics.lr_col(s_prev, eta_prev, batch_prev)
    return marthe_delta(col, val_grad)


def rtho_delta_direct(dynamics: Dynamics, states: list[OptimizerState],
                      etas, batches, val_grad: np.ndarray) -> float:
    """Full-horizon hypergradient recomputed from a stored prefix.

    Propagates the tangent recursion Z <- A Z + B over the recorded steps and
    dots it with the outer gradient; the online mu = 1 scheduler must agree.
    """
    if not states:
        return 0.0
    if batches is None:
        batches = [None] * len(states)
    if not (len(states) == len(etas) == len(batches)):
        raise ValueError("states, etas, and batches must have equal length")
    z = Tangent.zeros_like(states[0])
    for s, eta, batch in zip(states, etas, batches):
        z = dynamics.jvp(s, eta, batch, z) + dynamics.lr_col(s, eta, batch)
    return marthe_delta(z, val_grad)


def exponential_schedule(eta0: float, gamma: float):
    """t -> eta0 * gamma ** t."""
    if eta0 < 0:
        raise ValueError("eta0 must be nonnegative")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("decay factor gamma must lie in (0, 1]")

    def schedule(t: int) -> float:
        return eta0 * gamma ** t

    return schedule


def constant_schedule(eta0: float):
    """t -> eta0."""
    if eta0 < 0:
        raise ValueError("eta0 must be nonnegative")

    def schedule(t: int) -> float:
        return eta0

    return schedule
