"""Exact hypergradients of the final outer objective with respect to the
per-step learning-rate schedule, plus the offline schedule optimizer.

For the unrolled process s_{t+1} = Phi_t(s_t, eta_t), t = 0..T-1, the
derivative of f(eta) = E(w_T) has one entry per schedule position:

  df/deta_t = < B_t, A_{T-1}^T ... A_{t+1}^T u_T >,   u_T = (grad E(w_T), 0)

where A_t is the state Jacobian of Phi_t and B_t its learning-rate column.
Forward mode carries all T tangent columns through the trajectory (cost grows
with T, used as the gold standard at small sizes); reverse mode carries one
adjoint backwards and costs a fixed small multiple of the forward run.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Batch, BatchSampler, Dataset
from .dynamics import Dynamics, DivergenceError, OptimizerState, Tangent
from .schedulers import ValGradSource


@dataclass
class Trajectory:
    """A recorded optimization run: states s_0..s_T and per-step inputs.

    Sampler-drawn batches are stored as row-index sets against the dataset
    (materialized on demand); explicitly provided batches are kept as-is.
    grads optionally caches the mini-batch gradient at each visited state so
    replay passes do not recompute it.
    """

    states: list[OptimizerState]
    etas: np.ndarray
    batch_indices: list | None = None
    dataset: Dataset | None = None
    frozen_batches: list | None = None
    grads: list | None = None
    final_val_grad: np.ndarray | None = None
    final_value: float | None = None

    @property
    def horizon(self) -> int:
        return len(self.etas)

    def batch(self, t: int) -> Batch | None:
        if self.frozen_batches is not None:
            return self.frozen_batches[t]
        if self.batch_indices is None or self.batch_indices[t] is None:
            return None
        idx = self.batch_indices[t]
        return Batch(self.dataset.features[idx], self.dataset.labels[idx], idx)

    def batch_list(self) -> list:
        return [self.batch(t) for t in range(self.horizon)]

    def grad(self, t: int) -> np.ndarray | None:
        return None if self.grads is None else self.grads[t]


def run_trajectory(dynamics: Dynamics, s0: OptimizerState, schedule,
                   sampler: BatchSampler | None = None,
                   batches: list | None = None,
                   outer: ValGradSource | None = None,
                   record_grads: bool = True) -> Trajectory:
    """Roll the dynamics along a fixed schedule, recording every state.

    Exactly one batch source may be given: a sampler (draws fresh batches) or
    an explicit batch list (replays frozen ones). With neither, every step
    sees batch None (analytic objectives). Raises DivergenceError the moment
    a state goes non-finite, reporting the last finite step index.
    """
    etas = np.asarray(schedule, dtype=np.float64).ravel()
    if sampler is not None and batches is not None:
        raise ValueError("pass a sampler or explicit batches, not both")
    if batches is not None and len(batches) != etas.size:
        raise ValueError("batch list length must match the schedule")
    states = [s0.copy()]
    indices: list | None = [] if batches is None else None
    grads: list | None = [] if record_grads else None
    s = states[0]
    # Let blowups overflow silently; the finiteness check below reports them.
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t, eta in enumerate(etas):
            if batches is not None:
                batch = batches[t]
            elif sampler is not None:
                batch = sampler.next_batch()
                indices.append(batch.indices)
            else:
                batch = None
                indices.append(None)
            g = dynamics.objective.grad(s.w, batch)
            s = dynamics.step(s, float(eta), batch, g=g)
            if not s.is_finite():
                raise DivergenceError(f"state became non-finite at step {t}",
                                      step=t, last_finite_step=t)
            if record_grads:
                grads.append(g)
            states.append(s)
    traj = Trajectory(states, etas,
                      batch_indices=indices,
                      dataset=sampler.dataset if sampler is not None else None,
                      frozen_batches=list(batches) if batches is not None else None,
                      grads=grads)
    if outer is not None:
        traj.final_val_grad = outer.grad(s.w)
        traj.final_value = outer.value(s.w)
    return traj


def _resolve_val_grad(traj: Trajectory, val_grad) -> np.ndarray:
    if val_grad is None:
        val_grad = traj.final_val_grad
    if val_grad is None:
        raise ValueError("no outer gradient: pass val_grad or record the "
                         "trajectory with an outer objective")
    return np.asarray(val_grad, dtype=np.float64)


def hypergrad_forward_full(dynamics: Dynamics, traj: Trajectory,
                           val_grad=None,
                           max_tangent_values: int = 1_000_000) -> np.ndarray:
    """Forward-mode hypergradient carrying every schedule column exactly.

    Maintains T tangent columns; column j stays identically zero until step j
    injects the learning-rate derivative, and that sparsity is asserted at
    every step. Refuses horizons where state_dim * T exceeds
    max_tangent_values; use hypergrad_reverse there.
    """
    val_grad = _resolve_val_grad(traj, val_grad)
    T = traj.horizon
    d_state = traj.states[0].state_dim
    if d_state * T > max_tangent_values:
        raise ValueError(
            f"forward mode would carry {d_state * T} tangent values "
            f"(> {max_tangent_values}); use hypergrad_reverse for this size")
    cols = [Tangent.zeros_like(traj.states[0]) for _ in range(T)]
    for t in range(T):
        s, eta, batch = traj.states[t], float(traj.etas[t]), traj.batch(t)
        g = traj.grad(t)
        if g is None:
            g = dynamics.objective.grad(s.w, batch)
        cols = [dynamics.jvp(s, eta, batch, z, g=g) for z in cols]
        cols[t] = cols[t] + dynamics.lr_col(s, eta, batch, g=g)
        for j in range(t + 1, T):
            assert cols[j].is_zero(), f"column {j} nonzero after step {t}"
    return np.array([z.dot_w(val_grad) for z in cols])


def hypergrad_reverse(dynamics: Dynamics, traj: Trajectory,
                      val_grad=None) -> np.ndarray:
    """Reverse-mode hypergradient: one adjoint sweep back along the trajectory.

    Memory is the recorded trajectory itself; cost per step is one transpose
    Jacobian product plus one learning-rate column.
    """
    val_grad = _resolve_val_grad(traj, val_grad)
    T = traj.horizon
    u = Tangent.zeros_like(traj.states[-1])
    u.w = val_grad.copy()
    out = np.empty(T)
    for t in range(T - 1, -1, -1):
        s, eta, batch = traj.states[t], float(traj.etas[t]), traj.batch(t)
        g = traj.grad(t)
        out[t] = dynamics.lr_col(s, eta, batch, g=g).dot(u)
        u = dynamics.vjp(s, eta, batch, u, g=g)
    return out


def hypergrad_fd(dynamics: Dynamics, s0: OptimizerState, schedule,
                 batches: list | None, t: int, outer: ValGradSource,
                 h: float = 1e-5) -> float:
    """Finite-difference check of one hypergradient coordinate.

    Replays the trajectory twice with eta_t displaced by +-h on frozen
    batches. If eta_t - h would cross zero, falls back to a one-sided
    difference (with a warning) so the probe stays in the feasible region.
    """
    etas = np.asarray(schedule, dtype=np.float64).ravel()
    if not 0 <= t < etas.size:
        raise IndexError(f"schedule position {t} out of range [0, {etas.size})")

    def value_at(sched) -> float:
        traj = run_trajectory(dynamics, s0, sched, batches=batches,
                              record_grads=False)
        return outer.value(traj.states[-1].w)

    plus = etas.copy()
    plus[t] += h
    if etas[t] - h < 0.0:
        warnings.warn(f"eta_{t} = {etas[t]:g} is within h of the boundary; "
                      "using a one-sided difference", stacklevel=2)
        return (value_at(plus) - value_at(etas)) / h
    minus = etas.copy()
    minus[t] -= h
    return (value_at(plus) - value_at(minus)) / (2.0 * h)


def g_prime_k(dynamics: Dynamics, u0: OptimizerState, xis,
              outer: ValGradSource, batches: list | None = None) -> float:
    """Derivative of E(u_K) with respect to the first learning rate xi_0 of a
    K-step run started at u0 (the shorter-horizon analogue of one reverse
    sweep). K = 1 reduces to the one-step hypergradient."""
    xis = np.asarray(xis, dtype=np.float64).ravel()
    K = xis.size
    if K < 1:
        raise ValueError("need at least one step")
    traj = run_trajectory(dynamics, u0, xis, batches=batches)
    u = Tangent.zeros_like(traj.states[-1])
    u.w = outer.grad(traj.states[-1].w)
    for i in range(K - 1, 0, -1):
        u = dynamics.vjp(traj.states[i], float(xis[i]), traj.batch(i), u,
                         g=traj.grad(i))
    col = dynamics.lr_col(traj.states[0], float(xis[0]), traj.batch(0),
                          g=traj.grad(0))
    return col.dot(u)


def s_k_mu_direct(dynamics: Dynamics, traj: Trajectory, mu: float, K: int,
                  outer: ValGradSource) -> float:
    """Discounted sum of shorter-horizon derivatives over a trajectory prefix:

      S_{K,mu} = sum_{i=0}^{K-1} mu^(K-1-i) * d E(u_K) / d xi_0 |_(start u_i)

    evaluated at the learning rates the trajectory actually used. Equals the
    tangent Z_K of the online scheduler with hyper-momentum mu, dotted with
    grad E(u_K); mu = 0 keeps only the last term, mu = 1 the full sum.
    """
    if not 0 <= K <= traj.horizon:
        raise ValueError(f"prefix length {K} out of range [0, {traj.horizon}]")
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    batches = traj.batch_list()
    total = 0.0
    for i in range(K):
        term = g_prime_k(dynamics, traj.states[i], traj.etas[i:K], outer,
                         batches=batches[i:K])
        total += mu ** (K - 1 - i) * term
    return total


def lrs_opt(dynamics: Dynamics, s0: OptimizerState, schedule_init,
            hyper_steps: int, hyper_lr: float, outer: ValGradSource,
            sampler: BatchSampler | None = None, batches: list | None = None,
            callback=None) -> tuple[np.ndarray, np.ndarray]:
    """Offline projected gradient descent on the whole schedule.

    Each outer iteration re-runs the trajectory from the same initial state
    (fresh mini-batches if a sampler is given), takes the exact reverse-mode
    hypergradient, and updates eta <- max(eta - lr * grad, 0). A divergent
    inner run contributes no update; the hyper step size is halved instead.
    Returns the final schedule and the per-iteration outer objective history
    (inf marks the diverged iterations).
    """
    if hyper_steps < 1:
        raise ValueError("hyper_steps must be positive")
    if hyper_lr <= 0:
        raise ValueError("hyper_lr must be positive")
    eta = np.maximum(np.asarray(schedule_init, dtype=np.float64).ravel(), 0.0)
    lr = float(hyper_lr)
    history = np.empty(hyper_steps)
    for k in range(hyper_steps):
        try:
            traj = run_trajectory(dynamics, s0, eta, sampler=sampler,
                                  batches=batches, outer=outer)
        except DivergenceError:
            history[k] = np.inf
            lr *= 0.5
            continue
        history[k] = traj.final_value
        grad = hypergrad_reverse(dynamics, traj)
        if not np.all(np.isfinite(grad)):
            lr *= 0.5
            continue
        eta = np.maximum(eta - lr * grad, 0.0)
        if callback is not None:
            callback(k, eta, traj)
    return eta, history
