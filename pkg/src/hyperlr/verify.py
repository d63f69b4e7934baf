"""Self-contained verification of every exact derivative in the package.

Each check compares an analytic quantity against an independent reference:
central finite differences, the other accumulation mode, a special-case
identity, or a value derived by hand. Checks are deterministic (fixed seeds)
and sized to run in seconds; run_all prints one line per check and reports
overall success.
"""
from __future__ import annotations

import numpy as np

from .data import Batch, RngStream
from .dynamics import (Adam, Dynamics, OptimizerState, Tangent, adam_dynamics,
                       clipped_dynamics, sgd_dynamics, sgdm_dynamics)
from .oracle import (Trajectory, g_prime_k, hypergrad_fd,
                     hypergrad_forward_full, hypergrad_reverse, lrs_opt,
                     run_trajectory, s_k_mu_direct)
from .problems import (MlpSpec, beale_objective, bukin_smoothed_objective,
                       fd_grad_oracle, fd_hvp_oracle, mlp_objective,
                       quadratic_objective)
from .schedulers import (ValGradSource, exponential_schedule, hd_delta,
                         hyper_update, init_scheduler, marthe_step,
                         rtho_delta_direct)


def rel_err(a, b) -> float:
    """Max-norm relative disagreement between two arrays (or scalars)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


def _flat(t: Tangent) -> np.ndarray:
    return np.concatenate([t.w] + [t.buffers[k] for k in sorted(t.buffers)])


def random_tangent(gen: np.random.Generator, state: OptimizerState,
                   dynamics: Dynamics) -> Tangent:
    """Unit probe direction staying inside the valid state region.

    Adam's second moment must remain nonnegative, so its block is scaled by
    the buffer itself (a relative perturbation); other blocks are Gaussian.
    """
    buffers = {}
    for k, b in state.buffers.items():
        d = gen.standard_normal(b.size)
        if k == "v" and isinstance(dynamics, Adam):
            d = b * d
        buffers[k] = d
    z = Tangent(gen.standard_normal(state.w.size), buffers)
    n = z.norm()
    return z * (1.0 / n) if n > 0 else z

def _fd_state_jacobian_dir(dynamics, s, eta, batch, z, h=1e-6):
    sp = dynamics.step(s.perturbed(z, h), eta, batch)
    sm = dynamics.step(s.perturbed(z, -h), eta, batch)
    return np.concatenate([(sp.w - sm.w)]
                          + [(sp.buffers[k] - sm.buffers[k]) for k in sorted(s.buffers)]) / (2 * h)


def _fd_lr_col(dynamics, s, eta, batch, h=1e-6):
    sp = dynamics.step(s, eta + h, batch)
    sm = dynamics.step(s, eta - h, batch)
    return np.concatenate([(sp.w - sm.w)]
                          + [(sp.buffers[k] - sm.buffers[k]) for k in sorted(s.buffers)]) / (2 * h)


def _small_mlp(gen):
    spec = MlpSpec((2, 16, 2), activation="tanh", weight_decay=0.01)
    obj = mlp_objective(spec, "train")
    x = gen.standard_normal((8, 2))
    y = gen.integers(0, 2, 8)
    return obj, Batch(x, y, np.arange(8))


def _test_objectives(gen):
    obj, batch = _small_mlp(gen)
    return [("quadratic", quadratic_objective(gen.uniform(0.5, 2.0, 6)), None),
            ("beale", beale_objective(), None),
            ("bukin", bukin_smoothed_objective(1e-3), None),
            ("mlp", obj, batch)]


def _dynamics_under_test(gen):
    quad = quadratic_objective(gen.uniform(0.5, 2.0, 5))
    mlp, batch = _small_mlp(gen)
    out = []
    for factory in (sgd_dynamics,
                    lambda o: sgdm_dynamics(o, 0.9),
                    lambda o: adam_dynamics(o, 0.9, 0.999, 1e-8)):
        out.append((factory(quad), None))
        out.append((factory(mlp), batch))
    return out


def _warm_state(dynamics, gen, batch, n_warm) -> OptimizerState:
    s = dynamics.init_state(gen.standard_normal(dynamics.objective.dim) * 0.5)
    for _ in range(n_warm):
        s = dynamics.step(s, float(gen.uniform(0.02, 0.1)), batch)
    return s


def check_grad_matches_fd():
    gen = np.random.default_rng(101)
    worst = 0.0
    for name, obj, batch in _test_objectives(gen):
        coords = None if obj.dim <= 6 else list(gen.choice(obj.dim, 20, replace=False))
        for _ in range(10):
            w = gen.uniform(-2.0, 2.0, obj.dim)
            fd = fd_grad_oracle(obj, w, batch, coords=coords)
            an = obj.grad(w, batch)
            if coords is not None:
                mask = np.zeros(obj.dim, dtype=bool)
                mask[coords] = True
                an = np.where(mask, an, 0.0)
            worst = max(worst, rel_err(an, fd))
    return worst <= 1e-6, f"max rel err {worst:.2e} (tol 1e-6)"


def check_hvp_matches_fd():
    gen = np.random.default_rng(102)
    worst = 0.0
    for name, obj, batch in _test_objectives(gen):
        for _ in range(10):
            w = gen.uniform(-2.0, 2.0, obj.dim)
            v = gen.standard_normal(obj.dim)
            worst = max(worst, rel_err(obj.hvp(w, v, batch),
                                       fd_hvp_oracle(obj, w, v, batch)))
    return worst <= 1e-6, f"max rel err {worst:.2e} (tol 1e-6)"


def check_hvp_symmetry_and_linearity():
    gen = np.random.default_rng(103)
    worst = 0.0
    for name, obj, batch in _test_objectives(gen):
        for _ in range(10):
            w = gen.uniform(-2.0, 2.0, obj.dim)
            u = gen.standard_normal(obj.dim)
            v = gen.standard_normal(obj.dim)
            a, b = float(gen.uniform(-2, 2)), float(gen.uniform(-2, 2))
            sym = abs(np.dot(u, obj.hvp(w, v, batch)) - np.dot(v, obj.hvp(w, u, batch)))
            scale = max(np.linalg.norm(obj.hvp(w, v, batch)), 1e-12)
            lin = np.max(np.abs(obj.hvp(w, a * v + b * u, batch)
                                - a * obj.hvp(w, v, batch) - b * obj.hvp(w, u, batch)))
            worst = max(worst, sym / scale, lin / scale)
    return worst <= 1e-10, f"max violation {worst:.2e} (tol 1e-10)"


def check_dynamics_jvp_matches_fd():
    gen = np.random.default_rng(104)
    worst = 0.0
    for dynamics, batch in _dynamics_under_test(gen):
        for _ in range(20):
            s = _warm_state(dynamics, gen, batch, int(gen.integers(1, 8)))
            eta = float(gen.uniform(0.01, 0.2))
            z = random_tangent(gen, s, dynamics)
            fd = _fd_state_jacobian_dir(dynamics, s, eta, batch, z)
            worst = max(worst, rel_err(_flat(dynamics.jvp(s, eta, batch, z)), fd))
    return worst <= 1e-5, f"max rel err {worst:.2e} (tol 1e-5)"


def check_dynamics_lr_col_matches_fd():
    gen = np.random.default_rng(105)
    worst = 0.0
    for dynamics, batch in _dynamics_under_test(gen):
        for _ in range(20):
            s = _warm_state(dynamics, gen, batch, int(gen.integers(1, 8)))
            eta = float(gen.uniform(0.01, 0.2))
            fd = _fd_lr_col(dynamics, s, eta, batch)
            worst = max(worst, rel_err(_flat(dynamics.lr_col(s, eta, batch)), fd))
    return worst <= 1e-5, f"max rel err {worst:.2e} (tol 1e-5)"


def check_vjp_is_jvp_transpose():
    gen = np.random.default_rng(106)
    mlp, batch = _small_mlp(gen)
    under_test = _dynamics_under_test(gen)
    under_test.append((clipped_dynamics(sgd_dynamics(mlp), 0.05), batch))
    under_test.append((clipped_dynamics(adam_dynamics(mlp), 0.05), batch))
    worst = 0.0
    for dynamics, b in under_test:
        for _ in range(20):
            s = _warm_state(dynamics, gen, b, int(gen.integers(1, 8)))
            eta = float(gen.uniform(0.01, 0.2))
            z = random_tangent(gen, s, dynamics)
            u = random_tangent(gen, s, dynamics)
            lhs = dynamics.jvp(s, eta, b, z).dot(u)
            rhs = dynamics.vjp(s, eta, b, u).dot(z)
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12))
    return worst <= 1e-12, f"max rel violation {worst:.2e} (tol 1e-12)"


def check_forward_equals_reverse():
    gen = np.random.default_rng(107)
    worst = 0.0
    quad = quadratic_objective(gen.uniform(0.5, 2.0, 10))
    mlp, batch = _small_mlp(gen)
    cases = [(sgd_dynamics(quad), None, 20), (sgdm_dynamics(quad, 0.8), None, 20),
             (adam_dynamics(quad), None, 20), (sgd_dynamics(mlp), batch, 10),
             (clipped_dynamics(sgd_dynamics(mlp), 0.02), batch, 10)]
    for dynamics, b, T in cases:
        outer = ValGradSource(dynamics.objective, batch=b)
        s0 = dynamics.init_state(gen.standard_normal(dynamics.objective.dim))
        etas = gen.uniform(0.05, 0.15, T)
        traj = run_trajectory(dynamics, s0, etas,
                              batches=None if b is None else [b] * T, outer=outer)
        worst = max(worst, rel_err(hypergrad_forward_full(dynamics, traj),
                                   hypergrad_reverse(dynamics, traj)))
    return worst <= 1e-10, f"max rel err {worst:.2e} (tol 1e-10)"


def check_hypergrad_matches_fd():
    gen = np.random.default_rng(108)
    worst = 0.0
    quad = quadratic_objective(gen.uniform(0.5, 2.0, 10))
    for dynamics in (sgd_dynamics(quad), sgdm_dynamics(quad, 0.8), sgd_dynamics(beale_objective())):
        obj = dynamics.objective
        outer = ValGradSource(obj)
        T = 15
        etas = gen.uniform(0.03, 0.1, T)
        s0 = dynamics.init_state(gen.standard_normal(obj.dim) * (0.5 if obj.dim == 2 else 1.0))
        traj = run_trajectory(dynamics, s0, etas, outer=outer)
        rev = hypergrad_reverse(dynamics, traj)
        for t in (0, T // 2, T - 1):
            fd = hypergrad_fd(dynamics, s0, etas, None, t, outer)
            worst = max(worst, rel_err(rev[t], fd))
    return worst <= 1e-5, f"max rel err {worst:.2e} (tol 1e-5)"


def check_hand_derived_instance():
    # One dimension, L = E = w^2/2, w0 = 1, schedule (0.1, 0.2):
    # w1 = 0.9, w2 = 0.72; df/deta = (-w0 (1 - eta1) E'(w2), -w1 E'(w2))
    #                              = (-0.576, -0.648).
    quad = quadratic_objective([1.0])
    dynamics = sgd_dynamics(quad)
    outer = ValGradSource(quad)
    traj = run_trajectory(dynamics, dynamics.init_state([1.0]), [0.1, 0.2], outer=outer)
    expected = np.array([-0.576, -0.648])
    err = max(rel_err(hypergrad_forward_full(dynamics, traj), expected),
              rel_err(hypergrad_reverse(dynamics, traj), expected))
    return err <= 1e-12, f"max rel err vs hand value {err:.2e} (tol 1e-12)"


def _run_marthe(dynamics, outer, eta0, beta, mu, T, record=False):
    s = dynamics.init_state(np.array([2.0, 1.0]))
    sched = init_scheduler(eta0, beta, mu, s)
    etas, deltas, states = [], [], []
    for _ in range(T):
        states.append(s)
        sched, s = marthe_step(sched, dynamics, s, None, outer)
        etas.append(sched.eta)
        deltas.append(sched.last_delta)
    return np.array(etas), np.array(deltas), states


def check_mu_zero_reduces_to_one_step():
    dynamics = sgd_dynamics(beale_objective())
    outer = ValGradSource(dynamics.objective)
    eta0, beta, T = 1e-3, 1e-6, 200
    etas_m, deltas_m, _ = _run_marthe(dynamics, outer, eta0, beta, 0.0, T)
    # Explicit one-step loop: delta from the previous update's lr column.
    s = dynamics.init_state(np.array([2.0, 1.0]))
    eta, prev = eta0, None
    etas_h, deltas_h = [], []
    for t in range(T):
        vg = outer.grad(s.w)
        delta = 0.0 if prev is None else hd_delta(dynamics, prev[0], prev[1], None, vg)
        eta = hyper_update(eta, delta, beta)
        prev = (s, eta)
        s = dynamics.step(s, eta, None)
        etas_h.append(eta)
        deltas_h.append(delta)
    same = (np.array_equal(etas_m, np.array(etas_h))
            and np.array_equal(deltas_m, np.array(deltas_h)))
    return same, f"{T} steps, bitwise equality: {same}"


def check_mu_one_matches_stored_prefix():
    dynamics = sgd_dynamics(beale_objective())
    outer = ValGradSource(dynamics.objective)
    s = dynamics.init_state(np.array([2.0, 1.0]))
    sched = init_scheduler(1e-3, 1e-6, 1.0, s)
    hist_states, hist_etas = [], []
    worst = 0.0
    for t in range(60):
        vg = outer.grad(s.w)
        direct = rtho_delta_direct(dynamics, hist_states, hist_etas, None, vg)
        sched, s_new = marthe_step(sched, dynamics, s, None, outer)
        worst = max(worst, abs(sched.last_delta - direct) / max(1.0, abs(direct)))
        hist_states.append(s)
        hist_etas.append(sched.eta)
        s = s_new
    return worst <= 1e-12, f"max rel err {worst:.2e} over 60 steps (tol 1e-12)"


def check_tangent_matches_discounted_sum():
    gen = np.random.default_rng(109)
    quad = quadratic_objective(gen.uniform(0.5, 2.0, 5))
    worst = 0.0
    for dynamics in (sgd_dynamics(quad), sgdm_dynamics(quad, 0.7)):
        outer = ValGradSource(quad)
        for mu in (0.0, 0.3, 0.9, 1.0):
            s = dynamics.init_state(gen.standard_normal(5))
            sched = init_scheduler(0.05, 1e-4, mu, s)
            states, etas = [s], []
            for K in range(1, 13):
                sched, s = marthe_step(sched, dynamics, states[-1], None, outer)
                states.append(s)
                etas.append(sched.eta)
                online = sched.z.dot_w(outer.grad(s.w))
                traj = Trajectory(states=list(states), etas=np.array(etas))
                direct = s_k_mu_direct(dynamics, traj, mu, K, outer)
                worst = max(worst, abs(online - direct) / max(1.0, abs(direct)))
    return worst <= 1e-10, f"max rel err {worst:.2e} (tol 1e-10)"


def check_short_horizon_edges():
    gen = np.random.default_rng(110)
    quad = quadratic_objective(gen.uniform(0.5, 2.0, 5))
    dynamics = sgdm_dynamics(quad, 0.6)
    outer = ValGradSource(quad)
    s0 = dynamics.init_state(gen.standard_normal(5))
    etas = gen.uniform(0.03, 0.1, 10)
    # K = 1 is the one-step hypergradient.
    one = g_prime_k(dynamics, s0, etas[:1], outer)
    s1 = dynamics.step(s0, float(etas[0]), None)
    hd = hd_delta(dynamics, s0, float(etas[0]), None, outer.grad(s1.w))
    # K = T from the start is the first reverse-mode coordinate.
    traj = run_trajectory(dynamics, s0, etas, outer=outer)
    full = g_prime_k(dynamics, s0, etas, outer)
    rev0 = hypergrad_reverse(dynamics, traj)[0]
    worst = max(abs(one - hd) / max(1.0, abs(hd)), abs(full - rev0) / max(1.0, abs(rev0)))
    return worst <= 1e-10, f"max rel err {worst:.2e} (tol 1e-10)"


def check_scheduler_scalar_ops():
    ok = (abs(hyper_update(0.1, -0.9, 0.01) - 0.109) < 1e-15
          and hyper_update(0.1, 2.0, 0.1) == 0.0
          and hyper_update(0.0, -1.0, 0.0) == 0.0)
    sched = exponential_schedule(0.1, 0.9)
    ok = ok and abs(sched(0) - 0.1) < 1e-15 and abs(sched(2) - 0.081) < 1e-15
    return ok, "hyper_update clamp and exponential decay values"


def check_schedule_descent_on_quadratic():
    quad = quadratic_objective([1.0])
    dynamics = sgd_dynamics(quad)
    outer = ValGradSource(quad)
    s0 = dynamics.init_state([1.0])
    # f(eta) = 0.5 (1 - eta)^2 over one step: optimum eta = 1, value 0.
    eta, history = lrs_opt(dynamics, s0, [0.5], hyper_steps=200, hyper_lr=0.3,
                           outer=outer)
    monotone = bool(np.all(np.diff(history) <= 1e-15))
    ok = abs(eta[0] - 1.0) <= 1e-8 and history[-1] <= 1e-12 and monotone
    return ok, f"eta -> {eta[0]:.10f}, final f {history[-1]:.2e}, monotone {monotone}"


CHECKS = [
    ("gradients match finite differences", check_grad_matches_fd),
    ("hessian-vector products match finite differences", check_hvp_matches_fd),
    ("hessian-vector products are symmetric and linear", check_hvp_symmetry_and_linearity),
    ("step jacobian-vector products match finite differences", check_dynamics_jvp_matches_fd),
    ("learning-rate columns match finite differences", check_dynamics_lr_col_matches_fd),
    ("transpose products satisfy the adjoint identity", check_vjp_is_jvp_transpose),
    ("forward and reverse hypergradients agree", check_forward_equals_reverse),
    ("hypergradients match finite differences", check_hypergrad_matches_fd),
    ("hand-derived two-step instance is exact", check_hand_derived_instance),
    ("mu = 0 scheduler equals the one-step scheduler bitwise", check_mu_zero_reduces_to_one_step),
    ("mu = 1 scheduler matches stored-prefix recomputation", check_mu_one_matches_stored_prefix),
    ("online tangent equals the discounted sum of short-horizon terms", check_tangent_matches_discounted_sum),
    ("short-horizon derivative edge cases", check_short_horizon_edges),
    ("scheduler scalar updates", check_scheduler_scalar_ops),
    ("offline schedule descent solves a one-step quadratic", check_schedule_descent_on_quadratic),
]


def run_all(quiet: bool = False) -> tuple[bool, list]:
    """Run every check; returns (all passed, [(name, ok, detail), ...])."""
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
        if not quiet:
            print(f"[{'ok' if ok else 'FAIL'}] {name}: {detail}")
    all_ok = all(ok for _, ok, _ in results)
    if not quiet:
        n_bad = sum(1 for _, ok, _ in results if not ok)
        print("all checks passed" if all_ok else f"{n_bad} of {len(results)} checks failed")
    return all_ok, results
