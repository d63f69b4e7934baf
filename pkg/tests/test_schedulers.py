import numpy as np
import pytest

from hyperlr.data import BatchSampler, RngStream, full_batch, make_blobs
from hyperlr.dynamics import (DivergenceError, Tangent, sgd_dynamics,
                              sgdm_dynamics)
from hyperlr.problems import MlpSpec, mlp_objective, quadratic_objective
from hyperlr.schedulers import (ValGradSource, constant_schedule,
                                exponential_schedule, hd_delta, hyper_update,
                                init_scheduler, marthe_delta, marthe_step,
                                marthe_tangent_update, rtho_delta_direct)


def quad1d():
    obj = quadratic_objective(np.array([1.0]))
    dyn = sgd_dynamics(obj)
    s0 = dyn.init_state(np.array([3.0]))
    return obj, dyn, s0


def test_init_scheduler_zeroes_tangent_and_validates():
    _, dyn, s0 = quad1d()
    sched = init_scheduler(0.1, 0.01, 0.5, s0)
    assert sched.eta == 0.1 and sched.beta == 0.01 and sched.mu == 0.5
    assert sched.z.is_zero() and sched.step == 0 and sched.last_delta == 0.0
    for bad in [(-0.1, 0.01, 0.5), (0.1, -1.0, 0.5), (0.1, 0.01, 1.5), (0.1, 0.01, -0.2)]:
        with pytest.raises(ValueError):
            init_scheduler(*bad, s0)


def test_hyper_update_values_and_clamp():
    assert abs(hyper_update(0.1, -0.9, 0.01) - 0.109) < 1e-15
    assert hyper_update(0.1, 2.0, 0.1) == 0.0
    assert hyper_update(0.05, 0.0, 10.0) == 0.05  # bitwise pass-through
    assert hyper_update(0.0, 1.0, 1.0) == 0.0


def test_marthe_delta_checks_shape():
    z = Tangent(np.zeros(3), {})
    with pytest.raises(ValueError):
        marthe_delta(z, np.zeros(4))
    assert marthe_delta(Tangent(np.array([1.0, 2.0]), {}), np.array([3.0, -1.0])) == 1.0


def test_first_step_passes_eta_through_unchanged():
    _, dyn, s0 = quad1d()
    sched = init_scheduler(0.1, 5.0, 0.9, s0)  # hostile beta, still inert at t=0
    source = ValGradSource(dyn.objective)
    sched1, s1 = marthe_step(sched, dyn, s0, None, source)
    assert sched1.eta == 0.1  # bitwise: delta_0 = 0
    assert sched1.last_delta == 0.0 and sched1.step == 1
    assert s1.w[0] == 3.0 - 0.1 * 3.0


def test_second_step_matches_hand_arithmetic():
    _, dyn, s0 = quad1d()
    sched = init_scheduler(0.1, 0.01, 1.0, s0)
    source = ValGradSource(dyn.objective)
    sched1, s1 = marthe_step(sched, dyn, s0, None, source)
    # Z_1 = B_0 = -g(w_0) = -3; grad E(w_1) = w_1 = 2.7
    assert sched1.z.w[0] == -3.0
    sched2, s2 = marthe_step(sched1, dyn, s1, None, source)
    assert sched2.last_delta == pytest.approx(-8.1, rel=1e-14)
    assert sched2.eta == pytest.approx(0.1 + 0.01 * 8.1, rel=1e-14)


def test_mu_zero_tangent_is_exactly_lr_column():
    obj, dyn, s0 = quad1d()
    z = Tangent(np.array([4.2]), {})
    out = marthe_tangent_update(z, 0.0, dyn, s0, 0.1)
    col = dyn.lr_col(s0, 0.1)
    assert np.array_equal(out.w, col.w)


def test_mu_one_tangent_is_jvp_plus_column():
    obj = quadratic_objective(np.array([2.0, 0.5]))
    dyn = sgdm_dynamics(obj, rho=0.8)
    s = dyn.init_state(np.array([1.0, -1.0]))
    s = dyn.step(s, 0.05)
    z = Tangent(np.array([0.3, -0.7]), {"v": np.array([0.1, 0.2])})
    out = marthe_tangent_update(z, 1.0, dyn, s, 0.05)
    want = dyn.jvp(s, 0.05, None, z) + dyn.lr_col(s, 0.05)
    assert np.array_equal(out.w, want.w)
    assert np.array_equal(out.buffers["v"], want.buffers["v"])


def test_hd_delta_equals_mu_zero_scheduler_delta():
    obj, dyn, s0 = quad1d()
    source = ValGradSource(obj)
    sched = init_scheduler(0.1, 0.01, 0.0, s0)
    sched1, s1 = marthe_step(sched, dyn, s0, None, source)
    sched2, _ = marthe_step(sched1, dyn, s1, None, source)
    direct = hd_delta(dyn, s0, sched1.eta, None, obj.grad(s1.w))
    assert direct == sched2.last_delta


def test_rtho_direct_matches_online_mu_one():
    obj = quadratic_objective(np.array([1.0, 3.0, 0.2]))
    dyn = sgdm_dynamics(obj, rho=0.6)
    s = dyn.init_state(np.array([2.0, -1.0, 0.5]))
    source = ValGradSource(obj)
    sched = init_scheduler(0.08, 1e-3, 1.0, s)
    states, etas = [], []
    for _ in range(25):
        states.append(s)
        sched, s = marthe_step(sched, dyn, s, None, source)
        etas.append(sched.eta)
    val_grad = obj.grad(s.w)
    online = marthe_delta(sched.z, val_grad)
    direct = rtho_delta_direct(dyn, states, etas, None, val_grad)
    assert direct == pytest.approx(online, rel=1e-12, abs=1e-15)


def test_rtho_direct_edge_cases():
    obj, dyn, s0 = quad1d()
    assert rtho_delta_direct(dyn, [], [], None, np.array([1.0])) == 0.0
    with pytest.raises(ValueError):
        rtho_delta_direct(dyn, [s0], [0.1, 0.2], None, np.array([1.0]))


def test_marthe_step_raises_on_state_blowup():
    obj, dyn, s0 = quad1d()
    source = ValGradSource(obj)
    sched = init_scheduler(3.0, 0.0, 0.0, s0)  # |1 - eta| = 2: doubles each step
    s = s0
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as info:
            for _ in range(3000):
                sched, s = marthe_step(sched, dyn, s, None, source)
    err = info.value
    assert err.step == err.last_finite_step + 1
    assert err.step > 100  # took many doublings to overflow


def test_marthe_step_raises_on_nonfinite_delta():
    obj, dyn, s0 = quad1d()
    source = ValGradSource(obj)
    sched = init_scheduler(0.1, 0.01, 0.0, s0)
    sched.z = Tangent(np.array([np.inf]), {})
    with pytest.raises(DivergenceError):
        marthe_step(sched, dyn, s0, None, source)


def test_val_grad_source_fixed_vs_sampled():
    spec = MlpSpec((2, 6, 2))
    obj = mlp_objective(spec, task="validation")
    ds = make_blobs(30, 2, 2, 0.4, RngStream(31, "d"))
    batch = full_batch(ds)
    w = mlp_objective(spec).init_weights(RngStream(31, "i"))

    fixed = ValGradSource(obj, batch=batch)
    assert np.array_equal(fixed.grad(w), fixed.grad(w))
    assert fixed.value(w) == obj.loss(w, batch)
    assert 0.0 <= fixed.accuracy(w) <= 1.0

    sampler = BatchSampler(ds, 5, RngStream(31, "vb"))
    fresh = ValGradSource(obj, batch=batch, sampler=sampler)
    g1, g2 = fresh.grad(w), fresh.grad(w)
    assert not np.array_equal(g1, g2)  # consecutive mini-batches differ
    assert fresh.value(w) == fixed.value(w)  # metrics stay on the fixed batch


def test_val_grad_source_analytic_accuracy_is_nan():
    obj, _, _ = quad1d()
    src = ValGradSource(obj)
    assert np.isnan(src.accuracy(np.array([1.0])))


def test_schedule_factories():
    sched = exponential_schedule(0.5, 0.9)
    assert sched(0) == 0.5
    assert sched(3) == pytest.approx(0.5 * 0.9 ** 3, rel=1e-15)
    const = constant_schedule(0.25)
    assert const(0) == const(1000) == 0.25
    with pytest.raises(ValueError):
        exponential_schedule(0.5, 0.0)
    with pytest.raises(ValueError):
        exponential_schedule(0.5, 1.5)
    with pytest.raises(ValueError):
        exponential_schedule(-1.0, 0.9)
    with pytest.raises(ValueError):
        constant_schedule(-0.1)
