import numpy as np
import pytest

import oracles
from pnpinc import (
    DctSoftThreshold,
    Loss,
    ScaledSmoothing,
    ScheduleExhaustedError,
    TvChambolle,
    UnsupportedCombinationError,
    build_fidelity,
    full_loss,
    make_conv_model,
    make_gaussian_model,
    minibatch_prox,
    prox_full,
)
from pnpinc.solvers import (
    EpochShuffle,
    FixedSchedule,
    IidUniform,
    Problem,
    SolverConfig,
    SolverState,
    drs_step,
    initial_state,
    ipa_step,
    make_selector,
    matched_admm_state,
    pnp_admm_step,
    run,
)


def dense_problem(seed, n=64, m=96, b=3, loss=Loss.L2_SQUARE, scale=1.0,
                  den=None, shape=(8, 8), truth=None):
    rng = np.random.default_rng(seed)
    model = make_gaussian_model(n=n, m=m, b=b, seed=seed).with_measurements(
        rng.normal(size=m) * scale
    )
    fs = build_fidelity(model, loss, compute_lipschitz=False)
    if den is None:
        den = DctSoftThreshold(0.05 * scale, shape)
    return Problem(model=model, fidelity=fs, denoiser=den, shape=shape,
                   truth=truth)


def conv_problem(seed, size=8, b=2, den=None):
    rng = np.random.default_rng(seed)
    model = make_conv_model((size, size), b=b, seed=seed)
    model = model.with_measurements(rng.normal(size=sum(model.out_dims)))
    fs = build_fidelity(model, Loss.L2_SQUARE, compute_lipschitz=False)
    if den is None:
        den = DctSoftThreshold(0.05, (size, size))
    return Problem(model=model, fidelity=fs, denoiser=den, shape=(size, size))


# ---------------------------------------------------------------------------
# selectors


def test_iid_uniform_deterministic_and_in_range():
    a = make_selector(IidUniform(), 7, seed=5)
    b = make_selector(IidUniform(), 7, seed=5)
    da = [a.select(3) for _ in range(10)]
    db = [b.select(3) for _ in range(10)]
    assert da == db
    flat = [i for d in da for i in d]
    assert all(0 <= i < 7 for i in flat)
    assert len(set(flat)) > 1


def test_epoch_shuffle_covers_each_epoch():
    sel = make_selector(EpochShuffle(), 6, seed=1)
    draws = [sel.select(1)[0] for _ in range(12)]
    assert sorted(draws[:6]) == list(range(6))
    assert sorted(draws[6:]) == list(range(6))
    assert draws[:6] != list(range(6)) or draws[6:] != list(range(6))


def test_epoch_shuffle_minibatch_spans_epoch_boundary():
    sel = make_selector(EpochShuffle(), 6, seed=2)
    flat = [i for _ in range(3) for i in sel.select(4)]
    assert sorted(flat) == sorted(list(range(6)) * 2)


def test_fixed_schedule_normalizes_and_exhausts():
    sched = FixedSchedule([2, (0, 1), 1])
    assert sched.entries == ((2,), (0, 1), (1,))
    sel = make_selector(sched, 3, seed=0)
    assert sel.select(1) == [2]
    assert sel.select(2) == [0, 1]
    assert sel.select(1) == [1]
    with pytest.raises(ScheduleExhaustedError):
        sel.select(1)


def test_fixed_schedule_rejects_out_of_range():
    sel = make_selector(FixedSchedule([5]), 3, seed=0)
    with pytest.raises(IndexError):
        sel.select(1)


def test_selector_validation():
    with pytest.raises(ValueError):
        make_selector(IidUniform(), 0, seed=0)
    sel = make_selector(IidUniform(), 3, seed=0)
    with pytest.raises(ValueError):
        sel.select(0)
    with pytest.raises(UnsupportedCombinationError):
        make_selector(object(), 3, seed=0).select(1)


# ---------------------------------------------------------------------------
# single steps against straight-line references


def test_admm_step_is_prox_then_denoise():
    prob = dense_problem(60)
    cfg = SolverConfig(gamma=0.7)
    state = initial_state(64, x0=np.linspace(0, 1, 64), s0=np.full(64, 0.1))
    new = pnp_admm_step(state, prob.fidelity, prob.denoiser, cfg)

    z = prox_full(prob.fidelity, 0.7, state.x + state.s)
    v = z - state.s
    x = prob.denoiser(v)
    s = state.s + x - z
    np.testing.assert_array_equal(new.z, z)
    np.testing.assert_array_equal(new.v, v)
    np.testing.assert_array_equal(new.x, x)
    np.testing.assert_array_equal(new.s, s)
    assert new.k == 1


def test_ipa_step_is_minibatch_prox_then_denoise():
    prob = dense_problem(61)
    cfg = SolverConfig(gamma=0.5)
    state = initial_state(64, x0=np.ones(64))
    new = ipa_step(state, prob.fidelity, prob.denoiser, cfg, [2, 0])

    z = minibatch_prox(prob.fidelity, 0.5, state.x + state.s, [2, 0])
    v = z - state.s
    x = prob.denoiser(v)
    np.testing.assert_array_equal(new.z, z)
    np.testing.assert_array_equal(new.v, v)
    np.testing.assert_array_equal(new.x, x)


# ---------------------------------------------------------------------------
# splitting equivalences


def test_admm_and_mirrored_form_agree_with_matched_init():
    prob = conv_problem(62, size=8, b=2)
    cfg = SolverConfig(gamma=0.8)
    rng = np.random.default_rng(63)
    v0 = rng.standard_normal(64)

    state = matched_admm_state(v0, prob.denoiser)
    np.testing.assert_array_equal(state.v, v0)
    np.testing.assert_array_equal(state.x, prob.denoiser(v0))
    np.testing.assert_array_equal(state.s, state.x - v0)

    v = v0.copy()
    for _ in range(100):
        state = pnp_admm_step(state, prob.fidelity, prob.denoiser, cfg)
        v, _, _ = drs_step(v, prob.fidelity, prob.denoiser, cfg)
        np.testing.assert_allclose(state.v, v, rtol=0, atol=1e-12)


def test_incremental_mirrored_form_agrees_too():
    prob = conv_problem(64, size=8, b=3)
    cfg = SolverConfig(gamma=0.4)
    rng = np.random.default_rng(65)
    v0 = rng.standard_normal(64)
    schedule = [int(i) for i in rng.integers(0, 3, size=50)]

    state = matched_admm_state(v0, prob.denoiser)
    v = v0.copy()
    for i in schedule:
        state = ipa_step(state, prob.fidelity, prob.denoiser, cfg, [i])
        v, _, _ = drs_step(v, prob.fidelity, prob.denoiser, cfg, indices=[i])
        np.testing.assert_allclose(state.v, v, rtol=0, atol=1e-12)


def test_single_block_collapse():
    # with one block, incremental and batch runs are the same algorithm
    prob = conv_problem(66, size=8, b=1)
    kw = dict(max_iters=40, seed=3)
    out = {}
    for alg in ("pnp_admm", "ipa", "minibatch_ipa"):
        trace = run(alg, prob, SolverConfig(gamma=0.6, **kw))
        out[alg] = trace.final_state.x
    np.testing.assert_allclose(out["ipa"], out["pnp_admm"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(out["minibatch_ipa"], out["pnp_admm"],
                               rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# classical oracle: batch splitting on a TV-regularized least-squares model


def test_batch_run_reaches_tv_regularized_optimum():
    seed, n, m, b = 67, 64, 96, 3
    rng = np.random.default_rng(seed)
    model = make_gaussian_model(n=n, m=m, b=b, seed=seed)
    x_true = rng.uniform(0, 30, size=n)
    K = np.vstack([model.block(i).matrix for i in range(b)])
    y = K @ x_true + 0.5 * rng.standard_normal(m)
    model = model.with_measurements(y)
    fs = build_fidelity(model, Loss.L2_SQUARE, compute_lipschitz=False)

    gamma, lam = 1.0, 4.0
    den = TvChambolle(np.sqrt(lam), (8, 8), max_iters=20000, dual_tol=1e-10)
    prob = Problem(model=model, fidelity=fs, denoiser=den, shape=(8, 8))
    trace = run("pnp_admm", prob, SolverConfig(gamma=gamma, max_iters=400))

    blocks = [(model.block(i).matrix, model.block(i).y) for i in range(b)]
    expected = oracles.tv_regularized_cvxpy(blocks, gamma, lam, (8, 8))
    err = np.linalg.norm(trace.final_state.x - expected)
    assert err / np.linalg.norm(expected) <= 1e-4


# ---------------------------------------------------------------------------
# affine toy: closed-form fixed point and Fejer monotonicity


def test_mirrored_iteration_converges_to_closed_form_fixed_point():
    seed, n = 68, 16
    rng = np.random.default_rng(seed)
    model = make_gaussian_model(n=n, m=24, b=2, seed=seed).with_measurements(
        rng.normal(size=24)
    )
    fs = build_fidelity(model, Loss.L2_SQUARE, compute_lipschitz=False)
    den = ScaledSmoothing(0.3, (4, 4))
    cfg = SolverConfig(gamma=0.7, prox_tol=1e-13)

    def T(v):
        out, _, _ = drs_step(v, fs, den, cfg)
        return out

    c = T(np.zeros(n))
    A = oracles.materialize(lambda e: T(e) - c, n)
    assert np.max(np.abs(np.linalg.eigvals(A))) < 1.0
    v_star = np.linalg.solve(np.eye(n) - A, c)
    np.testing.assert_allclose(T(v_star), v_star, atol=1e-9)

    v = rng.uniform(-5, 5, size=n)
    dist = [np.linalg.norm(v - v_star)]
    for _ in range(600):
        v = T(v)
        dist.append(np.linalg.norm(v - v_star))
    assert dist[-1] <= 1e-6
    for d_next, d in zip(dist[1:], dist):
        assert d_next <= d + 1e-9


# ---------------------------------------------------------------------------
# gradient baselines


def test_fista_with_identity_denoiser_solves_least_squares():
    seed, n, m, b = 69, 32, 48, 4
    rng = np.random.default_rng(seed)
    model = make_gaussian_model(n=n, m=m, b=b, seed=seed).with_measurements(
        rng.normal(size=m)
    )
    fs = build_fidelity(model, Loss.L2_SQUARE, compute_lipschitz=False)
    prob = Problem(model=model, fidelity=fs, denoiser=lambda v: v, shape=None)
    trace = run("pnp_fista", prob, SolverConfig(gamma=1.0, max_iters=800))

    K = np.vstack([model.block(i).matrix for i in range(b)])
    y = np.concatenate([model.block(i).y for i in range(b)])
    x_ls = np.linalg.lstsq(K, y, rcond=None)[0]
    f_star = full_loss(fs, x_ls)
    assert full_loss(fs, trace.final_state.x) <= f_star + 1e-8 * max(1.0, f_star)
    np.testing.assert_allclose(trace.final_state.x, x_ls, atol=1e-3)


def test_sgd_decreases_loss_toward_least_squares():
    seed, n, m, b = 70, 32, 64, 4
    rng = np.random.default_rng(seed)
    model = make_gaussian_model(n=n, m=m, b=b, seed=seed).with_measurements(
        rng.normal(size=m)
    )
    fs = build_fidelity(model, Loss.L2_SQUARE, compute_lipschitz=False)
    prob = Problem(model=model, fidelity=fs, denoiser=lambda v: v, shape=None)
    x0 = np.full(n, 5.0)
    trace = run("pnp_sgd", prob, SolverConfig(gamma=1.0, max_iters=400, seed=9),
                x0=x0)

    K = np.vstack([model.block(i).matrix for i in range(b)])
    y = np.concatenate([model.block(i).y for i in range(b)])
    f_star = full_loss(fs, np.linalg.lstsq(K, y, rcond=None)[0])
    f0 = full_loss(fs, x0)
    f_end = full_loss(fs, trace.final_state.x)
    assert f_end < f0
    assert f_end - f_star <= 0.1 * (f0 - f_star)


def test_gradient_baselines_reject_nonsmooth_loss():
    prob = dense_problem(71, loss=Loss.L1)
    for alg in ("pnp_fista", "pnp_sgd"):
        with pytest.raises(UnsupportedCombinationError):
            run(alg, prob, SolverConfig(gamma=1.0, max_iters=1))


# ---------------------------------------------------------------------------
# run() mechanics


def test_unknown_algorithm_rejected():
    prob = dense_problem(72)
    with pytest.raises(UnsupportedCombinationError):
        run("gradient_descent", prob, SolverConfig(gamma=1.0))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(gamma=0.0)
    with pytest.raises(ValueError):
        SolverConfig(gamma=1.0, max_iters=-1)
    with pytest.raises(ValueError):
        SolverConfig(gamma=1.0, minibatch_p=0)


def test_run_is_deterministic():
    prob = dense_problem(73, b=4)
    cfg = SolverConfig(gamma=0.5, max_iters=25, minibatch_p=2, seed=11)
    a = run("minibatch_ipa", prob, cfg)
    b = run("minibatch_ipa", prob, cfg)
    np.testing.assert_array_equal(a.final_state.x, b.final_state.x)
    assert len(a.records) == 25


def test_single_draw_variants_force_p_one():
    prob = dense_problem(74, b=4)
    trace = run("ipa", prob, SolverConfig(gamma=0.5, max_iters=2, minibatch_p=3))
    assert trace.config.minibatch_p == 1


def test_records_without_truth_or_analysis():
    prob = dense_problem(75)
    trace = run("pnp_admm", prob, SolverConfig(gamma=0.5, max_iters=3))
    assert [r.k for r in trace.records] == [1, 2, 3]
    assert all(np.isnan(r.normalized_residual) for r in trace.records)
    assert all(np.isnan(r.snr_db) for r in trace.records)
    assert all(r.elapsed_s >= 0 for r in trace.records)
    assert trace.terminated == "max_iters"


def test_records_with_truth_and_analysis():
    rng = np.random.default_rng(76)
    truth = rng.uniform(0, 10, size=64)
    prob = dense_problem(76, truth=truth)
    trace = run("ipa", prob, SolverConfig(gamma=0.5, max_iters=3), analyze=True)
    assert all(np.isfinite(r.normalized_residual) for r in trace.records)
    assert all(np.isfinite(r.snr_db) for r in trace.records)


def test_memory_bytes_matches_report():
    from pnpinc import memory_report

    prob = dense_problem(77, b=4)
    t_batch = run("pnp_admm", prob, SolverConfig(gamma=0.5, max_iters=1))
    t_inc = run("minibatch_ipa", prob,
                SolverConfig(gamma=0.5, max_iters=1, minibatch_p=2))
    assert t_batch.records[0].memory_bytes == memory_report(
        prob.model, "pnp_admm")["total"]
    assert t_inc.records[0].memory_bytes == memory_report(
        prob.model, "minibatch_ipa", 2)["total"]
    assert t_inc.records[0].memory_bytes < t_batch.records[0].memory_bytes


def test_stop_residual_terminates_early():
    prob = dense_problem(78)
    trace = run("pnp_admm", prob,
                SolverConfig(gamma=0.5, max_iters=50, stop_residual=1e12))
    assert trace.terminated == "stop_residual"
    assert len(trace.records) == 1


def test_callbacks_see_every_iterate():
    prob = dense_problem(79)
    seen = []
    run("pnp_admm", prob, SolverConfig(gamma=0.5, max_iters=4),
        callbacks=[lambda st, rec: seen.append((st.k, rec.k))])
    assert seen == [(1, 1), (2, 2), (3, 3), (4, 4)]


def test_fixed_schedule_exhaustion_propagates_from_run():
    prob = dense_problem(80, b=3)
    cfg = SolverConfig(gamma=0.5, max_iters=5, selection=FixedSchedule([0, 1]))
    with pytest.raises(ScheduleExhaustedError):
        run("ipa", prob, cfg)


def test_initial_state_from_arrays():
    x0 = np.arange(4.0)
    s0 = np.full(4, 2.0)
    st = initial_state(4, x0=x0, s0=s0)
    np.testing.assert_array_equal(st.x, x0)
    np.testing.assert_array_equal(st.s, s0)
    np.testing.assert_array_equal(st.v, x0 - s0)
    assert st.k == 0
    st.x[0] = 99.0
    assert x0[0] == 0.0  # run state must not alias caller arrays
