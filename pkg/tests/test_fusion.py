import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcpmp.fusion import (
    TRACE_COLUMNS,
    BeliefSet,
    DegenerateBeliefError,
    EngineConfig,
    FusionMode,
    GaussianBelief,
    IterationSchedule,
    QuadraticForm,
    circle_intersections,
    combine,
    gaussians_from_params,
    mmse_estimate,
    run_slot,
    to_gaussian,
    write_trace,
)
from fcpmp.messages import MessageKind, MessageParams, RangeObservation, anchor_spatial_message, linearize
from fcpmp.chebyshev import reference_matrix

from scenes import ZONE, grid_mean, place, small_network, trilateration

vec = st.lists(st.floats(-100, 100, allow_nan=False), min_size=5, max_size=5)


def mp(w, kind="anchor_spatial"):
    return MessageParams(w, kind)


def test_combine_temporal_only():
    t = mp([1, 2, 3, 4, 5], "temporal")
    assert combine(t, []).vector.tolist() == [1, 2, 3, 4, 5]


@given(vec, vec)
def test_combine_identity_and_doubling(a, b):
    t = mp(a, "temporal")
    assert np.array_equal(combine(t, [mp(np.zeros(5))]).vector, combine(t).vector)
    np.testing.assert_allclose(combine(mp(np.zeros(5), "temporal"), [mp(b), mp(b)]).vector, 2 * np.array(b))


@given(vec, vec, vec)
def test_combine_commutes_and_associates(a, b, c):
    t = mp(np.zeros(5), "temporal")
    x = combine(t, [mp(a), mp(b), mp(c)]).vector
    y = combine(t, [mp(c), mp(a), mp(b)]).vector
    np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose((QuadraticForm.from_vector(a) + QuadraticForm.from_vector(b)).vector, np.add(a, b))


def test_read_out_without_cross_term():
    q = QuadraticForm(1, 1, 2, 4, 0)
    faithful = to_gaussian(q, FusionMode.PAPER_FAITHFUL)
    exact = to_gaussian(q, FusionMode.EXACT_QUADRATIC)
    np.testing.assert_allclose(faithful.mean, [1, 2])
    np.testing.assert_allclose(exact.mean, [1, 2])
    np.testing.assert_allclose(faithful.cov, np.eye(2))
    np.testing.assert_allclose(exact.cov, 0.5 * np.eye(2))


def test_read_out_with_cross_term():
    q = QuadraticForm(1, 1, 2, 4, 0.2)
    J = np.array([[2, -0.2], [-0.2, 2]])
    exact = to_gaussian(q)
    np.testing.assert_allclose(exact.mean, np.linalg.solve(J, [2, 4]), atol=1e-12)
    np.testing.assert_allclose(exact.mean, grid_mean(q.vector, exact.mean, 6.0, 601), atol=1e-3)
    np.testing.assert_allclose(exact.cov, np.linalg.inv(J), atol=1e-12)
    faithful = to_gaussian(q, FusionMode.PAPER_FAITHFUL)
    np.testing.assert_allclose(faithful.cov, [[1, 0.1], [0.1, 1]])


def test_single_anchor_zero_range_reads_anchor_position():
    w = anchor_spatial_message(RangeObservation(0.0, 0.3), (7.0, -2.0), reference_matrix())
    np.testing.assert_allclose(to_gaussian(combine(mp(np.zeros(5), "temporal"), [w])).mean, [7, -2], atol=1e-12)


def test_faithful_mode_rejects_degenerate():
    with pytest.raises(DegenerateBeliefError):
        to_gaussian(QuadraticForm(0, 1, 0, 0, 0), FusionMode.PAPER_FAITHFUL)
    with pytest.raises(DegenerateBeliefError):
        to_gaussian(QuadraticForm(1, -1, 0, 0, 0), FusionMode.PAPER_FAITHFUL)


def test_exact_mode_clamps_instead_of_failing(caplog):
    b = to_gaussian(QuadraticForm(-1, 1, 0, 2, 0), fallback=[5.0, 0.0])
    assert np.min(np.linalg.eigvalsh(b.cov)) >= 1e-6
    # the unresolved x direction stays at the fallback, y is solved
    np.testing.assert_allclose(b.mean, [5.0, 1.0])
    assert "clamped" in caplog.text


@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(-100, 100), st.floats(-100, 100))
def test_modes_agree_without_cross_term(A, B, Cc, D):
    w = np.array([[A, B, Cc, D, 0.0]])
    np.testing.assert_allclose(gaussians_from_params(w, FusionMode.PAPER_FAITHFUL)[0],
                               gaussians_from_params(w, FusionMode.EXACT_QUADRATIC)[0], rtol=1e-12, atol=1e-12)


@given(vec)
def test_exact_covariance_is_spd(w):
    _, covs, _ = gaussians_from_params(np.array([w]))
    assert np.min(np.linalg.eigvalsh(covs[0])) >= 1e-6 * (1 - 1e-9)
    np.testing.assert_array_equal(covs[0], covs[0].T)


@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-0.9, 0.9), st.floats(-50, 50), st.floats(-50, 50),
       st.floats(0, 5))
def test_damping_vanishes_at_the_solution(sx, sy, rho, mx, my, lam):
    from fcpmp.messages import gaussian_params

    cov = np.array([[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]])
    w = gaussian_params([mx, my], cov)[None]
    means, _, _ = gaussians_from_params(w, fallback=[[mx, my]], damping=lam)
    np.testing.assert_allclose(means[0], [mx, my], atol=1e-7)


def test_mmse_is_the_mean():
    b = GaussianBelief([1.0, 2.0], np.eye(2))
    assert mmse_estimate(b).tolist() == [1.0, 2.0]
    assert mmse_estimate(GaussianBelief([1.0, 2.0], 7 * np.eye(2))).tolist() == [1.0, 2.0]


def test_mmse_matches_grid_integration_on_random_spd():
    rng = np.random.default_rng(4)
    for _ in range(20):
        L = rng.normal(size=(2, 2))
        J = L @ L.T + 0.5 * np.eye(2)
        b = rng.normal(size=2)
        w = np.array([J[0, 0] / 2, J[1, 1] / 2, b[0], b[1], -J[0, 1]])
        m = to_gaussian(QuadraticForm.from_vector(w)).mean
        half = 8 * np.sqrt(np.max(np.linalg.eigvalsh(np.linalg.inv(J))))
        np.testing.assert_allclose(m, grid_mean(w, m, half, 801), atol=1e-3)


def test_gaussian_belief_requires_symmetric_cov():
    with pytest.raises(ValueError):
        GaussianBelief([0, 0], [[1, 0.5], [0.2, 1]])


def test_schedule_bounds():
    with pytest.raises(ValueError):
        IterationSchedule(0)
    with pytest.raises(ValueError):
        IterationSchedule(101)


def test_circle_intersections():
    p, q = circle_intersections([0, 0], 5, [8, 0], 5)
    assert sorted([tuple(np.round(p, 9)), tuple(np.round(q, 9))]) == [(4.0, -3.0), (4.0, 3.0)]
    assert circle_intersections([0, 0], 1, [5, 0], 1) is None


def _trilateration_run(l_max=10, var=0.01, seed=0):
    cfg, state, meas = trilateration(var, seed)
    prior = BeliefSet.zone_prior(cfg.deploy_zone, 1)
    res = run_slot(state, meas, prior, IterationSchedule(l_max), EngineConfig(), cfg.deploy_zone)
    return state, res


@pytest.mark.parametrize("seed", range(5))
def test_trilateration_converges(seed):
    state, res = _trilateration_run(seed=seed)
    assert np.hypot(*(res.means[0] - state.agent_pos[0])) < 0.5
    W = res.internals[-1].W[0]
    np.testing.assert_allclose(res.means[0], grid_mean(W, res.means[0], 1.0), atol=1e-3)


def test_single_iteration_equals_one_manual_pass():
    cfg, state, meas = trilateration(0.01, 3)
    prior = BeliefSet.zone_prior(cfg.deploy_zone, 1)
    eng = EngineConfig()
    res = run_slot(state, meas, prior, IterationSchedule(1), eng, cfg.deploy_zone)
    from fcpmp.messages import gaussian_params

    temporal = mp(gaussian_params(*[np.asarray(v) for v in (ZONE.center, prior.covs[0])]), "temporal")
    sel = np.isfinite(meas.anchor_ranges[0])
    spatial = linearize(eng.frame, meas.anchor_ranges[0, sel], meas.range_var, state.anchor_pos[sel],
                        np.tile(prior.means[0], (int(sel.sum()), 1)))
    q = combine(temporal, [mp(w) for w in spatial])
    means, _, _ = gaussians_from_params(q.vector[None], fallback=prior.means, damping=1 / eng.damping_radius**2)
    np.testing.assert_allclose(res.means[0], means[0], rtol=1e-12, atol=1e-9)


def test_isolated_agent_keeps_its_prior():
    state = place([[20.0, 20.0], [80.0, 80.0]], [[50.0, 50.0]], 5.0)
    from fcpmp.sim import MeasurementSet

    meas = MeasurementSet(np.full((2, 2), np.nan), np.full((2, 1), np.nan), np.zeros(2), 0.1, 0.1)
    prior = BeliefSet.zone_prior(ZONE, 2)
    res = run_slot(state, meas, prior, IterationSchedule(4), EngineConfig(), ZONE)
    np.testing.assert_allclose(res.means, prior.means)


def test_engine_is_deterministic_and_covariances_spd():
    cfg, state, meas = small_network(seed=2)
    prior = BeliefSet.zone_prior(cfg.deploy_zone, cfg.n_agents)
    a = run_slot(state, meas, prior, IterationSchedule(8), EngineConfig(), cfg.deploy_zone)
    b = run_slot(state, meas, prior, IterationSchedule(8), EngineConfig(), cfg.deploy_zone)
    assert np.array_equal(a.trace_means, b.trace_means) and np.array_equal(a.trace_covs, b.trace_covs)
    assert np.min(np.linalg.eigvalsh(a.trace_covs.reshape(-1, 2, 2))) >= 1e-6 * (1 - 1e-9)
    assert a.trace_means.shape == (8, cfg.n_agents, 2)


def test_message_count_is_linear_in_neighbors():
    cfg, state, meas = small_network(n_agents=12, seed=5)
    prior = BeliefSet.zone_prior(cfg.deploy_zone, cfg.n_agents)
    res = run_slot(state, meas, prior, IterationSchedule(3), EngineConfig(bimodal="off"), cfg.deploy_zone)
    degree = np.isfinite(meas.agent_ranges).sum(1) + np.isfinite(meas.anchor_ranges).sum(1)
    for it in range(3):
        np.testing.assert_array_equal(res.op_counts[it], 1 + degree)


def test_two_source_agent_is_tagged_bimodal():
    # agent 0 hears two anchors only; agent 1 hears three and ranges to agent 0
    state = place([[30.0, 40.0], [45.0, 45.0]], [[10.0, 10.0], [60.0, 10.0], [10.0, 80.0]], 1000.0)
    from fcpmp.sim import MeasurementSet, pairwise

    d_an = pairwise(state.agent_pos, state.anchor_pos)
    d_an[0, 2] = np.nan
    d_aa = pairwise(state.agent_pos, state.agent_pos)
    np.fill_diagonal(d_aa, np.nan)
    d_aa[0, 1] = np.nan  # agent 0 cannot hear agent 1
    meas = MeasurementSet(d_aa, d_an, np.zeros(2), 0.01, 0.1)
    prior = BeliefSet.zone_prior(ZONE, 2)
    res = run_slot(state, meas, prior, IterationSchedule(6), EngineConfig(), ZONE)
    assert res.bimodal.tolist() == [True, False]
    off = run_slot(state, meas, prior, IterationSchedule(6), EngineConfig(bimodal="off"), ZONE)
    assert not off.bimodal.any()


def test_trace_csv_columns():
    cfg, state, meas = small_network(n_agents=3, seed=1)
    res = run_slot(state, meas, BeliefSet.zone_prior(cfg.deploy_zone, 3), IterationSchedule(2), None, cfg.deploy_zone)
    buf = io.StringIO()
    write_trace(buf, "fcpmp-seed1-r0", 0, state.agent_ids, res, header=True)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert rows[0] == list(TRACE_COLUMNS)
    assert rows[0] == ["run_id", "t", "iteration", "agent_id", "est_x", "est_y", "cov_xx", "cov_xy", "cov_yy"]
    assert len(rows) == 1 + 2 * 3


def test_engine_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(record="sometimes")
    with pytest.raises(ValueError):
        EngineConfig(bimodal="maybe")
