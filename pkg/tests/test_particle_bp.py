import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcpmp.particle_bp import (
    ParticleCloud,
    bp_iteration,
    estimate,
    init_cloud,
    run_particle_slot,
    subsample_size,
    systematic_resample,
)
from fcpmp.sim import Rect

from scenes import place, trilateration

REGION = Rect.square(0.0, 20.0)


def test_single_particle_cloud():
    c = init_cloud(REGION, 1, np.random.default_rng(0))
    assert len(c) == 1 and c.weights.tolist() == [1.0]
    np.testing.assert_array_equal(estimate(c), c.particles[0])


def test_cloud_rejects_bad_input():
    with pytest.raises(ValueError):
        init_cloud(REGION, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ParticleCloud(np.zeros((2, 2)), [0.5, -0.5])
    with pytest.raises(ValueError):
        ParticleCloud(np.zeros((2, 2)), [0.0, 0.0])


@given(st.integers(1, 500), st.integers(0, 2**32 - 1))
def test_weights_sum_to_one(n, seed):
    rng = np.random.default_rng(seed)
    assert abs(init_cloud(REGION, n, rng).weights.sum() - 1) < 1e-9
    assert abs(ParticleCloud(rng.random((n, 2)), rng.random(n) + 1e-3).weights.sum() - 1) < 1e-9


def test_uniform_cloud_mean_is_region_center():
    c = init_cloud(REGION, 40_000, np.random.default_rng(1))
    # standard error per axis is 20/sqrt(12 * 40000) ~ 0.029
    np.testing.assert_allclose(estimate(c), [10, 10], atol=0.15)


def test_estimate_of_two_particles():
    assert estimate(ParticleCloud([[0, 0], [2, 0]], [0.5, 0.5])).tolist() == [1.0, 0.0]


def test_zero_neighbors_leave_cloud_unchanged():
    c = init_cloud(REGION, 100, np.random.default_rng(2))
    out, ops = bp_iteration(c, np.zeros((0, 2)), np.zeros(0), [], np.zeros(0), 0.1, np.random.default_rng(3))
    assert ops == 0
    np.testing.assert_array_equal(out.particles, c.particles)
    np.testing.assert_array_equal(out.weights, c.weights)


def test_single_anchor_concentrates_on_the_ring():
    rng = np.random.default_rng(4)
    c = init_cloud(REGION, 4000, rng)
    out, _ = bp_iteration(c, np.array([[10.0, 10.0]]), np.array([5.0]), [], np.zeros(0), 0.25, rng)
    r = systematic_resample(out, rng)
    radial = np.hypot(*(r.particles - 10.0).T)
    assert abs(radial.mean() - 5.0) < 0.1
    assert abs(radial.std() - 0.5) < 0.1


def test_three_anchor_trilateration():
    cfg, state, meas = trilateration(var=0.1, seed=5, noiseless=True)
    rng = np.random.default_rng(5)
    res = run_particle_slot(state, meas, [None], 5, rng, cfg.deploy_zone, n_particles=4000)
    assert np.hypot(*(res.means[0] - state.agent_pos[0])) < 0.5


def test_vanishing_weights_fall_back_to_the_prior(caplog):
    c = init_cloud(REGION, 50, np.random.default_rng(6))
    with caplog.at_level(logging.WARNING, logger="fcpmp.particle_bp"):
        out, _ = bp_iteration(c, np.array([[0.0, 0.0]]), np.array([np.inf]), [], np.zeros(0), 0.1,
                              np.random.default_rng(7))
    assert "vanished" in caplog.text
    np.testing.assert_array_equal(out.weights, c.weights)


def test_resampling_preserves_mean_in_expectation():
    rng = np.random.default_rng(8)
    c = ParticleCloud(rng.normal(0, 3, (200, 2)), rng.random(200) ** 4)
    means = np.array([estimate(systematic_resample(c, rng)) for _ in range(2000)])
    np.testing.assert_allclose(means.mean(0), estimate(c), atol=0.02)


def test_resampled_cloud_has_uniform_weights():
    rng = np.random.default_rng(9)
    c = ParticleCloud(rng.random((30, 2)), rng.random(30))
    r = systematic_resample(c, rng, 12)
    assert len(r) == 12 and np.allclose(r.weights, 1 / 12)


@pytest.mark.parametrize("n", [16, 100, 400])
def test_operation_count_scaling(n):
    rng = np.random.default_rng(10)
    own, nb = init_cloud(REGION, n, rng), init_cloud(REGION, n, rng)
    args = (np.array([[0.0, 0.0]]), np.array([5.0]), [nb, nb], np.array([4.0, 6.0]), 0.1, rng)
    _, ops = bp_iteration(own, *args)
    assert ops == n + 2 * n * subsample_size(n)
    _, ops_full = bp_iteration(own, *args, full=True)
    assert ops_full == n + 2 * n * n


def test_slot_is_reproducible_and_counts_neighbors():
    state = place([[10, 10], [14, 10]], [[5, 10], [10, 16]], 10.0)
    from fcpmp.sim import Scenario, sense

    cfg = Scenario(area=Rect.square(0, 20), deploy_zone=Rect.square(2, 18), n_agents=2, n_anchors=2,
                   comm_radius=10.0)
    meas = sense(state, cfg, np.random.default_rng(11))
    a = run_particle_slot(state, meas, [None, None], 3, np.random.default_rng(12), cfg.deploy_zone, 400)
    b = run_particle_slot(state, meas, [None, None], 3, np.random.default_rng(12), cfg.deploy_zone, 400)
    np.testing.assert_array_equal(a.trace_means, b.trace_means)
    assert a.trace_means.shape == (3, 2, 2) and a.trace_covs.shape == (3, 2, 2, 2)
    n_anchor = state.adj_anchors.sum(1)
    np.testing.assert_array_equal(a.op_counts[0], 400 * n_anchor + 400 * subsample_size(400))
