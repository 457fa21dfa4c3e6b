import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcpmp.fusion import BeliefSet, EngineConfig, IterationSchedule, run_slot
from fcpmp.metrics import (
    EmptyGroupError,
    ErrorRecord,
    ErrorTable,
    convergence_trace,
    mean_abs_error,
    non_increasing_within,
    plateau_iteration,
    prob_within,
    rmse,
    summarize,
)

from scenes import trilateration


def table(errors, slot=0):
    n = len(errors)
    return ErrorTable(np.zeros(n, int), np.full(n, slot), np.ones(n, int), np.arange(n), np.array(errors, float))


def test_rmse_examples():
    assert rmse(table([0, 0, 0])) == 0
    est, truth = np.array([[[3.0, 4.0]]]), np.zeros((1, 2))
    assert rmse(ErrorTable.from_trace(0, 0, [0], est, truth)) == 5.0
    assert rmse(table([1, 1, 7])) == pytest.approx(math.sqrt(17), abs=1e-12)
    assert rmse([ErrorRecord(0, 0, 1, 0, 3.0)]) == 3.0


def test_empty_groups_raise():
    for fn in (rmse, mean_abs_error, lambda t: prob_within(t, 2.0)):
        with pytest.raises(EmptyGroupError):
            fn(ErrorTable.empty())


def test_negative_error_rejected():
    with pytest.raises(ValueError):
        ErrorRecord(0, 0, 1, 0, -1.0)
    with pytest.raises(ValueError):
        table([1.0, -0.5])


def test_grouped_rmse():
    t = ErrorTable.concat([table([3, 4], slot=0), table([1], slot=1)])
    assert rmse(t, ("slot",)) == {(0,): pytest.approx(math.sqrt(12.5)), (1,): 1.0}
    with pytest.raises(KeyError):
        rmse(t, ("bogus",))


def test_prob_within_examples():
    assert prob_within(table([1, 1, 1]), 2.0) == 1.0
    assert prob_within(table([1, 3, 1, 3]), 2.0) == 0.5
    assert prob_within(table([0.1, 5]), 0.0) == 0.0


def test_prob_within_averages_over_slots():
    t = ErrorTable.concat([table([1, 3], slot=0), table([1, 1, 1, 3], slot=1)])
    assert prob_within(t, 2.0) == pytest.approx((0.5 + 0.75) / 2)


errors = st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=50)


@given(errors)
def test_rmse_dominates_mean_absolute_error(e):
    t = table(e)
    assert rmse(t) >= mean_abs_error(t) * (1 - 1e-12)


@given(errors, st.floats(0, 1e3), st.floats(0, 1e3))
def test_prob_within_is_monotone(e, a, b):
    lo, hi = sorted((a, b))
    t = table(e)
    assert prob_within(t, lo) <= prob_within(t, hi)


def test_constant_estimates_give_flat_trace():
    est = np.tile(np.array([[1.0, 1.0], [2.0, 0.0]]), (6, 1, 1))
    t = ErrorTable.from_trace(0, 0, [0, 1], est, np.zeros((2, 2)))
    tr = convergence_trace(t)
    assert len(tr) == 6 and np.ptp(tr) == 0
    assert plateau_iteration(tr) == 1


def test_trilateration_trace_is_non_increasing_after_iteration_two():
    l_max = 8
    tables = []
    for seed in range(5):
        cfg, state, meas = trilateration(0.01, seed)
        res = run_slot(state, meas, BeliefSet.zone_prior(cfg.deploy_zone, 1), IterationSchedule(l_max),
                       EngineConfig(), cfg.deploy_zone)
        tables.append(ErrorTable.from_trace(seed, 0, [0], res.trace_means, state.agent_pos))
    tr = convergence_trace(ErrorTable.concat(tables))
    assert len(tr) == l_max
    assert non_increasing_within(tr, 2, 0.05)


def test_trace_helpers():
    assert plateau_iteration(np.array([5.0, 2.0, 1.02, 1.0])) == 3
    assert non_increasing_within(np.array([3.0, 1.0, 1.04, 0.9]), 2)
    assert not non_increasing_within(np.array([3.0, 1.0, 1.2]), 2)


def test_final_iteration_and_summary():
    est = np.array([[[9.0, 0.0]], [[1.0, 0.0]]])
    t = ErrorTable.from_trace(0, 0, [4], est, np.zeros((1, 2)))
    assert t.final_iteration().error.tolist() == [1.0]
    s = summarize(t)
    assert s["rmse"] == 1.0 and s["prob_within_2m"] == 1.0 and s["convergence"] == [9.0, 1.0]


def test_csv_round_trip_columns():
    buf = io.StringIO()
    table([1.5]).write_csv(buf)
    assert buf.getvalue().splitlines() == ["run,slot,iteration,agent,error", "0,0,1,0,1.5"]
