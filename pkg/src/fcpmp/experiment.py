"""Multi-slot runs of the parametric engine and the particle baseline."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fusion import BeliefSet, EngineConfig, IterationSchedule, SlotEngine, TRACE_COLUMNS
from .metrics import ErrorTable
from .particle_bp import run_particle_slot
from .sim import Scenario, Snapshot, simulate_realization

METHODS = ("fcpmp", "gnn_fcpmp", "particle_bp")


class DivergenceError(RuntimeError):
    """An estimate became non-finite."""


def agent_loop_counts(adj: np.ndarray) -> np.ndarray:
    """Triangles through each agent: diag(A^3) / 2."""
    a = np.asarray(adj, dtype=np.int64)
    return np.einsum("ij,ji->i", a @ a, a) // 2


@dataclass
class RunOutput:
    errors: ErrorTable
    trace_rows: list[list] = field(default_factory=list)
    loops: list[tuple[int, int, int, float]] = field(default_factory=list)  # (slot, agent, loops, final error)
    op_counts: list[np.ndarray] = field(default_factory=list)


def _trace_rows(run_id, t, agent_ids, tm, tc):
    rows = []
    for it in range(tm.shape[0]):
        for k, aid in enumerate(agent_ids):
            m, c = tm[it, k], tc[it, k]
            rows.append([run_id, t, it + 1, int(aid), repr(float(m[0])), repr(float(m[1])),
                         repr(float(c[0, 0])), repr(float(c[0, 1])), repr(float(c[1, 1]))])
    return rows


def _collect(out: RunOutput, run: int, run_id: str, snap: Snapshot, tm, tc, ops, keep_trace: bool):
    s = snap.state
    if not np.all(np.isfinite(tm)):
        raise DivergenceError(f"{run_id}: non-finite estimate at slot {s.t}")
    out.errors = ErrorTable.concat([out.errors, ErrorTable.from_trace(run, s.t, s.agent_ids, tm, s.agent_pos)])
    if keep_trace:
        out.trace_rows += _trace_rows(run_id, s.t, s.agent_ids, tm, tc)
    err = np.hypot(*(tm[-1] - s.agent_pos).T)
    out.loops += [(s.t, int(a), int(l), float(e)) for a, l, e in zip(s.agent_ids, agent_loop_counts(s.adj_agents), err)]
    out.op_counts.append(ops)


def run_parametric(
    cfg: Scenario,
    realization: int,
    n_slots: int,
    sched: IterationSchedule,
    engine: EngineConfig | None = None,
    method: str = "fcpmp",
    keep_trace: bool = True,
    snapshots: Sequence[Snapshot] | None = None,
) -> RunOutput:
    eng = SlotEngine(sched, engine, cfg.deploy_zone)
    out = RunOutput(ErrorTable.empty())
    snaps = snapshots if snapshots is not None else simulate_realization(cfg, realization, n_slots)
    prior = None
    run_id = f"{method}-seed{cfg.seed}-r{realization}"
    for snap in snaps:
        if prior is None:
            prior = BeliefSet.zone_prior(cfg.deploy_zone, snap.state.n_agents)
        res = eng.run(snap.state, snap.meas, prior)
        prior = res.beliefs
        _collect(out, realization, run_id, snap, res.trace_means, res.trace_covs, res.op_counts, keep_trace)
    return out


def run_particle(
    cfg: Scenario,
    realization: int,
    n_slots: int,
    l_max: int,
    n_particles: int = 4000,
    full: bool = False,
    keep_trace: bool = True,
    snapshots: Sequence[Snapshot] | None = None,
) -> RunOutput:
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(realization), 0x9B9]))
    out = RunOutput(ErrorTable.empty())
    snaps = snapshots if snapshots is not None else simulate_realization(cfg, realization, n_slots)
    clouds = None
    run_id = f"particle_bp-seed{cfg.seed}-r{realization}"
    for snap in snaps:
        if clouds is None:
            clouds = [None] * snap.state.n_agents
        res = run_particle_slot(snap.state, snap.meas, clouds, l_max, rng, cfg.deploy_zone, n_particles, full)
        clouds = res.clouds
        _collect(out, realization, run_id, snap, res.trace_means, res.trace_covs, res.op_counts, keep_trace)
    return out


def _job(args):
    kind, kwargs = args
    return run_parametric(**kwargs) if kind == "parametric" else run_particle(**kwargs)


def run_many(jobs: list[tuple[str, dict]], workers: int | None = None) -> list[RunOutput]:
    """Run jobs in order; results are identical for any worker count."""
    workers = workers if workers is not None else (os.cpu_count() or 1)
    if workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
        return list(ex.map(_job, jobs))


def merge(outputs: Sequence[RunOutput]) -> RunOutput:
    out = RunOutput(ErrorTable.concat([o.errors for o in outputs]))
    for o in outputs:
        out.trace_rows += o.trace_rows
        out.loops += o.loops
        out.op_counts += o.op_counts
    return out


def evaluate_method(
    method: str,
    cfg: Scenario,
    n_realizations: int,
    n_slots: int,
    sched: IterationSchedule,
    engine: EngineConfig | None = None,
    n_particles: int = 4000,
    full_particles: bool = False,
    workers: int | None = 1,
    keep_trace: bool = True,
) -> RunOutput:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "particle_bp":
        jobs = [
            ("particle", dict(cfg=cfg, realization=r, n_slots=n_slots, l_max=sched.l_max,
                              n_particles=n_particles, full=full_particles, keep_trace=keep_trace))
            for r in range(n_realizations)
        ]
    else:
        if method == "gnn_fcpmp" and sched.enhancer is None:
            raise ValueError("gnn_fcpmp needs enhancer weights")
        s = sched if method == "gnn_fcpmp" else IterationSchedule(sched.l_max, sched.fusion_mode, None)
        jobs = [
            ("parametric", dict(cfg=cfg, realization=r, n_slots=n_slots, sched=s, engine=engine,
                                method=method, keep_trace=keep_trace))
            for r in range(n_realizations)
        ]
    return merge(run_many(jobs, workers))


def trace_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def loops_table(loops: list[tuple[int, int, int, float]]) -> list[tuple[int, int, float]]:
    """(loop count, agent-slots, RMSE) per loop count."""
    by: dict[int, list[float]] = {}
    for _, _, l, e in loops:
        by.setdefault(l, []).append(e)
    return [(l, len(v), float(np.sqrt(np.mean(np.square(v))))) for l, v in sorted(by.items())]
