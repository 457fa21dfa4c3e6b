"""Offline training of the enhancer against position RMSE."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..fusion import (
    BeliefSet,
    EngineConfig,
    FusionMode,
    IterationInternals,
    IterationSchedule,
    gaussians_from_params,
    mean_backward,
    run_slot,
)
from ..sim import Scenario, Snapshot, TrajectoryDataset
from .enhancer import enhance_backward, enhance_batch
from .mlp import WeightStore, init_weights

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_rmse", "val_rmse")


class TrainingDiverged(RuntimeError):
    """The loss or a gradient became non-finite."""


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 20
    lr_start: float = 2e-3
    lr_end: float = 1e-5
    batch: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    all_iterations: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ValueError("learning rates must be positive")


def learning_rate(epoch: int, hyper: TrainHyper) -> float:
    """Exponential interpolation from ``lr_start`` (first epoch) to ``lr_end`` (last)."""
    if hyper.epochs == 1:
        return hyper.lr_start
    frac = epoch / (hyper.epochs - 1)
    return hyper.lr_start * (hyper.lr_end / hyper.lr_start) ** frac


class Adam:
    def __init__(self, params: Sequence[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def flatten_grads(grads: dict) -> list[np.ndarray]:
    out = []
    for name in sorted(grads):
        for dw, db in grads[name]:
            out += [dw, db]
    return out


@dataclass
class Sample:
    """One recorded iteration plus the ground truth it is scored against."""

    internals: IterationInternals
    truth: np.ndarray


def rollout(
    realization: Sequence[Snapshot],
    scenario: Scenario,
    sched: IterationSchedule,
    engine: EngineConfig,
) -> list[Sample]:
    prior = BeliefSet.zone_prior(scenario.deploy_zone, realization[0].state.n_agents)
    out = []
    for snap in realization:
        res = run_slot(snap.state, snap.meas, prior, sched, engine, scenario.deploy_zone)
        prior = res.beliefs
        out += [Sample(it, snap.state.agent_pos) for it in res.internals]
    return out


def _forward(ws: WeightStore, s: Sample, mode: FusionMode):
    it = s.internals
    refined, _, _, cache = enhance_batch(it.omega, it.attrs, ws) if it.omega.shape[0] else (it.omega, None, None, None)
    W = it.base.copy()
    np.add.at(W, it.receivers, refined)
    means, _, clamped = gaussians_from_params(W, mode, it.fallback, it.damping)
    return W, means, clamped, cache


def loss_and_grad(ws: WeightStore, samples: Sequence[Sample], mode: FusionMode, need_grad: bool = True):
    """RMSE over the scored agents of every sample, and its gradient w.r.t. the weights.

    Recorded inputs are constants. Agents whose precision needed clamping
    are left out of the objective: their read-out is not differentiable.
    """
    mode = FusionMode(mode)
    fw = [_forward(ws, s, mode) for s in samples]
    sq = np.concatenate([np.sum((m - s.truth) ** 2, axis=1)[~c] for (_, m, c, _), s in zip(fw, samples)])
    n = sq.size
    loss = math.sqrt(sq.mean()) if n else 0.0
    if not need_grad:
        return loss, None
    grads = {k: [(np.zeros_like(w), np.zeros_like(b)) for w, b in v] for k, v in ws.mlps.items()}
    if loss == 0.0:
        return loss, grads
    for (W, means, clamped, cache), s in zip(fw, samples):
        if cache is None:
            continue
        it = s.internals
        gm = (means - s.truth) / (n * loss)
        gm[clamped] = 0.0
        if mode is FusionMode.EXACT_QUADRATIC and it.damping > 0:
            lam = it.damping
            W_eff = W + np.column_stack([np.full((W.shape[0], 2), lam / 2), lam * it.fallback, np.zeros(W.shape[0])])
        else:
            W_eff = W
        gW = mean_backward(W_eff, means, gm, mode)
        g_edge = gW[it.receivers]
        part = enhance_backward(cache, g_edge, ws)
        for k in grads:
            grads[k] = [(a + da, b + db) for (a, b), (da, db) in zip(grads[k], part[k])]
    return loss, grads


def final_iteration_loss(ws: WeightStore, samples: Sequence[Sample], mode=FusionMode.EXACT_QUADRATIC) -> float:
    return loss_and_grad(ws, samples, mode, need_grad=False)[0]


def rollout_rmse(
    ws: WeightStore | None,
    realizations: Sequence[Sequence[Snapshot]],
    scenario: Scenario,
    sched: IterationSchedule,
    engine: EngineConfig,
) -> float:
    """Final-iteration position RMSE of full enhanced rollouts over every agent and slot."""
    run_sched = replace(sched, enhancer=ws)
    eng = replace(engine, record="none")
    sq = []
    for real in realizations:
        prior = BeliefSet.zone_prior(scenario.deploy_zone, real[0].state.n_agents)
        for snap in real:
            res = run_slot(snap.state, snap.meas, prior, run_sched, eng, scenario.deploy_zone)
            prior = res.beliefs
            sq.append(np.sum((res.means - snap.state.agent_pos) ** 2, axis=1))
    return math.sqrt(np.concatenate(sq).mean())


@dataclass
class TrainResult:
    """Trained weights, the per-epoch log and the epoch the weights come from (0 = initial)."""

    weights: WeightStore
    log: list[tuple[int, float, float, float]] = field(default_factory=list)
    best_epoch: int = 0


def train(
    dataset: TrajectoryDataset,
    scenario: Scenario,
    sched: IterationSchedule,
    hyper: TrainHyper,
    engine: EngineConfig | None = None,
    init: WeightStore | None = None,
    log_path: str | Path | None = None,
    progress: Callable[[int, float, float, float], None] | None = None,
    validation: TrajectoryDataset | None = None,
) -> TrainResult:
    """Adam on the enhancer weights with on-policy rollouts of the engine.

    With ``validation`` the weights are scored after every epoch by full
    rollout RMSE on those realizations, and the best checkpoint (possibly the
    initial weights) is returned. The per-iteration gradient only sees the
    last step, so long runs can drift away from what helps whole rollouts.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    engine = replace(engine or EngineConfig(), record="all" if hyper.all_iterations else "final")
    ws = (init or init_weights(hyper.seed)).copy()
    opt = Adam(ws.flat(), hyper.beta1, hyper.beta2, hyper.eps)
    rng = np.random.default_rng(np.random.SeedSequence([int(hyper.seed), 0x7A1]))
    rows = []
    val_engine = replace(engine, record="none")
    val = (lambda w: rollout_rmse(w, validation.realizations, scenario, sched, val_engine)) if validation else None
    best = (val(ws) if val else math.nan, 0, ws.copy())
    for epoch in range(hyper.epochs):
        lr = learning_rate(epoch, hyper)
        order = rng.permutation(len(dataset))
        sq_sum, count = 0.0, 0
        for start in range(0, len(order), hyper.batch):
            run_sched = replace(sched, enhancer=ws)
            samples = []
            for r in order[start : start + hyper.batch]:
                samples += rollout(dataset.realizations[r], scenario, run_sched, engine)
            loss, grads = loss_and_grad(ws, samples, sched.fusion_mode)
            flat = flatten_grads(grads)
            if not (math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in flat)):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch + 1}")
            opt.step(ws.flat(), flat, lr)
            k = max(sum(s.truth.shape[0] for s in samples), 1)
            sq_sum += loss * loss * k
            count += k
        rmse = math.sqrt(sq_sum / max(count, 1))
        ws.trained_epochs += 1
        ws.lr = lr
        v = val(ws) if val else math.nan
        if val and v < best[0]:
            best = (v, epoch + 1, ws.copy())
        rows.append((epoch + 1, lr, rmse, v))
        log.info("epoch %d lr %.3g rmse %.4f val %.4f", epoch + 1, lr, rmse, v)
        if progress:
            progress(epoch + 1, lr, rmse, v)
    if log_path is not None:
        write_log(rows, log_path)
    if val:
        return TrainResult(best[2], rows, best[1])
    return TrainResult(ws, rows, hyper.epochs)


def write_log(rows, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for epoch, lr, rmse, v in rows:
            w.writerow([epoch, repr(float(lr)), repr(float(rmse)), "" if math.isnan(v) else repr(float(v))])
