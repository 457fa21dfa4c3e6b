"""Particle belief propagation, the non-parametric reference method.

Each agent keeps a fixed prior cloud for the slot. Every iteration the prior
weights are multiplied by the anchor likelihoods and, for every agent
neighbor, by the range likelihood averaged over a systematic subsample of
that neighbor's previous-iteration cloud.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .sim import MeasurementSet, NetworkState, Rect

log = logging.getLogger(__name__)


@dataclass
class ParticleCloud:
    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, float))
        self.weights = np.asarray(self.weights, float).reshape(-1)
        if self.particles.shape != (self.weights.size, 2):
            raise ValueError("particles must be (N, 2) with one weight each")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        total = self.weights.sum()
        if not total > 0:
            raise ValueError("weights must have positive mass")
        if abs(total - 1.0) > 1e-9:
            self.weights = self.weights / total

    def __len__(self) -> int:
        return self.weights.size

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def copy(self) -> "ParticleCloud":
        return ParticleCloud(self.particles.copy(), self.weights.copy())

    def covariance(self) -> np.ndarray:
        d = self.particles - estimate(self)
        return np.einsum("k,ki,kj->ij", self.weights, d, d)


def init_cloud(region: Rect, n: int, rng: np.random.Generator) -> ParticleCloud:
    if n < 1:
        raise ValueError("need at least one particle")
    return ParticleCloud(region.sample(rng, n), np.full(n, 1.0 / n))


def estimate(cloud: ParticleCloud) -> np.ndarray:
    return cloud.weights @ cloud.particles


def systematic_indices(weights: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    u = (rng.random() + np.arange(m)) / m
    return np.searchsorted(cdf, u, side="right").clip(max=weights.size - 1)


def systematic_resample(cloud: ParticleCloud, rng: np.random.Generator, m: int | None = None) -> ParticleCloud:
    m = len(cloud) if m is None else m
    idx = systematic_indices(cloud.weights, m, rng)
    return ParticleCloud(cloud.particles[idx], np.full(m, 1.0 / m))


def subsample_size(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


def range_loglik(points: np.ndarray, center: np.ndarray, z: float, var: float) -> np.ndarray:
    d = np.hypot(points[:, 0] - center[0], points[:, 1] - center[1])
    return -((z - d) ** 2) / (2 * var)


def neighbor_loglik(p: np.ndarray, q: np.ndarray, log_qw: np.ndarray, z: float, var: float) -> np.ndarray:
    """log sum_m qw_m N(z; |p_k - q_m|, var) per particle ``p_k`` (constants dropped)."""
    dx = p[:, 0:1] - q[:, 0]
    dy = p[:, 1:2] - q[:, 1]
    e = z - np.sqrt(dx * dx + dy * dy)
    e *= e
    e *= -1.0 / (2 * var)
    e += log_qw
    top = e.max(axis=1)
    e -= top[:, None]
    np.exp(e, out=e)
    return top + np.log(e.sum(axis=1))


def bp_iteration(
    prior: ParticleCloud,
    anchor_pos: np.ndarray,
    anchor_z: np.ndarray,
    neighbors: list[ParticleCloud],
    neighbor_z: np.ndarray,
    var: float,
    rng: np.random.Generator,
    full: bool = False,
) -> tuple[ParticleCloud, int]:
    """One reweighting of ``prior``; returns the new cloud and the distance-evaluation count.

    With ``full`` every neighbor particle is used instead of a subsample of
    ``ceil(sqrt(N_s))``. The result is resampled when its effective sample
    size drops below half the particle count.
    """
    if len(anchor_z) == 0 and len(neighbors) == 0:
        return prior.copy(), 0
    p = prior.particles
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    ops = 0
    for a, z in zip(np.atleast_2d(anchor_pos), anchor_z):
        logw = logw + range_loglik(p, a, z, var)
        ops += len(p)
    for cloud, z in zip(neighbors, neighbor_z):
        q = cloud.particles if full else cloud.particles[systematic_indices(cloud.weights, subsample_size(len(p)), rng)]
        with np.errstate(divide="ignore"):
            log_qw = np.log(cloud.weights) if full else np.full(q.shape[0], -math.log(q.shape[0]))
        logw = logw + neighbor_loglik(p, q, log_qw, z, var)
        ops += p.shape[0] * q.shape[0]
    top = np.max(logw)
    if not np.isfinite(top):
        log.warning("all particle weights vanished; restarting from the prior")
        return prior.copy(), ops
    w = np.exp(logw - top)
    out = ParticleCloud(p, w / w.sum())
    if out.ess < len(out) / 2:
        out = systematic_resample(out, rng)
    return out, ops


def predict(cloud: ParticleCloud, step: float, step_var: float, rng: np.random.Generator) -> ParticleCloud:
    """Motion prior: move each particle by a noisy measured step in a uniform direction."""
    base = systematic_resample(cloud, rng)
    n = len(base)
    d = step + math.sqrt(step_var) * rng.standard_normal(n)
    th = rng.uniform(0, 2 * np.pi, n)
    return ParticleCloud(base.particles + d[:, None] * np.column_stack([np.cos(th), np.sin(th)]), base.weights)


@dataclass
class ParticleSlotResult:
    clouds: list[ParticleCloud]
    trace_means: np.ndarray
    trace_covs: np.ndarray
    op_counts: np.ndarray

    @property
    def means(self) -> np.ndarray:
        return self.trace_means[-1]


def run_particle_slot(
    state: NetworkState,
    meas: MeasurementSet,
    priors: list[ParticleCloud | None],
    l_max: int,
    rng: np.random.Generator,
    zone: Rect,
    n_particles: int = 4000,
    full: bool = False,
) -> ParticleSlotResult:
    """Synchronous particle BP over one slot.

    ``priors[i]`` is agent ``i``'s previous-slot cloud, or ``None`` for a
    fresh agent (uniform over ``zone``).
    """
    n = state.n_agents
    pred = []
    for i in range(n):
        if state.fresh[i] or priors[i] is None:
            pred.append(init_cloud(zone, n_particles, rng))
        else:
            pred.append(predict(priors[i], meas.internal[i], meas.internal_var, rng))
    current = pred
    tm = np.empty((l_max, n, 2))
    tc = np.empty((l_max, n, 2, 2))
    ops = np.zeros((l_max, n), dtype=np.int64)
    for it in range(l_max):
        nxt = []
        for i in range(n):
            a_sel = np.isfinite(meas.anchor_ranges[i])
            j_sel = np.nonzero(np.isfinite(meas.agent_ranges[i]))[0]
            cloud, ops[it, i] = bp_iteration(
                pred[i],
                state.anchor_pos[a_sel],
                meas.anchor_ranges[i, a_sel],
                [current[j] for j in j_sel],
                meas.agent_ranges[i, j_sel],
                meas.range_var,
                rng,
                full,
            )
            nxt.append(cloud)
            tm[it, i] = estimate(cloud)
            tc[it, i] = cloud.covariance()
        current = nxt
    return ParticleSlotResult(current, tm, tc, ops)
