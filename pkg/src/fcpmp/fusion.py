"""Message multiplication, Gaussian read-out and the per-slot iteration engine."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable

import numpy as np

from .messages import (
    LinearizationFrame,
    MessageParams,
    default_frame,
    gaussian_params,
    linearize,
    params_to_precision,
)
from .sim import MeasurementSet, NetworkState, Rect

log = logging.getLogger(__name__)

EIG_MIN = 1e-6
EIG_MAX = 1e6
TRACE_COLUMNS = ("run_id", "t", "iteration", "agent_id", "est_x", "est_y", "cov_xx", "cov_xy", "cov_yy")


class DegenerateBeliefError(ValueError):
    """Coefficients do not describe a normalizable belief."""


class FusionMode(str, Enum):
    PAPER_FAITHFUL = "paper_faithful"
    EXACT_QUADRATIC = "exact_quadratic"


class Modality(str, Enum):
    UNIMODAL = "unimodal"
    BIMODAL = "bimodal"


class BimodalRule(str, Enum):
    PRODUCT = "product"  # both per-mode factors multiplied
    MIXTURE = "mixture"  # keep the component nearest the receiver
    OFF = "off"


@dataclass(frozen=True)
class QuadraticForm:
    A: float = 0.0
    B: float = 0.0
    C: float = 0.0
    D: float = 0.0
    E: float = 0.0

    @classmethod
    def from_vector(cls, w) -> "QuadraticForm":
        w = np.asarray(w, float).reshape(5)
        if not np.all(np.isfinite(w)):
            raise ValueError("quadratic form must be finite")
        return cls(*map(float, w))

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.A, self.B, self.C, self.D, self.E])

    def __add__(self, other: "QuadraticForm") -> "QuadraticForm":
        return QuadraticForm.from_vector(self.vector + other.vector)


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    modality: Modality = Modality.UNIMODAL
    centers: tuple | None = None
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, float).reshape(2))
        cov = np.asarray(self.cov, float).reshape(2, 2)
        if abs(cov[0, 1] - cov[1, 0]) > 1e-12 * max(1.0, np.abs(cov).max()):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class IterationSchedule:
    l_max: int = 20
    fusion_mode: FusionMode = FusionMode.EXACT_QUADRATIC
    enhancer: object | None = None  # a gnn WeightStore when the enhancer is on

    def __post_init__(self):
        if not 1 <= int(self.l_max) <= 100:
            raise ValueError(f"l_max must be in 1..100, got {self.l_max}")
        object.__setattr__(self, "fusion_mode", FusionMode(self.fusion_mode))


def combine(temporal: MessageParams | np.ndarray, spatial: Iterable[MessageParams | np.ndarray] = ()) -> QuadraticForm:
    """Product of messages as the sum of their exponent vectors."""
    total = np.array(getattr(temporal, "w", temporal), float).reshape(5)
    for m in spatial:
        total = total + np.asarray(getattr(m, "w", m), float)
    return QuadraticForm.from_vector(total)


def gaussians_from_params(
    W: np.ndarray,
    mode: FusionMode = FusionMode.EXACT_QUADRATIC,
    fallback: np.ndarray | None = None,
    damping: float = 0.0,
):
    """Batch read-out of (K, 5) exponent vectors.

    Returns ``(means, covs, clamped)``. In exact mode the precision is
    eigen-clamped into ``[EIG_MIN, EIG_MAX]`` for the covariance. The mean
    is the Newton step from ``fallback`` (origin when absent): directions
    with eigenvalue below the floor do not move (``clamped`` is set for that
    row) and ``damping`` is added to every other eigenvalue. With a positive
    definite precision and no damping this is exactly ``J^-1 b``.
    """
    W = np.atleast_2d(np.asarray(W, float))
    mode = FusionMode(mode)
    A, B, Cc, D, E = W.T
    if mode is FusionMode.PAPER_FAITHFUL:
        if np.any(A <= 0) or np.any(B <= 0):
            raise DegenerateBeliefError("paper-faithful read-out needs positive x^2 and y^2 coefficients")
        means = np.column_stack([Cc / (2 * A), D / (2 * B)])
        covs = np.empty((W.shape[0], 2, 2))
        covs[:, 0, 0] = 1 / A
        covs[:, 1, 1] = 1 / B
        covs[:, 0, 1] = covs[:, 1, 0] = E / 2
        return means, covs, np.zeros(W.shape[0], bool)

    J, b = params_to_precision(W)
    lam, V = np.linalg.eigh(J)
    low = lam < EIG_MIN
    if fallback is None:
        start = np.zeros_like(b)
    else:
        start = np.array(np.broadcast_to(np.asarray(fallback, float), b.shape))
    grad = b - np.einsum("kij,kj->ki", J, start)
    step = np.einsum("kij,ki->kj", V, grad) / np.where(low, 1.0, lam + damping)
    step = np.where(low, 0.0, step)
    means = start + np.einsum("kij,kj->ki", V, step)
    lam_c = np.clip(lam, EIG_MIN, EIG_MAX)
    covs = np.einsum("kij,kj,klj->kil", V, 1 / lam_c, V)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    return means, covs, low.any(axis=1)


def to_gaussian(q: QuadraticForm, mode: FusionMode = FusionMode.EXACT_QUADRATIC, fallback=None) -> GaussianBelief:
    means, covs, clamped = gaussians_from_params(q.vector[None], mode, fallback)
    if clamped[0]:
        log.warning("precision not positive definite; eigenvalues clamped to %g", EIG_MIN)
    return GaussianBelief(means[0], covs[0])


def mmse_estimate(b: GaussianBelief) -> np.ndarray:
    return b.mean.copy()


def mean_backward(W: np.ndarray, means: np.ndarray, grad_mean: np.ndarray, mode: FusionMode) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. (K, 5) exponent vectors given dL/dmean."""
    W = np.atleast_2d(W)
    g = np.zeros_like(W)
    if FusionMode(mode) is FusionMode.PAPER_FAITHFUL:
        A, B, Cc, D = W[:, 0], W[:, 1], W[:, 2], W[:, 3]
        g[:, 2] = grad_mean[:, 0] / (2 * A)
        g[:, 0] = -grad_mean[:, 0] * Cc / (2 * A**2)
        g[:, 3] = grad_mean[:, 1] / (2 * B)
        g[:, 1] = -grad_mean[:, 1] * D / (2 * B**2)
        return g
    J, _ = params_to_precision(W)
    v = np.linalg.solve(J, grad_mean[..., None])[..., 0]
    g[:, 2] = v[:, 0]
    g[:, 3] = v[:, 1]
    g[:, 0] = -2 * v[:, 0] * means[:, 0]
    g[:, 1] = -2 * v[:, 1] * means[:, 1]
    g[:, 4] = v[:, 0] * means[:, 1] + v[:, 1] * means[:, 0]
    return g


# --- engine ------------------------------------------------------------------


@dataclass(frozen=True)
class EngineConfig:
    """Knobs of the per-slot engine that are not part of the schedule.

    ``informative_var``: a neighbor whose largest covariance eigenvalue is at
    most this (m^2) counts as a range source for ambiguity tagging.
    ``propagate_sender_cov``: inflate each link variance by the sender's
    covariance along the link direction.
    ``directed_temporal``: after the first iteration, replace the isotropic
    motion prior by a ring oriented toward the current estimate once the
    estimate is tighter than the measured step.
    ``damping_radius``: each agent adds an isotropic Gaussian term of this
    std (m) centered at its own previous-iteration mean; it vanishes at a
    fixed point and only slows moves along weakly determined directions.
    Zero turns it off.
    """

    frame: LinearizationFrame = field(default_factory=default_frame)
    bimodal: BimodalRule = BimodalRule.PRODUCT
    informative_var: float = 1.0
    propagate_sender_cov: bool = True
    directed_temporal: bool = False
    damping_radius: float = 2.0
    record: str = "final"  # which iterations keep enhancer internals: "final" | "all" | "none"

    def __post_init__(self):
        object.__setattr__(self, "bimodal", BimodalRule(self.bimodal))
        if self.record not in ("final", "all", "none"):
            raise ValueError(f"record must be final/all/none, got {self.record!r}")


@dataclass
class BeliefSet:
    means: np.ndarray
    covs: np.ndarray

    @classmethod
    def zone_prior(cls, zone: Rect, n: int) -> "BeliefSet":
        mu, cov = zone_prior(zone)
        return cls(np.tile(mu, (n, 1)), np.tile(cov, (n, 1, 1)))

    def beliefs(self, iteration: int = 0) -> list[GaussianBelief]:
        return [GaussianBelief(m, c, iteration=iteration) for m, c in zip(self.means, self.covs)]


def zone_prior(zone: Rect):
    """Uninformative prior: zone center, std equal to the zone width."""
    s = max(zone.width, zone.height)
    return zone.center, np.eye(2) * s * s


@dataclass
class IterationInternals:
    """What the enhancer gradient needs from one iteration, all held constant."""

    iteration: int
    base: np.ndarray  # (N, 5) unrefined part (temporal)
    damping: float
    omega: np.ndarray  # (E, 5) spatial messages before refinement
    attrs: np.ndarray  # (E, 4) sender attributes
    receivers: np.ndarray  # (E,)
    fallback: np.ndarray  # (N, 2)
    W: np.ndarray  # (N, 5) fused coefficients
    means: np.ndarray
    clamped: np.ndarray


@dataclass
class SlotResult:
    means: np.ndarray
    covs: np.ndarray
    trace_means: np.ndarray  # (L, N, 2)
    trace_covs: np.ndarray  # (L, N, 2, 2)
    op_counts: np.ndarray  # (L, N) messages built per agent per iteration
    bimodal: np.ndarray  # (N,) final ambiguity tags
    internals: list[IterationInternals]

    @property
    def beliefs(self) -> BeliefSet:
        return BeliefSet(self.means, self.covs)


def circle_intersections(c1, r1, c2, r2):
    """Intersection points of two circles, or None when they do not meet."""
    c1, c2 = np.asarray(c1, float), np.asarray(c2, float)
    d = float(np.hypot(*(c2 - c1)))
    if d < 1e-12 or d > r1 + r2 or d < abs(r1 - r2):
        return None
    a = (r1 * r1 - r2 * r2 + d * d) / (2 * d)
    h = np.sqrt(max(r1 * r1 - a * a, 0.0))
    u = (c2 - c1) / d
    p = c1 + a * u
    perp = np.array([-u[1], u[0]])
    return p + h * perp, p - h * perp


def _unit_or(d: np.ndarray, default: np.ndarray) -> np.ndarray:
    n = np.hypot(d[:, 0], d[:, 1])
    ok = n > 1e-12
    return np.where(ok[:, None], d / np.where(ok, n, 1.0)[:, None], default)


def _directional_var(covs: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.maximum(np.einsum("ki,kij,kj->k", u, covs, u), 0.0)


class SlotEngine:
    """Synchronous message passing over one time slot.

    Every agent reads the previous-iteration snapshot of all beliefs and
    writes only its own next belief.
    """

    def __init__(self, sched: IterationSchedule, engine: EngineConfig | None = None, zone: Rect | None = None):
        self.sched = sched
        self.cfg = engine or EngineConfig()
        self.zone = zone

    # -- building blocks ----------------------------------------------------

    def _edges(self, meas: MeasurementSet):
        ri, sj = np.nonzero(np.isfinite(meas.agent_ranges))
        ra, sa = np.nonzero(np.isfinite(meas.anchor_ranges))
        return (ri, sj, meas.agent_ranges[ri, sj]), (ra, sa, meas.anchor_ranges[ra, sa])

    def _tag_ambiguous(self, state, meas, means, covs, informed_prior, a_edges, g_edges):
        """Agents with exactly two informative range sources get two mode centers."""
        n = state.n_agents
        tight = np.linalg.eigvalsh(covs)[:, 1] <= self.cfg.informative_var
        ra, sa, za = a_edges
        ri, sj, zj = g_edges
        src_count = np.bincount(ra, minlength=n) + np.bincount(ri[tight[sj]], minlength=n)
        tagged = np.zeros(n, bool)
        centers = np.zeros((n, 2, 2))
        for i in np.nonzero((src_count == 2) & ~informed_prior)[0]:
            srcs = [(state.anchor_pos[a], z) for a, z in zip(sa[ra == i], za[ra == i])]
            sel = (ri == i) & tight[sj]
            srcs += [(means[j], z) for j, z in zip(sj[sel], zj[sel])]
            (p1, r1), (p2, r2) = srcs
            pts = circle_intersections(p1, r1, p2, r2)
            if pts is None:
                continue
            tagged[i] = True
            centers[i] = np.stack(pts)
        return tagged, centers

    def _temporal(self, state, meas, prior: BeliefSet, cur_means, cur_covs, iteration):
        n = state.n_agents
        z = meas.internal
        base = np.empty((n, 5))
        pred_covs = prior.covs + (z**2 / 2 + meas.internal_var)[:, None, None] * np.eye(2)
        P = np.linalg.inv(pred_covs)
        b = np.einsum("kij,kj->ki", P, prior.means)
        base[:] = np.column_stack([P[:, 0, 0] / 2, P[:, 1, 1] / 2, b[:, 0], b[:, 1], -P[:, 0, 1]])
        if self.cfg.directed_temporal and iteration > 1:
            std_max = np.sqrt(np.linalg.eigvalsh(cur_covs)[:, 1])
            prior_std = np.sqrt(np.linalg.eigvalsh(prior.covs)[:, 1])
            sel = ~state.fresh & (std_max < z) & (prior_std < z)
            if sel.any():
                u = _unit_or(cur_means[sel] - prior.means[sel], self.cfg.frame.e)
                var = meas.internal_var + _directional_var(prior.covs[sel], u)
                base[sel] = linearize(self.cfg.frame, z[sel], var, prior.means[sel], cur_means[sel])
        if state.fresh.any():
            mu, cov = zone_prior(self.zone) if self.zone is not None else (np.zeros(2), np.eye(2) * 1e12)
            base[state.fresh] = gaussian_params(mu, cov)
        return base

    # -- main loop ----------------------------------------------------------

    def run(self, state: NetworkState, meas: MeasurementSet, prior: BeliefSet) -> SlotResult:
        sched, cfg = self.sched, self.cfg
        n = state.n_agents
        L = sched.l_max
        g_edges, a_edges = self._edges(meas)
        ri, sj, zj = g_edges
        ra, sa, za = a_edges
        var = meas.range_var

        prior = BeliefSet(prior.means.copy(), prior.covs.copy())
        if state.fresh.any():
            mu, cov = zone_prior(self.zone) if self.zone is not None else (np.zeros(2), np.eye(2) * 1e12)
            prior.means[state.fresh] = mu
            prior.covs[state.fresh] = cov
        informed_prior = ~state.fresh & (np.linalg.eigvalsh(prior.covs)[:, 1] <= cfg.informative_var)

        # iteration-0 snapshot: motion-predicted beliefs
        grow = np.where(state.fresh, 0.0, meas.internal**2 / 2 + meas.internal_var)
        means = prior.means.copy()
        covs = prior.covs + grow[:, None, None] * np.eye(2)

        tr_m = np.empty((L, n, 2))
        tr_c = np.empty((L, n, 2, 2))
        ops = np.zeros((L, n), dtype=np.int64)
        internals: list[IterationInternals] = []
        tagged = np.zeros(n, bool)
        centers = np.zeros((n, 2, 2))

        for it in range(1, L + 1):
            base = self._temporal(state, meas, prior, means, covs, it)
            n_msgs = np.ones(n, dtype=np.int64)

            # anchors: exact positions
            omega_a = linearize(cfg.frame, za, var, state.anchor_pos[sa], means[ra])
            attrs_a = np.column_stack([state.anchor_pos[sa], np.zeros((sa.size, 2))])

            # agents: sender belief snapshot
            if cfg.bimodal is not BimodalRule.OFF:
                tagged, centers = self._tag_ambiguous(state, meas, means, covs, informed_prior, a_edges, g_edges)
            u = _unit_or(means[ri] - means[sj], cfg.frame.e)
            v = var + (_directional_var(covs[sj], u) if cfg.propagate_sender_cov else 0.0)
            senders = means[sj].copy()
            bi = tagged[sj]
            extra = np.zeros((0, 5))
            extra_recv = np.zeros(0, dtype=np.int64)
            if bi.any():
                c1, c2 = centers[sj[bi], 0], centers[sj[bi], 1]
                if cfg.bimodal is BimodalRule.PRODUCT:
                    senders[bi] = c1
                    extra = linearize(cfg.frame, zj[bi], var, c2, means[ri[bi]])
                    extra_recv = np.nonzero(bi)[0]
                else:
                    d1 = np.abs(np.hypot(*(means[ri[bi]] - c1).T) - zj[bi])
                    d2 = np.abs(np.hypot(*(means[ri[bi]] - c2).T) - zj[bi])
                    senders[bi] = np.where((d1 <= d2)[:, None], c1, c2)
                v = np.where(bi, var, v)
            omega_g = linearize(cfg.frame, zj, v, senders, means[ri])
            if extra.shape[0]:
                omega_g[extra_recv] += extra
            attrs_g = np.column_stack([means[sj], covs[sj, 0, 0], covs[sj, 1, 1]])

            omega = np.concatenate([omega_a, omega_g])
            attrs = np.concatenate([attrs_a, attrs_g])
            recv = np.concatenate([ra, ri])
            np.add.at(n_msgs, recv, 1)
            if extra_recv.size:
                np.add.at(n_msgs, ri[extra_recv], 1)
            ops[it - 1] = n_msgs

            if sched.enhancer is not None and omega.shape[0]:
                from .gnn.enhancer import enhance_batch

                phi = enhance_batch(omega, attrs, sched.enhancer)[0]
            else:
                phi = omega
            W = base.copy()
            np.add.at(W, recv, phi)
            prox = 1.0 / cfg.damping_radius**2 if cfg.damping_radius > 0 else 0.0
            new_means, new_covs, clamped = gaussians_from_params(W, sched.fusion_mode, means, prox)
            if clamped.any():
                log.debug("iteration %d: %d agents clamped", it, int(clamped.sum()))

            if cfg.record == "all" or (cfg.record == "final" and it == L):
                internals.append(
                    IterationInternals(it, base, prox, omega, attrs, recv, means.copy(), W, new_means, clamped)
                )
            means, covs = new_means, new_covs
            tr_m[it - 1] = means
            tr_c[it - 1] = covs

        return SlotResult(means, covs, tr_m, tr_c, ops, tagged, internals)


def run_slot(
    state: NetworkState,
    meas: MeasurementSet,
    prior: BeliefSet,
    sched: IterationSchedule,
    engine: EngineConfig | None = None,
    zone: Rect | None = None,
) -> SlotResult:
    return SlotEngine(sched, engine, zone).run(state, meas, prior)


def write_trace(fh: IO[str], run_id: str, t: int, agent_ids: np.ndarray, result: SlotResult, header: bool = False):
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(TRACE_COLUMNS)
    write_trace_rows(w, run_id, t, agent_ids, result.trace_means, result.trace_covs)


def write_trace_rows(writer, run_id, t, agent_ids, trace_means, trace_covs):
    for it in range(trace_means.shape[0]):
        for k, aid in enumerate(agent_ids):
            m, c = trace_means[it, k], trace_covs[it, k]
            writer.writerow(
                [run_id, t, it + 1, int(aid), repr(float(m[0])), repr(float(m[1])),
                 repr(float(c[0, 0])), repr(float(c[0, 1])), repr(float(c[1, 1]))]
            )
