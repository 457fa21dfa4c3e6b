"""Scenario generation, mobility, synthetic ranging and datasets.

Randomness for one realization comes from three named generators
(placement, mobility, noise) derived from ``(seed, realization)`` so each
component can be replayed on its own.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterator

import numpy as np

STREAMS = ("placement", "mobility", "noise")


@dataclass(frozen=True)
class Rect:
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    def __post_init__(self):
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi):
            raise ValueError(f"empty rectangle {self}")

    @classmethod
    def square(cls, lo: float, hi: float) -> "Rect":
        return cls(lo, hi, lo, hi)

    @property
    def width(self) -> float:
        return self.x_hi - self.x_lo

    @property
    def height(self) -> float:
        return self.y_hi - self.y_lo

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_lo + self.x_hi) / 2, (self.y_lo + self.y_hi) / 2])

    def contains(self, pts) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, float))
        return (p[:, 0] >= self.x_lo) & (p[:, 0] <= self.x_hi) & (p[:, 1] >= self.y_lo) & (p[:, 1] <= self.y_hi)

    def covers(self, other: "Rect") -> bool:
        return (
            self.x_lo <= other.x_lo and other.x_hi <= self.x_hi and self.y_lo <= other.y_lo and other.y_hi <= self.y_hi
        )

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random((n, 2))
        return np.column_stack([self.x_lo + u[:, 0] * self.width, self.y_lo + u[:, 1] * self.height])

    def to_list(self) -> list[float]:
        return [self.x_lo, self.x_hi, self.y_lo, self.y_hi]

    @classmethod
    def from_any(cls, v) -> "Rect":
        if isinstance(v, Rect):
            return v
        if isinstance(v, dict):
            return cls(float(v["x_lo"]), float(v["x_hi"]), float(v["y_lo"]), float(v["y_hi"]))
        vals = [float(a) for a in v]
        if len(vals) == 2:
            return cls.square(*vals)
        return cls(*vals)


@dataclass(frozen=True)
class Mobility:
    d_mean: float = 2.0
    d_var: float = 1.0

    def __post_init__(self):
        if self.d_var < 0 or self.d_mean < 0:
            raise ValueError("mobility mean and variance must be non-negative")


@dataclass(frozen=True)
class Scenario:
    area: Rect = Rect.square(0.0, 200.0)
    deploy_zone: Rect = Rect.square(20.0, 180.0)
    n_agents: int = 50
    n_anchors: int = 13
    comm_radius: float = 20.0
    range_var: float = 0.1
    internal_var: float = 0.1
    mobility: Mobility = Mobility()
    l_max: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "area", Rect.from_any(self.area))
        object.__setattr__(self, "deploy_zone", Rect.from_any(self.deploy_zone))
        if isinstance(self.mobility, dict):
            object.__setattr__(self, "mobility", Mobility(**self.mobility))
        if not self.area.covers(self.deploy_zone):
            raise ValueError("deploy_zone must lie inside area")
        if not self.comm_radius > 0:
            raise ValueError("comm_radius must be positive")
        if not (self.range_var > 0 and self.internal_var > 0):
            raise ValueError("variances must be positive")
        if self.n_agents < 0 or self.n_anchors < 0:
            raise ValueError("node counts must be non-negative")
        if not 1 <= self.l_max <= 100:
            raise ValueError("l_max must be in 1..100")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["area"] = self.area.to_list()
        d["deploy_zone"] = self.deploy_zone.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise KeyError(sorted(extra)[0])
        return cls(**d)


@dataclass
class NetworkState:
    t: int
    agent_ids: np.ndarray
    agent_pos: np.ndarray
    anchor_pos: np.ndarray
    adj_agents: np.ndarray
    adj_anchors: np.ndarray
    fresh: np.ndarray
    step: np.ndarray
    next_id: int

    @property
    def n_agents(self) -> int:
        return self.agent_pos.shape[0]

    @property
    def n_anchors(self) -> int:
        return self.anchor_pos.shape[0]


@dataclass
class MeasurementSet:
    """Directed ranges: ``agent_ranges[i, j]`` is what agent ``i`` measured
    from agent ``j`` (NaN without a link); likewise ``anchor_ranges[i, a]``.
    ``internal[i]`` is the measured length of agent ``i``'s last move."""

    agent_ranges: np.ndarray
    anchor_ranges: np.ndarray
    internal: np.ndarray
    range_var: float
    internal_var: float

    def n_links(self) -> int:
        return int(np.isfinite(self.agent_ranges).sum() + np.isfinite(self.anchor_ranges).sum())


def rng_streams(seed: int, realization: int = 0) -> dict[str, np.random.Generator]:
    return {
        name: np.random.default_rng(np.random.SeedSequence([int(seed), int(realization), code]))
        for code, name in enumerate(STREAMS)
    }


def anchor_lattice(area: Rect, n: int) -> np.ndarray:
    """First ``n`` cell centers, row-major, of the smallest k x k lattice with k^2 >= n."""
    if n == 0:
        return np.zeros((0, 2))
    k = math.ceil(math.sqrt(n))
    idx = np.arange(n)
    col, row = idx % k, idx // k
    x = area.x_lo + (col + 0.5) * area.width / k
    y = area.y_lo + (row + 0.5) * area.height / k
    return np.column_stack([x, y])


def pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])


def adjacency(agent_pos: np.ndarray, anchor_pos: np.ndarray, radius: float):
    """Agent-agent (no self loops) and agent-anchor links, boundary inclusive."""
    aa = pairwise(agent_pos, agent_pos) <= radius
    np.fill_diagonal(aa, False)
    an = pairwise(agent_pos, anchor_pos) <= radius
    return aa, an


def generate_scenario(cfg: Scenario, rng: np.random.Generator) -> NetworkState:
    pos = cfg.deploy_zone.sample(rng, cfg.n_agents)
    anchors = anchor_lattice(cfg.area, cfg.n_anchors)
    aa, an = adjacency(pos, anchors, cfg.comm_radius)
    return NetworkState(
        t=0,
        agent_ids=np.arange(cfg.n_agents),
        agent_pos=pos,
        anchor_pos=anchors,
        adj_agents=aa,
        adj_anchors=an,
        fresh=np.ones(cfg.n_agents, bool),
        step=np.zeros(cfg.n_agents),
        next_id=cfg.n_agents,
    )


def _step_lengths(rng: np.random.Generator, n: int, mean: float, var: float) -> np.ndarray:
    if var == 0:
        return np.full(n, float(mean))
    d = rng.normal(mean, math.sqrt(var), n)
    bad = d < 0
    while bad.any():
        d[bad] = rng.normal(mean, math.sqrt(var), int(bad.sum()))
        bad = d < 0
    return d


def step_mobility(
    state: NetworkState, cfg: Scenario, rng: np.random.Generator, placement_rng: np.random.Generator | None = None
) -> NetworkState:
    """Move every agent one slot; agents leaving the area are replaced.

    Replacements get a new id, a uniform position in the deploy zone and
    ``fresh=True``. ``placement_rng`` defaults to ``rng``.
    """
    n = state.n_agents
    d = _step_lengths(rng, n, cfg.mobility.d_mean, cfg.mobility.d_var)
    theta = rng.uniform(0.0, 2 * np.pi, n)
    pos = state.agent_pos + d[:, None] * np.column_stack([np.cos(theta), np.sin(theta)])
    out = ~cfg.area.contains(pos)
    ids = state.agent_ids.copy()
    next_id = state.next_id
    if out.any():
        k = int(out.sum())
        pos[out] = cfg.deploy_zone.sample(placement_rng or rng, k)
        ids[out] = np.arange(next_id, next_id + k)
        next_id += k
    aa, an = adjacency(pos, state.anchor_pos, cfg.comm_radius)
    return NetworkState(state.t + 1, ids, pos, state.anchor_pos, aa, an, out, np.where(out, 0.0, d), next_id)


def sense(state: NetworkState, cfg: Scenario, rng: np.random.Generator, noiseless: bool = False) -> MeasurementSet:
    """Noisy directed ranges on every link plus one internal step measurement per agent.

    Negative noisy values are clipped to zero. ``noiseless`` still consumes
    the same random draws but multiplies them by zero.
    """
    n = state.n_agents
    sd, sd_int = math.sqrt(cfg.range_var), math.sqrt(cfg.internal_var)
    if noiseless:
        sd = sd_int = 0.0
    d_aa = pairwise(state.agent_pos, state.agent_pos)
    d_an = pairwise(state.agent_pos, state.anchor_pos)
    z_aa = np.where(state.adj_agents, np.maximum(d_aa + sd * rng.standard_normal(d_aa.shape), 0.0), np.nan)
    z_an = np.where(state.adj_anchors, np.maximum(d_an + sd * rng.standard_normal(d_an.shape), 0.0), np.nan)
    internal = np.maximum(state.step + sd_int * rng.standard_normal(n), 0.0)
    internal[state.fresh] = 0.0
    return MeasurementSet(z_aa, z_an, internal, cfg.range_var, cfg.internal_var)


def count_triangles(adj: np.ndarray) -> int:
    """Triangles in an undirected simple graph: trace(A^3) / 6."""
    a = np.asarray(adj, dtype=np.int64)
    return int(np.einsum("ij,ji->", a @ a, a)) // 6


def monte_carlo_loops(cfg: Scenario, trials: int, seed: int | None = None) -> tuple[float, float]:
    """Mean and standard deviation of the agent triangle count over fresh placements."""
    base = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(base), 0xC0FFEE]))
    anchors = anchor_lattice(cfg.area, cfg.n_anchors)
    counts = np.empty(trials)
    for k in range(trials):
        pos = cfg.deploy_zone.sample(rng, cfg.n_agents)
        aa, _ = adjacency(pos, anchors, cfg.comm_radius)
        counts[k] = count_triangles(aa)
    return float(counts.mean()), float(counts.std(ddof=1) if trials > 1 else 0.0)


@dataclass
class Snapshot:
    realization: int
    state: NetworkState
    meas: MeasurementSet

    def to_record(self) -> dict:
        s, m = self.state, self.meas
        ii, jj = np.nonzero(np.isfinite(m.agent_ranges))
        ia, aa = np.nonzero(np.isfinite(m.anchor_ranges))
        return {
            "realization": self.realization,
            "t": s.t,
            "agent_ids": s.agent_ids.tolist(),
            "agent_pos": s.agent_pos.tolist(),
            "anchor_pos": s.anchor_pos.tolist(),
            "fresh": s.fresh.astype(int).tolist(),
            "step": s.step.tolist(),
            "next_id": s.next_id,
            "internal": m.internal.tolist(),
            "agent_links": [[int(i), int(j), float(m.agent_ranges[i, j])] for i, j in zip(ii, jj)],
            "anchor_links": [[int(i), int(a), float(m.anchor_ranges[i, a])] for i, a in zip(ia, aa)],
            "range_var": m.range_var,
            "internal_var": m.internal_var,
        }

    @classmethod
    def from_record(cls, r: dict) -> "Snapshot":
        pos = np.array(r["agent_pos"], float).reshape(-1, 2)
        anchors = np.array(r["anchor_pos"], float).reshape(-1, 2)
        n, a = pos.shape[0], anchors.shape[0]
        z_aa = np.full((n, n), np.nan)
        z_an = np.full((n, a), np.nan)
        for i, j, z in r["agent_links"]:
            z_aa[i, j] = z
        for i, k, z in r["anchor_links"]:
            z_an[i, k] = z
        state = NetworkState(
            t=int(r["t"]),
            agent_ids=np.array(r["agent_ids"], int),
            agent_pos=pos,
            anchor_pos=anchors,
            adj_agents=np.isfinite(z_aa),
            adj_anchors=np.isfinite(z_an),
            fresh=np.array(r["fresh"], bool),
            step=np.array(r["step"], float),
            next_id=int(r["next_id"]),
        )
        meas = MeasurementSet(z_aa, z_an, np.array(r["internal"], float), float(r["range_var"]), float(r["internal_var"]))
        return cls(int(r["realization"]), state, meas)


def simulate_realization(cfg: Scenario, realization: int, n_slots: int) -> Iterator[Snapshot]:
    rngs = rng_streams(cfg.seed, realization)
    state = generate_scenario(cfg, rngs["placement"])
    for t in range(n_slots):
        if t > 0:
            state = step_mobility(state, cfg, rngs["mobility"], rngs["placement"])
        yield Snapshot(realization, state, sense(state, cfg, rngs["noise"]))


@dataclass
class TrajectoryDataset:
    realizations: list[list[Snapshot]] = field(default_factory=list)

    @property
    def n_slots(self) -> int:
        return len(self.realizations[0]) if self.realizations else 0

    def __len__(self) -> int:
        return len(self.realizations)

    def __post_init__(self):
        lengths = {len(r) for r in self.realizations}
        if len(lengths) > 1:
            raise ValueError("all realizations must have the same slot count")


def _dump(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_dataset(cfg: Scenario, n_realizations: int, n_slots: int, fh: IO[str]) -> int:
    """Stream realizations to ``fh`` as JSON lines; returns the record count."""
    fh.write(_dump({"scenario": cfg.to_dict(), "n_realizations": n_realizations, "n_slots": n_slots}) + "\n")
    count = 0
    for r in range(n_realizations):
        for snap in simulate_realization(cfg, r, n_slots):
            fh.write(_dump(snap.to_record()) + "\n")
            count += 1
    return count


def build_dataset(cfg: Scenario, n_realizations: int, n_slots: int, path: str | Path | None = None) -> TrajectoryDataset:
    """Generate a dataset; with ``path`` it is also streamed to disk as JSON lines."""
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            write_dataset(cfg, n_realizations, n_slots, fh)
    return TrajectoryDataset(
        [list(simulate_realization(cfg, r, n_slots)) for r in range(n_realizations)]
    )


def read_dataset(path: str | Path) -> tuple[Scenario, TrajectoryDataset]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        cfg = Scenario.from_dict(header["scenario"])
        groups: dict[int, list[Snapshot]] = {}
        for line in fh:
            if line.strip():
                snap = Snapshot.from_record(json.loads(line))
                groups.setdefault(snap.realization, []).append(snap)
    return cfg, TrajectoryDataset([groups[k] for k in sorted(groups)])
