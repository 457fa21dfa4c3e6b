"""Second-order Chebyshev surfaces for the range nonlinearity.

A surface is a 3x3 coefficient matrix ``c`` together with the rectangle
(:class:`FitDomain`) whose coordinates are affinely mapped onto the canonical
interval ``[-1, 1]`` per axis::

    f(x, y) ~ sum_{n,m <= 2} c[n, m] T_n(u(x)) T_m(v(y))

The module also holds a fixed reference coefficient matrix and can search a
list of candidate domains for the one that reproduces it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

ORDER = 2
MAX_BASIS_ORDER = 4

REFERENCE_C = np.array(
    [
        [1.12, -0.45, 0.20],
        [-0.45, -0.14, 0.06],
        [0.20, 0.06, -0.02],
    ]
)

UNREPRODUCED_TOL = 0.05


class DegenerateGridError(ValueError):
    """The sample grid cannot determine all nine coefficients."""


@dataclass(frozen=True)
class FitDomain:
    """Axis-aligned rectangle mapped to ``[-1, 1]^2``."""

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    def __post_init__(self):
        vals = (self.x_lo, self.x_hi, self.y_lo, self.y_hi)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("domain bounds must be finite")
        if not self.x_lo < self.x_hi:
            raise ValueError(f"x_lo={self.x_lo} must be < x_hi={self.x_hi}")
        if not self.y_lo < self.y_hi:
            raise ValueError(f"y_lo={self.y_lo} must be < y_hi={self.y_hi}")

    @classmethod
    def square(cls, lo: float, hi: float) -> "FitDomain":
        return cls(lo, hi, lo, hi)

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_lo + self.x_hi) / 2, (self.y_lo + self.y_hi) / 2])

    @property
    def half_widths(self) -> np.ndarray:
        return np.array([(self.x_hi - self.x_lo) / 2, (self.y_hi - self.y_lo) / 2])

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.x_hi - self.x_lo, self.y_hi - self.y_lo))

    def to_canonical(self, x, y):
        c, h = self.center, self.half_widths
        return (np.asarray(x, float) - c[0]) / h[0], (np.asarray(y, float) - c[1]) / h[1]

    def from_canonical(self, u, v):
        c, h = self.center, self.half_widths
        return np.asarray(u, float) * h[0] + c[0], np.asarray(v, float) * h[1] + c[1]

    def contains(self, x, y, tol: float = 1e-12):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return (
            (x >= self.x_lo - tol)
            & (x <= self.x_hi + tol)
            & (y >= self.y_lo - tol)
            & (y <= self.y_hi + tol)
        )

    def to_dict(self) -> dict:
        return {"x_lo": self.x_lo, "x_hi": self.x_hi, "y_lo": self.y_lo, "y_hi": self.y_hi}

    @classmethod
    def from_dict(cls, d: dict) -> "FitDomain":
        return cls(float(d["x_lo"]), float(d["x_hi"]), float(d["y_lo"]), float(d["y_hi"]))

    def label(self) -> str:
        if (self.x_lo, self.x_hi) == (self.y_lo, self.y_hi):
            return f"[{self.x_lo:g},{self.x_hi:g}]^2"
        return f"[{self.x_lo:g},{self.x_hi:g}]x[{self.y_lo:g},{self.y_hi:g}]"


CANONICAL = FitDomain(-1.0, 1.0, -1.0, 1.0)


@dataclass(frozen=True)
class ChebCoeffMatrix:
    """3x3 coefficient matrix ``c[n, m]`` (row = x order, column = y order)."""

    c: np.ndarray
    domain: FitDomain = CANONICAL
    deviation_from_paper: float | None = None

    def __post_init__(self):
        c = np.array(self.c, dtype=np.float64)
        if c.shape != (ORDER + 1, ORDER + 1):
            raise ValueError(f"coefficient matrix must be 3x3, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficient matrix has non-finite entries")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    def is_symmetric(self, tol: float = 1e-9) -> bool:
        return bool(np.max(np.abs(self.c - self.c.T)) <= tol)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "c": self.c.tolist(),
            "deviation_from_paper": self.deviation_from_paper,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChebCoeffMatrix":
        dev = d.get("deviation_from_paper")
        return cls(
            np.array(d["c"], dtype=np.float64),
            FitDomain.from_dict(d["domain"]),
            None if dev is None else float(dev),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ChebCoeffMatrix":
        return cls.from_dict(json.loads(text))


def reference_matrix() -> ChebCoeffMatrix:
    """The reference matrix, attached to the canonical domain."""
    return ChebCoeffMatrix(REFERENCE_C, CANONICAL, 0.0)


def cheb_basis(n: int, u):
    """T_n(u) by the three-term recurrence; ``u`` may be an array."""
    if not isinstance(n, (int, np.integer)) or n < 0 or n > MAX_BASIS_ORDER:
        raise ValueError(f"basis order {n!r} outside supported range 0..{MAX_BASIS_ORDER}")
    u = np.asarray(u, dtype=np.float64)
    t_prev = np.ones_like(u)
    if n == 0:
        return t_prev if t_prev.ndim else float(t_prev)
    t = u.copy()
    for _ in range(n - 1):
        t_prev, t = t, 2.0 * u * t - t_prev
    return t if t.ndim else float(t)


def _design_matrix(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    tu = [cheb_basis(n, u) for n in range(ORDER + 1)]
    tv = [cheb_basis(m, v) for m in range(ORDER + 1)]
    cols = [tu[n] * tv[m] for n in range(ORDER + 1) for m in range(ORDER + 1)]
    return np.stack([np.ravel(c) for c in cols], axis=-1)


def eval_surface(C: ChebCoeffMatrix, x, y, return_flag: bool = False):
    """Evaluate the surface at world coordinates ``(x, y)``.

    Points outside ``C.domain`` are evaluated anyway; pass
    ``return_flag=True`` to also get a boolean extrapolation mask.
    """
    u, v = C.domain.to_canonical(x, y)
    shape = np.broadcast(u, v).shape
    u, v = np.broadcast_arrays(u, v)
    val = (_design_matrix(u, v) @ C.c.ravel()).reshape(shape)
    val = val if shape else float(val)
    if return_flag:
        return val, ~C.domain.contains(x, y)
    return val


def chebyshev_gauss_grid(domain: FitDomain, n: int = 32):
    """Tensor grid at the n Chebyshev-Gauss abscissae per axis (world coords)."""
    k = np.arange(n)
    g = np.cos((2 * k + 1) * np.pi / (2 * n))
    uu, vv = np.meshgrid(g, g, indexing="ij")
    return domain.from_canonical(uu, vv)


def fit_coeffs(x, y, f, domain: FitDomain) -> ChebCoeffMatrix:
    """Least-squares 3x3 coefficients for samples ``f(x, y)`` over ``domain``."""
    x = np.ravel(np.asarray(x, float))
    y = np.ravel(np.asarray(y, float))
    f = np.ravel(np.asarray(f, float))
    if not (x.size == y.size == f.size):
        raise ValueError("x, y and f must have the same number of samples")
    u, v = domain.to_canonical(x, y)
    A = _design_matrix(u, v)
    if np.unique(np.stack([x, y], 1), axis=0).shape[0] < A.shape[1]:
        raise DegenerateGridError("need at least 9 distinct sample points")
    coef, _, rank, _ = np.linalg.lstsq(A, f, rcond=None)
    if rank < A.shape[1]:
        raise DegenerateGridError(f"sample grid has rank {rank} < 9")
    return ChebCoeffMatrix(coef.reshape(ORDER + 1, ORDER + 1), domain)


def fit_function(func: Callable, domain: FitDomain, n: int = 32) -> ChebCoeffMatrix:
    x, y = chebyshev_gauss_grid(domain, n)
    return fit_coeffs(x, y, func(x, y), domain)


def distance_surface(domain: FitDomain, n: int = 32) -> ChebCoeffMatrix:
    """Fit of sqrt(x^2 + y^2) over ``domain``."""
    return fit_function(np.hypot, domain, n)


def candidate_domains() -> list[FitDomain]:
    """Domains searched by :func:`identify_domain`.

    Origin-anchored squares ``[0, a]^2`` and ``[-a, 0]^2`` (the range-scaled
    family ``[0, 2z]^2`` with ``a = 2z``), the unit squares, the canonical
    square, and width-2 squares shifted along the diagonal in steps of 0.25.
    """
    out = [CANONICAL, FitDomain.square(0, 1), FitDomain.square(0, 2)]
    for a in (0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0):
        out.append(FitDomain.square(0.0, a))
        out.append(FitDomain.square(-a, 0.0))
    for k in range(-8, 9):
        o = 0.25 * k
        out.append(FitDomain.square(o - 1.0, o + 1.0))
    seen, uniq = set(), []
    for d in out:
        key = (d.x_lo, d.x_hi, d.y_lo, d.y_hi)
        if key not in seen:
            seen.add(key)
            uniq.append(d)
    return uniq


@dataclass(frozen=True)
class DomainMatch:
    domain: FitDomain
    fitted: ChebCoeffMatrix
    deviation: float
    reproduced: bool
    target: np.ndarray = field(default=None, compare=False, repr=False)
    table: list = field(default_factory=list, compare=False, repr=False)

    @property
    def matrix(self) -> ChebCoeffMatrix:
        """Matrix downstream code should use: the target when reproduced, else the fresh fit."""
        if self.reproduced and self.target is not None:
            return ChebCoeffMatrix(self.target, self.domain, self.deviation)
        return self.fitted


def identify_domain(
    target: ChebCoeffMatrix | np.ndarray,
    candidates: Iterable[FitDomain] | None = None,
    tol: float = UNREPRODUCED_TOL,
) -> DomainMatch:
    """Find the candidate domain whose distance fit best matches ``target``.

    The deviation is the max-abs entrywise difference. When it exceeds
    ``tol`` the match is flagged as not reproduced.
    """
    tc = target.c if isinstance(target, ChebCoeffMatrix) else np.asarray(target, float)
    cands: Sequence[FitDomain] = list(candidates) if candidates is not None else candidate_domains()
    rows = []
    best = None
    for dom in cands:
        fit = distance_surface(dom)
        dev = float(np.max(np.abs(fit.c - tc)))
        rows.append((dom.label(), dev))
        if best is None or dev < best[1]:
            best = (dom, dev, fit)
    dom, dev, fit = best
    fitted = ChebCoeffMatrix(fit.c, dom, dev)
    return DomainMatch(dom, fitted, dev, dev <= tol, tc.copy(), rows)
