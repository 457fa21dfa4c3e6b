"""Closed-form parametric messages over the exponent basis.

Every message is ``exp{w . psi}`` with ``psi = [-x^2, -y^2, x, y, xy]``.

Two layers live here:

* the closed forms (:func:`temporal_message`, :func:`anchor_spatial_message`,
  :func:`agent_spatial_message`) written in the coordinates the Chebyshev
  basis is evaluated in, plus :func:`truncation_oracle` which re-derives
  the same vectors by explicit polynomial expansion;
* :func:`linearize`, used by the fusion engine, which evaluates the same
  truncated expansion in a per-message frame (rotated toward the receiver,
  scaled by the measured range) and pulls the quadratic back to world
  coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.polynomial import chebyshev as npcheb

from .chebyshev import ChebCoeffMatrix, FitDomain, distance_surface

Z_MIN = 1e-9


class MessageKind(str, Enum):
    TEMPORAL = "temporal"
    ANCHOR_SPATIAL = "anchor_spatial"
    AGENT_UNIMODAL = "agent_unimodal"
    AGENT_BIMODAL = "agent_bimodal"
    REFINED = "refined"

    @property
    def is_spatial(self) -> bool:
        return self is not MessageKind.TEMPORAL


class ObsKind(str, Enum):
    INTERNAL = "internal"
    EXTERNAL = "external"


@dataclass(frozen=True)
class MessageParams:
    w: np.ndarray
    kind: MessageKind

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64).reshape(5)
        if not np.all(np.isfinite(w)):
            raise ValueError(f"non-finite message coefficients: {w}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "kind", MessageKind(self.kind))

    def to_record(self) -> list:
        return [*map(float, self.w), self.kind.value]

    @classmethod
    def from_record(cls, rec) -> "MessageParams":
        return cls(np.array(rec[:5], float), MessageKind(rec[5]))

    def __add__(self, other: "MessageParams") -> np.ndarray:
        return self.w + other.w


@dataclass(frozen=True)
class RangeObservation:
    z: float
    var: float
    source: int = -1
    kind: ObsKind = ObsKind.EXTERNAL

    def __post_init__(self):
        if not (self.var > 0 and math.isfinite(self.var)):
            raise ValueError(f"range variance must be positive, got {self.var}")
        if not (self.z >= 0 and math.isfinite(self.z)):
            raise ValueError(f"range must be non-negative, got {self.z}")
        object.__setattr__(self, "kind", ObsKind(self.kind))


@dataclass(frozen=True)
class ModeCenters:
    primary: tuple[float, float]
    secondary: tuple[float, float] | None = None

    @property
    def is_bimodal(self) -> bool:
        return self.secondary is not None

    def points(self) -> list[tuple[float, float]]:
        return [self.primary] if self.secondary is None else [self.primary, self.secondary]


def surface_terms(C: ChebCoeffMatrix) -> np.ndarray:
    """Per-unit-range exponent contribution of the truncated surface."""
    c = C.c
    return np.array(
        [
            (-4 * c[2, 0] + 4 * c[2, 2]) / 2,
            (-4 * c[0, 2] + 4 * c[2, 2]) / 2,
            c[1, 0] - c[1, 2],
            c[0, 1] - c[2, 1],
            c[1, 1],
        ]
    )


def _ring_form(z: float, var: float, cx: float, cy: float, C: ChebCoeffMatrix) -> np.ndarray:
    c = C.c
    return np.array(
        [
            (-4 * z * c[2, 0] + 4 * z * c[2, 2] + 1) / (2 * var),
            (-4 * z * c[0, 2] + 4 * z * c[2, 2] + 1) / (2 * var),
            (z * c[1, 0] - z * c[1, 2] + cx) / var,
            (z * c[0, 1] - z * c[2, 1] + cy) / var,
            z * c[1, 1] / var,
        ]
    )


def temporal_message(obs: RangeObservation, prev: ModeCenters, C: ChebCoeffMatrix) -> MessageParams:
    if obs.kind is not ObsKind.INTERNAL:
        raise ValueError("temporal message needs an internal observation")
    if prev.is_bimodal:
        raise ValueError("previous estimate must be unimodal")
    x, y = prev.primary
    return MessageParams(_ring_form(obs.z, obs.var, x, y, C), MessageKind.TEMPORAL)


def anchor_spatial_message(obs: RangeObservation, anchor_pos, C: ChebCoeffMatrix) -> MessageParams:
    x, y = anchor_pos
    return MessageParams(_ring_form(obs.z, obs.var, x, y, C), MessageKind.ANCHOR_SPATIAL)


def agent_spatial_message(obs: RangeObservation, neighbor: ModeCenters, C: ChebCoeffMatrix) -> MessageParams:
    if not neighbor.is_bimodal:
        x, y = neighbor.primary
        return MessageParams(_ring_form(obs.z, obs.var, x, y, C), MessageKind.AGENT_UNIMODAL)
    (x1, y1), (x2, y2) = neighbor.primary, neighbor.secondary
    z, var, c = obs.z, obs.var, C.c
    w = np.array(
        [
            (-4 * z * c[2, 0] + 4 * z * c[2, 2] + 1) / var,
            (-4 * z * c[0, 2] + 4 * z * c[2, 2] + 1) / var,
            (2 * z * c[1, 0] - 2 * z * c[1, 2] + x1 + x2) / var,
            (2 * z * c[0, 1] - 2 * z * c[2, 1] + y1 + y2) / var,
            2 * z * c[1, 1] / var,
        ]
    )
    return MessageParams(w, MessageKind.AGENT_BIMODAL)


def agent_spatial_components(obs: RangeObservation, neighbor: ModeCenters, C: ChebCoeffMatrix) -> list[MessageParams]:
    """Per-mode factors of a bimodal message (the two-component variant)."""
    return [
        MessageParams(_ring_form(obs.z, obs.var, x, y, C), MessageKind.AGENT_UNIMODAL)
        for x, y in neighbor.points()
    ]


# --- independent oracle -------------------------------------------------


def _power_coeffs(C: ChebCoeffMatrix) -> np.ndarray:
    """Surface as P[i, j] multiplying x^i y^j."""
    conv = np.zeros((3, 3))
    for n in range(3):
        p = npcheb.cheb2poly(np.eye(3)[n])
        conv[n, : len(p)] = p
    return conv.T @ C.c @ conv


def _truncate_exponent(z, var, cx, cy, C) -> np.ndarray:
    E = np.zeros((5, 5))
    E[:3, :3] += (z / var) * _power_coeffs(C)
    # -(x - cx)^2 - (y - cy)^2, all over 2 var
    E[2, 0] -= 1 / (2 * var)
    E[1, 0] += cx / var
    E[0, 2] -= 1 / (2 * var)
    E[0, 1] += cy / var
    return np.array([-E[2, 0], -E[0, 2], E[1, 0], E[0, 1], E[1, 1]])


def truncation_oracle(z: float, var: float, centers: ModeCenters, C: ChebCoeffMatrix) -> MessageParams:
    """Re-derive message coefficients by expanding the squared residual.

    Expands ``-(z - xi)^2 / (2 var)`` with ``xi^2`` exact and ``xi`` the
    power-basis form of the surface, keeps monomials of total degree <= 2
    and drops constants. Two modes give the sum of per-mode vectors.
    """
    w = sum(_truncate_exponent(z, var, x, y, C) for x, y in centers.points())
    kind = MessageKind.AGENT_BIMODAL if centers.is_bimodal else MessageKind.ANCHOR_SPATIAL
    return MessageParams(w, kind)


# --- Gaussian helpers -------------------------------------------------------


def gaussian_params(mean, cov) -> np.ndarray:
    """Exponent vector of N(mean, cov) (constant dropped)."""
    mean = np.asarray(mean, float)
    P = np.linalg.inv(np.asarray(cov, float))
    b = P @ mean
    return np.array([P[0, 0] / 2, P[1, 1] / 2, b[0], b[1], -P[0, 1]])


def precision_to_params(J: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack (..., 2, 2) precisions and (..., 2) linear terms into (..., 5)."""
    return np.stack([J[..., 0, 0] / 2, J[..., 1, 1] / 2, b[..., 0], b[..., 1], -J[..., 0, 1]], axis=-1)


def params_to_precision(w: np.ndarray):
    w = np.asarray(w, float)
    J = np.empty(w.shape[:-1] + (2, 2))
    J[..., 0, 0] = 2 * w[..., 0]
    J[..., 1, 1] = 2 * w[..., 1]
    J[..., 0, 1] = J[..., 1, 0] = -w[..., 4]
    return J, w[..., 2:4]


# --- engine linearization ----------------------------------------------------


def ring_domain(half_width: float = 0.2) -> FitDomain:
    """Square around the ring point on the diagonal at unit range."""
    p = -1 / math.sqrt(2)
    return FitDomain.square(p - half_width, p + half_width)


@dataclass(frozen=True)
class LinearizationFrame:
    """Precomputed geometry for :func:`linearize`.

    Offsets ``w`` from the sending node, in units of ``range / r_ref``, are
    rotated so the receiver direction points at the domain center, then
    mapped to canonical coordinates. ``kappa`` rescales the surface to unit
    radial slope at the domain center when ``calibrate`` is on.
    """

    matrix: ChebCoeffMatrix
    calibrate: bool = True

    def __post_init__(self):
        dom = self.matrix.domain
        ref = dom.center
        r_ref = float(np.hypot(*ref))
        if r_ref < 1e-12:
            raise ValueError(f"domain {dom.label()} is centered on the sender; no radial direction")
        h = dom.half_widths
        c = self.matrix.c
        lin = np.array([c[1, 0] - c[1, 2], c[0, 1] - c[2, 1]])
        Q = np.array(
            [[-2 * (c[2, 0] - c[2, 2]), -c[1, 1] / 2], [-c[1, 1] / 2, -2 * (c[0, 2] - c[2, 2])]]
        )
        e = ref / r_ref
        D = np.diag(1 / h)
        kappa = float(e @ D @ lin) if self.calibrate else 1.0
        if not kappa > 0:
            raise ValueError(f"surface has non-positive radial slope {kappa} at the domain center")
        m = ref / h
        fields = dict(
            e=e,
            r_ref=r_ref,
            kappa=kappa,
            curv=D @ Q @ D,
            slope=D @ (lin + 2 * Q @ m),
        )
        for k, v in fields.items():
            object.__setattr__(self, k, v)


def default_frame(half_width: float = 0.2) -> LinearizationFrame:
    return LinearizationFrame(distance_surface(ring_domain(half_width)))


def rotations_toward(directions: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Rotation matrices taking each unit direction onto ``e``."""
    d = np.asarray(directions, float)
    cos = d @ e
    sin = d[:, 0] * e[1] - d[:, 1] * e[0]
    R = np.empty((d.shape[0], 2, 2))
    R[:, 0, 0] = cos
    R[:, 0, 1] = -sin
    R[:, 1, 0] = sin
    R[:, 1, 1] = cos
    return R


def linearize(frame: LinearizationFrame, z, var, centers, toward) -> np.ndarray:
    """World-coordinate exponent vectors for ring messages, shape (K, 5).

    Message k approximates ``exp{-(z_k - |x - c_k|)^2 / (2 var_k)}``, with the
    distance replaced by the truncated surface evaluated in a frame that
    looks from ``c_k`` toward ``toward_k``. Zero ranges give the pure
    quadratic centered at ``c_k``.
    """
    z = np.atleast_1d(np.asarray(z, float))
    var = np.atleast_1d(np.asarray(var, float))
    centers = np.atleast_2d(np.asarray(centers, float))
    toward = np.atleast_2d(np.asarray(toward, float))
    K = centers.shape[0]
    z = np.broadcast_to(z, (K,))
    var = np.broadcast_to(var, (K,))
    if np.any(var <= 0):
        raise ValueError("message variance must be positive")

    d = toward - centers
    n = np.hypot(d[:, 0], d[:, 1])
    safe = n > 1e-12
    u = np.where(safe[:, None], d / np.where(safe, n, 1.0)[:, None], np.array([1.0, 0.0]))
    R = rotations_toward(u, frame.e)

    live = (z > Z_MIN).astype(float)
    Rt = np.swapaxes(R, 1, 2)
    surf_J = 2 * frame.r_ref / frame.kappa * (Rt @ frame.curv @ R)
    J = (np.eye(2) + live[:, None, None] * surf_J) / var[:, None, None]
    g = (live * z / (frame.kappa * var))[:, None] * np.einsum("kij,j->ki", Rt, frame.slope)
    b = np.einsum("kij,kj->ki", J, centers) + g
    return precision_to_params(J, b)
