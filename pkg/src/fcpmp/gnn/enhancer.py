"""Per-edge refinement of spatial messages by the five networks.

For an edge from sender ``j`` carrying coefficients ``w``::

    node  = g1(sender attributes)
    edge  = g2(w)
    joint = g3(edge * node)
    scale = softplus(g4(joint))        # positive scalar
    offset = softplus(g5(joint))       # positive 5-vector
    refined = w * scale + offset

Inputs are normalized before entering the networks: positions are divided
by ``WeightStore.position_scale``, variances pass through ``log1p`` and the
coefficients through a signed ``log1p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..messages import MessageKind, MessageParams
from .mlp import WeightStore, init_weights, mlp_backward, mlp_forward


@dataclass(frozen=True)
class NodeAttr:
    x: float
    y: float
    var_x: float
    var_y: float

    def __post_init__(self):
        if self.var_x < 0 or self.var_y < 0:
            raise ValueError("variances must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.var_x, self.var_y])


@dataclass(frozen=True)
class Refinement:
    scale: float
    offset: np.ndarray

    def __post_init__(self):
        if not self.scale > 0 or not np.all(np.asarray(self.offset) > 0):
            raise ValueError("refinement outputs must be positive")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def attr_features(attrs: np.ndarray, position_scale: float) -> np.ndarray:
    a = np.atleast_2d(np.asarray(attrs, float))
    return np.column_stack([a[:, :2] / position_scale, np.log1p(np.maximum(a[:, 2:4], 0.0))])


def coeff_features(omega: np.ndarray) -> np.ndarray:
    w = np.atleast_2d(np.asarray(omega, float))
    return np.sign(w) * np.log1p(np.abs(w))


def enhance_batch(omega: np.ndarray, attrs: np.ndarray, ws: WeightStore):
    """Refine (E, 5) coefficients given (E, 4) sender attributes.

    Returns ``(refined, scale, offset, cache)``.
    """
    omega = np.atleast_2d(np.asarray(omega, float))
    sp = ws.specs
    h_node, c1 = mlp_forward(sp["g1"], ws.mlps["g1"], attr_features(attrs, ws.position_scale))
    h_edge, c2 = mlp_forward(sp["g2"], ws.mlps["g2"], coeff_features(omega))
    joint, c3 = mlp_forward(sp["g3"], ws.mlps["g3"], h_edge * h_node)
    s_pre, c4 = mlp_forward(sp["g4"], ws.mlps["g4"], joint)
    o_pre, c5 = mlp_forward(sp["g5"], ws.mlps["g5"], joint)
    scale = softplus(s_pre[:, 0])
    offset = softplus(o_pre)
    refined = omega * scale[:, None] + offset
    cache = dict(omega=omega, h_node=h_node, h_edge=h_edge, s_pre=s_pre, o_pre=o_pre, c=(c1, c2, c3, c4, c5))
    return refined, scale, offset, cache


def enhance_backward(cache: dict, grad_refined: np.ndarray, ws: WeightStore) -> dict:
    """Parameter gradients given dL/d(refined); inputs are treated as constants."""
    sp, g = ws.specs, np.atleast_2d(grad_refined)
    c1, c2, c3, c4, c5 = cache["c"]
    d_scale = np.einsum("ek,ek->e", g, cache["omega"])
    d_spre = (d_scale * sigmoid(cache["s_pre"][:, 0]))[:, None]
    d_opre = g * sigmoid(cache["o_pre"])
    d_joint4, g4 = mlp_backward(sp["g4"], ws.mlps["g4"], c4, d_spre)
    d_joint5, g5 = mlp_backward(sp["g5"], ws.mlps["g5"], c5, d_opre)
    d_prod, g3 = mlp_backward(sp["g3"], ws.mlps["g3"], c3, d_joint4 + d_joint5)
    _, g2 = mlp_backward(sp["g2"], ws.mlps["g2"], c2, d_prod * cache["h_node"])
    _, g1 = mlp_backward(sp["g1"], ws.mlps["g1"], c1, d_prod * cache["h_edge"])
    return {"g1": g1, "g2": g2, "g3": g3, "g4": g4, "g5": g5}


def enhance(params: MessageParams, sender: NodeAttr | np.ndarray, ws: WeightStore) -> tuple[Refinement, MessageParams]:
    if not params.kind.is_spatial or params.kind is MessageKind.REFINED:
        raise ValueError(f"only unrefined spatial messages can be enhanced, got {params.kind.value}")
    attr = sender.as_array() if isinstance(sender, NodeAttr) else np.asarray(sender, float)
    refined, scale, offset, _ = enhance_batch(params.w[None], attr[None], ws)
    return Refinement(float(scale[0]), offset[0]), MessageParams(refined[0], MessageKind.REFINED)


def identity_weights(seed: int = 0, offset_bias: float = -30.0) -> WeightStore:
    """Weights whose refinement is the identity up to ``softplus(offset_bias)``."""
    return init_weights(seed, offset_bias=offset_bias, head_gain=0.0)
