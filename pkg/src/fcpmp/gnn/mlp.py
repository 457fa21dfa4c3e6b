"""Small fully connected networks with hand-written reverse mode."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class WeightFileError(ValueError):
    """Weight file is malformed or does not match the network shapes."""


@dataclass(frozen=True)
class MlpSpec:
    name: str
    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError(f"{self.name}: need one activation per layer")
        for a in self.activations:
            if a not in ("relu", "linear"):
                raise ValueError(f"{self.name}: unknown activation {a!r}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(o, i) for i, o in zip(self.widths[:-1], self.widths[1:])]


# node encoder, edge encoder, message combiner, scale head, offset head
DEFAULT_SPECS: dict[str, MlpSpec] = {
    "g1": MlpSpec("g1", (4, 32, 16, 8), ("relu", "relu", "relu")),
    "g2": MlpSpec("g2", (5, 32, 16, 8), ("relu", "relu", "relu")),
    "g3": MlpSpec("g3", (8, 32, 16, 8), ("relu", "relu", "relu")),
    "g4": MlpSpec("g4", (8, 8, 1), ("relu", "linear")),
    "g5": MlpSpec("g5", (8, 8, 5), ("relu", "linear")),
}

Layers = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class WeightStore:
    mlps: dict[str, Layers]
    specs: dict[str, MlpSpec] = field(default_factory=lambda: dict(DEFAULT_SPECS))
    trained_epochs: int = 0
    lr: float | None = None
    position_scale: float = 100.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name, spec in self.specs.items():
            if name not in self.mlps:
                raise WeightFileError(f"missing network {name}")
            layers = self.mlps[name]
            if len(layers) != len(spec.shapes):
                raise WeightFileError(f"{name}: expected {len(spec.shapes)} layers, got {len(layers)}")
            for k, ((w, b), shape) in enumerate(zip(layers, spec.shapes)):
                if w.shape != shape or b.shape != (shape[0],):
                    raise WeightFileError(
                        f"{name} layer {k}: expected weight {shape} and bias ({shape[0]},), got {w.shape} and {b.shape}"
                    )
                if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                    raise WeightFileError(f"{name} layer {k}: non-finite parameters")

    def flat(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (shared with gradients)."""
        out = []
        for name in sorted(self.mlps):
            for w, b in self.mlps[name]:
                out += [w, b]
        return out

    def copy(self) -> "WeightStore":
        return WeightStore(
            {k: [(w.copy(), b.copy()) for w, b in v] for k, v in self.mlps.items()},
            dict(self.specs),
            self.trained_epochs,
            self.lr,
            self.position_scale,
        )

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "mlps": {
                k: {"layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in v]} for k, v in sorted(self.mlps.items())
            },
            "trained_epochs": self.trained_epochs,
            "lr": self.lr,
            "position_scale": self.position_scale,
        }

    @classmethod
    def from_dict(cls, d: dict, specs: dict[str, MlpSpec] | None = None) -> "WeightStore":
        try:
            if d.get("format_version") != FORMAT_VERSION:
                raise WeightFileError(f"unsupported format_version {d.get('format_version')!r}")
            mlps = {
                k: [(np.array(l["w"], dtype=np.float64), np.array(l["b"], dtype=np.float64)) for l in v["layers"]]
                for k, v in d["mlps"].items()
            }
            return cls(
                mlps,
                dict(specs or DEFAULT_SPECS),
                int(d.get("trained_epochs", 0)),
                d.get("lr"),
                float(d.get("position_scale", 100.0)),
            )
        except WeightFileError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise WeightFileError(f"malformed weight file: {exc}") from exc


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_out, fan_in))


# softplus(SCALE_BIAS) == 1
SCALE_BIAS = math.log(math.e - 1.0)


def init_weights(
    seed: int = 0,
    specs: dict[str, MlpSpec] | None = None,
    offset_bias: float = -15.0,
    position_scale: float = 100.0,
    head_gain: float = 0.0,
) -> WeightStore:
    """Uniform Glorot weights, zero biases; output heads start at the identity refinement.

    The last layers of g4 and g5 have their Glorot weights multiplied by
    ``head_gain`` (0 makes the initial refinement input-independent). The
    scale head's last bias is set so its softplus is 1 and the offset head's
    last bias to ``offset_bias`` so offsets start near zero.
    """
    specs = dict(specs or DEFAULT_SPECS)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6E6E]))
    mlps = {}
    for name in sorted(specs):
        layers = [(glorot(rng, o, i), np.zeros(o)) for o, i in specs[name].shapes]
        mlps[name] = layers
    for name, bias in (("g4", SCALE_BIAS), ("g5", offset_bias)):
        if name in mlps:
            mlps[name][-1][0][:] *= head_gain
            mlps[name][-1][1][:] = bias
    return WeightStore(mlps, specs, position_scale=position_scale)


def mlp_forward(spec: MlpSpec, layers: Layers, x: np.ndarray):
    """Forward pass on a (B, in) batch; returns ``(out, cache)``."""
    x = np.asarray(x, float)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != spec.widths[0]:
        raise ValueError(f"{spec.name}: input width {h.shape[1]} != {spec.widths[0]}")
    cache = [h]
    for (w, b), act in zip(layers, spec.activations):
        pre = h @ w.T + b
        h = np.maximum(pre, 0.0) if act == "relu" else pre
        cache.append(pre)
        cache.append(h)
    return (h[0] if squeeze else h), cache


def mlp_backward(spec: MlpSpec, layers: Layers, cache, grad_out: np.ndarray):
    """Reverse pass; returns ``(grad_input, [(dW, db), ...])``."""
    g = np.atleast_2d(np.asarray(grad_out, float))
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        pre = cache[1 + 2 * k]
        h_in = cache[2 * k]
        if spec.activations[k] == "relu":
            g = g * (pre > 0)
        grads[k] = (g.T @ h_in, g.sum(axis=0))
        g = g @ w
    return g, grads


def save_weights(ws: WeightStore, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ws.to_dict(), sort_keys=True), encoding="utf-8")


def load_weights(path: str | Path, specs: dict[str, MlpSpec] | None = None) -> WeightStore:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise WeightFileError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise WeightFileError(f"{path}: expected a JSON object")
    return WeightStore.from_dict(d, specs)
