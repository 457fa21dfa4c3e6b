"""Run configuration: one JSON document per run, plus the shipped presets."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

from .fusion import BimodalRule, EngineConfig, FusionMode, IterationSchedule
from .sim import Scenario

SEED_ENV = "FCPMP_SEED"
PRESETS = ("paper_train", "paper_eval")
BASELINES = ("particle_bp",)


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class EnhancerConfig:
    enabled: bool = False
    weights: str | None = None


@dataclass(frozen=True)
class EngineOptions:
    bimodal: str = BimodalRule.PRODUCT.value
    informative_var: float = 1.0
    propagate_sender_cov: bool = True
    directed_temporal: bool = False
    damping_radius: float = 2.0

    def build(self) -> EngineConfig:
        return EngineConfig(
            bimodal=BimodalRule(self.bimodal),
            informative_var=self.informative_var,
            propagate_sender_cov=self.propagate_sender_cov,
            directed_temporal=self.directed_temporal,
            damping_radius=self.damping_radius,
        )


@dataclass(frozen=True)
class ParticleOptions:
    n_particles: int = 4000
    full: bool = False


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 20
    lr_start: float = 2e-3
    lr_end: float = 1e-5
    batch: int = 10
    all_iterations: bool = False
    validation_realizations: int = 20  # held-out realizations for checkpoint selection; 0 disables


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario = field(default_factory=Scenario)
    n_realizations: int = 10
    n_slots: int = 10
    fusion_mode: str = FusionMode.EXACT_QUADRATIC.value
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    baselines: tuple[str, ...] = ()
    engine: EngineOptions = field(default_factory=EngineOptions)
    particle: ParticleOptions = field(default_factory=ParticleOptions)
    train: TrainOptions = field(default_factory=TrainOptions)
    output_dir: str = "out"
    seed: int = 0
    workers: int | None = None  # None means every available core

    @property
    def schedule(self) -> IterationSchedule:
        return IterationSchedule(self.scenario.l_max, FusionMode(self.fusion_mode))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.to_dict()
        d["baselines"] = list(self.baselines)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _section(cls, raw: Any, key: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(key, "expected an object")
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"{key}.{k}", "unknown key")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(key, str(e)) from None


def _check_type(key: str, value, types, what: str):
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(key, f"expected {what}")
    if not isinstance(value, types):
        raise ConfigError(key, f"expected {what}")


def _seed(raw) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip() != "":
        try:
            raw = int(env, 0)
        except ValueError:
            raise ConfigError(SEED_ENV, f"not an integer: {env!r}") from None
    _check_type("seed", raw, int, "an integer")
    if not 0 <= raw < 2**64:
        raise ConfigError("seed", "must be a 64-bit unsigned integer")
    return raw


def parse_config(doc: dict, base_dir: str | Path | None = None) -> RunConfig:
    """Validate a config document. ``FCPMP_SEED`` overrides ``seed``.

    Relative file paths resolve against ``base_dir``.
    """
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    known = {f.name for f in fields(RunConfig)}
    for k in doc:
        if k not in known:
            raise ConfigError(k, "unknown key")
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    seed = _seed(doc.get("seed", 0))

    sc = doc.get("scenario", {})
    if not isinstance(sc, dict):
        raise ConfigError("scenario", "expected an object")
    if "seed" in sc:
        raise ConfigError("scenario.seed", "set the top-level seed instead")
    try:
        scenario = Scenario.from_dict({**sc, "seed": seed})
    except KeyError as e:
        raise ConfigError(f"scenario.{e.args[0]}", "unknown key") from None
    except (TypeError, ValueError) as e:
        raise ConfigError("scenario", str(e)) from None

    out: dict[str, Any] = {"scenario": scenario, "seed": seed}
    for k in ("n_realizations", "n_slots"):
        v = doc.get(k, getattr(RunConfig, k))
        _check_type(k, v, int, "an integer")
        if v < 1:
            raise ConfigError(k, "must be at least 1")
        out[k] = v

    fm = doc.get("fusion_mode", RunConfig.fusion_mode)
    try:
        out["fusion_mode"] = FusionMode(fm).value
    except ValueError:
        raise ConfigError("fusion_mode", f"expected one of {[m.value for m in FusionMode]}") from None

    enh = _section(EnhancerConfig, doc.get("enhancer"), "enhancer")
    if enh.enabled:
        if not enh.weights:
            raise ConfigError("enhancer.weights", "required when the enhancer is enabled")
    if enh.weights:
        p = Path(enh.weights)
        p = p if p.is_absolute() else base / p
        enh = replace(enh, weights=str(p))
    out["enhancer"] = enh

    bl = doc.get("baselines", [])
    if not isinstance(bl, list) or any(b not in BASELINES for b in bl):
        raise ConfigError("baselines", f"expected a list drawn from {list(BASELINES)}")
    out["baselines"] = tuple(bl)

    engine = _section(EngineOptions, doc.get("engine"), "engine")
    try:
        BimodalRule(engine.bimodal)
    except ValueError:
        raise ConfigError("engine.bimodal", f"expected one of {[r.value for r in BimodalRule]}") from None
    if engine.damping_radius < 0:
        raise ConfigError("engine.damping_radius", "must be non-negative")
    out["engine"] = engine

    part = _section(ParticleOptions, doc.get("particle"), "particle")
    if not isinstance(part.n_particles, int) or part.n_particles < 1:
        raise ConfigError("particle.n_particles", "must be a positive integer")
    out["particle"] = part

    tr = _section(TrainOptions, doc.get("train"), "train")
    if not isinstance(tr.epochs, int) or tr.epochs < 1:
        raise ConfigError("train.epochs", "must be a positive integer")
    if not isinstance(tr.batch, int) or tr.batch < 1:
        raise ConfigError("train.batch", "must be a positive integer")
    if not (tr.lr_start > 0 and tr.lr_end > 0):
        raise ConfigError("train.lr_start", "learning rates must be positive")
    if not isinstance(tr.validation_realizations, int) or tr.validation_realizations < 0:
        raise ConfigError("train.validation_realizations", "must be a non-negative integer")
    out["train"] = tr

    od = doc.get("output_dir", RunConfig.output_dir)
    _check_type("output_dir", od, str, "a string")
    out["output_dir"] = od

    w = doc.get("workers")
    if w is not None:
        _check_type("workers", w, int, "an integer")
        if w < 1:
            raise ConfigError("workers", "must be at least 1")
    out["workers"] = w
    return RunConfig(**out)


def load_config(path: str | Path) -> RunConfig:
    """Read a config file, or a preset when ``path`` names one (e.g. ``paper_eval``)."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        return parse_config(load_preset(str(path)))
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("config", f"cannot read {p}: {e.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{p} is not valid JSON: {e.msg} at line {e.lineno}") from None
    return parse_config(doc, p.parent)


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError("config", f"unknown preset {name!r}; expected one of {list(PRESETS)}")
    text = resources.files("fcpmp.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)
