"""Run configuration: one serializable tree covering every stage."""

from __future__ import annotations

import hashlib
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..models import ClassifierConfig, DDPMConfig
from ..steering import SteeringConfig
from ..synthspur import FactorSpec


@dataclass
class DatasetConfig:
    causal_classes: int = 2
    spurious_values: int = 2
    correlation: float = 0.95
    image_size: int = 32
    train_size: int = 8000
    val_size: int = 1000
    test_size: int = 1000
    test_correlation: float | None = None  # None -> uniform, 1 / spurious_values
    seed: int = 0

    def spec(self):
        return FactorSpec(self.causal_classes, self.spurious_values, self.correlation, self.image_size)

    def test_spec(self):
        rho = self.test_correlation
        if rho is None:
            rho = 1.0 / self.spurious_values
        return self.spec().with_correlation(rho)


@dataclass
class CausalConfig:
    hidden: int = 0
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class EncoderConfig:
    steps: int = 300
    batch_size: int = 128
    temperature: float = 0.2
    width: int = 16
    embed_dim: int = 64
    train_size: int = 4000
    seed: int = 0


@dataclass
class RefineConfig:
    threshold: float = 0.1
    window: int = 3
    dilation: int = 1
    t_refine: int | None = None  # None -> ceil(0.5 * T)
    literal: bool = False
    paste: bool = False

    def resolved_t_refine(self, T):
        return math.ceil(0.5 * T) if self.t_refine is None else int(self.t_refine)


@dataclass
class MetricConfig:
    n_samples: int = 200
    cout_steps: int = 32
    sfid_repeats: int = 10
    probe_size: int = 4000
    probe_seed: int = 0


OPERATIONAL = ("output_dir", "cache_dir", "train_on_demand", "stage_cache", "workers")


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    ddpm: DDPMConfig = field(default_factory=DDPMConfig)
    causal: CausalConfig = field(default_factory=CausalConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    steering: SteeringConfig = field(default_factory=SteeringConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    target_map: dict | None = None  # source label -> target label; None -> binary flip
    seed: int = 0
    output_dir: str = "runs"
    cache_dir: str = "artifacts"
    train_on_demand: bool = True
    stage_cache: bool = True
    workers: int = 1

    def validate(self):
        with _scope("dataset"):
            self.dataset.spec().validate()
        with _scope("steering"):
            self.steering.validate()
        d = self.dataset
        for name in ("train_size", "val_size", "test_size"):
            if getattr(d, name) < 1:
                raise ConfigError("must be >= 1", f"dataset.{name}")
        if self.metrics.n_samples < 1 or self.metrics.n_samples > d.test_size:
            raise ConfigError("must be in [1, dataset.test_size]", "metrics.n_samples")
        if self.metrics.cout_steps < 1:
            raise ConfigError("must be >= 1", "metrics.cout_steps")
        if self.metrics.sfid_repeats < 1:
            raise ConfigError("must be >= 1", "metrics.sfid_repeats")
        if not 0.0 <= self.refine.threshold <= 1.0:
            raise ConfigError("must be in [0, 1]", "refine.threshold")
        if self.refine.window < 1 or self.refine.window % 2 == 0:
            raise ConfigError("must be odd and >= 1", "refine.window")
        if self.refine.dilation < 0:
            raise ConfigError("must be >= 0", "refine.dilation")
        T = self.ddpm.diffusion_steps
        if not 0 <= self.refine.resolved_t_refine(T) <= T:
            raise ConfigError(f"must be in [0, {T}]", "refine.t_refine")
        if not 0 <= self.steering.resolved_noise_level(T) <= T:
            raise ConfigError(f"must be in [0, {T}]", "steering.noise_level")
        if self.workers < 1:
            raise ConfigError("must be >= 1", "workers")
        K = d.causal_classes
        if self.target_map is None and K != 2:
            raise ConfigError("multi-class runs need an explicit source -> target map", "target_map")
        if self.target_map is not None:
            for src, dst in self.target_map.items():
                if not (0 <= int(src) < K and 0 <= int(dst) < K) or int(src) == int(dst):
                    raise ConfigError(f"bad entry {src} -> {dst}", "target_map")
            if len(self.target_map) != K:
                raise ConfigError("must map every class", "target_map")
        return self

    def target_for(self, labels):
        """Target labels y' for source labels y."""
        if self.target_map is None:
            return np.array([1 - int(y) for y in labels], dtype=np.int64)
        m = {int(k): int(v) for k, v in self.target_map.items()}
        return np.array([m[int(y)] for y in labels], dtype=np.int64)

    def to_dict(self):
        d = asdict(self)
        if self.target_map is not None:
            d["target_map"] = {str(k): int(v) for k, v in sorted(self.target_map.items(), key=lambda kv: int(kv[0]))}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def checksum(self):
        """Hash of everything that affects results; locations and worker counts excluded."""
        d = {k: v for k, v in self.to_dict().items() if k not in OPERATIONAL}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found", "config") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}", "config") from None
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(self.to_json())

    def with_changes(self, **changes):
        """Copy with dotted-path overrides, e.g. ``{"steering.spurious_weight": 1.0}``."""
        data = self.to_dict()
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError("unknown configuration key", key)
                node = node[p]
            if leaf not in node:
                raise ConfigError("unknown field", key)
            node[leaf] = value
        return RunConfig.from_dict(data)


@contextmanager
def _scope(prefix):
    """Qualify the field of a ConfigError raised by a nested config."""
    try:
        yield
    except ConfigError as e:
        if e.field is None or e.field.startswith(prefix + "."):
            raise
        raise ConfigError(str(e).removeprefix(f"{e.field}: "), f"{prefix}.{e.field}") from None


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError("expected an object", prefix.rstrip(".") or "config")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", prefix.rstrip(".") or "config")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def stage_key(*parts):
    """Short content hash of JSON-serializable parts, used for artifact caching."""
    blob = json.dumps(parts, sort_keys=True, default=asdict)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
