"""Run configuration: nested dataclasses <-> JSON with strict key checking."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    voxel_size: float = 0.01
    n_per_anchor: int = 10
    d_f: int = 32
    d_c: int = 32
    d_q: int = 160
    query_granularity: str = "per_anchor"  # or per_gaussian


@dataclass
class DataConfig:
    scene_dir: str = ""  # empty: generate the synthetic scene in memory
    points: str = ""  # optional PLY overriding the scene's points
    synth_seed: int = 0
    n_objects: int = 3
    n_points: int = 3000
    n_cameras: int = 8
    image_size: int = 64
    holdout: list = field(default_factory=lambda: [3, 7])
    models: dict = field(default_factory=lambda: {
        "clip": 16, "siglip": 16, "dinov2": 32, "seem": 16, "llama3": 32, "llamav": 160})


@dataclass
class BankConfig:
    gamma: float = 0.9
    path: str = ""


@dataclass
class RenderConfig:
    tile: int = 16
    tiled: bool = True
    normalize_query: bool = False
    background: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    random_background: bool = True  # training only; needs ground-truth coverage


@dataclass
class LossConfig:
    l1: float = 0.8
    ssim: float = 0.2
    scale: float = 0.01
    feature: float = 1.0


@dataclass
class LifecycleConfig:
    prune_ratio: float = 0.001
    lambda_norm: float = 2.0
    lambda_grad: float = 8.0
    grow_threshold: float = 2e-4
    interval: int = 100
    warmup: int = 500
    stop: int = 15000
    volume_percentile: float = 90.0
    volume_exponent: float = 1.0
    grow_noise: float = 0.01


@dataclass
class GroupLR:
    init: float = 0.0
    final: float = None  # None: constant
    decay_steps: int = 30000


def _default_lrs():
    return {
        "anchor_offset": GroupLR(1e-2, 1.6e-4, 30000),
        "anchor_latent": GroupLR(7.5e-3, 7.5e-4, 30000),
        "anchor_scale": GroupLR(7e-3),
        "mlp": GroupLR(2e-3),
        "appearance_embed": GroupLR(5e-2),
        "adapt_layer": GroupLR(2e-3),
    }


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    lr: dict = field(default_factory=_default_lrs)


@dataclass
class TrainConfig:
    iterations: int = 30000
    seed: int = 0
    eval_every: int = 500
    log_every: int = 1
    precision: str = "float32"
    out_dir: str = "run"
    checkpoint_every: int = 0  # 0: only at the end


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lifecycle: LifecycleConfig = field(default_factory=LifecycleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def copy(self):
        return copy.deepcopy(self)

    def validate(self):
        s = self.scene
        if s.voxel_size <= 0:
            raise ConfigError("scene.voxel_size must be positive")
        if s.n_per_anchor < 1 or s.d_f < 1 or s.d_c < 1 or s.d_q < 1:
            raise ConfigError("scene dimensions must be positive")
        if s.query_granularity not in ("per_anchor", "per_gaussian"):
            raise ConfigError(f"unknown query_granularity {s.query_granularity!r}")
        if self.data.n_objects < 1:
            raise ConfigError("data.n_objects must be at least 1")
        if any(d < 2 for d in self.data.models.values()):
            raise ConfigError("model feature dims must be at least 2")
        if not 0 < self.bank.gamma < 1:
            raise ConfigError("bank.gamma must lie in (0, 1)")
        if not 0 <= self.lifecycle.prune_ratio < 1:
            raise ConfigError("lifecycle.prune_ratio must lie in [0, 1)")
        for k in ("l1", "ssim", "scale", "feature"):
            if getattr(self.loss, k) < 0:
                raise ConfigError(f"loss.{k} must be non-negative")
        if len(self.render.background) != 3:
            raise ConfigError("render.background must have three components")
        if self.train.precision not in ("float32", "float64"):
            raise ConfigError("train.precision must be float32 or float64")
        if self.train.iterations < 0:
            raise ConfigError("train.iterations must be non-negative")
        unknown = set(self.optim.lr) - set(_default_lrs())
        if unknown:
            raise ConfigError(f"unknown parameter groups in optim.lr: {sorted(unknown)}")
        return self


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for k, v in data.items():
        cur = getattr(defaults, k)
        where = f"{path}.{k}" if path else k
        if dataclasses.is_dataclass(cur):
            kwargs[k] = _build(type(cur), v, where)
        elif k == "lr" and cls is OptimConfig:
            lrs = _default_lrs()
            for g, spec in v.items():
                if g not in lrs:
                    raise ConfigError(f"unknown parameter group {where}.{g}")
                lrs[g] = spec if isinstance(spec, GroupLR) else _build(GroupLR, spec, f"{where}.{g}")
            kwargs[k] = lrs
        else:
            kwargs[k] = v
    return cls(**kwargs)


def from_dict(data):
    return _build(Config, data, "").validate()


def load(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(data)


def apply_overrides(cfg, items):
    """Apply ``section.key=value`` overrides; values parse as JSON when possible."""
    data = cfg.to_dict()
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if not isinstance(node, dict) or (parts[-1] not in node and parts[-2:-1] != ["lr"]):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(data)


def toy():
    """Settings for the 64x64 synthetic scene: voxels sized to the scene
    (unit-scale objects, not metres) and a lighter feature weight so the
    feature loss does not outweigh the image terms."""
    cfg = Config()
    cfg.scene.voxel_size = 0.15
    cfg.loss.feature = 0.1
    cfg.train.iterations = 2000
    return cfg


PRESETS = {"default": Config, "toy": toy}
