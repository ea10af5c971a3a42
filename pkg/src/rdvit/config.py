"""Flat `key = value` run configuration.

One file drives a whole run: model shape, synthetic data recipe, and
optimizer settings share a single namespace so experiment files stay
greppable. Lines are `key = value`, `#` starts a comment, and unknown keys
are rejected rather than ignored (a typo should fail loudly, not silently
train the default). parse/format round-trip exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .data import AUGMENT_OPS, SynthSpec
from .errors import ConfigError
from .model import RDViTConfig


@dataclass(frozen=True)
class RunConfig:
    # run
    seed: int = 42
    precision: str = "f32"  # "f32" or "f64"
    variant: str = "custom"  # named presets override dim/heads/loops/moe
    # model
    image_size: tuple = (64, 64)
    patch_size: int = 8
    patch_size_z: int = 2
    in_channels: int = 1
    dim: int = 192
    heads: int = 3
    loops: int = 8
    prelude_layers: int = 1
    coda_layers: int = 1
    lora_rank: int = 4
    act_threshold: float = 0.95
    moe: bool = False
    moe_experts: int = 8
    moe_top_k: int = 2
    moe_expert_dim: int = 128
    dropout: float = 0.1
    drop_path: float = 0.1
    seg_head_channels: int = 64
    num_classes: int = 4
    head: str = "seg"
    # data
    data_kind: str = "cardiac2d"
    n_samples: int = 200
    val_fraction: float = 0.2
    data_fraction: float = 1.0
    noise_sigma: float = 0.05
    edge_blur: float = 1.0
    augment: tuple = ("hflip",)
    # optimization
    epochs: int = 20
    batch_size: int = 8
    lr: float = 3e-4
    lr_min: float = 0.0
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    ponder_lambda: float = 0.01
    moe_bias_gamma: float = 0.001

    def model_config(self) -> RDViTConfig:
        return RDViTConfig(
            image_size=tuple(self.image_size),
            patch_size=self.patch_size,
            patch_size_z=self.patch_size_z,
            in_channels=self.in_channels,
            dim=self.dim,
            heads=self.heads,
            loops=self.loops,
            prelude_layers=self.prelude_layers,
            coda_layers=self.coda_layers,
            lora_rank=self.lora_rank,
            act_threshold=self.act_threshold,
            moe=self.moe,
            moe_experts=self.moe_experts,
            moe_top_k=self.moe_top_k,
            moe_expert_dim=self.moe_expert_dim,
            dropout=self.dropout,
            drop_path=self.drop_path,
            seg_head_channels=self.seg_head_channels,
            num_classes=self.num_classes,
            head=self.head,
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            kind=self.data_kind,
            size=tuple(self.image_size),
            n_samples=self.n_samples,
            seed=self.seed,
            noise_sigma=self.noise_sigma,
            edge_blur=self.edge_blur,
        )

    def validate(self) -> "RunConfig":
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got '{self.precision}'")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ConfigError(f"data_fraction must lie in (0, 1], got {self.data_fraction}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError(f"need 0 <= lr_min <= lr and lr > 0, got {self.lr_min}, {self.lr}")
        for op in self.augment:
            if op not in AUGMENT_OPS:
                raise ConfigError(f"unknown augmentation '{op}' (have {AUGMENT_OPS})")
        if self.data_kind == "teeth3d" and "hflip" in self.augment:
            raise ConfigError("hflip would mirror tooth identities; not valid for teeth3d")
        self.model_config().validate()
        self.synth_spec().validate()
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELDS[name].type
    default = getattr(RunConfig, name)
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.strip("()").split(",") if p.strip()]
            if name == "augment":
                return tuple(parts)
            return tuple(int(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for '{name}': {raw!r} (expected {kind})") from exc


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in updates:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        updates[key] = _parse_value(key, raw)
    return replace(base if base is not None else RunConfig(), **updates).validate()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_run_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def read_run_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read(), base=base)


def write_run_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_run_config(cfg))
