"""Flat key-value run configuration.

A config file is a sequence of ``key = value`` lines. ``#`` starts a comment.
The special key ``include`` names a shipped preset (``toy`` or ``full``) or
another config file whose values are loaded first; later lines override it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # audio
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 256
    win: int = 1024
    mel_bins: int = 80
    mel_fmin: float = 0.0
    mel_fmax: float = 8000.0

    # data
    train_manifest: str = ""
    vocab: str = ""
    batch_size: int = 64
    bucket_factor: int = 4
    num_workers: int = 0

    # model dims
    d_latent: int = 192
    d_spk: int = 256
    hidden: int = 192
    posterior_layers: int = 16
    text_layers: int = 6
    text_heads: int = 2
    text_window: int = 4
    text_ffn: int = 768
    dp_filter: int = 256
    flow_layers: int = 4
    flow_wn_layers: int = 4
    spk_channels: int = 512
    spk_blocks: int = 3
    disc_channels: int = 64
    upsample_rates: tuple = (8, 8, 2, 2)
    upsample_initial_channels: int = 512
    segment_frames: int = 32
    speaker_input: str = "latent"

    # objective
    lambda_se: float = 8.0
    lambda_d: float = 8.0
    rho_min: float = 0.2
    rho_max: float = 0.4
    c_mel: float = 45.0
    c_kl: float = 1.0
    c_dur: float = 1.0

    # optimizer
    lr: float = 2e-4
    lr_decay: float = 0.999875
    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.01
    eps: float = 1e-9
    grad_clip: float = 5.0

    # run
    seed: int = 1234
    max_steps: int = 1000
    checkpoint_every: int = 500
    out_dir: str = "runs/default"

    # inference
    temperature: float = 0.667
    pace: float = 1.0

    def __post_init__(self) -> None:
        self.upsample_rates = tuple(int(u) for u in self.upsample_rates)
        self.validate()

    def validate(self) -> None:
        positive = [
            "sample_rate", "n_fft", "hop", "win", "mel_bins", "batch_size", "d_latent",
            "d_spk", "hidden", "flow_layers", "segment_frames", "lr", "lr_decay",
            "grad_clip", "temperature", "pace",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("lambda_se", "lambda_d", "weight_decay", "c_mel", "c_kl", "c_dur"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.hop <= self.win <= self.n_fft:
            raise ConfigError("need hop <= win <= n_fft")
        if not 0.0 < self.rho_min <= self.rho_max < 1.0:
            raise ConfigError("rho range must lie within (0, 1)")
        if self.d_latent % 2:
            raise ConfigError("d_latent must be even for channel-split coupling")
        prod = 1
        for u in self.upsample_rates:
            prod *= u
        if prod != self.hop:
            raise ConfigError(f"upsample_rates multiply to {prod}, expected hop={self.hop}")
        if self.speaker_input not in ("latent", "spectrogram"):
            raise ConfigError("speaker_input must be 'latent' or 'spectrogram'")

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["upsample_rates"] = list(self.upsample_rates)
        return d

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        return cls(**values)

    def replace(self, **overrides: Any) -> "RunConfig":
        d = self.to_dict()
        d.update(overrides)
        return RunConfig.from_dict(d)


# Desk-scale dimensions. Loss weights and optimizer settings stay at the defaults.
TOY_PRESET: dict[str, Any] = dict(
    batch_size=4,
    d_latent=16,
    d_spk=32,
    hidden=32,
    posterior_layers=4,
    text_layers=2,
    text_ffn=64,
    dp_filter=32,
    flow_layers=4,
    flow_wn_layers=2,
    spk_channels=48,
    spk_blocks=2,
    disc_channels=32,
    upsample_rates=(8, 8, 4),
    upsample_initial_channels=64,
    segment_frames=32,
    max_steps=2000,
    checkpoint_every=500,
)

PRESETS: dict[str, dict[str, Any]] = {"full": {}, "toy": TOY_PRESET}


def preset(name: str, **overrides: Any) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    values = dict(PRESETS[name])
    values.update(overrides)
    return RunConfig.from_dict(values)


def _field_types() -> dict[str, Any]:
    defaults = RunConfig.__dataclass_fields__
    return {name: type(f.default) for name, f in defaults.items()}


def coerce(key: str, raw: str) -> Any:
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key: {key}")
    kind = types[key]
    raw = raw.strip()
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_lines(lines: list[str], source: str = "<config>", base_dir: Path | None = None) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "include":
            if raw in PRESETS:
                values.update(PRESETS[raw])
            else:
                path = Path(raw)
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                values.update(read_config_values(path))
            continue
        values[key] = coerce(key, raw)
    return values


def read_config_values(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    return parse_lines(text.splitlines(), source=str(path), base_dir=path.parent)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        values.update(read_config_values(path))
    for key, value in (overrides or {}).items():
        values[key] = coerce(key, value) if isinstance(value, str) else value
    return RunConfig.from_dict(values)


def describe_keys() -> str:
    """Render every config key with its default, one per line."""
    defaults = RunConfig()
    out = []
    for f in fields(RunConfig):
        value = getattr(defaults, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        out.append(f"  {f.name} = {value}")
    return "\n".join(out)
