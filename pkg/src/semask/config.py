"""Run configuration: JSON files, profiles, strict validation.

Unknown keys are fatal so a typo cannot silently change an experiment.
Configs round-trip losslessly through ``to_dict``/``from_dict``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from semask.encoder import PRESET_NAMES, EncoderConfig
from semask.training import DEFAULT_SCALES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SynthSpec:
    count: int = 16
    height: int = 64
    width: int = 64
    seed: int = 7


@dataclass
class DataSpec:
    root: str | None = None
    synth: SynthSpec | None = field(default_factory=SynthSpec)


@dataclass
class RunConfig:
    profile: str = "toy"
    preset: str = "toy"
    num_classes: int = 4
    decoder_width: int = 32
    semantic: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSpec = field(default_factory=DataSpec)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.preset(self.preset, self.num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["scales"] = list(self.train.scales)
        d["train"]["mean"] = list(self.train.mean)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_PROFILES = {
    # desk-scale defaults: small crops, short schedule, synthetic data
    "toy": {},
    # full-scale settings preserved for reference; not exercised in CI
    "paper": {
        "preset": "tiny",
        "num_classes": 150,
        "decoder_width": 128,
        "train": {
            "base_lr": 1e-4,
            "weight_decay": 1e-4,
            "total_iters": 80_000,
            "warmup_iters": 1_500,
            "batch_size": 16,
            "crop": 512,
        },
        "data": {"root": None, "synth": None},
    },
}


def profile_defaults(profile: str) -> dict:
    if profile not in _PROFILES:
        raise ConfigError(f"profile must be one of {sorted(_PROFILES)}, got {profile!r}")
    base = RunConfig().to_dict()
    base["profile"] = profile
    overrides = _PROFILES[profile]
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            base[key].update(val)
        else:
            base[key] = val
    return base


_SCHEMA = {
    "profile": str,
    "preset": str,
    "num_classes": int,
    "decoder_width": int,
    "semantic": bool,
    "train": {
        "base_lr": float,
        "weight_decay": float,
        "alpha": float,
        "total_iters": int,
        "warmup_iters": int,
        "batch_size": int,
        "crop": int,
        "scales": list,
        "jitter": float,
        "mean": list,
        "ignore_label": int,
        "seed": int,
        "augment": bool,
    },
    "data": {
        "root": (str, type(None)),
        "synth": {
            "count": int,
            "height": int,
            "width": int,
            "seed": int,
        },
    },
}


def _check_keys(doc: dict, schema: dict, path: str) -> None:
    for key, val in doc.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        spec = schema[key]
        if isinstance(spec, dict):
            if val is None:
                continue
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be an object")
            _check_keys(val, spec, where)
        else:
            types = spec if isinstance(spec, tuple) else (spec,)
            if float in types:
                types = types + (int,)
            if not isinstance(val, types) or (bool not in types and isinstance(val, bool)):
                names = "/".join(t.__name__ for t in types)
                raise ConfigError(f"{where} must be {names}, got {type(val).__name__}")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def from_dict(doc: dict) -> RunConfig:
    """Strict-parse a config document, filling defaults from its profile."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(doc, _SCHEMA, "")
    merged = _merge(profile_defaults(doc.get("profile", "toy")), doc)

    if merged["preset"] not in PRESET_NAMES:
        raise ConfigError(f"preset must be one of {PRESET_NAMES}, got {merged['preset']!r}")
    if merged["num_classes"] < 2:
        raise ConfigError("num_classes must be >= 2")
    if merged["decoder_width"] < 1:
        raise ConfigError("decoder_width must be >= 1")

    tr = merged["train"]
    try:
        train = TrainConfig(
            base_lr=float(tr["base_lr"]),
            weight_decay=float(tr["weight_decay"]),
            alpha=float(tr["alpha"]),
            total_iters=int(tr["total_iters"]),
            warmup_iters=int(tr["warmup_iters"]),
            batch_size=int(tr["batch_size"]),
            crop=int(tr["crop"]),
            scales=tuple(float(s) for s in tr["scales"]),
            jitter=float(tr["jitter"]),
            mean=tuple(float(m) for m in tr["mean"]),
            ignore_label=int(tr["ignore_label"]),
            seed=int(tr["seed"]),
            augment=bool(tr["augment"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc

    da = merged["data"]
    synth = None
    if da.get("synth") is not None:
        s = _merge(asdict(SynthSpec()), da["synth"])
        synth = SynthSpec(count=int(s["count"]), height=int(s["height"]),
                          width=int(s["width"]), seed=int(s["seed"]))
        if synth.count < 1 or synth.height < 8 or synth.width < 8:
            raise ConfigError("data.synth needs count >= 1 and extents >= 8")
    data = DataSpec(root=da.get("root"), synth=synth)
    if data.root is None and data.synth is None:
        raise ConfigError("data must provide either root or synth")

    cfg = RunConfig(profile=merged["profile"], preset=merged["preset"],
                    num_classes=merged["num_classes"],
                    decoder_width=merged["decoder_width"],
                    semantic=merged["semantic"], train=train, data=data)
    cfg.encoder_config()  # surfaces invalid preset/class combinations early
    return cfg


def parse_config(path) -> RunConfig:
    """Load and strict-parse a JSON config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return from_dict(doc)
