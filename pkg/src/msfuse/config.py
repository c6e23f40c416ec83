"""Training configuration and the INI run-config reader."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .synth import SynthConfig

MILESTONES = (4.0, 6.0, 7.0)


@dataclass
class ImagePretrainConfig:
    lr: float = 1e-5
    batch_size: int = 10
    epochs: int = 500
    patience: int = 50
    margin: float = 1.5
    minority_factor: int = 10
    rotate_probability: float = 0.5
    rotate_max_angle: float = 0.02   # degrees


@dataclass
class TextPretrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 500
    patience: int = 50
    margin: float = 1.5
    minority_factor: int = 10
    window: int = 10


@dataclass
class FusionTrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 200
    patience: int = 50


@dataclass
class ModelConfig:
    image_width: int = 8
    image_blocks: int = 2
    embed_dim: int = 64
    text_steps: int = 2
    ehr_dropout: float = 0.3
    decoder_hidden: int = 512
    decoder_layers: int = 4
    attention_channels: int = 8
    anchor: float = 0.0   # every anchor coordinate takes this value


@dataclass
class TrainConfig:
    seed: int = 0
    milestone: float = 4.0
    folds: int = 5
    val_fraction: float = 0.2
    image: ImagePretrainConfig = field(default_factory=ImagePretrainConfig)
    text: TextPretrainConfig = field(default_factory=TextPretrainConfig)
    fusion: FusionTrainConfig = field(default_factory=FusionTrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        for name in ("image", "text", "fusion"):
            sec = getattr(self, name)
            for key in ("lr", "batch_size", "patience"):
                if getattr(sec, key) <= 0:
                    raise ValueError(f"{name}.{key} must be positive")
            if sec.epochs < 0:
                raise ValueError(f"{name}.epochs must be non-negative")
            if sec.epochs and sec.patience > sec.epochs:
                raise ValueError(f"{name}.patience exceeds {name}.epochs")
        for sec in (self.image, self.text):
            if sec.margin <= 0 or sec.minority_factor < 1:
                raise ValueError("margin and minority_factor must be positive")
        m = self.model
        if min(m.image_width, m.embed_dim, m.decoder_hidden, m.decoder_layers, m.attention_channels) <= 0:
            raise ValueError("model sizes must be positive")
        if m.embed_dim > 64:
            raise ValueError("embed_dim cannot exceed the fusion width 64")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        subs = {"image": ImagePretrainConfig, "text": TextPretrainConfig,
                "fusion": FusionTrainConfig, "model": ModelConfig}
        for key, typ in subs.items():
            if key in data:
                data[key] = typ(**data[key])
        return cls(**data)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def desk_profile(seed=0, milestone=4.0):
    """Reduced budgets that finish a 300-patient 5-fold run on one CPU core.

    Defaults elsewhere keep the published settings; this profile shrinks the
    decoder and raises learning rates so short schedules still converge.
    """
    return TrainConfig(
        seed=seed,
        milestone=milestone,
        image=ImagePretrainConfig(lr=1e-3, batch_size=10, epochs=12, patience=4, minority_factor=3),
        text=TextPretrainConfig(lr=1e-3, batch_size=32, epochs=25, patience=6, minority_factor=3),
        fusion=FusionTrainConfig(lr=1e-3, batch_size=16, epochs=60, patience=12),
        model=ModelConfig(decoder_hidden=64, decoder_layers=2),
    )


PROFILES = {"paper": lambda seed=0, milestone=4.0: TrainConfig(seed=seed, milestone=milestone),
            "desk": desk_profile}


# INI sections -> (object path inside RunConfig)
_SECTIONS = {
    "synth": ("synth",),
    "train": ("train",),
    "image": ("train", "image"),
    "text": ("train", "text"),
    "fusion": ("train", "fusion"),
    "model": ("train", "model"),
}


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _coerce(current, text, where):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{where}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        return tuple(int(p) for p in text.replace("x", ",").split(",") if p.strip())
    return text.strip()


def load_run_config(path, base=None):
    """Read an INI file onto ``base`` (default: paper settings). Unknown sections or keys raise."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    run = base if base is not None else RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"{path}: unknown section [{section}]")
        target = run
        for attr in _SECTIONS[section]:
            target = getattr(target, attr)
        known = {f.name for f in dataclasses.fields(target)} - {"image", "text", "fusion", "model"}
        for key, value in parser.items(section):
            if key not in known:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            setattr(target, key, _coerce(getattr(target, key), value, f"[{section}] {key}"))
    run.synth.validate()
    run.train.validate()
    return run


def dump_run_config(run):
    """Render a RunConfig as INI text (all keys, current values)."""
    lines = []
    for section, path in _SECTIONS.items():
        target = run
        for attr in path:
            target = getattr(target, attr)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(target):
            if f.name in ("image", "text", "fusion", "model"):
                continue
            v = getattr(target, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
