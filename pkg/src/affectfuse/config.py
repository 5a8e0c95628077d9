"""Run configuration: dataclass sections, flat ``section.key = value`` files, hashing, seeds."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import get_type_hints

MODALITIES = ("audio", "visual", "text")
CLASS_NAMES = ("confused", "curious", "bored", "frustrated")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_classes: int = 4
    T: int = 20
    self_transition: float = 0.85
    balance_labels: bool = True  # cyclic relabeling across each group of n_classes sessions
    dim_audio: int = 40
    dim_visual: int = 64
    dim_text: int = 32
    sigma_audio: float = 0.7
    sigma_visual: float = 0.7
    sigma_text: float = 0.7
    noise_schedule: str = "audio_burst"  # constant | audio_burst | random_burst
    burst_factor: float = 4.0
    burst_len: int = 3
    missing_rate_audio: float = 0.0
    missing_rate_visual: float = 0.0
    missing_rate_text: float = 0.0
    missing_mode: str = "at_most_one"  # at_most_one | independent
    n_train: int = 600
    n_val: int = 100
    n_test: int = 200
    seed: int = 42

    def dims(self) -> dict[str, int]:
        return {"audio": self.dim_audio, "visual": self.dim_visual, "text": self.dim_text}

    def sigmas(self) -> dict[str, float]:
        return {"audio": self.sigma_audio, "visual": self.sigma_visual, "text": self.sigma_text}

    def missing_rates(self) -> dict[str, float]:
        return {"audio": self.missing_rate_audio, "visual": self.missing_rate_visual,
                "text": self.missing_rate_text}

    def validate(self) -> None:
        _positive(self, "n_classes", "T", "dim_audio", "dim_visual", "dim_text", "n_train", "n_val",
                  "n_test", "burst_len")
        _unit(self, "self_transition", "missing_rate_audio", "missing_rate_visual", "missing_rate_text")
        for name in ("sigma_audio", "sigma_visual", "sigma_text", "burst_factor"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        _choice(self, "noise_schedule", ("constant", "audio_burst", "random_burst"))
        _choice(self, "missing_mode", ("at_most_one", "independent"))


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 8
    d_ff: int = 64
    t_max: int = 64
    cmaa_dk: int = 16
    mie_hidden: int = 16
    mie_shared: bool = True
    mie_norm: str = "sigmoid"  # sigmoid | softmax
    cls_hidden: int = 32  # 0 -> single linear classifier
    n_classes: int = 4
    dim_audio: int = 40
    dim_visual: int = 64
    dim_text: int = 32
    dropout: float = 0.2
    variant: str = "full"  # full | no_cmaa | no_mie | no_tfl
    init_scale: float = 1.0
    tfl_init_scale: float = 1.0
    feedback_grad: bool = False

    def dims(self) -> dict[str, int]:
        return {"audio": self.dim_audio, "visual": self.dim_visual, "text": self.dim_text}

    def validate(self) -> None:
        _positive(self, "d", "n_heads", "head_dim", "d_ff", "t_max", "cmaa_dk", "mie_hidden", "n_classes",
                  "dim_audio", "dim_visual", "dim_text")
        if self.n_layers < 0 or self.cls_hidden < 0:
            raise ConfigError("n_layers and cls_hidden must be nonnegative")
        if self.n_heads * self.head_dim != self.d:
            raise ConfigError(f"n_heads * head_dim = {self.n_heads * self.head_dim} must equal d = {self.d}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        _choice(self, "mie_norm", ("sigmoid", "softmax"))
        _choice(self, "variant", ("full", "no_cmaa", "no_mie", "no_tfl"))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 1e-5
    warmup_epochs: int = 3
    decay_epochs: tuple[int, ...] = (20, 25)
    decay_factor: float = 0.1
    lam: float = 0.1
    kl_stop_grad: bool = False
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        _positive(self, "epochs", "batch_size", "lr", "patience", "decay_factor")
        if self.weight_decay < 0 or self.warmup_epochs < 0 or self.lam < 0:
            raise ConfigError("weight_decay, warmup_epochs and lam must be nonnegative")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")


# harder desk benchmark for the ablation table: more overlap, a burst on a random modality per session
NOISY_DATA = GeneratorConfig(sigma_audio=0.9, sigma_visual=0.9, sigma_text=0.9, noise_schedule="random_burst")

PAPER_TRAIN = TrainConfig(epochs=50, batch_size=128, lr=1e-4, weight_decay=1e-5, warmup_epochs=5,
                          decay_epochs=(30, 40), decay_factor=0.1, patience=5)
PAPER_MODEL = ModelConfig(d=256, n_layers=4, n_heads=4, head_dim=64, d_ff=1024, cmaa_dk=64, dropout=0.2)


@dataclass(frozen=True)
class HarnessConfig:
    rates: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6)
    missing_mode: str = "at_most_one"
    seeds: tuple[int, ...] = (0, 1, 2)
    lipschitz_samples: int = 1000
    eps_scale: float = 1e-3
    seed: int = 7

    def validate(self) -> None:
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])) or any(not 0 <= r <= 1 for r in self.rates):
            raise ConfigError("rates must be strictly increasing within [0, 1]")
        _choice(self, "missing_mode", ("at_most_one", "independent"))


@dataclass(frozen=True)
class RunConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def validate(self) -> "RunConfig":
        for section in SECTIONS:
            getattr(self, section).validate()
        return self

    def synced(self) -> "RunConfig":
        """Copy raw feature dims and class count from the data section into the model."""
        d = self.data
        model = replace(self.model, dim_audio=d.dim_audio, dim_visual=d.dim_visual, dim_text=d.dim_text,
                        n_classes=d.n_classes)
        return replace(self, model=model)


SECTIONS = ("data", "model", "train", "harness")


def _positive(cfg, *names):
    for name in names:
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")


def _unit(cfg, *names):
    for name in names:
        if not 0.0 <= getattr(cfg, name) <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1]")


def _choice(cfg, name, options):
    if getattr(cfg, name) not in options:
        raise ConfigError(f"{name} must be one of {options}, got {getattr(cfg, name)!r}")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == tuple[int, ...]:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if typ == tuple[float, ...]:
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def section_to_text(name: str, cfg) -> list[str]:
    return [f"{name}.{f.name} = {format_value(getattr(cfg, f.name))}" for f in fields(cfg)]


def section_from_items(cls, items: dict[str, str], prefix: str):
    hints = get_type_hints(cls)
    kwargs = {}
    for key, raw in items.items():
        if key not in hints:
            raise ConfigError(f"unknown key {prefix}.{key}")
        kwargs[key] = parse_value(raw, hints[key], f"{prefix}.{key}")
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    grouped: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
        section, name = key.split(".", 1)
        if section not in grouped:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        if name in grouped[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        grouped[section][name] = value
    classes = {"data": GeneratorConfig, "model": ModelConfig, "train": TrainConfig, "harness": HarnessConfig}
    parts = {s: section_from_items(classes[s], grouped[s], s) for s in SECTIONS}
    return RunConfig(**parts).validate()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def canonical_text(cfg) -> str:
    """Canonical normalized form; every field spelled out in declaration order."""
    if isinstance(cfg, RunConfig):
        lines = []
        for s in SECTIONS:
            lines.extend(section_to_text(s, getattr(cfg, s)))
    else:
        lines = section_to_text(type(cfg).__name__, cfg)
    return "\n".join(lines) + "\n"


def config_hash(cfg, length: int = 12) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:length]


def derive_seed(root: int, purpose: str) -> int:
    """Per-purpose seed: first 8 bytes of sha256("<root>/<purpose>")."""
    digest = hashlib.sha256(f"{root}/{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
