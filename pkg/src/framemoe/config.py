"""Experiment configuration: nested dataclasses, YAML loading, dot-path
overrides, validation, and deterministic seed derivation per component."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml


class ConfigError(Exception):
    """Invalid or inconsistent configuration; message lists the fields."""


@dataclass
class BackboneConfig:
    n_layers: int = 4
    width: int = 16
    frame: int = 64
    hop: int = 32
    unfrozen: bool = False
    # When null the backbone seed is derived from the root seed.
    seed: int | None = None


@dataclass
class MoeConfig:
    n_experts: int = 3
    top_k: int = 1
    expert_hidden: int = 64
    balancing_loss_enabled: bool = False
    balancing_alpha: float = 0.01


@dataclass
class StftBlock:
    window: int = 64
    hop: int = 32
    fft_size: int = 64


@dataclass
class HeadsConfig:
    stft: StftBlock = field(default_factory=StftBlock)
    ser_classes: int = 4
    ser_hidden: int = 32
    se_hidden: int = 64


@dataclass
class TrainConfig:
    phase1_se_epochs: int = 8
    phase1_se_batch: int = 16
    phase1_se_lr: float = 2e-3
    phase1_ser_epochs: int = 8
    phase1_ser_batch: int = 32
    phase1_ser_lr: float = 2e-3
    phase2_epochs: int = 12
    phase2_batch: int = 32
    lr_heads_gates_experts: float = 1e-3
    lr_backbone: float = 5e-4
    weight_decay: float = 0.01
    ser_loss_enabled: bool = True
    se_loss_enabled: bool = True


@dataclass
class DataConfig:
    train_size: int = 512
    dev_size: int = 64
    test_size: int = 128
    utterance_len: int = 1024
    sample_rate: int = 8000
    class_proportions: list[int] = field(default_factory=lambda: [10, 8, 29, 53])
    train_snr_db: float = 5.0
    eval_snrs_db: list[float] = field(default_factory=lambda: [-5.0, 0.0, 5.0, 10.0])
    train_noise_family: str = "babble"


@dataclass
class SsnrConfig:
    frame: int = 64
    hop: int = 32
    floor_db: float = -10.0
    ceil_db: float = 35.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/toy"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ssnr: SsnrConfig = field(default_factory=SsnrConfig)


def full_scale_profile() -> ExperimentConfig:
    """The full-scale training recipe this toy setup mirrors.

    Shapes and schedules only; running it would need the real pretrained
    encoder and corpus.
    """
    cfg = ExperimentConfig()
    cfg.backbone = BackboneConfig(n_layers=24, width=1024, frame=64, hop=32, unfrozen=True)
    cfg.moe = MoeConfig(n_experts=3, top_k=1, expert_hidden=4096,
                        balancing_loss_enabled=False, balancing_alpha=0.01)
    cfg.training = TrainConfig(
        phase1_se_epochs=130, phase1_se_batch=16, phase1_se_lr=5e-5,
        phase1_ser_epochs=20, phase1_ser_batch=32, phase1_ser_lr=5e-5,
        phase2_epochs=20, phase2_batch=32,
        lr_heads_gates_experts=5e-5, lr_backbone=2.5e-5,
    )
    cfg.data.train_snr_db = 5.0
    cfg.data.eval_snrs_db = [-5.0, 0.0, 5.0, 10.0]
    return cfg


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Hydrate an ExperimentConfig from a plain nested dict, strictly."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    nested = {
        "backbone": BackboneConfig,
        "moe": MoeConfig,
        "heads": HeadsConfig,
        "training": TrainConfig,
        "data": DataConfig,
        "ssnr": SsnrConfig,
    }
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    kwargs: dict = {}
    for key, value in raw.items():
        if key in nested:
            kwargs[key] = _hydrate(nested[key], value, key)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def _hydrate(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        if cls is HeadsConfig and key == "stft":
            kwargs[key] = _hydrate(StftBlock, value, f"{path}.stft")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a YAML config file; a missing path yields the toy defaults."""
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text()
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply `dot.path=value` overrides; values parse as YAML scalars."""
    raw = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form dot.path=value")
        key, _, value = item.partition("=")
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"override '{item}': no config section '{part}'")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"override '{item}': no config key '{leaf}'")
        node[leaf] = yaml.safe_load(value)
    return config_from_dict(raw)


def resolved_yaml(cfg: ExperimentConfig) -> str:
    """Canonical YAML text of the full resolved config."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(resolved_yaml(cfg).encode()).hexdigest()


def validate(cfg: ExperimentConfig) -> None:
    """Raise ConfigError listing every inconsistent field."""
    problems: list[str] = []
    b, m, h, t, d, s = cfg.backbone, cfg.moe, cfg.heads, cfg.training, cfg.data, cfg.ssnr

    if b.n_layers < 1:
        problems.append(f"backbone.n_layers must be >= 1, got {b.n_layers}")
    if b.width < 1:
        problems.append(f"backbone.width must be >= 1, got {b.width}")
    if b.frame < 2 or b.hop < 1 or b.hop > b.frame:
        problems.append(f"backbone framing invalid: frame={b.frame} hop={b.hop}")

    if m.n_experts < 1:
        problems.append(f"moe.n_experts must be >= 1, got {m.n_experts}")
    if not 1 <= m.top_k <= max(m.n_experts, 1):
        problems.append(f"moe.top_k={m.top_k} out of range for {m.n_experts} experts")
    if m.expert_hidden < 1:
        problems.append(f"moe.expert_hidden must be >= 1, got {m.expert_hidden}")
    if m.balancing_loss_enabled and m.top_k != 1:
        problems.append("moe.balancing_loss_enabled requires moe.top_k == 1")
    if m.balancing_alpha < 0:
        problems.append(f"moe.balancing_alpha must be >= 0, got {m.balancing_alpha}")

    st = h.stft
    if st.window < 2 or st.hop < 1 or st.hop > st.window:
        problems.append(f"stft framing invalid: window={st.window} hop={st.hop}")
    if st.fft_size < st.window:
        problems.append(f"heads.stft.fft_size={st.fft_size} smaller than window {st.window}")
    if h.ser_classes != 4:
        problems.append(f"heads.ser_classes is fixed at 4, got {h.ser_classes}")
    if h.ser_hidden < 1 or h.se_hidden < 1:
        problems.append("head hidden widths must be >= 1")
    # Frame alignment: the backbone and the spectral features must produce the
    # same frame count for every waveform.
    if st.window != b.frame or st.hop != b.hop:
        problems.append(
            f"stft framing (window={st.window}, hop={st.hop}) must match backbone "
            f"framing (frame={b.frame}, hop={b.hop}) so frame counts align"
        )

    for name in ("phase1_se_epochs", "phase1_ser_epochs", "phase2_epochs"):
        if getattr(t, name) < 0:
            problems.append(f"training.{name} must be >= 0")
    for name in ("phase1_se_batch", "phase1_ser_batch", "phase2_batch"):
        if getattr(t, name) < 1:
            problems.append(f"training.{name} must be >= 1")
    for name in ("phase1_se_lr", "phase1_ser_lr", "lr_heads_gates_experts", "lr_backbone"):
        if getattr(t, name) <= 0:
            problems.append(f"training.{name} must be > 0")
    if t.weight_decay < 0:
        problems.append(f"training.weight_decay must be >= 0, got {t.weight_decay}")

    if min(d.train_size, d.dev_size, d.test_size) < 1:
        problems.append("data split sizes must all be >= 1")
    if d.utterance_len < b.frame:
        problems.append(
            f"data.utterance_len={d.utterance_len} shorter than one frame ({b.frame})"
        )
    if d.sample_rate < 1:
        problems.append(f"data.sample_rate must be >= 1, got {d.sample_rate}")
    if len(d.class_proportions) != 4 or any(p <= 0 for p in d.class_proportions):
        problems.append(f"data.class_proportions needs 4 positive entries, got {d.class_proportions}")
    if not d.eval_snrs_db:
        problems.append("data.eval_snrs_db must not be empty")

    if s.frame < 2 or s.hop < 1 or s.hop > s.frame:
        problems.append(f"ssnr framing invalid: frame={s.frame} hop={s.hop}")
    if s.floor_db >= s.ceil_db:
        problems.append(f"ssnr floor {s.floor_db} must be below ceiling {s.ceil_db}")

    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


# Fixed component indices for seed derivation; never reorder.
_SEED_COMPONENTS = {
    "corpus": 0,
    "backbone": 1,
    "model": 2,
    "shuffle": 3,
    "noise": 4,
    "gradcheck": 5,
}


def component_seed(root_seed: int, component: str, *extra: int) -> np.random.SeedSequence:
    """A deterministic child seed for a named component of the pipeline."""
    if component not in _SEED_COMPONENTS:
        raise KeyError(f"unknown seed component '{component}'")
    return np.random.SeedSequence(root_seed,
                                  spawn_key=(_SEED_COMPONENTS[component], *extra))


def component_rng(root_seed: int, component: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(component_seed(root_seed, component, *extra))
