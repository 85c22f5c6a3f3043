"""Configuration dataclasses and the two shipped profiles.

`desk` is the default, sized so every pipeline trains in minutes on a CPU.
`fullscale` records the full-scale hyperparameters; it loads but is not meant
to be trained here.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

# Codec token space shared by both streams.
CODEC_VOCAB = 256  # content ids 0..255
EOS_ID = CODEC_VOCAB
PAD_ID = CODEC_VOCAB + 1
HEAD_VOCAB = CODEC_VOCAB + 2

TOKEN_RATE_HZ = 40.0  # codec tokens per second
SAMPLE_RATE = 2560  # synthetic "audio" sample rate; 64 samples per token
SAMPLES_PER_TOKEN = SAMPLE_RATE // int(TOKEN_RATE_HZ)


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_v: int = 64
    d_spk: int = 32
    d_mel: int = 24
    text_vocab: int = 320
    max_len: int = 256


@dataclass
class StageConfig:
    stage: int
    lr_min: float
    lr_max: float
    steps: int
    warmup_steps: int
    batch_size: int
    task_weights: dict[str, float]  # over allowed tasks, sums to 1


@dataclass
class FlowConfig:
    d_lat: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vae_beta: float = 1e-3
    vae_steps: int = 600
    vae_lr: float = 2e-3
    flow_steps: int = 1200
    flow_lr: float = 2e-3
    batch_size: int = 8
    euler_steps: int = 32


@dataclass
class CaspConfig:
    d_feat: int = 16
    d_model: int = 64
    d_out: int = 64
    n_layers: int = 2
    n_heads: int = 4
    crop_s: float = 5.0
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 32


@dataclass
class DataConfig:
    n_train: int = 32
    n_eval: int = 8
    n_casp_train: int = 400
    n_casp_eval: int = 100
    duration_s: float = 2.0
    video_fps: float = 30.0


@dataclass
class Config:
    profile: str = "desk"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    casp: CaspConfig = field(default_factory=CaspConfig)
    data: DataConfig = field(default_factory=DataConfig)
    # Stage learning-rate ranges are the published per-stage ranges times
    # one shared desk-scale factor.
    lr_scale: float = 10.0
    stages: dict[str, StageConfig] = field(default_factory=dict)

    def __post_init__(self):
        if not self.stages:
            self.stages = default_stages(self.lr_scale)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def default_stages(lr_scale: float) -> dict[str, StageConfig]:
    return {
        "1": StageConfig(
            stage=1,
            lr_min=2e-6 * lr_scale,
            lr_max=2e-4 * lr_scale,
            steps=120,
            warmup_steps=50,
            batch_size=8,
            task_weights={"V2A": 1.0},
        ),
        "2": StageConfig(
            stage=2,
            lr_min=2e-7 * lr_scale,
            lr_max=2e-4 * lr_scale,
            steps=250,
            warmup_steps=50,
            batch_size=8,
            task_weights={"V2A": 0.5, "TTS": 0.5},
        ),
        "3": StageConfig(
            stage=3,
            lr_min=2e-7 * lr_scale,
            lr_max=2e-5 * lr_scale,
            steps=1100,
            warmup_steps=50,
            batch_size=8,
            task_weights={"V2A": 0.25, "TTS": 0.25, "V2ST": 0.5},
        ),
    }


def fullscale_profile() -> Config:
    """Full-scale hyperparameters, recorded for reference only."""
    cfg = Config(
        profile="fullscale",
        model=ModelConfig(d=2048, n_layers=24, n_heads=16, max_len=4096),
        flow=FlowConfig(d_model=2048, n_layers=8, n_heads=16),
        lr_scale=1.0,
        stages={
            "1": StageConfig(1, 2e-6, 2e-4, 0, 4000, 192, {"V2A": 1.0}),
            "2": StageConfig(2, 2e-7, 2e-4, 0, 4000, 192, {"V2A": 0.5, "TTS": 0.5}),
            "3": StageConfig(
                3, 2e-7, 2e-5, 0, 4000, 192, {"V2A": 0.25, "TTS": 0.25, "V2ST": 0.5}
            ),
        },
    )
    return cfg


def _update(obj, data: dict):
    for k, v in data.items():
        if not hasattr(obj, k):
            raise KeyError(f"unknown config key {k!r}")
        cur = getattr(obj, k)
        if dataclasses.is_dataclass(cur) and isinstance(v, dict):
            _update(cur, v)
        elif k == "stages" and isinstance(v, dict):
            stages = {}
            for name, sd in v.items():
                stages[name] = StageConfig(**sd)
            setattr(obj, k, stages)
        else:
            setattr(obj, k, v)


def config_from_dict(data: dict) -> Config:
    profile = data.get("profile", "desk")
    cfg = fullscale_profile() if profile == "fullscale" else Config()
    _update(cfg, data)
    return cfg
