"""Model configuration: architecture constants, ablation switches and loss weights."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

TSA_BRANCHES = ("max", "mean", "conv")
TCA_BRANCHES = ("max", "mean", "gct")


@dataclass
class EncoderConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    rgb_channels: int = 3
    aux_channels: int = 3
    # test fixture: both streams use the RGB weights
    share_weights: bool = False

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ValueError("encoder needs exactly 4 positive stage widths")


@dataclass
class FusionConfig:
    use_alpha: bool = True
    use_tsa: bool = True
    use_tca: bool = True
    tsa_branches: tuple = TSA_BRANCHES
    tca_branches: tuple = TCA_BRANCHES
    # "outer": MLP over the flattened c x c outer product; "elementwise": MLP over m_I * m_D
    shared_mode: str = "outer"
    shared_hidden: int | None = None
    fuse_hidden: int | None = None

    def __post_init__(self):
        self.tsa_branches = tuple(self.tsa_branches)
        self.tca_branches = tuple(self.tca_branches)
        if not self.tsa_branches or set(self.tsa_branches) - set(TSA_BRANCHES):
            raise ValueError(f"tsa_branches must be a non-empty subset of {TSA_BRANCHES}")
        if not self.tca_branches or set(self.tca_branches) - set(TCA_BRANCHES):
            raise ValueError(f"tca_branches must be a non-empty subset of {TCA_BRANCHES}")
        if self.shared_mode not in ("outer", "elementwise"):
            raise ValueError("shared_mode must be 'outer' or 'elementwise'")


@dataclass
class DecoderConfig:
    lgm_parts: int = 4
    lgm_windows: tuple = (1, 3, 5, 7)
    lgm_expansion: int = 2
    use_msa: bool = True
    use_multilevel: bool = True
    # "sigmoid": soft mask sigmoid(p); "hard": 1[p > 0] without gradient
    mask_mode: str = "sigmoid"

    def __post_init__(self):
        self.lgm_windows = tuple(int(w) for w in self.lgm_windows)
        if len(self.lgm_windows) != self.lgm_parts:
            raise ValueError("one pooling window per LGM subpart")
        if any(w < 1 or w % 2 == 0 for w in self.lgm_windows):
            raise ValueError("LGM windows must be odd and >= 1 to keep resolution")
        if self.mask_mode not in ("sigmoid", "hard"):
            raise ValueError("mask_mode must be 'sigmoid' or 'hard'")


@dataclass
class LossWeights:
    lambdas: tuple = (1.0, 1.0, 1.0, 1.0)
    beta1: float = 1.0
    beta2: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    # boundary-weight window of the wBCE/IoU pixel weights
    weight_window: int = 15
    # "bernoulli": per-pixel Bernoulli KL; "spatial": KL between spatial softmax maps
    kl_mode: str = "bernoulli"

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        vals = list(self.lambdas) + [self.beta1, self.beta2, self.gamma1, self.gamma2]
        if len(self.lambdas) != 4 or min(vals) < 0:
            raise ValueError("loss weights must be 4 lambdas and all non-negative")
        if self.kl_mode not in ("bernoulli", "spatial"):
            raise ValueError("kl_mode must be 'bernoulli' or 'spatial'")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    precision: str = "f32"
    init_seed: int = 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModelConfig":
        d = dict(d or {})
        return cls(
            encoder=EncoderConfig(**d.pop("encoder", {})),
            fusion=FusionConfig(**d.pop("fusion", {})),
            decoder=DecoderConfig(**d.pop("decoder", {})),
            loss=LossWeights(**d.pop("loss", {})),
            **d,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()

    def hexhash(self) -> str:
        return self.hash().hex()[:16]

    @property
    def dtype(self):
        return {"f32": np.float32, "f64": np.float64}[self.precision]
