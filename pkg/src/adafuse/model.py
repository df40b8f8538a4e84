"""Model assembly: frozen encoders + adapter bank + merge head + decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from .adapters import (AdapterBank, Density, DensityConfig, build_adapter_bank,
                       fused_encode)
from .encoder import Encoder, EncoderConfig
from .heads import Decoder, FeatureFusion, modal_merge
from .tensor import Tensor, ShapeError, upsample_bilinear

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    preset: str = "tiny"
    modalities: tuple[str, ...] = ("vis", "ir")
    channels: tuple[int, ...] = (1, 1)
    density: str = "pair-bi"
    active_stages: tuple[int, ...] = (1, 2, 3, 4)
    bottleneck: int = 8
    adapter_dropout: float = 0.1
    use_ffm: bool = False
    num_classes: int = 5
    decoder_dim: int = 0          # 0 = preset default (64 tiny, 256 b2-like)
    drop_path_rate: float = 0.0
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.channels = tuple(self.channels)
        self.active_stages = tuple(self.active_stages)
        if len(self.modalities) != len(self.channels):
            raise ValueError("modalities and channels must align")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError("modality names must be unique")
        if not self.modalities:
            raise ValueError("at least one modality required")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        Density.parse(self.density)
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.decoder_dim == 0:
            self.decoder_dim = 256 if self.preset == "b2-like" else 64

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    def encoder_config(self) -> EncoderConfig:
        base = EncoderConfig.preset(self.preset)
        if self.drop_path_rate != base.drop_path_rate:
            base = EncoderConfig(base.dims, base.depths, base.heads, base.strides,
                                 base.sr_ratios, base.mlp_ratio, self.drop_path_rate)
        return base

    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["channels"] = list(self.channels)
        d["active_stages"] = list(self.active_stages)
        return d

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        known = set(ModelConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return ModelConfig(**data)


class FusionModel:
    """M frozen encoders exchanging features through an adapter bank,
    merged per stage and decoded to per-pixel class logits.

    With a single modality the bank is omitted and the model reduces to
    a plain frozen encoder + trainable decoder (the baseline
    configuration)."""

    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = config.np_dtype()
        enc_cfg = config.encoder_config()
        self.encoder_config = enc_cfg
        self.encoders = [
            Encoder(enc_cfg, ch, seed=(config.seed, 10 + i), dtype=dtype)
            for i, ch in enumerate(config.channels)
        ]
        for enc in self.encoders:
            enc.set_trainable(False)

        if config.num_modalities >= 2:
            self.density = DensityConfig(config.density, config.active_stages)
            self.bank: Optional[AdapterBank] = build_adapter_bank(
                config.num_modalities, enc_cfg, self.density, config.bottleneck,
                seed=(config.seed, 500), dropout_rate=config.adapter_dropout,
                dtype=dtype)
        else:
            self.density = None
            self.bank = None

        self.ffm = (FeatureFusion(config.num_modalities, enc_cfg, config.seed, dtype)
                    if config.use_ffm else None)
        self.decoder = Decoder(enc_cfg, config.num_classes, config.decoder_dim,
                               config.seed, dtype)
        self.rng = np.random.default_rng([config.seed, 999])

    # -- inputs ---------------------------------------------------------
    def _coerce(self, images) -> list[Tensor]:
        if isinstance(images, dict):
            missing = [m for m in self.config.modalities if m not in images]
            if missing:
                raise ShapeError(f"missing modalities: {missing}")
            images = [images[m] for m in self.config.modalities]
        if len(images) != self.config.num_modalities:
            raise ShapeError(f"model built for {self.config.num_modalities} "
                             f"modalities, got {len(images)}")
        dtype = self.config.np_dtype()
        out = []
        for img, ch in zip(images, self.config.channels):
            t = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=dtype))
            if t.dtype != dtype:
                t = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            if t.ndim == 3:
                t = Tensor(t.data[None], requires_grad=t.requires_grad)
            if t.ndim != 4 or t.shape[1] != ch:
                raise ShapeError(f"expected [B, {ch}, H, W] image, got {t.shape}")
            out.append(t)
        return out

    # -- forward ---------------------------------------------------------
    def encode(self, images, train: bool = False) -> list[list[Tensor]]:
        """Per-modality feature pyramids (stitched in active stages)."""
        xs = self._coerce(images)
        return fused_encode(self.encoders, xs, self.bank, self.density,
                            train, self.rng if train else None)

    def forward(self, images, train: bool = False) -> Tensor:
        """Class logits on the finest feature grid [B, K, H/s1, W/s1]."""
        pyramids = self.encode(images, train)
        merged = []
        for s in range(self.encoder_config.num_stages):
            feats = [pyramids[m][s] for m in range(self.config.num_modalities)]
            ffm_stage = self.ffm.stages[s] if self.ffm is not None else None
            merged.append(modal_merge(feats, ffm_stage))
        return self.decoder(merged)

    __call__ = forward

    def logits_at(self, images, out_h: int, out_w: int, train: bool = False) -> Tensor:
        """Logits bilinearly upsampled to the label resolution."""
        logits = self.forward(images, train)
        if logits.shape[-2:] != (out_h, out_w):
            logits = upsample_bilinear(logits, out_h, out_w)
        return logits

    # -- parameters --------------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, enc in zip(self.config.modalities, self.encoders):
            yield from enc.named_parameters(f"encoder.{name}")
        if self.bank is not None:
            yield from self.bank.named_parameters("adapters")
        if self.ffm is not None:
            yield from self.ffm.named_parameters("ffm")
        yield from self.decoder.named_parameters("decoder")

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def frozen_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if not p.requires_grad]


def build_model(config: ModelConfig) -> FusionModel:
    return FusionModel(config)
