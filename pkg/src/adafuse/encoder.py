"""Multi-stage transformer encoder producing a feature pyramid.

One encoder per modality. Stages shrink the spatial grid by their
configured stride; each stage is overlapping-patch embedding followed by
transformer blocks that return both the post-attention and post-MLP
residual states (the fused-encoding wiring consumes the former).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .initializers import derive_rng, ones, trunc_normal, zeros
from .tensor import (Tensor, ShapeError, drop_path, extract_patches, gelu,
                     layer_norm, matmul, reshape, softmax, transpose)


@dataclass(frozen=True)
class EncoderConfig:
    dims: tuple[int, ...] = (16, 32, 64, 128)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    strides: tuple[int, ...] = (4, 2, 2, 2)
    sr_ratios: tuple[int, ...] = (2, 2, 1, 1)
    mlp_ratio: int = 4
    drop_path_rate: float = 0.0

    def __post_init__(self):
        n = len(self.dims)
        if not (len(self.depths) == len(self.heads) == len(self.strides)
                == len(self.sr_ratios) == n):
            raise ValueError("per-stage config lists must have equal length")
        if any(v <= 0 for v in self.dims + self.depths + self.heads + self.strides):
            raise ValueError("all per-stage extents must be positive")
        for d, h in zip(self.dims, self.heads):
            if d % h != 0:
                raise ValueError(f"stage dim {d} not divisible by {h} heads")

    @property
    def num_stages(self) -> int:
        return len(self.dims)

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @staticmethod
    def preset(name: str) -> "EncoderConfig":
        if name == "tiny":
            return EncoderConfig()
        if name == "b2-like":
            return EncoderConfig(dims=(64, 128, 320, 512), depths=(3, 4, 6, 3),
                                 heads=(1, 2, 5, 8), strides=(4, 2, 2, 2),
                                 sr_ratios=(8, 4, 2, 1))
        raise ValueError(f"unknown encoder preset {name!r} (tiny, b2-like)")


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    """[B, h*w, d] -> [B, d, h, w]."""
    b, n, d = x.shape
    return transpose(reshape(x, (b, h, w, d)), (0, 3, 1, 2))


def map_to_tokens(x: Tensor) -> Tensor:
    """[B, c, h, w] -> [B, h*w, c]."""
    b, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))


class PatchEmbed:
    """Overlapping strided linear patch projection + layer norm."""

    def __init__(self, in_channels: int, dim: int, stride: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.stride = stride
        self.kernel = 2 * stride - 1
        self.pad = stride - 1
        self.weight = trunc_normal((in_channels * self.kernel ** 2, dim), rng, dtype=dtype)
        self.bias = trunc_normal(dim, rng, dtype=dtype)
        self.norm_gamma = ones(dim, dtype=dtype)
        self.norm_beta = zeros(dim, dtype=dtype)

    def __call__(self, x: Tensor) -> tuple[Tensor, tuple[int, int]]:
        if x.ndim != 4:
            raise ShapeError(f"patch embed expects [B, C, H, W], got {x.shape}")
        h, w = x.shape[2], x.shape[3]
        if h % self.stride or w % self.stride:
            raise ShapeError(
                f"spatial dims {h}x{w} not divisible by patch stride {self.stride}")
        patches = extract_patches(x, self.kernel, self.stride, self.pad)
        tokens = matmul(patches, self.weight) + self.bias
        tokens = layer_norm(tokens, self.norm_gamma, self.norm_beta)
        return tokens, (h // self.stride, w // self.stride)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias
        yield f"{prefix}.norm_gamma", self.norm_gamma
        yield f"{prefix}.norm_beta", self.norm_beta


class Attention:
    """Multi-head scaled dot-product attention with optional K/V
    spatial reduction (keys and values computed on an sr x sr pooled
    token grid)."""

    def __init__(self, dim: int, heads: int, sr_ratio: int,
                 rng: np.random.Generator, dtype=np.float64):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.sr_ratio = sr_ratio
        def lin(n_in, n_out):
            # biases random too: with zero biases, layer norm cancels the
            # pure intensity scaling that single-channel inputs ride on
            return (trunc_normal((n_in, n_out), rng, dtype=dtype),
                    trunc_normal(n_out, rng, dtype=dtype))
        self.wq, self.bq = lin(dim, dim)
        self.wk, self.bk = lin(dim, dim)
        self.wv, self.bv = lin(dim, dim)
        self.wo, self.bo = lin(dim, dim)
        if sr_ratio > 1:
            self.w_sr, self.b_sr = lin(dim * sr_ratio ** 2, dim)
            self.sr_gamma = ones(dim, dtype=dtype)
            self.sr_beta = zeros(dim, dtype=dtype)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return transpose(reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        b, n, d = x.shape
        if d != self.dim:
            raise ShapeError(f"attention built for dim {self.dim}, got {d}")
        q = matmul(x, self.wq) + self.bq
        if self.sr_ratio > 1:
            if h % self.sr_ratio or w % self.sr_ratio:
                raise ShapeError(
                    f"token grid {h}x{w} not divisible by sr_ratio {self.sr_ratio}")
            grid = tokens_to_map(x, h, w)
            pooled = extract_patches(grid, self.sr_ratio, self.sr_ratio, 0)
            kv_src = matmul(pooled, self.w_sr) + self.b_sr
            kv_src = layer_norm(kv_src, self.sr_gamma, self.sr_beta)
        else:
            kv_src = x
        k = matmul(kv_src, self.wk) + self.bk
        v = matmul(kv_src, self.wv) + self.bv

        qh = self._split_heads(q)                       # [B, heads, N, hd]
        kh = self._split_heads(k)
        vh = self._split_heads(v)
        scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        attn = softmax(scores)
        ctx = matmul(attn, vh)                          # [B, heads, N, hd]
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return matmul(ctx, self.wo) + self.bo

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            yield f"{prefix}.{name}", getattr(self, name)
        if self.sr_ratio > 1:
            yield f"{prefix}.w_sr", self.w_sr
            yield f"{prefix}.b_sr", self.b_sr
            yield f"{prefix}.sr_gamma", self.sr_gamma
            yield f"{prefix}.sr_beta", self.sr_beta


class Mlp:
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.w1 = trunc_normal((dim, hidden), rng, dtype=dtype)
        self.b1 = trunc_normal(hidden, rng, dtype=dtype)
        self.w2 = trunc_normal((hidden, dim), rng, dtype=dtype)
        self.b2 = trunc_normal(dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(gelu(matmul(x, self.w1) + self.b1), self.w2) + self.b2

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


class TransformerBlock:
    """Pre-norm attention + MLP block with per-branch drop-path.

    The forward pass returns both residual states: the post-attention
    state feeds the cross-modal adapters, the post-MLP state is the
    block output.
    """

    def __init__(self, dim: int, heads: int, sr_ratio: int, mlp_ratio: int,
                 drop_path_rate: float, rng: np.random.Generator, dtype=np.float64):
        self.ln1_gamma = ones(dim, dtype=dtype)
        self.ln1_beta = zeros(dim, dtype=dtype)
        self.attn = Attention(dim, heads, sr_ratio, rng, dtype)
        self.ln2_gamma = ones(dim, dtype=dtype)
        self.ln2_beta = zeros(dim, dtype=dtype)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng, dtype)
        self.drop_path_rate = drop_path_rate

    def norm1(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.ln1_gamma, self.ln1_beta)

    def norm2(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.ln2_gamma, self.ln2_beta)

    def __call__(self, x: Tensor, h: int, w: int, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
        branch = self.attn(self.norm1(x), h, w)
        z_attn = x + drop_path(branch, self.drop_path_rate, train, rng)
        branch = self.mlp(self.norm2(z_attn))
        z_mlp = z_attn + drop_path(branch, self.drop_path_rate, train, rng)
        return z_attn, z_mlp

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.ln1_gamma", self.ln1_gamma
        yield f"{prefix}.ln1_beta", self.ln1_beta
        yield from self.attn.named_parameters(f"{prefix}.attn")
        yield f"{prefix}.ln2_gamma", self.ln2_gamma
        yield f"{prefix}.ln2_beta", self.ln2_beta
        yield from self.mlp.named_parameters(f"{prefix}.mlp")


class Encoder:
    """Stack of patch-embed + transformer-block stages for one modality."""

    def __init__(self, config: EncoderConfig, in_channels: int,
                 seed: int | tuple[int, ...], dtype=np.float64):
        self.config = config
        self.in_channels = in_channels
        self.dtype = dtype
        self.patch_embeds: list[PatchEmbed] = []
        self.blocks: list[list[TransformerBlock]] = []
        self.norm_gammas: list[Tensor] = []
        self.norm_betas: list[Tensor] = []

        path = (seed,) if isinstance(seed, int) else tuple(seed)
        total_depth = sum(config.depths)
        block_index = 0
        ch = in_channels
        for s in range(config.num_stages):
            rng = derive_rng(*path, s)
            self.patch_embeds.append(
                PatchEmbed(ch, config.dims[s], config.strides[s], rng, dtype))
            stage_blocks = []
            for b in range(config.depths[s]):
                if total_depth > 1 and config.drop_path_rate > 0:
                    dp = config.drop_path_rate * block_index / (total_depth - 1)
                else:
                    dp = 0.0
                stage_blocks.append(TransformerBlock(
                    config.dims[s], config.heads[s], config.sr_ratios[s],
                    config.mlp_ratio, dp, derive_rng(*path, s, b), dtype))
                block_index += 1
            self.blocks.append(stage_blocks)
            self.norm_gammas.append(ones(config.dims[s], dtype=dtype))
            self.norm_betas.append(zeros(config.dims[s], dtype=dtype))
            ch = config.dims[s]

    def stage_norm(self, stage: int, tokens: Tensor) -> Tensor:
        return layer_norm(tokens, self.norm_gammas[stage], self.norm_betas[stage])

    def forward(self, x: Tensor, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> list[Tensor]:
        """Run all stages; returns per-stage feature maps [B, d_i, h_i, w_i]."""
        if x.ndim != 4:
            raise ShapeError(f"encoder expects [B, C, H, W], got {x.shape}")
        feats = []
        cur = x
        for s in range(self.config.num_stages):
            tokens, (h, w) = self.patch_embeds[s](cur)
            for blk in self.blocks[s]:
                _, tokens = blk(tokens, h, w, train, rng)
            tokens = self.stage_norm(s, tokens)
            cur = tokens_to_map(tokens, h, w)
            feats.append(cur)
        return feats

    __call__ = forward

    def named_parameters(self, prefix: str = "encoder") -> Iterator[tuple[str, Tensor]]:
        for s in range(self.config.num_stages):
            yield from self.patch_embeds[s].named_parameters(f"{prefix}.stage{s + 1}.patch")
            for b, blk in enumerate(self.blocks[s]):
                yield from blk.named_parameters(f"{prefix}.stage{s + 1}.block{b}")
            yield f"{prefix}.stage{s + 1}.norm_gamma", self.norm_gammas[s]
            yield f"{prefix}.stage{s + 1}.norm_beta", self.norm_betas[s]

    def set_trainable(self, flag: bool) -> None:
        """Frozen encoders keep requires_grad False so the optimizer and
        backward both skip their buffers."""
        for _, p in self.named_parameters():
            p.requires_grad = flag
