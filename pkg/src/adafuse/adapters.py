"""Cross-modal bottleneck adapters and the fused encoding wiring.

A frozen per-modality encoder stack becomes a feature fuser by adding,
at every block of the selected stages, small bottleneck adapters that
carry each modality's normalized features into every other modality's
residual stream: once after attention and once after the MLP. Three
routing densities are supported:

* shared       - one adapter serves every ordered modality route,
* pair-bi      - one adapter per unordered modality pair (both directions),
* pair-uni     - two adapters per pair, one per direction.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional

import numpy as np

from .encoder import Encoder, EncoderConfig, tokens_to_map
from .initializers import derive_rng, trunc_normal, zeros
from .tensor import Tensor, ShapeError, drop_path, dropout, gelu, matmul


class Density(str, Enum):
    SHARED = "shared"
    PAIR_BIDIRECTIONAL = "pair-bi"
    PAIR_UNIDIRECTIONAL = "pair-uni"

    @staticmethod
    def parse(value: "Density | str") -> "Density":
        if isinstance(value, Density):
            return value
        try:
            return Density(value)
        except ValueError:
            raise ValueError(
                f"unknown density {value!r} (shared, pair-bi, pair-uni)") from None


@dataclass(frozen=True)
class DensityConfig:
    """Routing density plus the 1-indexed stages whose blocks fuse."""
    variant: Density
    active_stages: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "variant", Density.parse(self.variant))
        stages = tuple(sorted(set(self.active_stages)))
        if not stages:
            raise ValueError("active_stages must be non-empty")
        object.__setattr__(self, "active_stages", stages)


class CrossModalAdapter:
    """Down-project / mid / up-project bottleneck MLP.

    forward: up(dropout(gelu(mid(down(x))))), where down is d->r, mid is
    r->r and up is r->d. The up projection starts at zero so a freshly
    built adapter is an exact no-op contribution.
    """

    def __init__(self, dim: int, bottleneck: int, rng: np.random.Generator,
                 dropout_rate: float = 0.1, dtype=np.float64):
        if bottleneck < 1:
            raise ValueError(f"bottleneck width must be >= 1, got {bottleneck}")
        self.dim = dim
        self.bottleneck = bottleneck
        self.dropout_rate = dropout_rate
        self.w_down = trunc_normal((dim, bottleneck), rng, dtype=dtype)
        self.b_down = zeros(bottleneck, dtype=dtype)
        self.w_mid = trunc_normal((bottleneck, bottleneck), rng, dtype=dtype)
        self.b_mid = zeros(bottleneck, dtype=dtype)
        self.w_up = zeros((bottleneck, dim), dtype=dtype)
        self.b_up = zeros(dim, dtype=dtype)

    def __call__(self, x: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"adapter built for dim {self.dim}, got {x.shape}")
        down = matmul(x, self.w_down) + self.b_down
        mid = gelu(matmul(down, self.w_mid) + self.b_mid)
        mid = dropout(mid, self.dropout_rate, train, rng)
        return matmul(mid, self.w_up) + self.b_up

    def parameters(self) -> tuple[Tensor, ...]:
        return (self.w_down, self.b_down, self.w_mid, self.b_mid,
                self.w_up, self.b_up)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name, p in zip(("w_down", "b_down", "w_mid", "b_mid", "w_up", "b_up"),
                           self.parameters()):
            yield f"{prefix}.{name}", p

    def copy_weights_from(self, other: "CrossModalAdapter") -> None:
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.data[...] = theirs.data


def route_key(variant: Density, src: int, dst: int) -> tuple[int, ...]:
    """Canonical key for the (src -> dst) modality route."""
    if src == dst:
        raise ValueError("adapter routes connect distinct modalities")
    if variant is Density.SHARED:
        return ()
    if variant is Density.PAIR_BIDIRECTIONAL:
        return (min(src, dst), max(src, dst))
    return (src, dst)


def routes_for(variant: Density, num_modalities: int) -> list[tuple[int, ...]]:
    """All distinct route keys for one (stage, block, position) slot."""
    pairs = list(itertools.combinations(range(num_modalities), 2))
    if variant is Density.SHARED:
        return [()]
    if variant is Density.PAIR_BIDIRECTIONAL:
        return [tuple(p) for p in pairs]
    return [(i, j) for i, j in pairs] + [(j, i) for i, j in pairs]


class AdapterBank:
    """Routing table (stage, block, position, route) -> adapter.

    Positions: 1 = after-attention injection, 2 = after-MLP injection.
    Route cardinality per slot is 1 / C(M,2) / 2*C(M,2) for the shared /
    pair-bidirectional / pair-unidirectional densities.
    """

    def __init__(self, num_modalities: int, density: DensityConfig):
        self.num_modalities = num_modalities
        self.density = density
        self.adapters: dict[tuple, CrossModalAdapter] = {}

    def get(self, stage: int, block: int, position: int, src: int, dst: int) -> CrossModalAdapter:
        key = (stage, block, position, route_key(self.density.variant, src, dst))
        return self.adapters[key]

    def __len__(self) -> int:
        return len(self.adapters)

    def named_parameters(self, prefix: str = "adapters") -> Iterator[tuple[str, Tensor]]:
        for (stage, block, pos, route), adapter in sorted(self.adapters.items()):
            tag = "-".join(str(r) for r in route) if route else "all"
            yield from adapter.named_parameters(
                f"{prefix}.stage{stage}.block{block}.pos{pos}.route_{tag}")


def build_adapter_bank(num_modalities: int, config: EncoderConfig,
                       density: DensityConfig, bottleneck: int,
                       seed: int | tuple[int, ...],
                       dropout_rate: float = 0.1, dtype=np.float64) -> AdapterBank:
    """Populate a bank for every block of the active stages.

    Adapter parameter streams are derived from (seed, stage, block,
    position, route), so two banks built from the same seed agree
    wherever their keys coincide.
    """
    if num_modalities < 2:
        raise ValueError(f"adapter fusion needs >= 2 modalities, got {num_modalities}")
    path = (seed,) if isinstance(seed, int) else tuple(seed)
    bank = AdapterBank(num_modalities, density)
    for stage in density.active_stages:
        if not 1 <= stage <= config.num_stages:
            raise ValueError(f"active stage {stage} outside 1..{config.num_stages}")
        dim = config.dims[stage - 1]
        for block in range(config.depths[stage - 1]):
            for position in (1, 2):
                for route in routes_for(density.variant, num_modalities):
                    rng = derive_rng(*path, stage, block, position, *route)
                    bank.adapters[(stage, block, position, route)] = CrossModalAdapter(
                        dim, bottleneck, rng, dropout_rate, dtype)
    return bank


def fused_block_forward(xs: list[Tensor], blocks: list, h: int, w: int,
                        bank: Optional[AdapterBank], stage: int, block_idx: int,
                        train: bool = False,
                        rng: Optional[np.random.Generator] = None) -> list[Tensor]:
    """One transformer block across M modalities with cross-modal injection.

    Per modality i: z_attn_i = x_i + DropPath(Attn_i(LN1_i(x_i))); every
    route i->j then adds DropPath(Ada1(LN1_i(x_i))) into z_attn_j. The MLP
    half repeats the pattern on the updated z_attn with LN2 and Ada2.
    Cross-modal contributions are computed from values snapshotted before
    any of them is applied, so modality iteration order cannot matter.
    """
    m = len(xs)
    shape0 = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape0:
            raise ShapeError(f"modality token shapes differ: {shape0} vs {x.shape}")
    stitch = bank is not None and m >= 2

    normed1 = [blocks[i].norm1(xs[i]) for i in range(m)]
    z_attn = [xs[i] + drop_path(blocks[i].attn(normed1[i], h, w),
                                blocks[i].drop_path_rate, train, rng)
              for i in range(m)]
    if stitch:
        for i in range(m):
            for j in range(m):
                if i == j:
                    continue
                ada = bank.get(stage, block_idx, 1, i, j)
                z_attn[j] = z_attn[j] + drop_path(
                    ada(normed1[i], train, rng), blocks[j].drop_path_rate, train, rng)

    normed2 = [blocks[i].norm2(z_attn[i]) for i in range(m)]
    z_mlp = [z_attn[i] + drop_path(blocks[i].mlp(normed2[i]),
                                   blocks[i].drop_path_rate, train, rng)
             for i in range(m)]
    if stitch:
        for i in range(m):
            for j in range(m):
                if i == j:
                    continue
                ada = bank.get(stage, block_idx, 2, i, j)
                z_mlp[j] = z_mlp[j] + drop_path(
                    ada(normed2[i], train, rng), blocks[j].drop_path_rate, train, rng)
    return z_mlp


def fused_encode(encoders: list[Encoder], images: list[Tensor],
                 bank: Optional[AdapterBank], density: Optional[DensityConfig],
                 train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> list[list[Tensor]]:
    """Run M encoders in lockstep, exchanging features in active stages.

    Returns one feature pyramid (list of [B, d_i, h_i, w_i] maps) per
    modality. Blocks in inactive stages run the plain per-modality path.
    """
    m = len(encoders)
    if len(images) != m:
        raise ShapeError(f"{m} encoders but {len(images)} modality images")
    hw0 = images[0].shape[-2:]
    for img in images[1:]:
        if img.shape[-2:] != hw0:
            raise ShapeError("modality images must share spatial dims")
    config = encoders[0].config
    active = set(density.active_stages) if (density and bank is not None) else set()

    pyramids: list[list[Tensor]] = [[] for _ in range(m)]
    current = list(images)
    for s in range(config.num_stages):
        stage_no = s + 1
        tokens = []
        h = w = 0
        for i in range(m):
            t, (h, w) = encoders[i].patch_embeds[s](current[i])
            tokens.append(t)
        for b in range(config.depths[s]):
            blocks = [enc.blocks[s][b] for enc in encoders]
            if stage_no in active and m >= 2:
                tokens = fused_block_forward(tokens, blocks, h, w, bank,
                                             stage_no, b, train, rng)
            else:
                tokens = [blocks[i](tokens[i], h, w, train, rng)[1] for i in range(m)]
        for i in range(m):
            normed = encoders[i].stage_norm(s, tokens[i])
            current[i] = tokens_to_map(normed, h, w)
            pyramids[i].append(current[i])
    return pyramids


# ---------------------------------------------------------------------
# density equivalence verification
# ---------------------------------------------------------------------

def _copy_bank_weights(dst: AdapterBank, src_weights: dict) -> None:
    for (stage, block, pos, _route), adapter in dst.adapters.items():
        adapter.copy_weights_from(src_weights[(stage, block, pos)])


def check_density_equivalence(seed: int = 0, num_inputs: int = 10,
                              dtype=np.float64) -> dict:
    """Verify the two-modality density equivalences, and that they break
    for three modalities.

    With M=2 there is exactly one modality pair, so a shared bank and a
    pair-bidirectional bank with copied weights are the same function;
    a pair-unidirectional bank with both directions tied matches too.
    With M=3, independently initialized per-pair adapters differ from a
    shared one.
    """
    config = EncoderConfig.preset("tiny")
    density_kwargs = dict(active_stages=(1, 2, 3, 4))
    report = {"m2_shared_vs_pair_bi": None, "m2_tied_uni_vs_pair_bi": None,
              "m3_shared_vs_pair_bi_differ": None, "passed": False}

    encoders = [Encoder(config, 1, seed=seed * 7 + i, dtype=dtype) for i in range(2)]
    banks = {}
    for variant in Density:
        banks[variant] = build_adapter_bank(
            2, config, DensityConfig(variant, **density_kwargs), bottleneck=4,
            seed=seed, dropout_rate=0.0, dtype=dtype)
    # One reference weight set per (stage, block, position), copied into
    # every route of every bank. Up-projections are randomized first; at
    # their zero init every density is trivially identical.
    reference = {}
    fill = np.random.default_rng(seed + 101)
    for (stage, block, pos, route), adapter in sorted(banks[Density.SHARED].adapters.items()):
        adapter.w_up.data[...] = fill.normal(0.0, 0.05, adapter.w_up.shape)
        adapter.b_up.data[...] = fill.normal(0.0, 0.05, adapter.b_up.shape)
        reference[(stage, block, pos)] = adapter
    for variant in (Density.PAIR_BIDIRECTIONAL, Density.PAIR_UNIDIRECTIONAL):
        _copy_bank_weights(banks[variant], reference)

    rng = np.random.default_rng(seed)
    same_bi = True
    same_uni = True
    for _ in range(num_inputs):
        imgs = [Tensor(rng.random((1, 1, 32, 32)).astype(dtype)) for _ in range(2)]
        outs = {}
        for variant in Density:
            pyr = fused_encode(encoders, imgs, banks[variant],
                               DensityConfig(variant, **density_kwargs))
            outs[variant] = [f.data for p in pyr for f in p]
        same_bi &= all(np.array_equal(a, b) for a, b in
                       zip(outs[Density.SHARED], outs[Density.PAIR_BIDIRECTIONAL]))
        same_uni &= all(np.array_equal(a, b) for a, b in
                        zip(outs[Density.PAIR_UNIDIRECTIONAL], outs[Density.PAIR_BIDIRECTIONAL]))
    report["m2_shared_vs_pair_bi"] = bool(same_bi)
    report["m2_tied_uni_vs_pair_bi"] = bool(same_uni)

    # M=3: independently initialized pair adapters cannot all equal the
    # shared one, so outputs must differ.
    encoders3 = [Encoder(config, 1, seed=seed * 11 + i, dtype=dtype) for i in range(3)]
    shared3 = build_adapter_bank(3, config, DensityConfig(Density.SHARED, **density_kwargs),
                                 bottleneck=4, seed=seed, dropout_rate=0.0, dtype=dtype)
    pair3 = build_adapter_bank(3, config, DensityConfig(Density.PAIR_BIDIRECTIONAL,
                                                        **density_kwargs),
                               bottleneck=4, seed=seed + 1, dropout_rate=0.0, dtype=dtype)
    # Nonzero, per-adapter up-projections so the routing shows in outputs.
    filler = np.random.default_rng(seed + 2)
    for bank3 in (shared3, pair3):
        for _key, adapter in sorted(bank3.adapters.items()):
            adapter.w_up.data[...] = filler.normal(0.0, 0.05, adapter.w_up.shape)
    imgs3 = [Tensor(rng.random((1, 1, 32, 32)).astype(dtype)) for _ in range(3)]
    out_shared = fused_encode(encoders3, imgs3, shared3,
                              DensityConfig(Density.SHARED, **density_kwargs))
    out_pair = fused_encode(encoders3, imgs3, pair3,
                            DensityConfig(Density.PAIR_BIDIRECTIONAL, **density_kwargs))
    max_diff = max(float(np.max(np.abs(a.data - b.data)))
                   for pa, pb in zip(out_shared, out_pair) for a, b in zip(pa, pb))
    report["m3_shared_vs_pair_bi_differ"] = max_diff > 0.0
    report["m3_max_abs_diff"] = max_diff
    report["passed"] = bool(same_bi and same_uni and max_diff > 0.0)
    return report
