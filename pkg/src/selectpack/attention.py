"""Transformer blocks: shifted-window attention for the dense stages, the
select-and-pack block for the sparse stages, and the grid shift that varies
container composition between consecutive blocks.

All blocks are pre-norm residual: x + Attn(LN(x)) followed by
x + FFN(LN(x)). Score maps returned by select-and-pack blocks are always in
unshifted grid coordinates so they line up with selection labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .packing import PackedBatch, build_packing_plan, build_same_image_mask, pack_tokens, unpack_scatter
from .selection import (
    GateParams,
    fuse_upscale,
    gate_representation,
    gate_scores,
    gumbel_select,
    label_select,
    straight_through_multiplier,
    topk_select,
)
from .types import ModelConfig, ScoreMap, TokenGrid


@dataclass
class BlockParams:
    """Weights of one transformer block.

    ``rel_bias`` is the (2M-1)^2 x heads relative-position table used only
    by windowed blocks; packed containers mix arbitrary grid positions, so
    select-and-pack blocks carry none.
    """

    heads: int
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    rel_bias: Tensor | None = None

    @staticmethod
    def init(
        channels: int,
        heads: int,
        rng: np.random.Generator,
        window: int | None = None,
        dtype=np.float32,
        out_scale: float = 1.0,
    ) -> "BlockParams":
        """``out_scale`` shrinks the residual-branch output projections so a
        deep stack starts close to the identity (keeps early steps stable
        without zeroing gradients anywhere)."""
        if channels % heads:
            raise ValueError(f"head count {heads} must divide channels {channels}")
        std = 0.02
        p = lambda *shape: nm.param(rng.normal(scale=std, size=shape), dtype=dtype)
        po = lambda *shape: nm.param(rng.normal(scale=std * out_scale, size=shape), dtype=dtype)
        zeros = lambda *shape: nm.param(np.zeros(shape), dtype=dtype)
        ones = lambda *shape: nm.param(np.ones(shape), dtype=dtype)
        hidden = 4 * channels
        return BlockParams(
            heads=heads,
            norm1_gamma=ones(channels),
            norm1_beta=zeros(channels),
            norm2_gamma=ones(channels),
            norm2_beta=zeros(channels),
            qkv_w=p(channels, 3 * channels),
            qkv_b=zeros(3 * channels),
            proj_w=po(channels, channels),
            proj_b=zeros(channels),
            fc1_w=p(channels, hidden),
            fc1_b=zeros(hidden),
            fc2_w=po(hidden, channels),
            fc2_b=zeros(channels),
            rel_bias=p((2 * window - 1) ** 2, heads) if window else None,
        )

    def parameters(self):
        out = [
            self.norm1_gamma, self.norm1_beta, self.norm2_gamma, self.norm2_beta,
            self.qkv_w, self.qkv_b, self.proj_w, self.proj_b,
            self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
        ]
        if self.rel_bias is not None:
            out.append(self.rel_bias)
        return out


# ---------------------------------------------------------------------------
# Attention primitives


def multi_head_attention(x: Tensor, params: BlockParams, bias: Tensor | None = None, excl: np.ndarray | None = None) -> Tensor:
    """Pre-projected multi-head attention over [b, n, c] rows.

    ``bias`` broadcasts onto the [b, heads, n, n] logits; ``excl`` is an
    additive-flag mask (0 / EXCLUDE) broadcastable to the same shape.
    """
    b, n, c = x.shape
    heads = params.heads
    hd = c // heads
    with nm.mac_scope("attention"):
        qkv = nm.linear(x, params.qkv_w, params.qkv_b)
        q = nm.transpose(nm.reshape(nm.slice_lastdim(qkv, 0, c), (b, n, heads, hd)), (0, 2, 1, 3))
        k = nm.transpose(nm.reshape(nm.slice_lastdim(qkv, c, 2 * c), (b, n, heads, hd)), (0, 2, 3, 1))
        v = nm.transpose(nm.reshape(nm.slice_lastdim(qkv, 2 * c, 3 * c), (b, n, heads, hd)), (0, 2, 1, 3))
        logits = nm.matmul(nm.mul(q, hd**-0.5), k)
        if bias is not None:
            logits = nm.add(logits, bias)
        weights = nm.masked_softmax_lastdim(logits, excl)
        out = nm.transpose(nm.matmul(weights, v), (0, 2, 1, 3))
        out = nm.linear(nm.reshape(out, (b, n, c)), params.proj_w, params.proj_b)
    return out


def feed_forward(x: Tensor, params: BlockParams) -> Tensor:
    with nm.mac_scope("ffn"):
        h = nm.gelu(nm.linear(x, params.fc1_w, params.fc1_b))
        return nm.linear(h, params.fc2_w, params.fc2_b)


def window_partition(x: Tensor, window: int) -> Tensor:
    """[B, h, w, c] -> [B*nh*nw, window*window, c]."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise nm.ShapeError(f"grid {h}x{w} not divisible by window {window}")
    t = nm.reshape(x, (b, h // window, window, w // window, window, c))
    t = nm.transpose(t, (0, 1, 3, 2, 4, 5))
    return nm.reshape(t, (b * (h // window) * (w // window), window * window, c))


def window_reverse(x: Tensor, batch: int, h: int, w: int, window: int) -> Tensor:
    c = x.shape[-1]
    t = nm.reshape(x, (batch, h // window, w // window, window, window, c))
    t = nm.transpose(t, (0, 1, 3, 2, 4, 5))
    return nm.reshape(t, (batch, h, w, c))


@lru_cache(maxsize=64)
def relative_position_index(window: int) -> np.ndarray:
    """[M*M, M*M] lookup into the (2M-1)^2 relative-position bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0) + (window - 1)
    return (rel[..., 0] * (2 * window - 1) + rel[..., 1]).astype(np.int64)


@lru_cache(maxsize=64)
def _shift_region_ids(h: int, w: int, window: int) -> np.ndarray:
    """Region ids of the rolled grid; windows must not attend across regions."""
    s = window // 2
    img = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    for ys in (slice(0, h - window), slice(h - window, h - s), slice(h - s, None)):
        for xs in (slice(0, w - window), slice(w - window, w - s), slice(w - s, None)):
            img[ys, xs] = cnt
            cnt += 1
    return img.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3).reshape(-1, window * window)


def shifted_window_exclusion(h: int, w: int, window: int, dtype=np.float32) -> np.ndarray:
    ids = _shift_region_ids(h, w, window)
    return nm.exclusion_mask(ids[:, :, None] == ids[:, None, :], dtype)


# ---------------------------------------------------------------------------
# Blocks


def window_attention_block(grid: TokenGrid, params: BlockParams, shifted: bool, window: int) -> TokenGrid:
    """Swin-style (shifted-)window attention block with relative position bias.

    The shift is skipped when one window already covers the whole grid,
    where masking off the wrapped regions would only remove pairs.
    """
    x = grid.values
    b, h, w, c = x.shape
    shift = window // 2 if shifted and (h > window or w > window) else 0
    z = nm.layer_norm(x, params.norm1_gamma, params.norm1_beta)
    if shift:
        z = nm.roll2d(z, -shift, -shift)
    wins = window_partition(z, window)
    bias = None
    if params.rel_bias is not None:
        table = nm.embed_lookup(params.rel_bias, relative_position_index(window))
        bias = nm.transpose(table, (2, 0, 1))
    excl = None
    if shift:
        per_win = shifted_window_exclusion(h, w, window, x.dtype)
        excl = np.tile(per_win, (b, 1, 1))[:, None, :, :]
    attn = multi_head_attention(wins, params, bias=bias, excl=excl)
    merged = window_reverse(attn, b, h, w, window)
    if shift:
        merged = nm.roll2d(merged, shift, shift)
    h1 = nm.add(x, merged)
    return TokenGrid(nm.add(h1, feed_forward(nm.layer_norm(h1, params.norm2_gamma, params.norm2_beta), params)))


def _select(scores: ScoreMap, cfg: ModelConfig, mode: str, rng, selector: str, label_grid):
    if selector == "gumbel":
        return gumbel_select(scores, cfg.tau, cfg.temp, mode, rng)
    if selector == "topk":
        return topk_select(scores, 0.5, cfg.temp)
    if selector == "labels":
        if label_grid is None:
            raise ValueError("label selector needs a label grid")
        return label_select(scores, label_grid, cfg.temp)
    raise ValueError(f"unknown selector {selector!r}")


def spa_block(
    grid: TokenGrid,
    s_up: ScoreMap | None,
    params: BlockParams,
    gate: GateParams,
    cfg: ModelConfig,
    shifted: bool,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    selector: str = "gumbel",
    st_hard: bool = True,
    label_grid: np.ndarray | None = None,
):
    """One select-and-pack block; returns (grid, fused score map, selection).

    Selected tokens run masked attention inside fixed-length containers;
    unselected tokens skip attention and rejoin at the feed-forward, which
    runs over the gated representation of every token. ``st_hard=False``
    swaps the hard straight-through multiplier for its smooth keep
    probability so the whole block is finite-difference checkable.
    """
    x = grid.values
    b, h, w, c = x.shape
    if h % 2 or w % 2 or h < cfg.window_size or w < cfg.window_size:
        raise nm.ShapeError(f"select-and-pack grid must be even and >= window, got {h}x{w}")
    shift = cfg.window_size // 2 if shifted else 0
    if shift:
        x = nm.roll2d(x, -shift, -shift)
        if s_up is not None:
            s_up = ScoreMap(nm.roll2d(s_up.logits, -2 * shift, -2 * shift))
        if label_grid is not None:
            label_grid = np.roll(label_grid, (-shift, -shift), axis=(1, 2))
    g = TokenGrid(x)
    z = nm.layer_norm(x, params.norm1_gamma, params.norm1_beta)
    with nm.mac_scope("attention"):
        scores = fuse_upscale(gate_scores(TokenGrid(z), gate), s_up)
    r_g = gate_representation(g, scores)
    mask = _select(scores, cfg, mode, rng, selector, label_grid)
    plan = build_packing_plan(mask, cfg.package_len)
    if plan.num_selected:
        mult = straight_through_multiplier(mask) if st_hard else mask.soft
        selected = TokenGrid(nm.mul(r_g.values, mult))
        packed = pack_tokens(selected, plan)
        amask = build_same_image_mask(packed.slot_image)
        pz = nm.layer_norm(packed.values, params.norm1_gamma, params.norm1_beta)
        attn = multi_head_attention(pz, params, bias=None, excl=amask.exclusion(x.dtype)[:, None, :, :])
        zeros = TokenGrid(Tensor(np.zeros(x.shape), dtype=x.dtype))
        scattered = unpack_scatter(PackedBatch(attn, packed.slot_image), plan, zeros)
        h1 = nm.add(r_g.values, scattered.values)
    else:
        h1 = r_g.values
    out = nm.add(h1, feed_forward(nm.layer_norm(h1, params.norm2_gamma, params.norm2_beta), params))
    smap_out = scores
    if shift:
        out = nm.roll2d(out, shift, shift)
        smap_out = ScoreMap(nm.roll2d(scores.logits, shift, shift))
    return TokenGrid(out), smap_out, mask


def spa_stage(
    grid: TokenGrid,
    s_in: ScoreMap | None,
    blocks,
    gates,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    selector: str = "gumbel",
    st_hard: bool = True,
    label_grid: np.ndarray | None = None,
):
    """Run a stage of select-and-pack blocks, shifting every second block.

    Every block fuses its gate scores with the stage's incoming score map.
    Returns (grid, last fused map, per-block maps, per-block selections).
    """
    if len(blocks) % 2:
        raise ValueError("stage depth must be even")
    maps = []
    selections = []
    for i, (bp, gp) in enumerate(zip(blocks, gates)):
        grid, smap, mask = spa_block(
            grid, s_in, bp, gp, cfg, shifted=(i % 2 == 1), mode=mode, rng=rng,
            selector=selector, st_hard=st_hard, label_grid=label_grid,
        )
        maps.append(smap)
        selections.append(mask)
    return grid, maps[-1], maps, selections


# ---------------------------------------------------------------------------
# Dense oracle


def dense_msa_block(x: Tensor, params: BlockParams) -> Tensor:
    """Pre-norm dense multi-head self-attention block over [B, N, C] tokens;
    the reference the packed path must reproduce under full selection."""
    z = nm.layer_norm(x, params.norm1_gamma, params.norm1_beta)
    h1 = nm.add(x, multi_head_attention(z, params))
    return nm.add(h1, feed_forward(nm.layer_norm(h1, params.norm2_gamma, params.norm2_beta), params))
