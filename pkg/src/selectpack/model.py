"""The four-stage backbone: patch embedding, patch merging, windowed blocks
for the early stages, select-and-pack blocks from ``select_start_stage`` on,
a pooled classification head, and the combined task + selection loss.

Stage grids run at /4, /8, /16, /32 of the input with channel widths
C, 2C, 4C, 8C. Score maps live at /8, /16, /32 and pair with selection
label levels 0..2. ``select_start_stage=5`` builds the dense windowed
baseline with no selection machinery at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .attention import BlockParams, spa_stage, window_attention_block
from .numerics import Tensor
from .selection import GateParams, gate_scores, select_loss
from .types import ModelConfig, ScoreMap, SelectionMask, TokenGrid, validate_config

DENSE_BASELINE_STAGE = 5  # select_start_stage value meaning "never select"


@dataclass
class StageParams:
    blocks: list
    gates: list | None  # one gate per block in select-and-pack stages


@dataclass
class ForwardResult:
    """Everything a training step needs from one pass."""

    grids: list  # r1..r4 as TokenGrid
    entry_map: ScoreMap | None  # dedicated gate's map entering the first sparse stage
    entry_level: int | None  # its label level
    block_maps: list  # (ScoreMap, level) per select-and-pack block
    selections: list  # SelectionMask per select-and-pack block
    logits: Tensor

    def supervised_maps(self):
        out = []
        if self.entry_map is not None:
            out.append((self.entry_map, self.entry_level))
        out.extend(self.block_maps)
        return out

    def score_pyramid(self):
        """(entry map, stage-3 map, stage-4 map) under the default 3-onset."""
        by_level = {}
        for m, lvl in self.block_maps:
            by_level[lvl] = m  # later blocks overwrite: the stage's last map wins
        return self.entry_map, by_level.get(1), by_level.get(2)


@dataclass
class RatioReport:
    per_block: list
    mean: float


def select_ratio_report(selections) -> RatioReport:
    """Selected-over-total ratio per block and their mean."""
    if not selections:
        raise ValueError("no selections to report on")
    ratios = [float(s.ratio) for s in selections]
    return RatioReport(ratios, float(np.mean(ratios)))


class SelectPackTransformer:
    """Backbone + classifier with per-block token selection and packing."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        validate_config(cfg)
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        p = lambda *shape: nm.param(rng.normal(scale=0.02, size=shape), dtype=dtype)
        zeros = lambda *shape: nm.param(np.zeros(shape), dtype=dtype)
        ones = lambda *shape: nm.param(np.ones(shape), dtype=dtype)
        c1 = cfg.embed_dim
        self.patch_w = p(48, c1)
        self.patch_b = zeros(c1)
        self.embed_gamma = ones(c1)
        self.embed_beta = zeros(c1)
        # merge = 2x2 concat -> norm -> linear; without the norm the signal
        # attenuates ~per-merge by the 0.02-std linear and the trunk collapses
        self.merge_gamma = []
        self.merge_beta = []
        self.merge_w = []
        self.merge_b = []
        for s in (2, 3, 4):
            cin = cfg.stage_dim(s - 1)
            self.merge_gamma.append(ones(4 * cin))
            self.merge_beta.append(zeros(4 * cin))
            self.merge_w.append(p(4 * cin, 2 * cin))
            self.merge_b.append(zeros(2 * cin))
        self.stages = []
        spa_index = 0
        for s in (1, 2, 3, 4):
            c = cfg.stage_dim(s)
            heads = cfg.heads[s - 1]
            sparse = s >= cfg.select_start_stage
            blocks = [
                BlockParams.init(c, heads, rng, window=None if sparse else cfg.window_size, dtype=dtype, out_scale=0.1)
                for _ in range(cfg.depths[s - 1])
            ]
            gates = None
            if sparse:
                gates = []
                for _ in blocks:
                    spa_index += 1
                    gates.append(GateParams.init(c, rng, dtype=dtype, bias=0.25 * spa_index))
            self.stages.append(StageParams(blocks, gates))
        self.entry_gate = None
        if cfg.select_start_stage in (3, 4):
            self.entry_gate = GateParams.init(cfg.stage_dim(cfg.select_start_stage - 1), rng, dtype=dtype)
        # output norm before pooling, as in the windowed backbones this follows
        self.final_gamma = nm.param(np.ones(cfg.stage_dim(4)), dtype=dtype)
        self.final_beta = zeros(cfg.stage_dim(4))
        self.head_w = p(cfg.stage_dim(4), cfg.num_classes)
        self.head_b = zeros(cfg.num_classes)

    # -- parameters ------------------------------------------------------

    def named_parameters(self):
        yield "patch_embed.weight", self.patch_w
        yield "patch_embed.bias", self.patch_b
        yield "patch_embed.gamma", self.embed_gamma
        yield "patch_embed.beta", self.embed_beta
        for i, (w, b) in enumerate(zip(self.merge_w, self.merge_b)):
            yield f"merge{i + 2}.gamma", self.merge_gamma[i]
            yield f"merge{i + 2}.beta", self.merge_beta[i]
            yield f"merge{i + 2}.weight", w
            yield f"merge{i + 2}.bias", b
        names = [
            "norm1_gamma", "norm1_beta", "norm2_gamma", "norm2_beta",
            "qkv_w", "qkv_b", "proj_w", "proj_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b", "rel_bias",
        ]
        for s, stage in enumerate(self.stages, start=1):
            for b_i, bp in enumerate(stage.blocks):
                for n in names:
                    t = getattr(bp, n)
                    if t is not None:
                        yield f"stage{s}.block{b_i}.{n}", t
            if stage.gates:
                for g_i, gp in enumerate(stage.gates):
                    yield f"stage{s}.gate{g_i}.weight", gp.weight
                    yield f"stage{s}.gate{g_i}.bias", gp.bias
        if self.entry_gate is not None:
            yield "entry_gate.weight", self.entry_gate.weight
            yield "entry_gate.bias", self.entry_gate.bias
        yield "final_norm.gamma", self.final_gamma
        yield "final_norm.beta", self.final_beta
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    # -- forward ---------------------------------------------------------

    def _patch_embed(self, x: Tensor) -> TokenGrid:
        b, h, w, _ = x.shape
        t = nm.reshape(x, (b, h // 4, 4, w // 4, 4, 3))
        t = nm.transpose(t, (0, 1, 3, 2, 4, 5))
        t = nm.reshape(t, (b, h // 4, w // 4, 48))
        t = nm.linear(t, self.patch_w, self.patch_b)
        return TokenGrid(nm.layer_norm(t, self.embed_gamma, self.embed_beta))

    def _patch_merge(self, grid: TokenGrid, idx: int) -> TokenGrid:
        b, h, w, c = grid.values.shape
        t = nm.reshape(grid.values, (b, h // 2, 2, w // 2, 2, c))
        t = nm.transpose(t, (0, 1, 3, 2, 4, 5))
        t = nm.reshape(t, (b, h // 2, w // 2, 4 * c))
        t = nm.layer_norm(t, self.merge_gamma[idx], self.merge_beta[idx])
        return TokenGrid(nm.linear(t, self.merge_w[idx], self.merge_b[idx]))

    def forward(
        self,
        x,
        labels=None,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        selector: str = "gumbel",
        st_hard: bool = True,
    ) -> ForwardResult:
        """Run the backbone; ``labels`` (stacked pyramid levels) are only
        consumed by the label-forced selector."""
        cfg = self.cfg
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        if x.shape[1:] != (cfg.height, cfg.width, 3):
            raise nm.ShapeError(f"input must be [B, {cfg.height}, {cfg.width}, 3], got {x.shape}")
        if mode == "train" and rng is None:
            rng = np.random.default_rng(cfg.seed)
        onset = cfg.select_start_stage
        grid = self._patch_embed(x)
        grids = []
        carry_map = None  # last fused map of the previous sparse stage
        entry_map = None
        entry_level = None
        block_maps = []
        selections = []
        for s in (1, 2, 3, 4):
            if s > 1:
                grid = self._patch_merge(grid, s - 2)
            stage = self.stages[s - 1]
            if s < onset:
                for i, bp in enumerate(stage.blocks):
                    grid = window_attention_block(grid, bp, shifted=(i % 2 == 1), window=cfg.window_size)
            else:
                level = s - 2
                label_grid = None
                if selector == "labels":
                    if labels is None:
                        raise ValueError("label selector needs stacked pyramid labels")
                    label_grid = labels[level]
                s_in = entry_map if s == onset else carry_map
                grid, carry_map, maps, sels = spa_stage(
                    grid, s_in, stage.blocks, stage.gates, cfg, mode=mode, rng=rng,
                    selector=selector, st_hard=st_hard, label_grid=label_grid,
                )
                block_maps.extend((m, level) for m in maps)
                selections.extend(sels)
            grids.append(grid)
            if s + 1 == onset and self.entry_gate is not None:
                entry_map = gate_scores(grid, self.entry_gate)
                entry_level = s - 2  # stage s grid sits at label level s-2
        final = nm.layer_norm(grids[3].values, self.final_gamma, self.final_beta)
        pooled = nm.mean_axis(nm.reshape(final, (grids[3].batch, grids[3].tokens, grids[3].channels)), 1)
        logits = nm.linear(pooled, self.head_w, self.head_b)
        return ForwardResult(grids, entry_map, entry_level, block_maps, selections, logits)


def total_loss(result: ForwardResult, targets: np.ndarray, labels, alpha: float):
    """(combined, task, selection) losses; combined = task + alpha * selection.

    ``labels`` are the stacked pyramid levels ([B, h, w] per level) and must
    be present whenever the model produced supervised score maps.
    """
    l_task = nm.cross_entropy_logits(result.logits, targets)
    maps = result.supervised_maps()
    if maps:
        if labels is None:
            raise ValueError("selection labels are required to train selection")
        l_select = select_loss([(m, labels[lvl]) for m, lvl in maps])
    else:
        l_select = Tensor(np.asarray(0.0), dtype=result.logits.dtype)
    l_total = nm.add(l_task, nm.mul(l_select, float(alpha)))
    return l_total, l_task, l_select


# ---------------------------------------------------------------------------
# Checkpoints: one blob of fixture-format tensors plus a text manifest


def save_checkpoint(model: SelectPackTransformer, blob_path, manifest_path) -> None:
    offset = 0
    lines = []
    chunks = []
    for name, t in model.named_parameters():
        data = nm.serialize_tensor(t.data)
        dims = "x".join(str(d) for d in t.shape) or "scalar"
        lines.append(f"{name} {dims} {offset}")
        chunks.append(data)
        offset += len(data)
    with open(blob_path, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(model: SelectPackTransformer, blob_path, manifest_path) -> None:
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    params = dict(model.named_parameters())
    seen = set()
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            name, dims, offset = line.split()
            if name not in params:
                raise KeyError(f"checkpoint names unknown parameter {name!r}")
            arr, _ = nm.deserialize_tensor(blob[int(offset) :])
            want = params[name].shape
            if arr.shape != want:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {want}")
            params[name].data = arr.astype(params[name].dtype)
            seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
