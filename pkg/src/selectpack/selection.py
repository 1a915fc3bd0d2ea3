"""Token selection: linear gating, two-scale score fusion, Gumbel-based
hard selection with straight-through gradients, label derivation from
object annotations, and the selection loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .types import ScoreMap, SelectionMask, SelectLabelPyramid, TokenGrid


@dataclass
class GateParams:
    """A per-token linear scorer: [c] features -> 1 logit."""

    weight: Tensor  # [c, 1]
    bias: Tensor  # [1]

    @staticmethod
    def init(channels: int, rng: np.random.Generator, dtype=np.float32, bias: float = 0.0) -> "GateParams":
        """``bias`` staggers consecutive gates upward so a fresh gate is not
        born fully shadowed by the max-fusion with the incoming score map
        (a shadowed gate receives no gradient at all)."""
        w = rng.normal(scale=0.02, size=(channels, 1))
        return GateParams(nm.param(w, dtype=dtype), nm.param(np.full(1, bias), dtype=dtype))

    def parameters(self):
        return [self.weight, self.bias]


def gate_scores(grid: TokenGrid, gate: GateParams) -> ScoreMap:
    """Per-token logits = features @ weight + bias."""
    if grid.channels != gate.weight.shape[0]:
        raise nm.ShapeError(f"gate expects {gate.weight.shape[0]} channels, grid has {grid.channels}")
    return ScoreMap(nm.linear(grid.values, gate.weight, gate.bias))


def fuse_upscale(this_scores: ScoreMap, up_scores: ScoreMap | None) -> ScoreMap:
    """Elementwise max of this scale's logits with the 2x2 max-pooled logits
    of the 2x-resolution map; identity when there is no finer map."""
    if up_scores is None:
        return this_scores
    if (up_scores.h, up_scores.w) != (2 * this_scores.h, 2 * this_scores.w):
        raise nm.ShapeError(
            f"up-scale map must be exactly 2x this map: {up_scores.h}x{up_scores.w} vs {this_scores.h}x{this_scores.w}"
        )
    pooled = nm.max_pool_2x2(up_scores.logits)
    return ScoreMap(nm.maximum(this_scores.logits, pooled))


def gate_representation(grid: TokenGrid, scores: ScoreMap) -> TokenGrid:
    """Scale each token by its sigmoid-normalized score (broadcast over channels)."""
    if (scores.batch, scores.h, scores.w) != (grid.batch, grid.h, grid.w):
        raise nm.ShapeError("score map and grid disagree spatially")
    return TokenGrid(nm.mul(grid.values, nm.sigmoid(scores.logits)))


def _gumbel(rng: np.random.Generator, shape):
    u = rng.uniform(low=np.finfo(np.float64).tiny, high=1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_select(scores: ScoreMap, tau: float, temp: float, mode: str, rng: np.random.Generator | None) -> SelectionMask:
    """Binary Gumbel-Softmax over class logits (s, 0), reduced to a logistic.

    Train mode perturbs the logit with a pair of Gumbel draws before the
    sigmoid; eval mode is noise-free. A token is kept when its keep
    probability reaches ``tau``. The probabilities are returned so the
    straight-through estimator can route gradients through them.
    """
    if not (0 < tau < 1):
        raise ValueError("tau must lie in (0, 1)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    s = scores.logits
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode selection needs an rng")
        noise = _gumbel(rng, s.shape) - _gumbel(rng, s.shape)
        s = nm.add(s, noise.astype(s.dtype))
    p = nm.sigmoid(s * (1.0 / temp))
    keep = p.data[..., 0] >= tau
    return SelectionMask(keep, p)


def topk_select(scores: ScoreMap, ratio: float, temp: float = 1.0) -> SelectionMask:
    """Uniform per-image selection of the top ``ratio`` fraction of tokens.

    The baseline strategy that applies one fixed ratio to every image;
    probabilities still come from the sigmoid so gradients behave like the
    dynamic path.
    """
    if not (0 < ratio <= 1):
        raise ValueError("ratio must lie in (0, 1]")
    p = nm.sigmoid(scores.logits * (1.0 / temp))
    b, h, w = scores.batch, scores.h, scores.w
    n = h * w
    k = max(1, int(np.ceil(ratio * n)))
    flat = scores.logits.data.reshape(b, n)
    keep = np.zeros((b, n), dtype=bool)
    order = np.argsort(-flat, axis=1, kind="stable")
    np.put_along_axis(keep, order[:, :k], True, axis=1)
    return SelectionMask(keep.reshape(b, h, w), p)


def label_select(scores: ScoreMap, label_grid: np.ndarray, temp: float = 1.0) -> SelectionMask:
    """Selection forced to the ground-truth label grid (oracle selection)."""
    p = nm.sigmoid(scores.logits * (1.0 / temp))
    keep = np.broadcast_to(np.asarray(label_grid) > 0, (scores.batch, scores.h, scores.w))
    return SelectionMask(keep.copy(), p)


def straight_through_multiplier(mask: SelectionMask) -> Tensor:
    """[B, h, w, 1] multiplier whose forward value is the hard 0/1 keep
    decision while its gradient is that of the keep probability."""
    hard = mask.keep.astype(mask.soft.dtype)[..., None]
    return nm.add(mask.soft, hard - mask.soft.data)


# ---------------------------------------------------------------------------
# Selection labels


def rasterize_boxes(boxes, height: int, width: int) -> np.ndarray:
    """Union of half-open pixel boxes (x0, y0, x1, y1) as a binary [H, W] mask."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for box in boxes:
        x0, y0, x1, y1 = (int(v) for v in box)
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ValueError(f"box {box} lies outside the {width}x{height} image")
        mask[y0:y1, x0:x1] = 1
    return mask


def _block_any(mask: np.ndarray, block: int) -> np.ndarray:
    h, w = mask.shape
    return mask.reshape(h // block, block, w // block, block).max(axis=(1, 3))


def derive_select_labels(objects, height: int, width: int) -> SelectLabelPyramid:
    """Reduce an object annotation to keep/drop grids at /8, /16, /32.

    ``objects`` is either a full-resolution binary mask or an iterable of
    (x0, y0, x1, y1) boxes. A cell is positive iff any covered pixel is.
    """
    if height % 32 or width % 32:
        raise ValueError("image dims must be divisible by 32 to build the pyramid")
    if isinstance(objects, np.ndarray) and objects.ndim == 2 and objects.shape != (height, width):
        raise ValueError(f"mask shape {objects.shape} != image {height}x{width}")
    if isinstance(objects, np.ndarray) and objects.shape == (height, width):
        pixel = (objects > 0).astype(np.uint8)
    else:
        pixel = rasterize_boxes(objects, height, width)
    lv0 = _block_any(pixel, 8)
    lv1 = _block_any(lv0, 2)
    lv2 = _block_any(lv1, 2)
    return SelectLabelPyramid((lv0, lv1, lv2))


# ---------------------------------------------------------------------------
# Selection loss


def select_loss(maps_and_labels) -> Tensor:
    """Binary cross-entropy between selection logits and their scale-matched
    labels: mean over a map's tokens, summed over maps."""
    total = None
    for scores, label in maps_and_labels:
        logits = scores.logits if isinstance(scores, ScoreMap) else scores
        y = np.asarray(label, dtype=logits.dtype)
        if y.shape != logits.shape[:-1]:
            raise nm.ShapeError(f"label grid {y.shape} does not match score map {logits.shape[:-1]}")
        term = nm.mean_all(nm.bce_with_logits(logits, y[..., None]))
        total = term if total is None else nm.add(total, term)
    if total is None:
        raise ValueError("select_loss needs at least one score map")
    return total
