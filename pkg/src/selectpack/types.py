"""Shared domain vocabulary: configs, token grids, score maps, labels, selections."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .numerics import Tensor, max_pool_2x2


class ConfigError(ValueError):
    """A model configuration violates an invariant; message names the field."""


STAGES = 4


@dataclass
class ModelConfig:
    """Hyperparameters of the four-stage backbone.

    ``package_len`` must equal ``window_size**2`` and the input must reduce
    to even, window-divisible grids at every stage. ``select_start_stage``
    is the first stage (1-based) whose blocks select-and-pack instead of
    running plain window attention.
    """

    height: int = 256
    width: int = 256
    embed_dim: int = 24
    window_size: int = 4
    package_len: int = 16
    depths: tuple = (2, 2, 4, 2)
    heads: tuple = (2, 4, 8, 16)
    alpha: float = 0.01
    tau: float = 0.01
    temp: float = 1.0
    seed: int = 0
    select_start_stage: int = 3
    num_classes: int = 4

    def stage_dim(self, stage: int) -> int:
        """Channel count of 1-based stage: dim, 2*dim, 4*dim, 8*dim."""
        return self.embed_dim * (1 << (stage - 1))

    def stage_grid(self, stage: int) -> tuple:
        """Spatial grid (h, w) of 1-based stage: /4, /8, /16, /32."""
        div = 4 << (stage - 1)
        return self.height // div, self.width // div

    def label_grid(self, level: int) -> tuple:
        """Label level 0..2 lives at /8, /16, /32."""
        div = 8 << level
        return self.height // div, self.width // div


def validate_config(cfg: ModelConfig) -> None:
    """Raise ConfigError naming the first violated field/constraint."""
    if cfg.package_len != cfg.window_size**2:
        raise ConfigError(
            f"package_len: L must equal window_size squared ({cfg.window_size}^2={cfg.window_size ** 2}, got {cfg.package_len})"
        )
    if cfg.embed_dim < 1:
        raise ConfigError("embed_dim: must be >= 1")
    if cfg.window_size < 2:
        raise ConfigError("window_size: must be >= 2")
    for name, v in (("height", cfg.height), ("width", cfg.width)):
        if v % 32 != 0:
            raise ConfigError(f"{name}: must be divisible by 32 (got {v})")
        coarse = v // 32
        if coarse < cfg.window_size or coarse % cfg.window_size != 0:
            raise ConfigError(f"{name}: {name}/32={coarse} must be >= window_size and divisible by it")
        if coarse % 2 != 0:
            raise ConfigError(f"{name}: {name}/32={coarse} must be even so every stage grid is even")
    if len(cfg.depths) != STAGES or len(cfg.heads) != STAGES:
        raise ConfigError("depths/heads: exactly four stages required")
    for i, d in enumerate(cfg.depths):
        if d < 2 or d % 2 != 0:
            raise ConfigError(f"depths: stage depth must be even and >= 2 (stage {i + 1} has {d})")
    for i, h in enumerate(cfg.heads):
        dim = cfg.stage_dim(i + 1)
        if h < 1 or dim % h != 0:
            raise ConfigError(f"heads: stage {i + 1} head count {h} must divide its dim {dim}")
    if not cfg.alpha > 0:
        raise ConfigError("alpha: must be > 0")
    if not (0 < cfg.tau < 1):
        raise ConfigError("tau: must lie in (0, 1)")
    if not cfg.temp > 0:
        raise ConfigError("temp: must be > 0")
    if cfg.select_start_stage not in (2, 3, 4, 5):
        raise ConfigError("select_start_stage: must be 2, 3 or 4 (5 = dense baseline, no selection)")
    if cfg.num_classes < 2:
        raise ConfigError("num_classes: must be >= 2")


_INT_KEYS = {"height", "width", "embed_dim", "window_size", "package_len", "seed", "select_start_stage", "num_classes"}
_FLOAT_KEYS = {"alpha", "tau", "temp"}
_TUPLE_KEYS = {"depths", "heads"}


def parse_config_text(text: str) -> ModelConfig:
    """Parse flat ``key=value`` lines; unknown keys are rejected."""
    known = {f.name for f in fields(ModelConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _INT_KEYS:
                out[key] = int(value)
            elif key in _FLOAT_KEYS:
                out[key] = float(value)
            elif key in _TUPLE_KEYS:
                out[key] = tuple(int(v) for v in value.split(","))
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from e
    cfg = ModelConfig(**out)
    validate_config(cfg)
    return cfg


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        if f.name in _TUPLE_KEYS:
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def micro_config(**overrides) -> ModelConfig:
    """A config small enough to train on a laptop CPU in about a minute."""
    base = dict(
        height=128,
        width=128,
        embed_dim=8,
        window_size=4,
        package_len=16,
        depths=(2, 2, 2, 2),
        heads=(1, 2, 4, 8),
    )
    base.update(overrides)
    cfg = replace(ModelConfig(), **base)
    validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Array-carrying value types


@dataclass
class TokenGrid:
    """A batch of spatial feature maps: values [B, h, w, c]."""

    values: Tensor

    def __post_init__(self):
        if self.values.data.ndim != 4:
            raise ValueError(f"TokenGrid expects [B, h, w, c], got shape {self.values.shape}")

    @property
    def batch(self):
        return self.values.shape[0]

    @property
    def h(self):
        return self.values.shape[1]

    @property
    def w(self):
        return self.values.shape[2]

    @property
    def channels(self):
        return self.values.shape[3]

    @property
    def tokens(self):
        """Token count per image (h*w)."""
        return self.h * self.w


@dataclass
class ScoreMap:
    """Per-token selection logits: [B, h, w, 1]."""

    logits: Tensor

    def __post_init__(self):
        if self.logits.data.ndim != 4 or self.logits.shape[-1] != 1:
            raise ValueError(f"ScoreMap expects [B, h, w, 1], got shape {self.logits.shape}")

    @property
    def batch(self):
        return self.logits.shape[0]

    @property
    def h(self):
        return self.logits.shape[1]

    @property
    def w(self):
        return self.logits.shape[2]


@dataclass
class SelectLabelPyramid:
    """Binary keep/drop grids at /8, /16, /32 of the input resolution.

    Level k+1 is the 2x2 max-pool of level k by construction.
    """

    levels: tuple

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValueError("pyramid must have exactly three levels")
        for lv in self.levels:
            arr = np.asarray(lv)
            if arr.ndim != 2 or not np.isin(arr, (0, 1)).all():
                raise ValueError("pyramid levels must be 2-D binary grids")
        for k in range(2):
            a, b = np.asarray(self.levels[k]), np.asarray(self.levels[k + 1])
            if a.shape != (2 * b.shape[0], 2 * b.shape[1]):
                raise ValueError(f"level {k + 1} must be half the size of level {k}")

    def level(self, k: int) -> np.ndarray:
        return np.asarray(self.levels[k])


def stack_pyramids(pyramids) -> list:
    """Batch per-sample pyramids into three [B, h, w] float arrays."""
    return [np.stack([p.level(k) for p in pyramids]).astype(np.float32) for k in range(3)]


def pyramid_nesting_holds(p: SelectLabelPyramid) -> bool:
    """Check level_{k+1} == max_pool_2x2(level_k) exactly."""
    for k in range(2):
        a = Tensor(p.level(k).astype(np.float32)[None, :, :, None])
        pooled = max_pool_2x2(a).data[0, :, :, 0]
        if not np.array_equal(pooled, p.level(k + 1).astype(np.float32)):
            return False
    return True


@dataclass
class SelectionMask:
    """Hard keep decisions plus the keep-probabilities they came from.

    ``keep`` is boolean [B, h, w]; ``soft`` is the [B, h, w, 1] probability
    tensor retained so straight-through gradients can flow.
    """

    keep: np.ndarray
    soft: Tensor

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.keep.ndim != 3:
            raise ValueError("keep must be [B, h, w]")
        if self.soft.shape != self.keep.shape + (1,):
            raise ValueError("soft must be keep's shape plus a trailing 1")
        if ((self.soft.data < 0) | (self.soft.data > 1)).any():
            raise ValueError("soft probabilities must lie in [0, 1]")

    @property
    def num_selected(self) -> int:
        return int(self.keep.sum())

    @property
    def ratio(self) -> float:
        return float(self.keep.mean()) if self.keep.size else 0.0

    def per_image_counts(self) -> np.ndarray:
        return self.keep.reshape(self.keep.shape[0], -1).sum(axis=1)
