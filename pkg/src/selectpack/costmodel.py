"""Analytic attention cost formulas, their instrumented counterparts, and
the padding-waste comparison between fixed-length packing and pad-to-max.

Accounting convention: one MAC is one FLOP unit; only projections and
attention products count (softmax, norms and pointwise ops do not), which
is exactly what the analytic formulas cover. The packed-attention formula
is implemented verbatim even though its projection split differs from
dense accounting; ``measured_minus_analytic_spa`` exposes that delta
instead of hiding it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import BlockParams, multi_head_attention
from .numerics import Tensor


def flops_msa(batch: int, tokens: int, channels: int) -> int:
    """Dense attention: B(4NC^2 + 2N^2C)."""
    return batch * (4 * tokens * channels**2 + 2 * tokens**2 * channels)


def flops_wmsa(batch: int, tokens: int, channels: int, window: int) -> int:
    """Window attention: B(4NC^2 + 2M^2NC)."""
    return batch * (4 * tokens * channels**2 + 2 * window**2 * tokens * channels)


def flops_spa(batch: int, tokens: int, channels: int, package_len: int, num_containers: int) -> int:
    """Packed attention: B(NC + NC^2) + B'(3LC^2 + 2L^2C)."""
    return batch * (tokens * channels + tokens * channels**2) + num_containers * (
        3 * package_len * channels**2 + 2 * package_len**2 * channels
    )


def containers_for_ratio(batch: int, tokens: int, package_len: int, ratio: float) -> int:
    """B' when each image keeps ``ratio`` of its tokens."""
    return math.ceil(ratio * batch * tokens / package_len)


def padding_waste(selected_counts, package_len: int) -> tuple:
    """(packed waste, pad-to-max waste) in slots for per-image keep counts.

    Packing wastes only the tail of the last container; padding every image
    to the batch maximum wastes B*max - sum.
    """
    counts = [int(c) for c in selected_counts]
    if any(c < 0 for c in counts):
        raise ValueError("selected counts must be >= 0")
    total = sum(counts)
    bprime = -(-total // package_len)
    spa_waste = bprime * package_len - total
    maxpad_waste = len(counts) * max(counts) - total if counts else 0
    return spa_waste, maxpad_waste


@dataclass
class CostReport:
    """Analytic and measured attention costs for one parameter point."""

    batch: int
    tokens: int
    channels: int
    window: int
    package_len: int
    ratio: float
    num_containers: int
    omega_msa: int
    omega_wmsa: int
    omega_spa: int
    measured_macs: int
    padding_waste_spa: int
    padding_waste_maxpad: int

    CSV_HEADER = (
        "batch,tokens,channels,window,package_len,ratio,num_containers,"
        "omega_msa,omega_wmsa,omega_spa,measured_macs,measured_minus_analytic_spa,"
        "padding_waste_spa,padding_waste_maxpad"
    )

    @property
    def measured_minus_analytic_spa(self) -> int:
        return self.measured_macs - self.omega_spa

    def csv_row(self) -> str:
        return (
            f"{self.batch},{self.tokens},{self.channels},{self.window},{self.package_len},"
            f"{self.ratio:g},{self.num_containers},{self.omega_msa},{self.omega_wmsa},{self.omega_spa},"
            f"{self.measured_macs},{self.measured_minus_analytic_spa},"
            f"{self.padding_waste_spa},{self.padding_waste_maxpad}"
        )


def measure_packed_attention_macs(batch: int, tokens: int, channels: int, package_len: int, num_containers: int) -> int:
    """Forward MACs of the packed attention core at the given shapes:
    the per-token gate plus container qkv/logits/values/output projections."""
    rng = np.random.default_rng(0)
    params = BlockParams.init(channels, 1, rng)
    gate_w = Tensor(rng.normal(scale=0.02, size=(channels, 1)).astype(np.float32))

    def run():
        feats = Tensor(rng.normal(size=(batch, tokens, channels)).astype(np.float32))
        nm.matmul(feats, gate_w)
        if num_containers:
            packed = Tensor(rng.normal(size=(num_containers, package_len, channels)).astype(np.float32))
            multi_head_attention(packed, params)

    return nm.measure_macs(run)


def cost_report(batch: int, tokens: int, channels: int, window: int, ratio: float) -> CostReport:
    """Evaluate all three formulas plus instrumented packed attention at one
    point; container count follows from a uniform per-image keep ratio."""
    if min(batch, tokens, channels, window) < 1:
        raise ValueError("dimensions must be positive")
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must lie in [0, 1]")
    package_len = window * window
    bprime = containers_for_ratio(batch, tokens, package_len, ratio)
    per_image = int(round(ratio * tokens))
    spa_w, maxpad_w = padding_waste([per_image] * batch, package_len)
    return CostReport(
        batch=batch,
        tokens=tokens,
        channels=channels,
        window=window,
        package_len=package_len,
        ratio=ratio,
        num_containers=bprime,
        omega_msa=flops_msa(batch, tokens, channels),
        omega_wmsa=flops_wmsa(batch, tokens, channels, window),
        omega_spa=flops_spa(batch, tokens, channels, package_len, bprime),
        measured_macs=measure_packed_attention_macs(batch, tokens, channels, package_len, bprime),
        padding_waste_spa=spa_w,
        padding_waste_maxpad=maxpad_w,
    )
