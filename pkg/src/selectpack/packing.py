"""Fixed-length token packing: bin selected tokens into containers, build
same-image attention masks, and scatter attention outputs back onto grids.

Tokens are enumerated image-by-image in batch order and row-major within an
image, then poured sequentially into containers of length L. An image's
tokens may span containers; only the final container is padded. Pad slots
carry zero values, a PAD image id, and are excluded from attention.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .types import SelectionMask, TokenGrid

PAD = -1


@dataclass
class PackingPlan:
    """Bijection between selected tokens and non-pad container slots.

    ``src_flat`` indexes the flattened [B*h*w] token axis; entry i goes to
    ``(container[i], slot[i])``. Containers are filled in order, so both
    arrays are non-decreasing lexicographically.
    """

    image_ids: np.ndarray  # [N_p] int
    src_flat: np.ndarray  # [N_p] int, row index into the flattened grid
    containers: np.ndarray  # [N_p] int
    slots: np.ndarray  # [N_p] int
    package_len: int
    num_images: int
    tokens_per_image: int

    @property
    def num_selected(self) -> int:
        return int(self.src_flat.size)

    @property
    def num_containers(self) -> int:
        return int(self.containers[-1]) + 1 if self.num_selected else 0

    @property
    def pad_count(self) -> int:
        return self.num_containers * self.package_len - self.num_selected

    def slot_image(self) -> np.ndarray:
        """[B', L] image id per slot, PAD where padded."""
        out = np.full((self.num_containers, self.package_len), PAD, dtype=np.int64)
        out[self.containers, self.slots] = self.image_ids
        return out

    def to_csv(self) -> str:
        """Debug dump: image_id,src_index,container,slot (src within image)."""
        buf = io.StringIO()
        buf.write("image_id,src_index,container,slot\n")
        within = self.src_flat - self.image_ids * self.tokens_per_image
        for img, src, ct, sl in zip(self.image_ids, within, self.containers, self.slots):
            buf.write(f"{img},{src},{ct},{sl}\n")
        return buf.getvalue()


@dataclass
class PackedBatch:
    """Container values [B', L, c] plus per-slot image identity."""

    values: Tensor
    slot_image: np.ndarray  # [B', L], PAD for padded slots

    @property
    def num_containers(self):
        return self.values.shape[0]

    @property
    def package_len(self):
        return self.values.shape[1]


@dataclass
class AttentionMask:
    """Pairwise slot validity: attend only within the same image, never pads."""

    valid: np.ndarray  # [B', L, L] bool

    def exclusion(self, dtype=np.float32) -> np.ndarray:
        """Additive-flag form for the masked softmax kernel."""
        return nm.exclusion_mask(self.valid, dtype)


def build_packing_plan(mask: SelectionMask, package_len: int) -> PackingPlan:
    """Enumerate selected tokens and assign them container slots in order."""
    if package_len < 1:
        raise ValueError("package_len must be >= 1")
    b, h, w = mask.keep.shape
    flat = mask.keep.reshape(-1)
    src = np.flatnonzero(flat)
    image_ids = src // (h * w)
    pos = np.arange(src.size)
    return PackingPlan(
        image_ids=image_ids,
        src_flat=src,
        containers=pos // package_len,
        slots=pos % package_len,
        package_len=package_len,
        num_images=b,
        tokens_per_image=h * w,
    )


def pack_tokens(source: TokenGrid, plan: PackingPlan) -> PackedBatch:
    """Gather the plan's tokens into [B', L, c] containers, zero-padding the tail."""
    b, h, w, c = source.values.shape
    if b != plan.num_images or h * w != plan.tokens_per_image:
        raise nm.ShapeError("plan was built for a different grid geometry")
    bprime = plan.num_containers
    dtype = source.values.dtype
    flat = nm.reshape(source.values, (b * h * w, c))
    if bprime == 0:
        return PackedBatch(Tensor(np.zeros((0, plan.package_len, c)), dtype=dtype), np.zeros((0, plan.package_len), dtype=np.int64))
    rows = nm.gather_rows(flat, plan.src_flat)
    base = Tensor(np.zeros((bprime * plan.package_len, c)), dtype=dtype)
    dest = plan.containers * plan.package_len + plan.slots
    packed = nm.scatter_write(base, dest, rows)
    return PackedBatch(nm.reshape(packed, (bprime, plan.package_len, c)), plan.slot_image())


def build_same_image_mask(slot_image: np.ndarray) -> AttentionMask:
    """valid[b, i, j] iff slots i and j of container b hold the same image
    (pads match nothing, not even themselves)."""
    ids = np.asarray(slot_image)
    same = ids[:, :, None] == ids[:, None, :]
    not_pad = ids != PAD
    return AttentionMask(same & not_pad[:, :, None] & not_pad[:, None, :])


def unpack_scatter(attn_out: PackedBatch, plan: PackingPlan, base: TokenGrid) -> TokenGrid:
    """Grid equal to ``base`` except at selected positions, which receive
    their container slot values."""
    b, h, w, c = base.values.shape
    if b != plan.num_images or h * w != plan.tokens_per_image:
        raise nm.ShapeError("plan was built for a different grid geometry")
    if attn_out.num_containers != plan.num_containers or attn_out.package_len != plan.package_len:
        raise nm.ShapeError("packed batch does not match the plan")
    if plan.num_selected == 0:
        return base
    flat_base = nm.reshape(base.values, (b * h * w, c))
    flat_slots = nm.reshape(attn_out.values, (plan.num_containers * plan.package_len, c))
    rows = nm.gather_rows(flat_slots, plan.containers * plan.package_len + plan.slots)
    out = nm.scatter_write(flat_base, plan.src_flat, rows)
    return TokenGrid(nm.reshape(out, (b, h, w, c)))
