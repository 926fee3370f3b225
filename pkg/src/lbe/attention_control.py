"""Edit-mask extraction from captured cross-attention.

The averaged map of a word is the arithmetic mean of that word's attention
column over the recorded steps from T down to t, max-normalized so a fixed
threshold is meaningful regardless of prompt length. Thresholding uses a
strict greater-than; the final edit mask is the union of the thresholded
source-word and target-word maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class AttentionRecord:
    """One captured cross-attention map: softmax rows over the prompt tokens."""

    timestep: int
    layer: str
    map: torch.Tensor  # (h*w, L)
    spatial: tuple[int, int]  # (h, w) of the flattened query grid


@dataclass
class AveragedWordMap:
    map: torch.Tensor  # (h, w), max-normalized
    word_index: int
    step_range: tuple[int, int]  # (from_t, to_t), inclusive, from_t >= to_t


@dataclass
class BinaryMask:
    mask: torch.Tensor  # (h, w), bool


def average_word_map(records: list[AttentionRecord], word_index: int, t: int) -> AveragedWordMap:
    """Average one word's attention column over all records at timesteps >= t.

    The mean map is divided by its maximum before returning; an all-zero mean
    is rejected.
    """
    if not records:
        raise ValueError("no attention records to average")
    selected = [r for r in records if r.timestep >= t]
    if not selected:
        raise ValueError(f"no attention records at timestep >= {t}")
    h, w = selected[0].spatial
    columns = []
    for record in selected:
        if word_index >= record.map.shape[1]:
            raise ValueError(
                f"word index {word_index} out of range for {record.map.shape[1]} tokens"
            )
        columns.append(record.map[:, word_index].reshape(h, w))
    mean = torch.stack(columns).mean(dim=0)
    peak = mean.max()
    if peak <= 0:
        raise ValueError("averaged attention map is all zero; cannot normalize")
    return AveragedWordMap(
        map=mean / peak,
        word_index=word_index,
        step_range=(max(r.timestep for r in selected), t),
    )


def threshold_map(avg: AveragedWordMap, tau: float) -> BinaryMask:
    """Binarize with a strict comparison: cell is true iff value > tau."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    return BinaryMask(mask=avg.map > tau)


def union_masks(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    """Elementwise logical OR of two masks of equal shape."""
    if a.mask.shape != b.mask.shape:
        raise ValueError(f"mask shapes differ: {tuple(a.mask.shape)} vs {tuple(b.mask.shape)}")
    return BinaryMask(mask=a.mask | b.mask)


def resize_user_mask(mask: torch.Tensor) -> BinaryMask:
    """Downsample an image-resolution (H, W) bool mask to latent resolution.

    A latent cell is true iff any pixel in its 8x8 block is true, so a marked
    region is never clipped by the reduction.
    """
    if mask.ndim != 2:
        raise ValueError(f"expected (H, W) mask, got shape {tuple(mask.shape)}")
    h_px, w_px = mask.shape
    if h_px % 8 or w_px % 8:
        raise ValueError(f"mask dimensions must be divisible by 8, got {h_px}x{w_px}")
    blocks = mask.reshape(h_px // 8, 8, w_px // 8, 8)
    return BinaryMask(mask=blocks.any(dim=3).any(dim=1))
