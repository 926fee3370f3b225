"""Temporal-spatial attention: queries from frame i, keys/values from the
concatenation [frame i-1; frame i], reusing the per-frame projection weights
unchanged (f=2 frames feed keys and values).

Frame 1 has no predecessor and attends to [frame 1; frame 1]; duplicated
keys/values rescale the softmax uniformly, so the boundary frame reproduces
plain per-frame self-attention exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass
class TemporalAttentionOutput:
    outputs: torch.Tensor  # (n, h*w, c)
    maps: torch.Tensor  # (n, h*w, 2*h*w), rows sum to 1


def attend(
    query_feats: torch.Tensor,
    kv_feats: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention: softmax(QK^T / sqrt(d)) V.

    query_feats: (m, c), kv_feats: (s, c); projections are (c, d). Returns the
    (m, d) output and the (m, s) row-stochastic attention map.
    """
    if query_feats.shape[-1] != w_q.shape[0] or kv_feats.shape[-1] != w_k.shape[0]:
        raise ValueError(
            f"projection shape mismatch: features have {query_feats.shape[-1]} channels, "
            f"w_q expects {w_q.shape[0]}"
        )
    q = query_feats @ w_q
    k = kv_feats @ w_k
    v = kv_feats @ w_v
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(k.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


def temporal_spatial_attention(
    batch: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
) -> TemporalAttentionOutput:
    """Apply temporal-spatial attention to a (n, h*w, c) feature batch.

    Each frame i draws keys/values from [features[i-1]; features[i]]; frame 0
    self-duplicates. No parameters beyond w_q / w_k / w_v are introduced, and
    frame i's output depends only on frames i-1 and i.
    """
    if batch.ndim != 3:
        raise ValueError(f"expected (n, h*w, c) batch, got shape {tuple(batch.shape)}")
    n = batch.shape[0]
    if n == 0:
        raise ValueError("empty frame batch")
    outputs = []
    maps = []
    for i in range(n):
        neighbor = batch[i - 1] if i > 0 else batch[0]
        kv = torch.cat([neighbor, batch[i]], dim=0)
        out, weights = attend(batch[i], kv, w_q, w_k, w_v)
        outputs.append(out)
        maps.append(weights)
    return TemporalAttentionOutput(outputs=torch.stack(outputs), maps=torch.stack(maps))
