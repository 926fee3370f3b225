"""Frame <-> latent codec: a factor-8 spatial downsampling pair.

The default codec is a deterministic orthonormal patch transform: every
non-overlapping 8x8x3 pixel patch is flattened to a 192-vector and rotated by
a fixed orthonormal matrix, giving a (192, H/8, W/8) latent. Because the
transform is an isometry, decode(encode(x)) recovers x exactly up to float
error and the latent norm equals the pixel norm.

A "learned" codec mode is reserved but not implemented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .scheduler import Latent

PATCH = 8
LATENT_CHANNELS = 3 * PATCH * PATCH  # 192


@dataclass
class ImageFrame:
    """RGB frame (3, H, W), values in [0, 1], H and W divisible by 8."""

    pixels: torch.Tensor


@dataclass
class CodecParams:
    mode: str  # "orthonormal-patch" or "learned"
    matrix: torch.Tensor  # (192, 192), orthonormal in orthonormal-patch mode
    seed: int


def make_codec(seed: int = 0) -> CodecParams:
    """Build the orthonormal patch codec from a seeded random rotation."""
    rng = np.random.RandomState(seed)
    gauss = rng.randn(LATENT_CHANNELS, LATENT_CHANNELS)
    q, r = np.linalg.qr(gauss)
    # canonicalize the QR sign ambiguity so the matrix is a pure function of the seed
    q = q * np.sign(np.diag(r))
    return CodecParams(
        mode="orthonormal-patch",
        matrix=torch.from_numpy(np.ascontiguousarray(q)),
        seed=seed,
    )


def encode(frame: ImageFrame, params: CodecParams) -> Latent:
    """Map a frame to its (192, H/8, W/8) latent at noise level 0."""
    _require_orthonormal_mode(params)
    pixels = frame.pixels
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) pixels, got shape {tuple(pixels.shape)}")
    _, h_px, w_px = pixels.shape
    if h_px % PATCH or w_px % PATCH:
        raise ValueError(f"frame dimensions must be divisible by {PATCH}, got {h_px}x{w_px}")
    h, w = h_px // PATCH, w_px // PATCH
    patches = (
        pixels.reshape(3, h, PATCH, w, PATCH)
        .permute(1, 3, 0, 2, 4)
        .reshape(h, w, LATENT_CHANNELS)
    )
    mixed = patches.to(torch.float64) @ params.matrix.T
    data = mixed.permute(2, 0, 1).to(pixels.dtype)
    return Latent(data=data, timestep_tag=0)


def decode(latent: Latent, params: CodecParams) -> ImageFrame:
    """Invert the patch transform and clamp the result to [0, 1]."""
    _require_orthonormal_mode(params)
    data = latent.data
    if data.ndim != 3 or data.shape[0] != LATENT_CHANNELS:
        raise ValueError(
            f"expected ({LATENT_CHANNELS}, h, w) latent, got shape {tuple(data.shape)}"
        )
    _, h, w = data.shape
    patches = data.permute(1, 2, 0).to(torch.float64) @ params.matrix
    pixels = (
        patches.reshape(h, w, 3, PATCH, PATCH)
        .permute(2, 0, 3, 1, 4)
        .reshape(3, h * PATCH, w * PATCH)
        .to(latent.data.dtype)
    )
    return ImageFrame(pixels=pixels.clamp(0.0, 1.0))


def _require_orthonormal_mode(params: CodecParams) -> None:
    if params.mode == "learned":
        raise NotImplementedError("learned codec mode is a reserved slot, not implemented")
    if params.mode != "orthonormal-patch":
        raise ValueError(f"unknown codec mode {params.mode!r}")
