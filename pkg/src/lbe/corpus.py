"""Synthetic video corpus: one colored shape translating over a static
textured background, 8 frames per clip, with captions drawn from a fixed
vocabulary and per-frame bounding boxes of the object.

Generation is deterministic per seed: the same spec and seed reproduce the
corpus bytewise.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .ppm import read_ppm, write_ppm

# token id 0 is reserved for unknown words
VOCAB: tuple[str, ...] = (
    "<unk>",
    "a",
    "on",
    "red",
    "green",
    "blue",
    "yellow",
    "purple",
    "orange",
    "cyan",
    "magenta",
    "white",
    "black",
    "pink",
    "brown",
    "gray",
    "dark",
    "light",
    "square",
    "circle",
    "triangle",
    "cross",
    "diamond",
    "ring",
    "floor",
    "wall",
    "canvas",
    "carpet",
    "board",
)

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.12, 0.20, 0.90),
    "yellow": (0.92, 0.88, 0.12),
    "purple": (0.55, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.10, 0.80, 0.85),
    "magenta": (0.90, 0.12, 0.75),
    "white": (0.96, 0.96, 0.96),
    "black": (0.05, 0.05, 0.05),
    "pink": (0.95, 0.60, 0.70),
    "brown": (0.55, 0.35, 0.15),
}

SHADES: dict[str, float] = {"gray": 0.50, "dark": 0.28, "light": 0.72}

# backgrounds may be named by any color word or any shade word
BACKGROUNDS: dict[str, tuple[float, float, float]] = {
    **COLORS,
    **{name: (v, v, v) for name, v in SHADES.items()},
}

SHAPES: tuple[str, ...] = ("square", "circle", "triangle", "cross", "diamond", "ring")

SURFACES: tuple[str, ...] = ("floor", "wall", "canvas", "carpet", "board")


@dataclass
class GenSpec:
    clips: int = 10
    frames_per_clip: int = 8
    size: int = 64
    seed: int = 0
    min_box_frac: float = 0.06
    max_box_frac: float = 0.30


@dataclass
class ClipManifest:
    clip_id: str
    caption: str
    frame_files: list[str] = field(default_factory=list)
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)  # x0,y0,x1,y1 exclusive


def write_vocab(path: str | os.PathLike, vocab: tuple[str, ...] = VOCAB) -> None:
    from .container import atomic_write_bytes

    atomic_write_bytes(path, ("\n".join(vocab) + "\n").encode("utf-8"))


def load_vocab(path: str | os.PathLike) -> tuple[str, ...]:
    with open(path, "r", encoding="utf-8") as fh:
        words = [line.strip() for line in fh if line.strip()]
    if not words or words[0] != "<unk>":
        raise ValueError(f"{path}: vocabulary must start with <unk>")
    return tuple(words)


def generate_corpus(spec: GenSpec, out_dir: str | os.PathLike) -> list[ClipManifest]:
    """Render the corpus under out_dir: one subdirectory per clip plus vocab.txt."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.RandomState(spec.seed)
    manifests = []
    for index in range(spec.clips):
        clip_id = f"clip_{index:03d}"
        clip_dir = os.path.join(out_dir, clip_id)
        os.makedirs(clip_dir, exist_ok=True)
        manifest = _render_clip(clip_id, spec, rng, clip_dir)
        _write_clip_manifest(os.path.join(clip_dir, "manifest.txt"), manifest)
        manifests.append(manifest)
    write_vocab(os.path.join(out_dir, "vocab.txt"))
    return manifests


def list_clips(corpus_dir: str | os.PathLike) -> list[str]:
    corpus_dir = os.fspath(corpus_dir)
    clips = sorted(
        name
        for name in os.listdir(corpus_dir)
        if os.path.isfile(os.path.join(corpus_dir, name, "manifest.txt"))
    )
    if not clips:
        raise ValueError(f"{corpus_dir}: no clip directories with manifest.txt found")
    return clips


def load_clip_manifest(clip_dir: str | os.PathLike) -> ClipManifest:
    clip_dir = os.fspath(clip_dir)
    manifest = ClipManifest(clip_id=os.path.basename(clip_dir.rstrip("/")), caption="")
    boxes: dict[int, tuple[int, int, int, int]] = {}
    with open(os.path.join(clip_dir, "manifest.txt"), "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if key == "id":
                manifest.clip_id = value
            elif key == "caption":
                manifest.caption = value
            elif key == "frames":
                manifest.frame_files = value.split()
            elif key.startswith("box_"):
                boxes[int(key[4:])] = tuple(int(v) for v in value.split(","))
            else:
                raise ValueError(f"{clip_dir}/manifest.txt: unknown key {key!r}")
    manifest.boxes = [boxes[i] for i in sorted(boxes)]
    if not manifest.frame_files:
        raise ValueError(f"{clip_dir}: manifest lists no frames")
    return manifest


def load_frames(clip_dir: str | os.PathLike, manifest: ClipManifest) -> list[torch.Tensor]:
    """Load the clip's frames in manifest order as (3, H, W) float tensors."""
    return [
        torch.from_numpy(read_ppm(os.path.join(os.fspath(clip_dir), name)))
        for name in manifest.frame_files
    ]


def box_pixel_mask(box: tuple[int, int, int, int], size: int) -> torch.Tensor:
    """Filled (H, W) bool mask of a bounding box, pixel coordinates exclusive on the right."""
    x0, y0, x1, y1 = box
    mask = torch.zeros(size, size, dtype=torch.bool)
    mask[y0:y1, x0:x1] = True
    return mask


def _render_clip(clip_id: str, spec: GenSpec, rng: np.random.RandomState, clip_dir: str) -> ClipManifest:
    size = spec.size
    color_name = list(COLORS)[rng.randint(len(COLORS))]
    shape_name = SHAPES[rng.randint(len(SHAPES))]
    bg_name = color_name
    while bg_name == color_name:
        bg_name = list(BACKGROUNDS)[rng.randint(len(BACKGROUNDS))]
    surface_name = SURFACES[rng.randint(len(SURFACES))]
    caption = f"a {color_name} {shape_name} on {bg_name} {surface_name}"

    background = _render_background(bg_name, surface_name, size)

    # pick a radius and a trajectory that keeps the shape fully inside the frame
    lo = max(5, int(np.floor(np.sqrt(spec.min_box_frac * size * size) / 2)) + 1)
    hi = int(np.ceil(np.sqrt(spec.max_box_frac * size * size) / 2)) - 1
    radius = rng.randint(lo, hi + 1)
    vx, vy = 0, 0
    while vx == 0 and vy == 0:
        vx, vy = rng.randint(-3, 4), rng.randint(-3, 4)
    span_x = abs(vx) * (spec.frames_per_clip - 1)
    span_y = abs(vy) * (spec.frames_per_clip - 1)
    margin = radius + 1
    cx0 = rng.randint(margin, size - margin - span_x + 1) + (span_x if vx < 0 else 0)
    cy0 = rng.randint(margin, size - margin - span_y + 1) + (span_y if vy < 0 else 0)

    manifest = ClipManifest(clip_id=clip_id, caption=caption)
    color = np.array(COLORS[color_name], dtype=np.float32).reshape(3, 1, 1)
    for k in range(spec.frames_per_clip):
        cx, cy = cx0 + vx * k, cy0 + vy * k
        coverage = _shape_coverage(shape_name, cx, cy, radius, size)
        frame = np.where(coverage[None, :, :], color, background)
        ys, xs = np.nonzero(coverage)
        box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        frac = (box[2] - box[0]) * (box[3] - box[1]) / (size * size)
        if not spec.min_box_frac <= frac <= spec.max_box_frac:
            raise AssertionError(f"{clip_id} frame {k}: box fraction {frac:.4f} out of bounds")
        name = f"frame_{k:02d}.ppm"
        write_ppm(os.path.join(clip_dir, name), frame)
        manifest.frame_files.append(name)
        manifest.boxes.append(box)
    return manifest


def _render_background(bg_name: str, surface_name: str, size: int) -> np.ndarray:
    """Solid background color modulated by the surface's stripe/checker texture.

    Fully determined by the two caption words, so a denoiser can only paint it
    correctly at high noise by reading the caption."""
    base = np.array(BACKGROUNDS[bg_name], dtype=np.float32).reshape(3, 1, 1)
    y, x = np.mgrid[0:size, 0:size]
    if surface_name == "floor":
        pattern = (y // 4) % 2
    elif surface_name == "wall":
        pattern = (x // 4) % 2
    elif surface_name == "canvas":
        pattern = (x // 4 + y // 4) % 2
    elif surface_name == "carpet":
        pattern = ((x + y) // 4) % 2
    else:  # board
        pattern = (x // 8 + y // 8) % 2
    modulation = 1.0 + 0.16 * (2.0 * pattern.astype(np.float32) - 1.0)
    return np.clip(base * modulation[None, :, :], 0.0, 1.0).astype(np.float32)


def _shape_coverage(shape: str, cx: int, cy: int, r: int, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    dx, dy = x - cx, y - cy
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "triangle":
        # upward-pointing: full width at the base, apex at the top
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        arm = max(1, r // 3)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (r // 2) * (r // 2))
    raise ValueError(f"unknown shape {shape!r}")


def _write_clip_manifest(path: str, manifest: ClipManifest) -> None:
    from .container import atomic_write_bytes

    lines = [f"id={manifest.clip_id}", f"caption={manifest.caption}"]
    lines.append("frames=" + " ".join(manifest.frame_files))
    for i, box in enumerate(manifest.boxes):
        lines.append(f"box_{i:02d}=" + ",".join(str(v) for v in box))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
