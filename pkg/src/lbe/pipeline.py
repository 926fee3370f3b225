"""End-to-end editing orchestration.

One edit run is: DDIM-invert every frame under the source prompt (collecting
background latents and source cross-attention), start the edit latents at the
inversion endpoint, then walk the ladder back down. At each step the latents
are denoised under the edit prompt, an edit mask is built (thresholded
attention union, resized user mask, or all-true), and the stepped foreground
is blended with the background latent of the matching noise level. Blending
copies background cells verbatim, so with DDIM-inverted backgrounds the final
latent equals the clean latent bitwise outside the last mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .attention_control import (
    AttentionRecord,
    BinaryMask,
    average_word_map,
    resize_user_mask,
    threshold_map,
    union_masks,
)
from .autoencoder import CodecParams, ImageFrame, decode, encode
from .denoiser import (
    PER_FRAME,
    TEMPORAL_SPATIAL,
    AttentionCapture,
    NoisePredictor,
    PromptEmbedding,
    embed_prompt,
    predict_noise,
    tokenize,
)
from .scheduler import Latent, NoiseSchedule, ddim_invert_step, ddim_sample_step, noise_to_level

MASK_MODES = ("auto", "user", "none")
BACKGROUND_MODES = ("ddim-inverted", "randomly-noised")


@dataclass
class EditConfig:
    """All knobs of one editing run."""

    source_prompt: str
    edit_prompt: str
    edited_words: list[tuple[int, int]] = field(default_factory=list)
    tau: float = 0.3
    T: int = 50
    mask_mode: str = "auto"
    user_mask: torch.Tensor | None = None  # (H, W) bool, image resolution
    user_mask_schedule: list[list[BinaryMask]] | None = None  # per step (t=T..1), per frame
    background_mode: str = "ddim-inverted"
    temporal_attention: bool = False
    seed: int = 0
    blend_step_range: tuple[int, int] | None = None  # blend only for low <= t <= high


@dataclass
class InversionResult:
    """Per-frame inversion trajectories indexed by level: [i][t] for t in 0..T,
    where [i][0] is the clean latent z0."""

    background_latents: list[list[Latent]]
    source_attention: list[list[AttentionRecord]]
    z0: list[Latent]


@dataclass
class EditResult:
    frames: list[ImageFrame]
    masks: list[list[BinaryMask]]  # per executed step (t = T..1), per frame
    final_latents: list[Latent]


def blend(z_fg: Latent, z_bg: Latent, m: BinaryMask) -> Latent:
    """Elementwise select: foreground where the mask is true, else background.

    The mask broadcasts across channels; selected cells are copied bitwise.
    """
    if z_fg.data.shape != z_bg.data.shape:
        raise ValueError(
            f"latent shapes differ: {tuple(z_fg.data.shape)} vs {tuple(z_bg.data.shape)}"
        )
    if z_fg.timestep_tag != z_bg.timestep_tag:
        raise ValueError(
            f"blend needs equal noise levels, got {z_fg.timestep_tag} vs {z_bg.timestep_tag}"
        )
    if m.mask.shape != z_fg.data.shape[1:]:
        raise ValueError(
            f"mask shape {tuple(m.mask.shape)} does not match latent grid "
            f"{tuple(z_fg.data.shape[1:])}"
        )
    return Latent(
        data=torch.where(m.mask, z_fg.data, z_bg.data), timestep_tag=z_fg.timestep_tag
    )


def invert_video(
    frames: list[ImageFrame],
    source_prompt: str,
    schedule: NoiseSchedule,
    model: NoisePredictor,
    codec: CodecParams,
    temporal_attention: bool = False,
    capture: bool = True,
) -> InversionResult:
    """DDIM-invert every frame from level 0 up to T under the source prompt.

    The step to level t evaluates the denoiser at the current latent with
    timestep label t, so captured attention records carry tags 1..T. Within a
    step, temporal neighbors are the previous frame's latents at the same
    (pre-step) level.
    """
    if not frames:
        raise ValueError("cannot invert an empty clip")
    sizes = {tuple(f.pixels.shape) for f in frames}
    if len(sizes) != 1:
        raise ValueError(f"frames must share one size, got {sorted(sizes)}")
    p = embed_prompt(tokenize(source_prompt, model.vocab), model)

    current = [encode(frame, codec) for frame in frames]
    trajectories = [[z] for z in current]
    records: list[list[AttentionRecord]] = [[] for _ in frames]
    for t in range(1, schedule.T + 1):
        eps = _predict_step(current, t, p, model, temporal_attention,
                            records if capture else None)
        for i in range(len(frames)):
            current[i] = ddim_invert_step(current[i], eps[i], t, schedule)
            trajectories[i].append(current[i])
    return InversionResult(
        background_latents=trajectories,
        source_attention=records,
        z0=[traj[0] for traj in trajectories],
    )


def denoise_frames(
    latents: list[Latent],
    prompt_embedding: PromptEmbedding,
    schedule: NoiseSchedule,
    model: NoisePredictor,
    temporal_attention: bool = False,
    capture_into: list[list[AttentionRecord]] | None = None,
) -> list[Latent]:
    """Plain DDIM sampling of a clip from its current level down to 0, no blending."""
    current = list(latents)
    for t in range(schedule.T, 0, -1):
        eps = _predict_step(current, t, prompt_embedding, model, temporal_attention, capture_into)
        current = [
            ddim_sample_step(current[i], eps[i], t, schedule) for i in range(len(current))
        ]
    return current


def reconstruct_video(
    frames: list[ImageFrame],
    source_prompt: str,
    schedule: NoiseSchedule,
    model: NoisePredictor,
    codec: CodecParams,
    temporal_attention: bool = False,
) -> EditResult:
    """Invert then sample back under the source prompt: the fidelity baseline."""
    inversion = invert_video(
        frames, source_prompt, schedule, model, codec, temporal_attention, capture=False
    )
    p = embed_prompt(tokenize(source_prompt, model.vocab), model)
    final = denoise_frames(
        [traj[schedule.T] for traj in inversion.background_latents],
        p,
        schedule,
        model,
        temporal_attention,
    )
    return EditResult(
        frames=[decode(z, codec) for z in final], masks=[], final_latents=final
    )


def edit_video(
    frames: list[ImageFrame],
    config: EditConfig,
    schedule: NoiseSchedule,
    model: NoisePredictor,
    codec: CodecParams,
) -> EditResult:
    """Run the full editing method on a clip. See the module docstring."""
    _validate_config(config, schedule, len(frames))
    source = tokenize(config.source_prompt, model.vocab)
    target = tokenize(config.edit_prompt, model.vocab)
    for src_w, tgt_w in config.edited_words:
        if not 0 <= src_w < len(source.tokens):
            raise ValueError(f"source word index {src_w} out of range for {source.raw!r}")
        if not 0 <= tgt_w < len(target.tokens):
            raise ValueError(f"target word index {tgt_w} out of range for {target.raw!r}")

    inversion = invert_video(
        frames,
        config.source_prompt,
        schedule,
        model,
        codec,
        config.temporal_attention,
        capture=True,
    )
    n = len(frames)
    p_edit = embed_prompt(target, model)
    noise_gen = torch.Generator().manual_seed(config.seed)
    static_user_mask = (
        resize_user_mask(config.user_mask)
        if config.mask_mode == "user" and config.user_mask is not None
        else None
    )
    grid = inversion.z0[0].data.shape[1:]

    current = [traj[schedule.T] for traj in inversion.background_latents]
    target_records: list[list[AttentionRecord]] = [[] for _ in range(n)]
    masks_history: list[list[BinaryMask]] = []
    for step_index, t in enumerate(range(schedule.T, 0, -1)):
        eps = _predict_step(
            current, t, p_edit, model, config.temporal_attention, target_records
        )
        step_masks = []
        for i in range(n):
            z_fg = ddim_sample_step(current[i], eps[i], t, schedule)
            m = _step_mask(
                config, t, step_index, i, grid, inversion, target_records, static_user_mask
            )
            if config.background_mode == "ddim-inverted":
                z_bg = inversion.background_latents[i][t - 1]
            else:
                fresh = torch.randn(
                    inversion.z0[i].data.shape, generator=noise_gen,
                    dtype=inversion.z0[i].data.dtype,
                )
                z_bg = noise_to_level(inversion.z0[i], t - 1, fresh, schedule)
            current[i] = blend(z_fg, z_bg, m)
            step_masks.append(m)
        masks_history.append(step_masks)

    return EditResult(
        frames=[decode(z, codec) for z in current],
        masks=masks_history,
        final_latents=current,
    )


def _step_mask(
    config: EditConfig,
    t: int,
    step_index: int,
    frame_index: int,
    grid: tuple[int, int],
    inversion: InversionResult,
    target_records: list[list[AttentionRecord]],
    static_user_mask: BinaryMask | None,
) -> BinaryMask:
    """The effective blend mask for one (step, frame). Outside the configured
    blend range the mask is all-true, which makes the blend a no-op on the
    foreground."""
    if config.blend_step_range is not None:
        low, high = config.blend_step_range
        if not low <= t <= high:
            return _full_mask(grid)
    if config.mask_mode == "none":
        return _full_mask(grid)
    if config.mask_mode == "user":
        if config.user_mask_schedule is not None:
            return config.user_mask_schedule[step_index][frame_index]
        return static_user_mask
    mask = None
    for src_w, tgt_w in config.edited_words:
        src_avg = average_word_map(inversion.source_attention[frame_index], src_w, t)
        tgt_avg = average_word_map(target_records[frame_index], tgt_w, t)
        pair = union_masks(
            threshold_map(src_avg, config.tau), threshold_map(tgt_avg, config.tau)
        )
        mask = pair if mask is None else union_masks(mask, pair)
    return mask


def _full_mask(grid: tuple[int, int]) -> BinaryMask:
    return BinaryMask(mask=torch.ones(grid, dtype=torch.bool))


def _predict_step(
    current: list[Latent],
    t: int,
    p: PromptEmbedding,
    model: NoisePredictor,
    temporal_attention: bool,
    records: list[list[AttentionRecord]] | None,
) -> list[torch.Tensor]:
    """Noise predictions for all frames at one step, from pre-step latents."""
    eps = []
    with torch.no_grad():
        for i, z in enumerate(current):
            sink = AttentionCapture() if records is not None else None
            if temporal_attention:
                neighbor = current[i - 1] if i > 0 else current[0]
                pred = predict_noise(z, t, p, model, sink, TEMPORAL_SPATIAL, neighbor)
            else:
                pred = predict_noise(z, t, p, model, sink, PER_FRAME)
            if records is not None:
                records[i].extend(sink.records)
            eps.append(pred)
    return eps


def _validate_config(config: EditConfig, schedule: NoiseSchedule, n_frames: int) -> None:
    if n_frames == 0:
        raise ValueError("cannot edit an empty clip")
    if not 0.0 <= config.tau < 1.0:
        raise ValueError(f"tau must be in [0, 1), got {config.tau}")
    if config.T != schedule.T:
        raise ValueError(f"config.T={config.T} does not match schedule T={schedule.T}")
    if config.mask_mode not in MASK_MODES:
        raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {config.mask_mode!r}")
    if config.background_mode not in BACKGROUND_MODES:
        raise ValueError(
            f"background_mode must be one of {BACKGROUND_MODES}, got {config.background_mode!r}"
        )
    has_static = config.user_mask is not None
    has_schedule = config.user_mask_schedule is not None
    if config.mask_mode == "user":
        if has_static == has_schedule:
            raise ValueError("user mask mode needs exactly one of user_mask / user_mask_schedule")
        if has_schedule and len(config.user_mask_schedule) != config.T:
            raise ValueError(
                f"user_mask_schedule must cover all {config.T} steps, "
                f"got {len(config.user_mask_schedule)}"
            )
    elif has_static or has_schedule:
        raise ValueError(f"user masks are only valid with mask_mode='user', not {config.mask_mode!r}")
    if config.mask_mode == "auto" and not config.edited_words:
        raise ValueError("auto mask mode needs at least one edited word pair")
