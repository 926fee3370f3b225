"""lbe: local video editing with blended latent diffusion under attention
control, built from scratch at desk scale.

The pieces: a DDIM sampler/inversion pair over linear-beta noise schedules, an
orthonormal patch codec standing in for the latent autoencoder, a toy
trainable conditional denoiser whose cross-attention maps drive autonomous
edit masks, temporal-spatial attention for inter-frame consistency, per-step
latent blending against DDIM-inverted backgrounds, and a small dual-encoder
scorer for frame accuracy / temporal consistency metrics.
"""

from .attention_control import (
    AttentionRecord,
    AveragedWordMap,
    BinaryMask,
    average_word_map,
    resize_user_mask,
    threshold_map,
    union_masks,
)
from .autoencoder import CodecParams, ImageFrame, decode, encode, make_codec
from .denoiser import (
    AttentionCapture,
    DenoiserArch,
    NoisePredictor,
    PromptEmbedding,
    TextPrompt,
    TrainConfig,
    embed_prompt,
    load_denoiser,
    predict_noise,
    save_denoiser,
    tokenize,
    train_denoiser,
)
from .metrics import (
    DualEncoder,
    ScorerArch,
    ScorerTrainConfig,
    clip_score,
    frame_accuracy,
    load_scorer,
    save_scorer,
    temporal_consistency,
    train_scorer,
)
from .pipeline import (
    EditConfig,
    EditResult,
    InversionResult,
    blend,
    denoise_frames,
    edit_video,
    invert_video,
    reconstruct_video,
)
from .scheduler import (
    Latent,
    NoiseSchedule,
    ddim_invert_step,
    ddim_sample_step,
    make_schedule,
    noise_to_level,
)
from .temporal import TemporalAttentionOutput, attend, temporal_spatial_attention

__version__ = "0.1.0"
