"""Toy conditional noise predictor.

The network is deliberately small but contains every mechanism the editing
method manipulates: two residual conv blocks, one single-head self-attention
block at latent resolution (rewirable to temporal-spatial mode), one
single-head cross-attention block over the prompt tokens (whose softmax maps
can be captured), then two more residual blocks. The timestep enters as a
sinusoidal embedding added to the features; a learned spatial position
embedding is added alongside it.

Cross-attention capture is purely observational: enabling it never changes
the predicted noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention_control import AttentionRecord
from .scheduler import Latent, NoiseSchedule
from .temporal import attend

MAX_PROMPT_LEN = 16

PER_FRAME = "per-frame"
TEMPORAL_SPATIAL = "temporal-spatial"


@dataclass
class TextPrompt:
    tokens: list[int]
    raw: str


@dataclass
class PromptEmbedding:
    matrix: torch.Tensor  # (L, d)


@dataclass
class AttentionCapture:
    """Growable sink for cross-attention maps. One instance per predict call
    when running concurrently; when disabled, records stays empty."""

    enabled: bool = True
    records: list[AttentionRecord] = field(default_factory=list)


@dataclass(frozen=True)
class DenoiserArch:
    in_channels: int = 192
    width: int = 64
    text_dim: int = 32
    vocab_size: int = 29
    spatial: int = 8  # latent grid is spatial x spatial


def tokenize(text: str, vocab: tuple[str, ...]) -> TextPrompt:
    """Lowercased whitespace tokenization; unknown words map to id 0 (<unk>)."""
    words = text.lower().split()
    if not words:
        raise ValueError("cannot tokenize an empty prompt")
    if len(words) > MAX_PROMPT_LEN:
        raise ValueError(f"prompt has {len(words)} tokens, maximum is {MAX_PROMPT_LEN}")
    index = {word: i for i, word in enumerate(vocab)}
    return TextPrompt(tokens=[index.get(word, 0) for word in words], raw=text)


def sinusoidal_embedding(position: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos embedding of integer positions, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=position.dtype, device=position.device) / half
    )
    args = position[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class NoisePredictor(nn.Module):
    """eps_theta(z_t, t, p) with capture hooks and a temporal-mode switch."""

    def __init__(self, arch: DenoiserArch = DenoiserArch(), vocab: tuple[str, ...] = ()):
        super().__init__()
        self.arch = arch
        self.vocab = vocab
        # (T, beta_start, beta_end) the weights were trained against, if known
        self.train_schedule: tuple[int, float, float] | None = None
        w, s = arch.width, arch.spatial
        self.token_table = nn.Embedding(arch.vocab_size, arch.text_dim)
        self.in_conv = nn.Conv2d(arch.in_channels, w, 3, padding=1)
        self.pos_emb = nn.Parameter(torch.zeros(w, s, s))
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.res1 = ResBlock(w)
        self.res2 = ResBlock(w)
        self.self_norm = nn.LayerNorm(w)
        self.self_q = nn.Parameter(torch.empty(w, w))
        self.self_k = nn.Parameter(torch.empty(w, w))
        self.self_v = nn.Parameter(torch.empty(w, w))
        self.self_out = nn.Linear(w, w)
        self.cross_norm = nn.LayerNorm(w)
        self.cross_q = nn.Parameter(torch.empty(w, w))
        self.cross_k = nn.Linear(arch.text_dim, w, bias=False)
        self.cross_v = nn.Linear(arch.text_dim, w, bias=False)
        self.cross_out = nn.Linear(w, w)
        self.res3 = ResBlock(w)
        self.res4 = ResBlock(w)
        self.out_norm = nn.GroupNorm(8, w)
        self.out_conv = nn.Conv2d(w, arch.in_channels, 3, padding=1)
        for p in (self.self_q, self.self_k, self.self_v, self.cross_q):
            nn.init.xavier_uniform_(p)
        # start the text pathway as a no-op so its contribution is learned
        # from zero instead of fighting a random projection
        nn.init.zeros_(self.cross_out.weight)
        nn.init.zeros_(self.cross_out.bias)

    def pre_attention(self, z: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        """Everything before self-attention; returns (B, h*w, width) features."""
        h = self.in_conv(z) + self.pos_emb + t_emb[:, :, None, None]
        h = self.res2(self.res1(h))
        b, w, s1, s2 = h.shape
        return h.permute(0, 2, 3, 1).reshape(b, s1 * s2, w)

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        prompt: torch.Tensor,
        capture: AttentionCapture | None = None,
        attention_mode: str = PER_FRAME,
        neighbor: torch.Tensor | None = None,
        timestep_tag: int | None = None,
    ) -> torch.Tensor:
        """Predict noise for a (B, C, s, s) latent batch.

        `t` is a (B,) integer tensor, `prompt` a (B, L, text_dim) embedding
        batch. In temporal-spatial mode `neighbor` must hold the previous
        frame's latents at the same noise level.
        """
        if attention_mode not in (PER_FRAME, TEMPORAL_SPATIAL):
            raise ValueError(f"unknown attention mode {attention_mode!r}")
        if attention_mode == TEMPORAL_SPATIAL and neighbor is None:
            raise ValueError("temporal-spatial attention needs a neighbor latent")
        if z.shape[1] != self.arch.in_channels:
            raise ValueError(f"expected {self.arch.in_channels} latent channels, got {z.shape[1]}")

        t_emb = self.time_mlp(sinusoidal_embedding(t.to(z.dtype), self.arch.width))
        feats = self.pre_attention(z, t_emb)

        queries = self.self_norm(feats)
        if attention_mode == TEMPORAL_SPATIAL:
            kv = torch.cat([self.self_norm(self.pre_attention(neighbor, t_emb)), queries], dim=1)
        else:
            kv = queries
        attn_out, _ = attend(queries, kv, self.self_q, self.self_k, self.self_v)
        feats = feats + self.self_out(attn_out)

        normed = self.cross_norm(feats)
        q = normed @ self.cross_q
        k = self.cross_k(prompt)
        v = self.cross_v(prompt)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.arch.width)
        attn_map = torch.softmax(scores, dim=-1)  # (B, h*w, L)
        if capture is not None and capture.enabled:
            if z.shape[0] != 1:
                raise ValueError("attention capture supports single-frame calls only")
            if timestep_tag is None:
                timestep_tag = int(t[0].item())
            capture.records.append(
                AttentionRecord(
                    timestep=timestep_tag,
                    layer="cross",
                    map=attn_map[0].detach().clone(),
                    spatial=(self.arch.spatial, self.arch.spatial),
                )
            )
        feats = feats + self.cross_out(attn_map @ v)

        b, hw, w = feats.shape
        s = self.arch.spatial
        h = feats.reshape(b, s, s, w).permute(0, 3, 1, 2)
        h = self.res4(self.res3(h))
        return self.out_conv(F.silu(self.out_norm(h)))


def embed_prompt(prompt: TextPrompt, model: NoisePredictor) -> PromptEmbedding:
    """Token-table rows plus a sinusoidal position term, one row per token."""
    ids = torch.tensor(prompt.tokens, dtype=torch.long)
    if ids.min() < 0 or ids.max() >= model.arch.vocab_size:
        raise ValueError(f"token id out of range for vocabulary of {model.arch.vocab_size}")
    table = model.token_table(ids)
    positions = torch.arange(len(prompt.tokens), dtype=table.dtype)
    return PromptEmbedding(matrix=table + sinusoidal_embedding(positions, model.arch.text_dim))


def predict_noise(
    z_t: Latent,
    t: int,
    p: PromptEmbedding,
    model: NoisePredictor,
    capture: AttentionCapture | None = None,
    attention_mode: str = PER_FRAME,
    neighbor: Latent | None = None,
) -> torch.Tensor:
    """Single-frame noise prediction; see NoisePredictor.forward."""
    t_batch = torch.tensor([t], dtype=torch.long)
    neighbor_batch = neighbor.data[None] if neighbor is not None else None
    out = model(
        z_t.data[None],
        t_batch,
        p.matrix[None],
        capture=capture,
        attention_mode=attention_mode,
        neighbor=neighbor_batch,
        timestep_tag=t,
    )
    return out[0]


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 2e-3
    lr_final: float | None = None  # linear decay target; None keeps lr constant
    seed: int = 0
    arch: DenoiserArch = DenoiserArch()


def train_denoiser(
    dataset: list[tuple[torch.Tensor, list[int]]],
    schedule: NoiseSchedule,
    hyper: TrainConfig,
) -> tuple[NoisePredictor, list[float]]:
    """Minimize E ||eps - eps_theta(z_t, t, p)||^2 with Adam.

    `dataset` pairs clean latents (C, s, s) with token id lists; timesteps are
    sampled uniformly from [1, T] and the noise target is fresh Gaussian noise
    per step. Returns the trained model and the per-step loss trace. Aborts if
    the loss turns non-finite.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    lengths = {len(ids) for _, ids in dataset}
    if len(lengths) != 1:
        raise ValueError(f"all captions must have equal token length, got lengths {sorted(lengths)}")

    gen = torch.Generator().manual_seed(hyper.seed)
    torch.manual_seed(hyper.seed)
    model = NoisePredictor(hyper.arch)
    optimizer = torch.optim.Adam(model.parameters(), lr=hyper.lr)
    latents = torch.stack([z for z, _ in dataset])
    token_ids = torch.tensor([ids for _, ids in dataset], dtype=torch.long)
    abar = torch.tensor(schedule.alpha_bar, dtype=latents.dtype)

    losses: list[float] = []
    for step in range(hyper.steps):
        if hyper.lr_final is not None and hyper.steps > 1:
            frac = step / (hyper.steps - 1)
            for group in optimizer.param_groups:
                group["lr"] = hyper.lr + frac * (hyper.lr_final - hyper.lr)
        idx = torch.randint(0, len(dataset), (hyper.batch_size,), generator=gen)
        t = torch.randint(1, schedule.T + 1, (hyper.batch_size,), generator=gen)
        eps = torch.randn(latents[idx].shape, generator=gen, dtype=latents.dtype)
        a = abar[t][:, None, None, None]
        z_t = a.sqrt() * latents[idx] + (1.0 - a).sqrt() * eps
        prompt = _embed_token_batch(token_ids[idx], model)
        eps_pred = model(z_t, t, prompt)
        loss = F.mse_loss(eps_pred, eps)
        if not torch.isfinite(loss):
            raise RuntimeError(f"training diverged: non-finite loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return model, losses


def _embed_token_batch(token_ids: torch.Tensor, model: NoisePredictor) -> torch.Tensor:
    """(B, L) ids -> (B, L, d) embeddings with the position term added."""
    table = model.token_table(token_ids)
    positions = torch.arange(token_ids.shape[1], dtype=table.dtype)
    return table + sinusoidal_embedding(positions, model.arch.text_dim)


def save_denoiser(
    path,
    model: NoisePredictor,
    vocab: tuple[str, ...] = (),
    codec_seed: int = 0,
    loss_trace: list[float] | None = None,
) -> None:
    """Write the checkpoint: one entry per parameter tensor plus descriptors."""
    import numpy as np

    from .container import text_entry, write_container

    vocab = vocab or model.vocab
    if not vocab:
        raise ValueError("checkpoint needs a vocabulary (pass vocab or set model.vocab)")

    arch = model.arch
    arch_line = (
        f"in_channels={arch.in_channels} width={arch.width} text_dim={arch.text_dim} "
        f"vocab_size={arch.vocab_size} spatial={arch.spatial} codec_seed={codec_seed}"
    )
    entries = {"arch": text_entry(arch_line), "vocab": text_entry(" ".join(vocab))}
    if model.train_schedule is not None:
        T, beta_start, beta_end = model.train_schedule
        entries["schedule"] = text_entry(
            f"T={T} beta_start={beta_start!r} beta_end={beta_end!r}"
        )
    for name, param in model.state_dict().items():
        entries[f"param/{name}"] = param.detach().cpu().numpy().astype(np.float32)
    if loss_trace is not None:
        entries["training_loss"] = np.asarray(loss_trace, dtype=np.float32)
    write_container(path, entries)


def load_denoiser(path) -> tuple[NoisePredictor, tuple[str, ...], int]:
    """Read a checkpoint written by save_denoiser: (model, vocab, codec_seed)."""
    from .container import entry_text, read_container

    entries = read_container(path)
    fields = dict(kv.split("=") for kv in entry_text(entries["arch"]).split())
    codec_seed = int(fields.pop("codec_seed", 0))
    arch = DenoiserArch(**{k: int(v) for k, v in fields.items()})
    vocab = tuple(entry_text(entries["vocab"]).split())
    model = NoisePredictor(arch, vocab=vocab)
    state = {
        name[len("param/") :]: torch.from_numpy(arr.copy())
        for name, arr in entries.items()
        if name.startswith("param/")
    }
    model.load_state_dict(state)
    if "schedule" in entries:
        sched = dict(kv.split("=") for kv in entry_text(entries["schedule"]).split())
        model.train_schedule = (
            int(sched["T"]), float(sched["beta_start"]), float(sched["beta_end"])
        )
    return model, vocab, codec_seed
