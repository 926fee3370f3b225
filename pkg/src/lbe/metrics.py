"""Text-image similarity metrics backed by a small jointly trained dual
encoder (a stand-in for a large pretrained scorer, versioned with the repo).

frame_accuracy counts frames whose edited image scores strictly higher
against the target prompt than the source prompt; ties count as failures.
temporal_consistency is the mean cosine similarity of consecutive frame
embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import tokenize


@dataclass(frozen=True)
class ScorerArch:
    vocab_size: int = 29
    embed_dim: int = 32
    base_channels: int = 16


class DualEncoder(nn.Module):
    """Image tower and text tower emitting L2-normalized vectors of equal width."""

    def __init__(self, arch: ScorerArch = ScorerArch(), vocab: tuple[str, ...] = ()):
        super().__init__()
        self.arch = arch
        self.vocab = vocab
        c = arch.base_channels
        self.image_tower = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.image_head = nn.Linear(4 * c, arch.embed_dim)
        self.token_table = nn.Embedding(arch.vocab_size, arch.embed_dim)
        self.text_head = nn.Sequential(
            nn.Linear(arch.embed_dim, 2 * arch.embed_dim),
            nn.SiLU(),
            nn.Linear(2 * arch.embed_dim, arch.embed_dim),
        )
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / 0.07)))

    def embed_images(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, e) unit vectors."""
        h = self.image_tower(pixels).mean(dim=(2, 3))
        return F.normalize(self.image_head(h), dim=-1)

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(B, L) -> (B, e) unit vectors."""
        pooled = self.token_table(token_ids).mean(dim=1)
        return F.normalize(self.text_head(pooled), dim=-1)


def embed_image(frame, model: DualEncoder) -> torch.Tensor:
    with torch.no_grad():
        return model.embed_images(_pixels(frame)[None])[0]


def embed_text(text: str, model: DualEncoder) -> torch.Tensor:
    ids = torch.tensor(tokenize(text, model.vocab).tokens, dtype=torch.long)
    with torch.no_grad():
        return model.embed_tokens(ids[None])[0]


def clip_score(frame, text: str, model: DualEncoder) -> float:
    """Cosine similarity of the two tower embeddings, in [-1, 1]."""
    with torch.no_grad():
        return float(embed_image(frame, model) @ embed_text(text, model))


def frame_accuracy(frames: list, p_src: str, p_edit: str, model: DualEncoder) -> float:
    """Fraction of frames scoring strictly higher on p_edit than on p_src."""
    if not frames:
        raise ValueError("frame_accuracy needs a nonempty clip")
    with torch.no_grad():
        src = embed_text(p_src, model)
        edit = embed_text(p_edit, model)
        wins = 0
        for frame in frames:
            vec = embed_image(frame, model)
            if float(vec @ edit) > float(vec @ src):
                wins += 1
    return wins / len(frames)


def temporal_consistency(frames: list, model: DualEncoder) -> float:
    """Mean cosine similarity of all consecutive frame embedding pairs."""
    if len(frames) < 2:
        raise ValueError("temporal_consistency needs at least 2 frames")
    with torch.no_grad():
        vecs = torch.stack([embed_image(frame, model) for frame in frames])
    return float((vecs[:-1] * vecs[1:]).sum(dim=-1).mean())


@dataclass
class ScorerTrainConfig:
    steps: int = 1500
    batch_size: int = 24
    lr: float = 1e-3
    seed: int = 0
    holdout_frac: float = 0.2
    arch: ScorerArch = ScorerArch()


def train_scorer(
    dataset: list[tuple[torch.Tensor, str]],
    vocab: tuple[str, ...],
    hyper: ScorerTrainConfig,
) -> tuple[DualEncoder, float]:
    """Contrastive training over (frame, caption) pairs.

    Batches draw one random frame from each of batch_size distinct captions
    and minimize the symmetric InfoNCE loss. A caption-level holdout split is
    evaluated afterwards; returns (model, holdout top-1 retrieval accuracy).
    """
    if not dataset:
        raise ValueError("scorer dataset is empty")
    groups: dict[str, list[torch.Tensor]] = {}
    for pixels, caption in dataset:
        groups.setdefault(caption, []).append(pixels)
    captions = sorted(groups)
    n_holdout = max(1, int(len(captions) * hyper.holdout_frac))
    if len(captions) - n_holdout < 2:
        raise ValueError(f"need at least 2 training captions, got {len(captions) - n_holdout}")

    rng = np.random.RandomState(hyper.seed)
    holdout = sorted(rng.choice(len(captions), size=n_holdout, replace=False).tolist())
    holdout_set = {captions[i] for i in holdout}
    train_captions = [c for c in captions if c not in holdout_set]

    torch.manual_seed(hyper.seed)
    model = DualEncoder(hyper.arch, vocab=vocab)
    optimizer = torch.optim.Adam(model.parameters(), lr=hyper.lr)
    token_ids = {
        caption: torch.tensor(tokenize(caption, vocab).tokens, dtype=torch.long)
        for caption in captions
    }

    for step in range(hyper.steps):
        size = min(hyper.batch_size, len(train_captions))
        picked = rng.choice(len(train_captions), size=size, replace=False)
        batch_captions = [train_captions[i] for i in picked]
        frames = torch.stack(
            [groups[c][rng.randint(len(groups[c]))] for c in batch_captions]
        )
        texts = torch.stack([token_ids[c] for c in batch_captions])
        image_vecs = model.embed_images(frames)
        text_vecs = model.embed_tokens(texts)
        logits = model.logit_scale.exp() * image_vecs @ text_vecs.T
        labels = torch.arange(size)
        loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
        if not torch.isfinite(loss):
            raise RuntimeError(f"scorer training diverged: non-finite loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    accuracy = holdout_retrieval_accuracy(model, groups, sorted(holdout_set))
    return model, accuracy


def holdout_retrieval_accuracy(
    model: DualEncoder, groups: dict[str, list[torch.Tensor]], captions: list[str]
) -> float:
    """Top-1 caption retrieval over every frame of the given captions."""
    with torch.no_grad():
        text_vecs = torch.stack(
            [
                model.embed_tokens(
                    torch.tensor(tokenize(c, model.vocab).tokens, dtype=torch.long)[None]
                )[0]
                for c in captions
            ]
        )
        hits = total = 0
        for target_idx, caption in enumerate(captions):
            for pixels in groups[caption]:
                scores = model.embed_images(pixels[None])[0] @ text_vecs.T
                hits += int(scores.argmax()) == target_idx
                total += 1
    return hits / total


def save_scorer(path, model: DualEncoder) -> None:
    from .container import text_entry, write_container

    arch = model.arch
    arch_line = (
        f"vocab_size={arch.vocab_size} embed_dim={arch.embed_dim} "
        f"base_channels={arch.base_channels}"
    )
    entries = {"arch": text_entry(arch_line), "vocab": text_entry(" ".join(model.vocab))}
    for name, param in model.state_dict().items():
        entries[f"param/{name}"] = param.detach().cpu().numpy().astype(np.float32)
    write_container(path, entries)


def load_scorer(path) -> DualEncoder:
    from .container import entry_text, read_container

    entries = read_container(path)
    fields = dict(kv.split("=") for kv in entry_text(entries["arch"]).split())
    arch = ScorerArch(**{k: int(v) for k, v in fields.items()})
    model = DualEncoder(arch, vocab=tuple(entry_text(entries["vocab"]).split()))
    state = {
        name[len("param/") :]: torch.from_numpy(arr.copy())
        for name, arr in entries.items()
        if name.startswith("param/")
    }
    model.load_state_dict(state)
    return model


def _pixels(frame) -> torch.Tensor:
    return frame.pixels if hasattr(frame, "pixels") else frame
