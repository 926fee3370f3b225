import os

import pytest
import torch

from lbe.corpus import VOCAB, GenSpec, generate_corpus, load_frames
from lbe.metrics import (
    DualEncoder,
    ScorerArch,
    ScorerTrainConfig,
    clip_score,
    embed_image,
    embed_text,
    frame_accuracy,
    holdout_retrieval_accuracy,
    load_scorer,
    save_scorer,
    temporal_consistency,
    train_scorer,
)


class StubEncoder(DualEncoder):
    """Controlled embeddings: images map to their first two pixel values,
    texts map to fixed axes, so wins/ties are rigged exactly."""

    def __init__(self):
        super().__init__(ScorerArch(vocab_size=len(VOCAB), embed_dim=2), vocab=VOCAB)

    def embed_images(self, pixels):
        raw = pixels[:, :2, 0, 0].clone()
        return torch.nn.functional.normalize(raw, dim=-1)

    def embed_tokens(self, token_ids):
        # any prompt containing "red" points along x, otherwise along y
        red = VOCAB.index("red")
        along_x = (token_ids == red).any(dim=1)
        vecs = torch.where(
            along_x[:, None],
            torch.tensor([[1.0, 0.0]]),
            torch.tensor([[0.0, 1.0]]),
        )
        return vecs


def frame_with(x, y):
    pixels = torch.zeros(3, 8, 8)
    pixels[0, 0, 0] = x
    pixels[1, 0, 0] = y
    return pixels


@pytest.fixture(scope="module")
def stub():
    return StubEncoder()


@pytest.fixture(scope="module")
def untrained():
    torch.manual_seed(5)
    return DualEncoder(ScorerArch(vocab_size=len(VOCAB)), vocab=VOCAB)


class TestEmbeddings:
    def test_unit_norm(self, untrained):
        vec = embed_image(torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(0)), untrained)
        assert float(torch.linalg.vector_norm(vec)) == pytest.approx(1.0, abs=1e-5)
        tvec = embed_text("a red square on gray floor", untrained)
        assert float(torch.linalg.vector_norm(tvec)) == pytest.approx(1.0, abs=1e-5)

    def test_towers_emit_equal_width(self, untrained):
        img = embed_image(torch.rand(3, 16, 16), untrained)
        txt = embed_text("a red square", untrained)
        assert img.shape == txt.shape


class TestClipScore:
    def test_cosine_of_self_is_one(self, stub):
        assert clip_score(frame_with(1.0, 0.0), "a red square", stub) == pytest.approx(1.0)

    def test_orthogonal_is_zero(self, stub):
        assert clip_score(frame_with(1.0, 0.0), "a blue square", stub) == pytest.approx(0.0)

    def test_range_and_purity(self, untrained):
        frame = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(1))
        score = clip_score(frame, "a red square on gray floor", untrained)
        assert -1.0 <= score <= 1.0
        assert clip_score(frame, "a red square on gray floor", untrained) == score


class TestFrameAccuracy:
    def test_tie_rule_identical_prompts(self, stub):
        frames = [frame_with(1.0, 0.0), frame_with(0.0, 1.0)]
        assert frame_accuracy(frames, "a red square", "a red square", stub) == 0.0

    def test_six_of_eight_wins(self, stub):
        # edit prompt "a blue square" scores along y: frames with y > x win
        frames = [frame_with(0.1, 0.9)] * 6 + [frame_with(0.9, 0.1)] * 2
        acc = frame_accuracy(frames, "a red square", "a blue square", stub)
        assert acc == pytest.approx(0.75)

    def test_permutation_invariance(self, stub):
        frames = [frame_with(0.1, 0.9)] * 3 + [frame_with(0.9, 0.1)] * 5
        a = frame_accuracy(frames, "a red square", "a blue square", stub)
        b = frame_accuracy(list(reversed(frames)), "a red square", "a blue square", stub)
        assert a == b

    def test_empty_clip_rejected(self, stub):
        with pytest.raises(ValueError):
            frame_accuracy([], "a red square", "a blue square", stub)

    def test_range_is_multiples_of_one_over_n(self, untrained):
        gen = torch.Generator().manual_seed(2)
        frames = [torch.rand(3, 16, 16, generator=gen) for _ in range(5)]
        acc = frame_accuracy(frames, "a red square", "a blue circle", untrained)
        assert acc in [k / 5 for k in range(6)]


class TestTemporalConsistency:
    def test_identical_frames_give_one(self, untrained):
        frame = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(3))
        assert temporal_consistency([frame, frame, frame], untrained) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_pair_gives_zero(self, stub):
        frames = [frame_with(1.0, 0.0), frame_with(0.0, 1.0)]
        assert temporal_consistency(frames, stub) == pytest.approx(0.0, abs=1e-7)

    def test_mean_of_pairwise_cosines(self, stub):
        # cosines: (1,0)x(0.8,0.6)=0.8 then (0.8,0.6)x(0.6,0.8)=0.96
        frames = [frame_with(1.0, 0.0), frame_with(0.8, 0.6), frame_with(0.6, 0.8)]
        assert temporal_consistency(frames, stub) == pytest.approx((0.8 + 0.96) / 2, abs=1e-6)

    def test_reversal_invariance(self, untrained):
        gen = torch.Generator().manual_seed(4)
        frames = [torch.rand(3, 16, 16, generator=gen) for _ in range(4)]
        fwd = temporal_consistency(frames, untrained)
        rev = temporal_consistency(list(reversed(frames)), untrained)
        assert fwd == pytest.approx(rev, abs=1e-7)

    def test_bounds(self, untrained):
        gen = torch.Generator().manual_seed(6)
        frames = [torch.rand(3, 16, 16, generator=gen) for _ in range(4)]
        assert -1.0 <= temporal_consistency(frames, untrained) <= 1.0

    def test_single_frame_rejected(self, untrained):
        with pytest.raises(ValueError):
            temporal_consistency([torch.rand(3, 16, 16)], untrained)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("scorer_corpus")
    manifests = generate_corpus(GenSpec(clips=14, seed=3), out)
    dataset = []
    for m in manifests:
        for pixels in load_frames(os.path.join(out, m.clip_id), m):
            dataset.append((pixels, m.caption))
    return dataset


@pytest.fixture(scope="module")
def trained(small_corpus):
    hyper = ScorerTrainConfig(
        steps=250, batch_size=8, lr=1e-3, seed=0, holdout_frac=0.25,
        arch=ScorerArch(vocab_size=len(VOCAB)),
    )
    return train_scorer(small_corpus, VOCAB, hyper)


class TestTrainScorer:
    def test_matched_beats_mismatched(self, small_corpus, trained):
        model, _acc = trained
        captions = sorted({c for _, c in small_corpus})
        matched, mismatched = [], []
        for pixels, caption in small_corpus[::5]:
            matched.append(clip_score(pixels, caption, model))
            other = next(c for c in captions if c != caption)
            mismatched.append(clip_score(pixels, other, model))
        assert sum(matched) / len(matched) > sum(mismatched) / len(mismatched)

    def test_holdout_retrieval_above_chance(self, trained):
        _model, accuracy = trained
        # holdout has 3 of the 14 captions, so chance is 1/3
        assert accuracy > 1.0 / 3.0

    def test_untrained_is_near_chance(self, small_corpus, untrained):
        groups = {}
        for pixels, caption in small_corpus:
            groups.setdefault(caption, []).append(pixels)
        captions = sorted(groups)
        accuracy = holdout_retrieval_accuracy(untrained, groups, captions)
        chance = 1.0 / len(captions)
        assert accuracy <= 3.0 * chance

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_scorer([], VOCAB, ScorerTrainConfig())

    def test_checkpoint_round_trip(self, trained, tmp_path):
        model, _acc = trained
        path = tmp_path / "scorer.lbtf"
        save_scorer(path, model)
        loaded = load_scorer(path)
        frame = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(7))
        assert clip_score(frame, "a red square on gray floor", loaded) == pytest.approx(
            clip_score(frame, "a red square on gray floor", model), abs=1e-7
        )
        assert loaded.vocab == model.vocab
