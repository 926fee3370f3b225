import pytest
import torch
import torch.nn.functional as F

from lbe.denoiser import (
    PER_FRAME,
    TEMPORAL_SPATIAL,
    AttentionCapture,
    DenoiserArch,
    NoisePredictor,
    TrainConfig,
    _embed_token_batch,
    embed_prompt,
    load_denoiser,
    predict_noise,
    save_denoiser,
    sinusoidal_embedding,
    tokenize,
    train_denoiser,
)
from lbe.scheduler import Latent, make_schedule

VOCAB = ("<unk>", "a", "red", "square", "zzzexisting")

SMALL_ARCH = DenoiserArch(in_channels=6, width=16, text_dim=8, vocab_size=5, spatial=4)


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    return NoisePredictor(SMALL_ARCH, vocab=VOCAB)


def small_latent(seed=0, tag=3):
    gen = torch.Generator().manual_seed(seed)
    return Latent(data=torch.randn(6, 4, 4, generator=gen), timestep_tag=tag)


def small_prompt(model, text="a red square"):
    return embed_prompt(tokenize(text, VOCAB), model)


class TestTokenize:
    def test_table_lookup(self):
        p = tokenize("a red square", VOCAB)
        assert p.tokens == [1, 2, 3]
        assert p.raw == "a red square"

    def test_unknown_maps_to_zero(self):
        assert tokenize("a zzz square", VOCAB).tokens == [1, 0, 3]

    def test_position_of_edited_word(self):
        p = tokenize("a red square", VOCAB)
        assert p.tokens[1] == VOCAB.index("red")

    def test_lowercasing(self):
        assert tokenize("A RED Square", VOCAB).tokens == [1, 2, 3]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tokenize("   ", VOCAB)

    def test_over_long_rejected(self):
        with pytest.raises(ValueError):
            tokenize("a " * 17, VOCAB)


class TestEmbedPrompt:
    def test_single_token_is_table_row_plus_position_zero(self, small_model):
        emb = embed_prompt(tokenize("red", VOCAB), small_model)
        table_row = small_model.token_table.weight[2]
        pos0 = sinusoidal_embedding(torch.tensor(0.0), 8)
        assert emb.matrix.shape == (1, 8)
        assert torch.allclose(emb.matrix[0], table_row + pos0, atol=1e-7)

    def test_deterministic(self, small_model):
        a = embed_prompt(tokenize("a red square", VOCAB), small_model)
        b = embed_prompt(tokenize("a red square", VOCAB), small_model)
        assert torch.equal(a.matrix, b.matrix)

    def test_single_position_difference(self, small_model):
        a = embed_prompt(tokenize("a red square", VOCAB), small_model)
        b = embed_prompt(tokenize("a zzzexisting square", VOCAB), small_model)
        diff = (a.matrix - b.matrix).abs().sum(dim=1)
        assert diff[0] == 0 and diff[2] == 0 and diff[1] > 0

    def test_out_of_range_id_rejected(self, small_model):
        from lbe.denoiser import TextPrompt

        with pytest.raises(ValueError):
            embed_prompt(TextPrompt(tokens=[99], raw="?"), small_model)


class TestPredictNoise:
    def test_shape_and_determinism_bitwise(self, small_model):
        z = small_latent()
        p = small_prompt(small_model)
        a = predict_noise(z, 3, p, small_model)
        b = predict_noise(z, 3, p, small_model)
        assert a.shape == z.data.shape
        assert torch.equal(a, b)

    def test_capture_is_observational_bitwise(self, small_model):
        z = small_latent(seed=1)
        p = small_prompt(small_model)
        silent = predict_noise(z, 2, p, small_model)
        sink = AttentionCapture()
        observed = predict_noise(z, 2, p, small_model, capture=sink)
        assert torch.equal(silent, observed)
        assert len(sink.records) == 1

    def test_capture_disabled_keeps_records_empty(self, small_model):
        sink = AttentionCapture(enabled=False)
        predict_noise(small_latent(), 2, small_prompt(small_model), small_model, capture=sink)
        assert sink.records == []

    def test_captured_record_is_row_stochastic(self, small_model):
        sink = AttentionCapture()
        predict_noise(small_latent(seed=2), 4, small_prompt(small_model), small_model, capture=sink)
        rec = sink.records[0]
        assert rec.map.shape == (16, 3)
        assert rec.timestep == 4
        assert torch.all(rec.map >= 0)
        sums = rec.map.sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_temporal_with_self_neighbor_matches_per_frame(self, small_model):
        z = small_latent(seed=3)
        p = small_prompt(small_model)
        per_frame = predict_noise(z, 3, p, small_model, attention_mode=PER_FRAME)
        temporal = predict_noise(
            z, 3, p, small_model, attention_mode=TEMPORAL_SPATIAL, neighbor=z
        )
        assert torch.allclose(per_frame, temporal, atol=1e-6)

    def test_temporal_needs_neighbor(self, small_model):
        with pytest.raises(ValueError):
            predict_noise(
                small_latent(), 3, small_prompt(small_model), small_model,
                attention_mode=TEMPORAL_SPATIAL,
            )

    def test_wrong_channel_count_rejected(self, small_model):
        bad = Latent(data=torch.randn(5, 4, 4), timestep_tag=3)
        with pytest.raises(ValueError):
            predict_noise(bad, 3, small_prompt(small_model), small_model)

    def test_unknown_mode_rejected(self, small_model):
        with pytest.raises(ValueError):
            predict_noise(small_latent(), 3, small_prompt(small_model), small_model,
                          attention_mode="global")


class TestGradient:
    def test_autograd_matches_central_differences(self):
        torch.manual_seed(0)
        model = NoisePredictor(SMALL_ARCH).double()
        gen = torch.Generator().manual_seed(1)
        z = torch.randn(1, 6, 4, 4, generator=gen, dtype=torch.float64)
        eps = torch.randn(1, 6, 4, 4, generator=gen, dtype=torch.float64)
        t = torch.tensor([3])
        ids = torch.tensor([[1, 2, 4]])

        def loss_fn():
            return F.mse_loss(model(z, t, _embed_token_batch(ids, model)), eps)

        loss_fn().backward()
        sampled = ["in_conv.weight", "self_q", "cross_q", "res1.conv1.weight",
                   "cross_k.weight", "out_conv.bias"]
        params = dict(model.named_parameters())
        h = 1e-6
        for name in sampled:
            p = params[name]
            idx = 7 % p.numel()
            with torch.no_grad():
                flat = p.reshape(-1)
                orig = flat[idx].item()
                flat[idx] = orig + h
                lp = loss_fn().item()
                flat[idx] = orig - h
                lm = loss_fn().item()
                flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            ag = p.grad.reshape(-1)[idx].item()
            rel = abs(fd - ag) / max(abs(fd), abs(ag), 1e-12)
            assert rel <= 1e-3, f"{name}: autograd {ag} vs fd {fd} (rel {rel})"


class TestTraining:
    # pinned by the overfit-one-sample oracle run: 600 steps reached a
    # final/initial fixed-eval ratio of 0.059, well under the 0.10 gate
    OVERFIT_BUDGET = 600

    def _one_example(self):
        gen = torch.Generator().manual_seed(42)
        return [(torch.randn(6, 4, 4, generator=gen), [1, 2, 4])]

    def _fixed_eval(self, model, z0, tokens, schedule):
        g = torch.Generator().manual_seed(123)
        total = 0.0
        with torch.no_grad():
            for _ in range(16):
                t = torch.randint(1, schedule.T + 1, (1,), generator=g)
                eps = torch.randn(1, *z0.shape, generator=g)
                a = torch.tensor(schedule.alpha_bar)[t][:, None, None, None]
                z_t = a.sqrt() * z0[None] + (1 - a).sqrt() * eps
                p = _embed_token_batch(torch.tensor([tokens]), model)
                total += F.mse_loss(model(z_t, t, p), eps).item()
        return total / 16

    def test_loss_decreases(self):
        schedule = make_schedule(T=10, beta_start=0.02, beta_end=0.2)
        hyper = TrainConfig(steps=120, batch_size=8, lr=2e-3, seed=0, arch=SMALL_ARCH)
        _model, trace = train_denoiser(self._one_example(), schedule, hyper)
        assert len(trace) == 120
        head = sum(trace[:10]) / 10
        tail = sum(trace[-10:]) / 10
        assert tail < head

    def test_overfits_one_example_within_budget(self):
        schedule = make_schedule(T=10, beta_start=0.02, beta_end=0.2)
        dataset = self._one_example()
        hyper = TrainConfig(
            steps=self.OVERFIT_BUDGET, batch_size=8, lr=2e-3, seed=0, arch=SMALL_ARCH
        )
        torch.manual_seed(hyper.seed)
        init_model = NoisePredictor(SMALL_ARCH)
        initial = self._fixed_eval(init_model, dataset[0][0], dataset[0][1], schedule)
        model, _trace = train_denoiser(dataset, schedule, hyper)
        final = self._fixed_eval(model, dataset[0][0], dataset[0][1], schedule)
        assert final < 0.10 * initial, f"ratio {final / initial:.3f}"

    def test_divergence_aborts(self):
        schedule = make_schedule(T=10, beta_start=0.02, beta_end=0.2)
        hyper = TrainConfig(steps=200, batch_size=8, lr=1e12, seed=0, arch=SMALL_ARCH)
        with pytest.raises(RuntimeError, match="diverged"):
            train_denoiser(self._one_example(), schedule, hyper)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_denoiser([], make_schedule(T=5, beta_start=0.1, beta_end=0.1), TrainConfig())


class TestCheckpoint:
    def test_save_load_round_trip(self, small_model, tmp_path):
        path = tmp_path / "d.lbtf"
        save_denoiser(path, small_model, VOCAB, codec_seed=9, loss_trace=[1.0, 0.5])
        loaded, vocab, codec_seed = load_denoiser(path)
        assert vocab == VOCAB
        assert codec_seed == 9
        assert loaded.arch == small_model.arch
        z = small_latent(seed=4)
        p_orig = small_prompt(small_model)
        p_loaded = embed_prompt(tokenize("a red square", vocab), loaded)
        assert torch.equal(
            predict_noise(z, 2, p_orig, small_model), predict_noise(z, 2, p_loaded, loaded)
        )
