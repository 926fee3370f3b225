import os

import pytest
import torch

from lbe.autoencoder import ImageFrame, make_codec
from lbe.corpus import GenSpec, generate_corpus, list_clips, load_clip_manifest, load_frames
from lbe.scheduler import make_schedule

WEIGHTS_DIR = os.path.join(os.path.dirname(__file__), "..", "weights")
DENOISER_CKPT = os.path.join(WEIGHTS_DIR, "denoiser.lbtf")
SCORER_CKPT = os.path.join(WEIGHTS_DIR, "scorer.lbtf")

# the released toy weights were trained with this corpus seed / codec seed
SUITE_SEED = 7
CODEC_SEED = 0


@pytest.fixture(scope="session")
def schedule50():
    return make_schedule()


@pytest.fixture(scope="session")
def codec():
    return make_codec(CODEC_SEED)


@pytest.fixture(scope="session")
def suite_corpus(tmp_path_factory):
    """The 10-clip synthetic evaluation suite used by the acceptance criteria."""
    out = tmp_path_factory.mktemp("suite")
    manifests = generate_corpus(GenSpec(clips=10, seed=SUITE_SEED), out)
    return out, manifests


@pytest.fixture(scope="session")
def trained_denoiser():
    if not os.path.exists(DENOISER_CKPT):
        pytest.skip("trained denoiser weights not present (see README: retraining)")
    from lbe.denoiser import load_denoiser

    model, vocab, codec_seed = load_denoiser(DENOISER_CKPT)
    assert codec_seed == CODEC_SEED
    return model


@pytest.fixture(scope="session")
def trained_scorer():
    if not os.path.exists(SCORER_CKPT):
        pytest.skip("trained scorer weights not present (see README: retraining)")
    from lbe.metrics import load_scorer

    return load_scorer(SCORER_CKPT)


def clip_frames(corpus_dir, clip_id) -> tuple[list[ImageFrame], object]:
    clip_dir = os.path.join(corpus_dir, clip_id)
    manifest = load_clip_manifest(clip_dir)
    frames = [ImageFrame(pixels=p) for p in load_frames(clip_dir, manifest)]
    return frames, manifest


def suite_clip_ids(corpus_dir) -> list[str]:
    return list_clips(corpus_dir)


def edit_prompt_for(caption: str) -> tuple[str, str, int]:
    """Swap the color word (position 1) for a different trained color."""
    from lbe.corpus import COLORS

    words = caption.split()
    colors = list(COLORS)
    replacement = next(c for c in colors if c != words[1])
    edited = words.copy()
    edited[1] = replacement
    return " ".join(edited), replacement, 1


@pytest.fixture(autouse=True)
def _single_threaded_torch():
    # keeps bitwise comparisons stable regardless of the host's core count
    torch.set_num_threads(1)
    yield


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per acceptance criterion at the end of the run."""
    rows = []
    for outcome in ("passed", "failed", "skipped"):
        for report in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in report.nodeid:
                continue
            if outcome != "skipped" and report.when != "call":
                continue
            name = report.nodeid.split("::")[1] if "::" in report.nodeid else report.nodeid
            rows.append((name, outcome.upper()))
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, outcome in sorted(set(rows)):
            terminalreporter.write_line(f"{outcome:<8} {name}")
