"""Command-line surface.

Every run writes a key=value manifest into its output directory recording the
resolved configuration, the seed and a checksum of the inputs. A manifest can
be fed back through --config to reproduce the run: explicit flags win over
config values, which win over built-in defaults.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import os
import sys

import numpy as np
import torch

from . import corpus as corpus_mod
from .autoencoder import ImageFrame, encode, make_codec
from .container import atomic_write_bytes, write_container
from .denoiser import (
    DenoiserArch,
    TrainConfig,
    load_denoiser,
    save_denoiser,
    tokenize,
    train_denoiser,
)
from .metrics import (
    ScorerArch,
    ScorerTrainConfig,
    frame_accuracy,
    load_scorer,
    save_scorer,
    temporal_consistency,
    train_scorer,
)
from .pipeline import EditConfig, edit_video, invert_video, reconstruct_video
from .ppm import read_ppm, write_ppm
from .scheduler import make_schedule

# option tables: name -> (type, default, required, help). Booleans use
# None defaults so a --config file can still supply them.
_SCHEDULE_OPTS = {
    "steps": (int, 50, False, "diffusion steps T"),
    "beta_start": (float, 0.00085, False, "first beta of the linear schedule"),
    "beta_end": (float, 0.012, False, "last beta of the linear schedule"),
}

COMMANDS: dict[str, dict] = {
    "gen-data": {
        "out": (str, None, True, "output corpus directory"),
        "clips": (int, 10, False, "number of clips"),
        "frames": (int, 8, False, "frames per clip"),
        "size": (int, 64, False, "frame side length (divisible by 8)"),
        "seed": (int, 0, False, "generator seed"),
        "min_box_frac": (float, 0.06, False, "minimum object box area fraction"),
        "max_box_frac": (float, 0.30, False, "maximum object box area fraction"),
    },
    "train-denoiser": {
        "data": (str, None, True, "corpus directory from gen-data"),
        "out": (str, None, True, "output directory (checkpoint denoiser.lbtf)"),
        "train_steps": (int, 4000, False, "optimizer steps"),
        "batch": (int, 16, False, "batch size"),
        "lr": (float, 2e-3, False, "learning rate"),
        "lr_final": (float, None, False, "linear-decay target learning rate"),
        "seed": (int, 0, False, "training seed"),
        "width": (int, 64, False, "channel width"),
        "text_dim": (int, 32, False, "prompt embedding width"),
        "codec_seed": (int, 0, False, "seed of the frame codec"),
        **_SCHEDULE_OPTS,
    },
    "train-scorer": {
        "data": (str, None, True, "corpus directory from gen-data"),
        "out": (str, None, True, "output directory (checkpoint scorer.lbtf)"),
        "train_steps": (int, 1500, False, "optimizer steps"),
        "batch": (int, 24, False, "captions per contrastive batch"),
        "lr": (float, 1e-3, False, "learning rate"),
        "seed": (int, 0, False, "training seed"),
        "holdout_frac": (float, 0.2, False, "caption fraction held out for retrieval eval"),
    },
    "invert": {
        "frames": (str, None, True, "clip directory"),
        "prompt": (str, None, True, "source prompt"),
        "denoiser": (str, None, True, "denoiser checkpoint"),
        "out": (str, None, True, "output directory"),
        "temporal": (bool, False, False, "use temporal-spatial attention"),
        **_SCHEDULE_OPTS,
    },
    "reconstruct": {
        "frames": (str, None, True, "clip directory"),
        "prompt": (str, None, True, "source prompt"),
        "denoiser": (str, None, True, "denoiser checkpoint"),
        "out": (str, None, True, "output directory"),
        "temporal": (bool, False, False, "use temporal-spatial attention"),
        **_SCHEDULE_OPTS,
    },
    "edit": {
        "frames": (str, None, True, "clip directory"),
        "source_prompt": (str, None, True, "prompt describing the input"),
        "edit_prompt": (str, None, True, "prompt describing the desired output"),
        "edit_word": (str, None, False, "edited word pair(s) 'src:tgt', comma separated; "
                                        "default: first differing token position"),
        "tau": (float, 0.3, False, "attention mask threshold"),
        "seed": (int, 0, False, "run seed (noise stream of randomly-noised mode)"),
        "mask_mode": (str, "auto", False, "auto | user | none"),
        "user_mask": (str, None, False, "PPM mask, edit region where any channel >= 128"),
        "background_mode": (str, "ddim-inverted", False, "ddim-inverted | randomly-noised"),
        "temporal": (bool, False, False, "use temporal-spatial attention"),
        "denoiser": (str, None, True, "denoiser checkpoint"),
        "out": (str, None, True, "output directory"),
        **_SCHEDULE_OPTS,
    },
    "evaluate": {
        "clip": (str, None, True, "directory of edited frames"),
        "source_prompt": (str, None, True, "source prompt"),
        "edit_prompt": (str, None, True, "target prompt"),
        "scorer": (str, None, True, "scorer checkpoint"),
        "out": (str, None, True, "output directory for report.csv / report.txt"),
    },
    "dump-attention": {
        "frames": (str, None, True, "clip directory"),
        "prompt": (str, None, True, "prompt to condition the inversion on"),
        "denoiser": (str, None, True, "denoiser checkpoint"),
        "out": (str, None, True, "output directory"),
        "word": (int, None, False, "token position to average (default: all positions)"),
        "tau": (float, 0.3, False, "threshold for the dumped masks"),
        "temporal": (bool, False, False, "use temporal-spatial attention"),
        **_SCHEDULE_OPTS,
    },
}

class UsageError(Exception):
    pass


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        options = _resolve_options(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        handler = _HANDLERS[args.command]
        handler(options)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _apply_thread_cap() -> None:
    raw = os.environ.get("LBE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n > 0:
        torch.set_num_threads(n)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lbe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="key=value file of defaults (e.g. a run manifest)")
        for name, (typ, _default, _required, help_text) in options.items():
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None,
                               help=help_text)
            else:
                p.add_argument(flag, type=typ, default=None, help=help_text)
    return parser


def _resolve_options(args: argparse.Namespace) -> dict:
    """Merge CLI > config file > built-in defaults; enforce required keys."""
    table = COMMANDS[args.command]
    config: dict[str, str] = {}
    if args.config:
        try:
            config = _read_keyvalue_file(args.config)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if config.get("command", args.command) != args.command:
            raise UsageError(
                f"config was written by {config['command']!r}, not {args.command!r}"
            )
    resolved = {}
    defaulted = set()
    for name, (typ, default, required, _help) in table.items():
        cli_value = getattr(args, name)
        if cli_value is not None:
            resolved[name] = cli_value
        elif name in config:
            raw = config[name]
            resolved[name] = (raw.lower() == "true") if typ is bool else typ(raw)
        else:
            resolved[name] = default
            defaulted.add(name)
        if required and resolved[name] is None:
            raise UsageError(f"{args.command} requires --{name.replace('_', '-')}")
    resolved["command"] = args.command
    resolved["_defaulted"] = defaulted
    return resolved


def _read_keyvalue_file(path: str) -> dict[str, str]:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: malformed line {line!r}")
            values[key] = value
    return values


def _write_manifest(out_dir: str, options: dict, input_paths: list[str]) -> None:
    lines = [f"command={options['command']}"]
    for name in COMMANDS[options["command"]]:
        value = options[name]
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name}={value}")
    if input_paths:
        lines.append(f"input_sha256={_checksum_paths(input_paths)}")
    atomic_write_bytes(os.path.join(out_dir, "manifest.txt"), ("\n".join(lines) + "\n").encode())


def _checksum_paths(paths: list[str]) -> str:
    digest = hashlib.sha256()
    for path in paths:
        if os.path.isdir(path):
            files = sorted(
                os.path.join(root, f)
                for root, _dirs, names in os.walk(path)
                for f in names
            )
        else:
            files = [path]
        for f in files:
            digest.update(os.path.basename(f).encode())
            with open(f, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


def _load_frames_dir(path: str) -> tuple[list[ImageFrame], list[str]]:
    """Load a clip directory: corpus clips via their manifest, otherwise all
    *.ppm files in sorted order."""
    manifest_path = os.path.join(path, "manifest.txt")
    names = None
    if os.path.isfile(manifest_path):
        head = open(manifest_path, "r", encoding="utf-8").readline()
        if head.startswith("id="):
            names = corpus_mod.load_clip_manifest(path).frame_files
    if names is None:
        names = sorted(f for f in os.listdir(path) if f.endswith(".ppm"))
    if not names:
        raise ValueError(f"{path}: no frames found")
    frames = [ImageFrame(pixels=torch.from_numpy(read_ppm(os.path.join(path, n)))) for n in names]
    return frames, names


def _load_corpus_dataset(data_dir: str) -> list[tuple[torch.Tensor, str]]:
    pairs = []
    for clip_id in corpus_mod.list_clips(data_dir):
        clip_dir = os.path.join(data_dir, clip_id)
        manifest = corpus_mod.load_clip_manifest(clip_dir)
        for pixels in corpus_mod.load_frames(clip_dir, manifest):
            pairs.append((pixels, manifest.caption))
    return pairs


def _schedule_from(options: dict):
    return make_schedule(options["steps"], options["beta_start"], options["beta_end"])


def _cmd_gen_data(options: dict) -> None:
    spec = corpus_mod.GenSpec(
        clips=options["clips"],
        frames_per_clip=options["frames"],
        size=options["size"],
        seed=options["seed"],
        min_box_frac=options["min_box_frac"],
        max_box_frac=options["max_box_frac"],
    )
    corpus_mod.generate_corpus(spec, options["out"])
    _write_manifest(options["out"], options, [])
    print(f"wrote {spec.clips} clips to {options['out']}")


def _cmd_train_denoiser(options: dict) -> None:
    schedule = _schedule_from(options)
    codec = make_codec(options["codec_seed"])
    vocab = corpus_mod.load_vocab(os.path.join(options["data"], "vocab.txt"))
    dataset = []
    for pixels, caption in _load_corpus_dataset(options["data"]):
        z0 = encode(ImageFrame(pixels=pixels), codec)
        dataset.append((z0.data, tokenize(caption, vocab).tokens))
    spatial = dataset[0][0].shape[-1]
    arch = DenoiserArch(
        width=options["width"],
        text_dim=options["text_dim"],
        vocab_size=len(vocab),
        spatial=spatial,
    )
    hyper = TrainConfig(
        steps=options["train_steps"],
        batch_size=options["batch"],
        lr=options["lr"],
        lr_final=options["lr_final"],
        seed=options["seed"],
        arch=arch,
    )
    model, losses = train_denoiser(dataset, schedule, hyper)
    model.vocab = vocab
    model.train_schedule = (options["steps"], options["beta_start"], options["beta_end"])
    os.makedirs(options["out"], exist_ok=True)
    save_denoiser(
        os.path.join(options["out"], "denoiser.lbtf"),
        model,
        vocab,
        codec_seed=options["codec_seed"],
        loss_trace=losses,
    )
    _write_manifest(options["out"], options, [options["data"]])
    tail = sum(losses[-50:]) / min(50, len(losses))
    print(f"trained denoiser: {len(losses)} steps, first loss {losses[0]:.4f}, "
          f"mean of last 50: {tail:.4f}")


def _cmd_train_scorer(options: dict) -> None:
    vocab = corpus_mod.load_vocab(os.path.join(options["data"], "vocab.txt"))
    dataset = _load_corpus_dataset(options["data"])
    hyper = ScorerTrainConfig(
        steps=options["train_steps"],
        batch_size=options["batch"],
        lr=options["lr"],
        seed=options["seed"],
        holdout_frac=options["holdout_frac"],
        arch=ScorerArch(vocab_size=len(vocab)),
    )
    model, accuracy = train_scorer(dataset, vocab, hyper)
    os.makedirs(options["out"], exist_ok=True)
    save_scorer(os.path.join(options["out"], "scorer.lbtf"), model)
    _write_manifest(options["out"], options, [options["data"]])
    print(f"trained scorer: holdout retrieval accuracy {accuracy:.3f}")


def _load_model_and_codec(options: dict):
    """Load the checkpoint; schedule flags the user left at their defaults are
    replaced by the schedule the weights were trained against."""
    model, _vocab, codec_seed = load_denoiser(options["denoiser"])
    if model.train_schedule is not None:
        for key, value in zip(("steps", "beta_start", "beta_end"), model.train_schedule):
            if key in options.get("_defaulted", ()):
                options[key] = value
    return model, make_codec(codec_seed)


def _cmd_invert(options: dict) -> None:
    model, codec = _load_model_and_codec(options)
    schedule = _schedule_from(options)
    frames, _names = _load_frames_dir(options["frames"])
    result = invert_video(
        frames, options["prompt"], schedule, model, codec,
        temporal_attention=options["temporal"],
    )
    os.makedirs(options["out"], exist_ok=True)
    trajectory = np.stack(
        [np.stack([z.data.numpy() for z in traj]) for traj in result.background_latents]
    ).astype(np.float32)
    entries = {"trajectory": trajectory}
    for i, records in enumerate(result.source_attention):
        entries[f"attention/frame_{i:02d}"] = np.stack(
            [r.map.numpy() for r in records]
        ).astype(np.float32)
    write_container(os.path.join(options["out"], "inversion.lbtf"), entries)
    _write_manifest(options["out"], options, [options["frames"], options["denoiser"]])
    print(f"inverted {len(frames)} frames over T={schedule.T}")


def _cmd_reconstruct(options: dict) -> None:
    model, codec = _load_model_and_codec(options)
    schedule = _schedule_from(options)
    frames, names = _load_frames_dir(options["frames"])
    result = reconstruct_video(
        frames, options["prompt"], schedule, model, codec,
        temporal_attention=options["temporal"],
    )
    os.makedirs(options["out"], exist_ok=True)
    report = ["frame relative_l2"]
    for name, frame, out_frame, z in zip(names, frames, result.frames, result.final_latents):
        write_ppm(os.path.join(options["out"], name), out_frame.pixels.numpy())
        z0 = encode(frame, codec).data
        rel = float(torch.linalg.vector_norm(z.data - z0) / torch.linalg.vector_norm(z0))
        report.append(f"{name} {rel:.6e}")
    atomic_write_bytes(
        os.path.join(options["out"], "report.txt"), ("\n".join(report) + "\n").encode()
    )
    _write_manifest(options["out"], options, [options["frames"], options["denoiser"]])
    print("\n".join(report))


def _parse_edit_words(spec_text: str | None, source: str, target: str, vocab) -> list[tuple[int, int]]:
    if spec_text:
        pairs = []
        for chunk in spec_text.split(","):
            src, sep, tgt = chunk.partition(":")
            if not sep:
                raise ValueError(f"bad --edit-word chunk {chunk!r}, expected src:tgt")
            pairs.append((int(src), int(tgt)))
        return pairs
    src_tokens = tokenize(source, vocab).tokens
    tgt_tokens = tokenize(target, vocab).tokens
    for i, (a, b) in enumerate(zip(src_tokens, tgt_tokens)):
        if a != b:
            return [(i, i)]
    raise ValueError("prompts have no differing token; pass --edit-word explicitly")


def _cmd_edit(options: dict) -> None:
    model, codec = _load_model_and_codec(options)
    schedule = _schedule_from(options)
    frames, names = _load_frames_dir(options["frames"])
    user_mask = None
    if options["user_mask"]:
        mask_pixels = read_ppm(options["user_mask"])
        user_mask = torch.from_numpy((mask_pixels >= 128 / 255.0).any(axis=0))
    edited_words = []
    if options["mask_mode"] == "auto":
        edited_words = _parse_edit_words(
            options["edit_word"], options["source_prompt"], options["edit_prompt"], model.vocab
        )
        # record the resolved pairs so the manifest fully determines the run
        options["edit_word"] = ",".join(f"{s}:{t}" for s, t in edited_words)
    config = EditConfig(
        source_prompt=options["source_prompt"],
        edit_prompt=options["edit_prompt"],
        edited_words=edited_words,
        tau=options["tau"],
        T=schedule.T,
        mask_mode=options["mask_mode"],
        user_mask=user_mask,
        background_mode=options["background_mode"],
        temporal_attention=options["temporal"],
        seed=options["seed"],
    )
    result = edit_video(frames, config, schedule, model, codec)
    os.makedirs(options["out"], exist_ok=True)
    for name, frame in zip(names, result.frames):
        write_ppm(os.path.join(options["out"], name), frame.pixels.numpy())
    entries = {
        "final_latents": np.stack(
            [z.data.numpy() for z in result.final_latents]
        ).astype(np.float32),
        "masks": np.stack(
            [np.stack([m.mask.numpy() for m in step]) for step in result.masks]
        ),
    }
    write_container(os.path.join(options["out"], "edit.lbtf"), entries)
    inputs = [options["frames"], options["denoiser"]]
    if options["user_mask"]:
        inputs.append(options["user_mask"])
    _write_manifest(options["out"], options, inputs)
    print(f"edited {len(frames)} frames -> {options['out']}")


def _cmd_evaluate(options: dict) -> None:
    model = load_scorer(options["scorer"])
    frames, _names = _load_frames_dir(options["clip"])
    clip_id = os.path.basename(os.path.normpath(options["clip"]))
    rows = [
        ("frame_accuracy", clip_id,
         frame_accuracy(frames, options["source_prompt"], options["edit_prompt"], model)),
        ("temporal_consistency", clip_id, temporal_consistency(frames, model)),
    ]
    os.makedirs(options["out"], exist_ok=True)
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["metric", "clip", "value"])
    for metric, clip, value in rows:
        writer.writerow([metric, clip, f"{value:.6f}"])
    atomic_write_bytes(os.path.join(options["out"], "report.csv"), buffer.getvalue().encode())
    table = [f"{metric:<22} {clip:<12} {value:.6f}" for metric, clip, value in rows]
    atomic_write_bytes(
        os.path.join(options["out"], "report.txt"), ("\n".join(table) + "\n").encode()
    )
    _write_manifest(options["out"], options, [options["clip"], options["scorer"]])
    print("\n".join(table))


def _cmd_dump_attention(options: dict) -> None:
    from .attention_control import average_word_map, threshold_map

    model, codec = _load_model_and_codec(options)
    schedule = _schedule_from(options)
    frames, _names = _load_frames_dir(options["frames"])
    result = invert_video(
        frames, options["prompt"], schedule, model, codec,
        temporal_attention=options["temporal"],
    )
    n_tokens = len(tokenize(options["prompt"], model.vocab).tokens)
    words = [options["word"]] if options["word"] is not None else list(range(n_tokens))
    entries = {}
    for i, records in enumerate(result.source_attention):
        entries[f"records/frame_{i:02d}"] = np.stack(
            [r.map.numpy() for r in records]
        ).astype(np.float32)
        for w in words:
            avg = average_word_map(records, w, 1)
            entries[f"avg/frame_{i:02d}/word_{w:02d}"] = avg.map.numpy().astype(np.float32)
            entries[f"mask/frame_{i:02d}/word_{w:02d}"] = (
                threshold_map(avg, options["tau"]).mask.numpy()
            )
    os.makedirs(options["out"], exist_ok=True)
    write_container(os.path.join(options["out"], "attention.lbtf"), entries)
    _write_manifest(options["out"], options, [options["frames"], options["denoiser"]])
    print(f"dumped attention for {len(frames)} frames, words {words}")


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train-denoiser": _cmd_train_denoiser,
    "train-scorer": _cmd_train_scorer,
    "invert": _cmd_invert,
    "reconstruct": _cmd_reconstruct,
    "edit": _cmd_edit,
    "evaluate": _cmd_evaluate,
    "dump-attention": _cmd_dump_attention,
}


if __name__ == "__main__":
    sys.exit(main())
