"""Command-line entry point: ``audiocnn <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from audiocnn import architectures, frontend
from audiocnn.checkpoint import CheckpointError
from audiocnn.dataset import DataError, LabelVocabulary, load_clips, project, read_manifest
from audiocnn.engine.optim import NonFiniteGradient
from audiocnn.experiment import (
    ExperimentConfig,
    StageError,
    report,
    run_experiment,
    run_sweeps,
    run_transfer,
    training_vocabulary,
)
from audiocnn.metrics import build_balanced_eval, evaluate
from audiocnn.synth import SynthError, synth_dataset
from audiocnn.training import ConfigError, NumericError, load_state
from audiocnn.transfer import EmbeddingFileError, extract_embeddings, write_embeddings

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TRAINING_COMMANDS = {"train", "sweep", "transfer"}


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = replace(config, synth=replace(config.synth, seed=args.seed), train=replace(config.train, seed=args.seed))
    if getattr(args, "manifest", None):
        config = replace(config, manifest=str(args.manifest))
    return config


def _out(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    return Path(args.out)


def _vocab_for(manifest: Path) -> LabelVocabulary | None:
    path = manifest.parent / "vocabulary.csv"
    return LabelVocabulary.from_csv(path) if path.exists() else None


def cmd_synth(args) -> None:
    config = _load_config(args)
    manifest = synth_dataset(config.synth, _out(args))
    print(manifest)


def cmd_featurize(args) -> None:
    manifest = Path(args.manifest)
    vocab = _vocab_for(manifest)
    read_manifest(manifest, vocab)  # validates labels against the vocabulary file
    clips = load_clips(manifest)
    if vocab is None:
        vocab = training_vocabulary(clips)
    ids = {e.name: e.label_id for e in vocab.entries}
    patches = []
    for c in clips:
        patches.extend(
            frontend.LogMelPatch(c.clip_id, i, c.patches[i], c.labels) for i in range(c.num_patches)
        )
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    frontend.write_patch_cache(out / "patches.wvc", patches, ids)
    print(f"{len(patches)} patches from {len(clips)} clips -> {out / 'patches.wvc'}")


def cmd_train(args) -> None:
    if not args.manifest and not args.synthetic:
        raise ConfigError("train needs --manifest (or --synthetic to generate the corpus in memory)")
    result = run_experiment(_load_config(args), _out(args))
    print(json.dumps(result["summary"]["metrics"], indent=2, sort_keys=True))


def _checkpoint_model(args, config):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ckpt = Path(args.checkpoint)
    vocab_file = ckpt.parent / "vocabulary.csv"
    if not vocab_file.exists():
        raise DataError(f"{vocab_file} not found next to the checkpoint")
    vocab = LabelVocabulary.from_csv(vocab_file)
    from audiocnn.experiment import architecture_for

    state = load_state(ckpt, architecture_for(config, len(vocab)))
    return state.network, vocab


def cmd_eval(args) -> None:
    config = _load_config(args)
    if not args.manifest:
        raise ConfigError("--manifest is required")
    network, vocab = _checkpoint_model(args, config)
    clips = project(load_clips(args.manifest), vocab, drop_empty=False)
    eval_set = build_balanced_eval(clips, vocab, config.eval_per_class, config.eval_seed)
    rep = evaluate(network, eval_set, vocab)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "per_class.csv")
    rep.write_json(out / "summary.json")
    print(json.dumps(rep.summary(), indent=2, sort_keys=True))


def cmd_embed(args) -> None:
    config = _load_config(args)
    if not args.manifest:
        raise ConfigError("--manifest is required")
    network, _ = _checkpoint_model(args, config)
    records = extract_embeddings(network, load_clips(args.manifest))
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(out, records)
    print(f"{len(records)} embeddings -> {out}")


def cmd_transfer(args) -> None:
    result = run_transfer(_load_config(args), _out(args))
    print(json.dumps(result, indent=2, sort_keys=True))


def cmd_sweep(args) -> None:
    rows = run_sweeps(_load_config(args), _out(args))
    print(json.dumps(rows, indent=2, sort_keys=True))


def cmd_report(args) -> None:
    runs = [Path(r) for r in args.runs]
    if not runs and args.out and Path(args.out).is_dir():
        runs = sorted(p for p in Path(args.out).iterdir() if p.is_dir())
    text, rows, _ = report(runs)
    costs = []
    for name in sorted(architectures.BUILDERS):
        c = architectures.count_costs(architectures.build(name, 3087))
        costs.append(f"{name:10s} weights={c.weights:>12,d} multiplies={c.multiplies:>15,d}")
    text += "\ncost accounting at 3087 labels (full width)\n" + "\n".join(costs) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.txt").write_text(text)
    print(text, end="")


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "transfer": cmd_transfer,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="overrides the synth and training seeds")
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--out", help="output directory (or file for embed)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    common.add_argument("--test-mode", action="store_true", help="forbid --threads > 1 for training")

    parser = argparse.ArgumentParser(prog="audiocnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p = sub.add_parser("featurize", parents=[common], help="log-mel patch cache for a manifest")
    p.add_argument("--manifest", required=True)
    p = sub.add_parser("train", parents=[common], help="train, evaluate and write run artifacts")
    p.add_argument("--manifest")
    p.add_argument("--synthetic", action="store_true", help="synthesize the corpus from the config")
    for name in ("eval", "embed"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
    sub.add_parser("transfer", parents=[common], help="embedding vs log-mel transfer comparison")
    sub.add_parser("sweep", parents=[common], help="label-set-size and training-size sweeps")
    p = sub.add_parser("report", parents=[common], help="consolidate run directories")
    p.add_argument("runs", nargs="*")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.test_mode and args.threads > 1 and args.command in TRAINING_COMMANDS:
            raise ConfigError("--threads > 1 is not allowed for training in test mode")
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - mapped to exit codes below
        code = exit_code_for(e)
        if code is None:
            raise
        print(f"audiocnn {args.command}: {e}", file=sys.stderr)
        return code
    return EXIT_OK


def exit_code_for(e: BaseException) -> int | None:
    if isinstance(e, StageError):
        return exit_code_for(e.cause) or EXIT_DATA
    if isinstance(e, (ConfigError, SynthError, architectures.ArchitectureError)):
        return EXIT_CONFIG
    if isinstance(e, (NumericError, NonFiniteGradient, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(e, (DataError, frontend.AudioError, CheckpointError, EmbeddingFileError, OSError)):
        return EXIT_DATA
    return None


if __name__ == "__main__":
    sys.exit(main())
