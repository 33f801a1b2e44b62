"""Command-line interface: ``fewshotlib synth | train | eval | sweep | inspect``.

Every command except ``inspect`` builds one :class:`~fewshotlib.config.RunConfig` from
defaults, ``$FEWSHOTLIB_CONFIG_JSON``, ``--config`` and the command's flags (flags win),
validates it, and only then starts work. Library errors end the process with the exit code
of their category: 2 for configuration errors, 3 for data and format errors, 4 for
numerical errors.

Example:
    Generate a corpus, train a GLU model and evaluate it with variant B fine-tuning::

        fewshotlib synth --out data --classes 4 --per-class 30 --datasets 2 --seed 7
        fewshotlib train --manifest data/manifest.json --checkpoint model.pepc --extractor glu
        fewshotlib eval --manifest data/manifest.json --checkpoint model.pepc \\
            --ft-variant b --ft-steps 25 --ft-lr 1e-5 --ft-support 2

.. versionadded:: 0.1.0
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path
from typing import Any, Callable, Sequence

from rich.console import Console
from rich.table import Table

from fewshotlib import __version__, log
from fewshotlib.config import RunConfig, load_run_config
from fewshotlib.episodes import (
    Split,
    dataset_index,
    load_manifest,
    make_eval_stream,
    sample_episode,
    summarize_manifest,
    write_manifest,
)
from fewshotlib.evaluation.evaluate import EvalReport, evaluate, render_rich
from fewshotlib.evaluation.sweep import SweepResult, sweep
from fewshotlib.exceptions import ConfigurationError, DataError, FewShotError
from fewshotlib.features import (
    FSEQ_MAGIC,
    Corpus,
    FeatureStore,
    default_class_specs,
    filter_by_length,
    generate_synthetic_corpus,
    read_feature_file,
    write_feature_file,
)
from fewshotlib.model import (
    CHECKPOINT_MAGIC,
    ModelConfig,
    ModelState,
    parameter_counts,
    parameter_hash,
    read_checkpoint,
)
from fewshotlib.numerics import substream
from fewshotlib.training import TrainLog, linear_probe, load_checkpoint, meta_train, save_checkpoint

console = Console()

UNKNOWN_FORMAT = "unknown format (not a checkpoint, feature file, manifest or report)"


def _require_path(value: str | None, flag: str) -> Path:
    if not value:
        raise ConfigurationError(f"{flag} is required")
    return Path(value)


def load_corpus(cfg: RunConfig) -> Corpus:
    """Manifest records (length-filtered) with a feature store rooted next to the manifest."""
    manifest = _require_path(cfg.paths.manifest, "--manifest")
    root = Path(cfg.paths.features_root) if cfg.paths.features_root else manifest.parent
    store = FeatureStore(root, n_mels=cfg.features.n_mels)
    records = filter_by_length(load_manifest(manifest), cfg.features.max_duration_s, store)
    if not records:
        limit = cfg.features.max_duration_s
        raise DataError(f"manifest {manifest} has no records within {limit} s")
    return Corpus(records=records, store=store)


def cmd_synth(cfg: RunConfig) -> Path:
    """Write a synthetic manifest and its ``FSEQ`` feature files under ``paths.out_dir``."""
    out = _require_path(cfg.paths.out_dir, "--out")
    if not out.is_dir():
        raise DataError(f"output directory {out} does not exist")
    synth = cfg.synth
    rng = substream(cfg.seed, "synth")
    specs = default_class_specs(
        synth.classes,
        synth.channels,
        rng,
        separation=synth.separation,
        noise=synth.noise,
        shift_scale=synth.shift_scale,
        length_range=(synth.min_frames, synth.max_frames),
    )
    heldout = {int(index): Split(split) for index, split in synth.heldout.items()}
    corpus = generate_synthetic_corpus(
        specs,
        synth.per_class,
        synth.datasets,
        rng,
        split_fractions=synth.split_fractions,
        heldout=heldout,
    )
    (out / "features").mkdir(exist_ok=True)
    for record in corpus.records:
        write_feature_file(out / record.path, corpus.sequences[record.id])
    manifest = write_manifest(corpus.records, out / "manifest.json")
    log.info("Wrote %d records and their features to %s", len(corpus.records), out)
    return manifest


def cmd_train(cfg: RunConfig) -> Path:
    """Linear probe, then meta-train; writes the best checkpoint and the JSON-lines log."""
    log.info("Training from random initialization: linear probe, then meta-learning")
    corpus = load_corpus(cfg)
    train_cfg = cfg.train_config()
    datasets = dataset_index(corpus.records, Split.TRAIN)
    if cfg.dann.enabled and len(datasets) < 2:
        raise ConfigurationError(
            f"--dann needs at least 2 training datasets, found {len(datasets)}"
        )
    sample_episode(corpus.records, train_cfg.episode)

    model_cfg = cfg.model_config(corpus.num_channels, len(datasets))
    model = ModelState.init(model_cfg, substream(cfg.seed, "init"), lr=train_cfg.lr)
    log.info(
        "Model: %s head, %d encoder layers x %d channels, dann=%s",
        model_cfg.extractor.kind.value,
        model_cfg.encoder.num_layers,
        model_cfg.encoder.hidden_channels,
        model_cfg.dann_enabled,
    )
    train_log = TrainLog()
    if train_cfg.probe_epochs:
        model, probe_log = linear_probe(model, corpus, train_cfg, cfg.proto)
        train_log.records.extend(probe_log.records)
    model, meta_log = meta_train(model, corpus, train_cfg, cfg.proto)
    train_log.records.extend(meta_log.records)

    checkpoint = Path(cfg.paths.checkpoint or "model.pepc")
    save_checkpoint(model, checkpoint, train_cfg, cfg.to_dict())
    log_path = cfg.paths.train_log or checkpoint.with_suffix(".jsonl")
    train_log.write(Path(log_path))
    return checkpoint


def _load_for_eval(cfg: RunConfig) -> tuple[ModelState, Corpus]:
    model = load_checkpoint(_require_path(cfg.paths.checkpoint, "--checkpoint"))
    corpus = load_corpus(cfg)
    expected = model.config.encoder.input_channels
    if corpus.num_channels != expected:
        raise DataError(
            f"corpus features have {corpus.num_channels} channels, checkpoint expects {expected}"
        )
    return model, corpus


def _write_outputs(data: dict[str, Any], text: str, json_path: Path, table_path: Path) -> None:
    try:
        json_path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        table_path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write report: {exc}") from exc
    log.info("Wrote %s and %s", json_path, table_path)


def cmd_eval(cfg: RunConfig) -> EvalReport:
    """Evaluate a checkpoint on the configured split; writes a JSON report and a text table."""
    spec = cfg.eval_spec()
    cfg.finetune.validate_for(spec.k_shot)
    model, corpus = _load_for_eval(cfg)
    stream = make_eval_stream(corpus.records, spec, cfg.evaluation.episodes)
    report = evaluate(model, corpus, stream, cfg.finetune, cfg.proto, jobs=cfg.evaluation.jobs)

    checkpoint = Path(cfg.paths.checkpoint or "model.pepc")
    title = f"{spec.split.value} accuracy (%), {spec.n_way}-way {spec.k_shot}-shot"
    text = report.render(title=title)
    data = report.to_dict() | {"config": cfg.to_dict()}
    _write_outputs(
        data,
        text,
        Path(cfg.paths.report) if cfg.paths.report else checkpoint.with_suffix(".report.json"),
        Path(cfg.paths.table) if cfg.paths.table else checkpoint.with_suffix(".report.txt"),
    )
    console.print(text, end="")
    return report


def cmd_sweep(cfg: RunConfig) -> SweepResult:
    """Grid-search fine-tuning settings on the validation split; writes JSON and text tables."""
    grid = cfg.sweep_grid()
    spec = cfg.eval_spec(cfg.sweep.split)
    model, corpus = _load_for_eval(cfg)
    stream = make_eval_stream(corpus.records, spec, cfg.evaluation.episodes)
    result = sweep(model, corpus, stream, grid, cfg.finetune, cfg.proto, jobs=cfg.evaluation.jobs)

    checkpoint = Path(cfg.paths.checkpoint or "model.pepc")
    text = result.render()
    _write_outputs(
        result.to_dict() | {"config": cfg.to_dict()},
        text,
        Path(cfg.paths.report) if cfg.paths.report else checkpoint.with_suffix(".sweep.json"),
        Path(cfg.paths.table) if cfg.paths.table else checkpoint.with_suffix(".sweep.txt"),
    )
    console.print(text, end="")
    return result


def _summary_table(title: str, rows: Sequence[tuple[str, str]]) -> Table:
    table = Table(title=title, show_header=False)
    table.add_column("Field")
    table.add_column("Value")
    for key, value in rows:
        table.add_row(key, value)
    return table


def _inspect_checkpoint(blob: bytes) -> str:
    header, _ = read_checkpoint(blob)
    model = ModelState.restore(blob)
    config = ModelConfig.from_dict(header["config"])
    rows = [
        ("format", "checkpoint (PEPC)"),
        ("extractor", config.extractor.kind.value),
        ("encoder", json.dumps(header["config"]["encoder"], sort_keys=True)),
        (
            "dann",
            f"{config.dann_enabled} (lambda {config.grl_lambda}, {config.num_datasets} datasets)",
        ),
        *((f"{group} parameters", str(count)) for group, count in parameter_counts(model).items()),
        *(
            (f"{group} optimizer steps", str(state.step_count))
            for group, state in sorted(model.optimizers.items())
        ),
        ("parameter hash", parameter_hash(model)),
    ]
    return render_rich(_summary_table("Checkpoint", rows))


def _inspect_manifest(path: Path) -> str:
    summary = summarize_manifest(load_manifest(path))
    splits = [s.value for s in Split]
    table = Table(title=f"Manifest {path.name}")
    table.add_column("Dataset")
    table.add_column("Classes", justify="right")
    table.add_column("Samples", justify="right")
    for split in splits:
        table.add_column(split.capitalize(), justify="right")
    for dataset, total in summary["datasets"].items():
        per_split = summary["splits"][dataset]
        table.add_row(
            dataset,
            str(len(summary["classes"][dataset])),
            str(total),
            *(str(per_split.get(split, 0)) for split in splits),
        )
    classes = Table(title="Samples per class")
    classes.add_column("Dataset")
    classes.add_column("Label")
    classes.add_column("Samples", justify="right")
    for dataset, labels in summary["classes"].items():
        for label, count in labels.items():
            classes.add_row(dataset, label, str(count))
    return render_rich(table) + render_rich(classes)


def _inspect_report(data: dict[str, Any]) -> str:
    if data.get("kind") == "sweep_report":
        best = data["best"]
        rows = [
            ("format", "sweep report"),
            ("cells", str(len(data["cells"]) + 1)),
            ("baseline mean", f"{100 * data['baseline']['overall_mean']:.2f}"),
            (
                "best",
                f"{best['variant']} steps={best['steps']} lr={best['lr']} s={best['support_size']}",
            ),
            ("best mean", f"{100 * best['overall_mean']:.2f}"),
        ]
        return render_rich(_summary_table("Sweep", rows))
    return EvalReport.from_dict(data).render(title="Evaluation report")


def cmd_inspect(path: str | Path) -> str:
    """Describe a checkpoint, feature file, manifest or report.

    :raises DataError: If the file is none of these.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if blob.startswith(CHECKPOINT_MAGIC):
        return _inspect_checkpoint(blob)
    if blob.startswith(FSEQ_MAGIC):
        sequence = read_feature_file(path)
        rows = [
            ("format", "feature sequence (FSEQ)"),
            ("frames", str(sequence.num_frames)),
            ("channels", str(sequence.num_channels)),
        ]
        return render_rich(_summary_table("Feature file", rows))
    try:
        data = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {UNKNOWN_FORMAT}") from exc
    if isinstance(data, list):
        return _inspect_manifest(path)
    if isinstance(data, dict) and data.get("kind") in ("eval_report", "sweep_report"):
        return _inspect_report(data)
    raise DataError(f"{path}: {UNKNOWN_FORMAT}")


def _csv(kind: Callable[[str], Any]) -> Callable[[str], list[Any]]:
    def parse(text: str) -> list[Any]:
        try:
            return [kind(part) for part in text.split(",") if part.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}: {exc}") from exc

    return parse


def _heldout(text: str) -> dict[str, str]:
    pairs = {}
    for item in text.split(","):
        index, _, split = item.partition(":")
        if not index.strip().isdigit() or not split:
            raise argparse.ArgumentTypeError(f"expected INDEX:SPLIT pairs, got {item!r}")
        pairs[index.strip()] = split.strip()
    return pairs


def _flag(parser: argparse.ArgumentParser, name: str, key: str, **kwargs: Any) -> None:
    parser.add_argument(name, dest=key, default=None, **kwargs)


def _switch(parser: argparse.ArgumentParser, name: str, key: str, help: str) -> None:
    parser.add_argument(name, dest=key, action="store_const", const=True, default=None, help=help)


def _data_flags(parser: argparse.ArgumentParser) -> None:
    _flag(parser, "--manifest", "paths.manifest", help="manifest JSON")
    _flag(parser, "--features-root", "paths.features_root", help="default: manifest directory")
    _flag(parser, "--n-mels", "features.n_mels", type=int, help="mel bands for WAV inputs")


def _episode_flags(parser: argparse.ArgumentParser) -> None:
    _flag(parser, "--n-way", "episode.n_way", type=int)
    _flag(parser, "--k-shot", "episode.k_shot", type=int)
    _flag(parser, "--query", "episode.query_per_class", type=int, help="query samples per class")


def _eval_flags(parser: argparse.ArgumentParser) -> None:
    _flag(parser, "--checkpoint", "paths.checkpoint", required=True)
    _data_flags(parser)
    _episode_flags(parser)
    _flag(parser, "--episodes", "evaluation.episodes", type=int)
    _flag(parser, "--jobs", "evaluation.jobs", type=int, help="episodes evaluated in parallel")
    _flag(parser, "--report", "paths.report", help="JSON report path")
    _flag(parser, "--table", "paths.table", help="text table path")
    _flag(parser, "--temperature", "proto.temperature", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewshotlib", description="Few-shot episodic meta-learning toolkit"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help)
        if name != "inspect":
            sub.add_argument("--config", help="JSON config document")
            _flag(sub, "--seed", "seed", type=int, help="root seed")
        return sub

    synth = command("synth", "generate a synthetic corpus")
    _flag(synth, "--out", "paths.out_dir", required=True, help="existing output directory")
    _flag(synth, "--classes", "synth.classes", type=int)
    _flag(synth, "--per-class", "synth.per_class", type=int)
    _flag(synth, "--datasets", "synth.datasets", type=int)
    _flag(synth, "--channels", "synth.channels", type=int)
    _flag(synth, "--separation", "synth.separation", type=float)
    _flag(synth, "--noise", "synth.noise", type=float)
    _flag(synth, "--shift", "synth.shift_scale", type=float, help="per-dataset domain shift scale")
    _flag(synth, "--heldout", "synth.heldout", type=_heldout, help="e.g. 2:test,3:validation")

    train = command("train", "linear probe and meta-train a model")
    _data_flags(train)
    _episode_flags(train)
    _flag(train, "--checkpoint", "paths.checkpoint", help="output checkpoint (default model.pepc)")
    _flag(train, "--train-log", "paths.train_log")
    _flag(train, "--extractor", "extractor.kind", choices=["mean_fc", "lateral_inhibition", "glu"])
    _flag(train, "--embedding-dim", "extractor.embedding_dim", type=int)
    _flag(train, "--sampling", "episode.sampling", choices=["within", "free"])
    _switch(train, "--dann", "dann.enabled", "enable the dataset discriminator")
    _flag(train, "--lambda", "dann.grl_lambda", type=float, help="gradient reversal scale")
    _flag(train, "--probe-epochs", "train.probe_epochs", type=int)
    _flag(train, "--batches-per-epoch", "train.batches_per_epoch", type=int)
    _flag(train, "--accumulation", "train.accumulation", type=int)
    _flag(train, "--lr", "train.lr", type=float)
    _flag(train, "--max-epochs", "train.max_epochs", type=int)
    _flag(train, "--patience", "train.patience", type=int)
    _flag(train, "--validation-episodes", "train.validation_episodes", type=int)
    _flag(train, "--hidden", "encoder.hidden_channels", type=int)
    _flag(train, "--layers", "encoder.num_layers", type=int)
    _flag(train, "--kernel-width", "encoder.kernel_width", type=int)
    _switch(train, "--full-width", "encoder.full_width", "1024 hidden channels")
    _flag(train, "--temperature", "proto.temperature", type=float)

    evaluation = command("eval", "evaluate a checkpoint")
    _eval_flags(evaluation)
    _flag(evaluation, "--split", "evaluation.split", choices=["train", "validation", "test"])
    _flag(evaluation, "--ft-variant", "finetune.variant", choices=["none", "a", "b"])
    _flag(evaluation, "--ft-steps", "finetune.steps", type=int)
    _flag(evaluation, "--ft-lr", "finetune.lr", type=float)
    _flag(evaluation, "--ft-support", "finetune.support_size", type=int, help="B inner support")
    _switch(evaluation, "--ft-augment-b", "finetune.augment_b", "apply SpecAugment in variant B")

    grid = command("sweep", "grid-search fine-tuning hyperparameters")
    _eval_flags(grid)
    _flag(grid, "--split", "sweep.split", choices=["train", "validation", "test"])
    _flag(grid, "--variants", "sweep.variants", type=_csv(str))
    _flag(grid, "--steps", "sweep.steps", type=_csv(int))
    _flag(grid, "--lrs", "sweep.lrs", type=_csv(float))
    _flag(grid, "--support-sizes", "sweep.support_sizes", type=_csv(int))

    inspect = command("inspect", "describe a checkpoint, manifest, feature file or report")
    inspect.add_argument("path")
    return parser


COMMANDS: dict[str, Callable[[RunConfig], Any]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point of the ``fewshotlib`` console script; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        if args.command == "inspect":
            console.print(cmd_inspect(args.path), end="")
            return 0
        overrides = {
            key: value
            for key, value in vars(args).items()
            if value is not None and (key == "seed" or "." in key)
        }
        cfg = load_run_config(args.config, overrides)
        COMMANDS[args.command](cfg)
    except FewShotError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
