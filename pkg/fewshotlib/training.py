"""Meta-training: linear probing, episodic training with gradient accumulation, DANN, checkpoints.

Training runs in two phases over the training split of a :class:`~fewshotlib.features.Corpus`:

1. :func:`linear_probe` trains the randomly initialized head (and the discriminator when
   DANN is on) while the encoder stays frozen.
2. :func:`meta_train` trains every group. Each forward pass is one sampled episode; the
   episode-loss gradients of ``accumulation`` consecutive episodes are averaged and applied
   in one Adam step. After every epoch the model is scored on a fixed stream of
   within-dataset validation episodes, the best-scoring snapshot is retained, and training
   stops once validation loss fails to improve for ``patience`` epochs.

Progress is kept in a :class:`TrainLog`, written as JSON lines, one record per epoch.

Example:
    Probe, then meta-train, then save::

        from fewshotlib.training import TrainConfig, linear_probe, meta_train, save_checkpoint

        cfg = TrainConfig(batches_per_epoch=100, accumulation=10, max_epochs=3)
        model, probe_log = linear_probe(model, corpus, cfg)
        model, log = meta_train(model, corpus, cfg)
        save_checkpoint(model, "model.pepc", train_config=cfg)

.. versionadded:: 0.1.0
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from fewshotlib import log
from fewshotlib.episodes import (
    Episode,
    EpisodeSpec,
    Sampling,
    Split,
    dataset_index,
    make_eval_stream,
    sample_episode,
)
from fewshotlib.exceptions import ConfigurationError, DataError
from fewshotlib.features import Corpus
from fewshotlib.model import CheckpointFormatError, DannDisabledError, ModelConfig, ModelState
from fewshotlib.numerics import AdamState, Value, adam_step, add, cross_entropy, stack, substream
from fewshotlib.protonet import ProtoConfig, episode_loss


class DatasetMappingError(DataError):
    """Raised when an episode sample comes from a dataset the discriminator was not built for."""


class TrainPhase(str, Enum):
    PROBE = "probe"
    META = "meta"


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule.

    :ivar probe_epochs: Linear-probing epochs; 0 skips probing.
    :ivar batches_per_epoch: Episodes (forward passes) per epoch.
    :ivar accumulation: Episodes per optimizer step; must divide ``batches_per_epoch``.
    :ivar lr: Constant Adam learning rate.
    :ivar episode: Training episode shape and sampling mode.
    :ivar dann_enabled: Add the discriminator loss to the objective.
    :ivar grl_lambda: Gradient reversal scale, echoed into the model config.
    :ivar max_epochs: Upper bound on meta-training epochs.
    :ivar patience: Epochs without validation improvement before stopping.
    :ivar validation_episodes: Size of the fixed validation stream.
    :ivar validation_seed: Seed of the first validation episode.
    :ivar seed: Root seed of the sampling and dropout streams.
    """

    probe_epochs: int = 5
    batches_per_epoch: int = 1000
    accumulation: int = 20
    lr: float = 1e-4
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    dann_enabled: bool = False
    grl_lambda: float = 0.01
    max_epochs: int = 10
    patience: int = 2
    validation_episodes: int = 50
    validation_seed: int = 10_000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.accumulation < 1:
            raise ConfigurationError(f"accumulation must be at least 1, got {self.accumulation}")
        if self.batches_per_epoch < 1 or self.batches_per_epoch % self.accumulation:
            raise ConfigurationError(
                f"batches_per_epoch ({self.batches_per_epoch}) must be a positive multiple of "
                f"accumulation ({self.accumulation})"
            )
        for name in ("probe_epochs", "max_epochs", "patience", "validation_episodes", "seed"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not self.grl_lambda > 0:
            raise ConfigurationError(f"grl_lambda must be positive, got {self.grl_lambda}")

    @property
    def steps_per_epoch(self) -> int:
        return self.batches_per_epoch // self.accumulation

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["episode"]["sampling"] = self.episode.sampling.value
        data["episode"]["split"] = self.episode.split.value
        return data


@dataclass(frozen=True)
class EpochRecord:
    """Summary of one training epoch."""

    phase: TrainPhase
    epoch: int
    train_loss: float
    train_accuracy: float
    validation_loss: float | None
    validation_accuracy: float | None
    optimizer_steps: int
    wall_time_s: float

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["phase"] = self.phase.value
        return data


@dataclass
class TrainLog:
    """Per-epoch records of one training run."""

    records: list[EpochRecord] = field(default_factory=list)

    @property
    def optimizer_steps(self) -> int:
        return sum(r.optimizer_steps for r in self.records)

    def best(self) -> EpochRecord | None:
        scored = [
            r
            for r in self.records
            if r.phase is TrainPhase.META and r.validation_loss is not None
        ]
        if not scored:
            return None
        return min(scored, key=lambda r: r.validation_loss)  # type: ignore[arg-type,return-value]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        log.info("Wrote training log (%d epochs) to %s", len(self.records), path)
        return path


@dataclass
class ObjectiveTerms:
    """Loss pieces of one episode forward pass."""

    total: Value
    proto: Value
    discriminator: Value | None
    accuracy: float


class GradientAccumulator:
    """Sum gradients over several backward passes, then apply their mean in one Adam step.

    Parameters without a gradient in a pass (not reached, or frozen) contribute zeros.
    """

    def __init__(self, model: ModelState, groups: tuple[str, ...]) -> None:
        self.model = model
        self.groups = groups
        self.count = 0
        self._sums: dict[str, dict[str, np.ndarray]] = {}
        self.reset()

    def reset(self) -> None:
        self.count = 0
        self._sums = {
            group: {name: np.zeros_like(p.data) for name, p in self.model.groups()[group].items()}
            for group in self.groups
        }

    def add(self) -> None:
        for group in self.groups:
            for name, param in self.model.groups()[group].items():
                if param.grad is not None:
                    self._sums[group][name] += param.grad
        self.count += 1

    def step(self) -> None:
        if self.count == 0:
            return
        for group in self.groups:
            mean = {name: total / self.count for name, total in self._sums[group].items()}
            adam_step(self.model.groups()[group], mean, self.model.optimizers[group])
        log.debug(
            "Adam step over %d accumulated episodes (groups: %s)",
            self.count,
            ", ".join(self.groups),
        )
        self.reset()


def episode_objective(
    model: ModelState,
    corpus: Corpus,
    episode: Episode,
    proto_cfg: ProtoConfig,
    dataset_ids: Mapping[str, int] | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ObjectiveTerms:
    """Forward one episode: prototype loss, plus the discriminator loss given ``dataset_ids``.

    :raises DatasetMappingError: If a sample's dataset is missing from ``dataset_ids``.
    """
    samples = list(episode.support) + list(episode.query)
    latents = [model.latent(corpus.features(record)) for record, _ in samples]
    embeddings = [model.extract(z, training, rng) for z in latents]
    k = len(episode.support)
    proto, accuracy = episode_loss(
        stack(embeddings[:k]),
        [label for _, label in episode.support],
        stack(embeddings[k:]),
        [label for _, label in episode.query],
        proto_cfg,
    )
    if dataset_ids is None:
        return ObjectiveTerms(total=proto, proto=proto, discriminator=None, accuracy=accuracy)

    targets = []
    for record, _ in samples:
        if record.dataset not in dataset_ids:
            raise DatasetMappingError(
                f"sample {record.id!r} comes from dataset {record.dataset!r}, "
                "unknown to the discriminator "
                f"(known: {sorted(dataset_ids)})"
            )
        targets.append(dataset_ids[record.dataset])
    logits = stack([model.discriminate(z, training, rng) for z in latents])
    disc = cross_entropy(logits, targets)
    return ObjectiveTerms(
        total=add(proto, disc), proto=proto, discriminator=disc, accuracy=accuracy
    )


def dann_objective(
    model: ModelState,
    corpus: Corpus,
    episode: Episode,
    dataset_ids: Mapping[str, int],
    proto_cfg: ProtoConfig | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Value:
    """Prototype loss plus dataset cross-entropy through the reversal layer.

    The reversal layer turns the sum into a min-max game: ``theta_d`` descends the
    discriminator loss while the encoder receives its gradient scaled by ``-lambda``.

    :raises DannDisabledError: If the model has no discriminator.
    """
    if not model.config.dann_enabled:
        raise DannDisabledError("dann_objective needs a model built with DANN enabled")
    proto_cfg = proto_cfg or ProtoConfig()
    terms = episode_objective(model, corpus, episode, proto_cfg, dataset_ids, training, rng)
    return terms.total


def _training_dataset_ids(
    model: ModelState, corpus: Corpus, cfg: TrainConfig
) -> dict[str, int] | None:
    if not cfg.dann_enabled:
        return None
    if not model.config.dann_enabled:
        raise DannDisabledError("training requested DANN but the model has no discriminator")
    ids = dataset_index(corpus.records, Split.TRAIN)
    if len(ids) != model.config.num_datasets:
        raise DatasetMappingError(
            f"training split has {len(ids)} datasets but the discriminator was built for "
            f"{model.config.num_datasets}"
        )
    return ids


def validation_stream(corpus: Corpus, cfg: TrainConfig) -> list[Episode]:
    """Fixed within-dataset validation episodes; empty (with a warning) if the split is empty."""
    if not any(r.split == Split.VALIDATION for r in corpus.records):
        log.warning("Validation split is empty; early stopping is disabled")
        return []
    spec = replace(
        cfg.episode, split=Split.VALIDATION, sampling=Sampling.WITHIN, seed=cfg.validation_seed
    )
    return make_eval_stream(corpus.records, spec, cfg.validation_episodes)


def validation_loss(
    model: ModelState,
    corpus: Corpus,
    stream: list[Episode],
    proto_cfg: ProtoConfig | None = None,
) -> tuple[float, float] | None:
    """Mean eval-mode episode loss and accuracy over ``stream``; ``None`` for an empty stream."""
    if not stream:
        return None
    proto_cfg = proto_cfg or ProtoConfig()
    losses, accuracies = [], []
    for episode in stream:
        terms = episode_objective(model, corpus, episode, proto_cfg)
        losses.append(terms.proto.item())
        accuracies.append(terms.accuracy)
    return float(np.mean(losses)), float(np.mean(accuracies))


def _run_epoch(
    model: ModelState,
    corpus: Corpus,
    cfg: TrainConfig,
    groups: tuple[str, ...],
    dataset_ids: dict[str, int] | None,
    proto_cfg: ProtoConfig,
    sampling_rng: np.random.Generator,
    dropout_rng: np.random.Generator,
) -> tuple[float, float, int]:
    spec = replace(cfg.episode, split=Split.TRAIN)
    accumulator = GradientAccumulator(model, groups)
    losses, accuracies = [], []
    steps = 0
    for batch in range(cfg.batches_per_epoch):
        episode = sample_episode(corpus.records, spec, seed=int(sampling_rng.integers(0, 2**32)))
        model.zero_grad()
        terms = episode_objective(model, corpus, episode, proto_cfg, dataset_ids, True, dropout_rng)
        terms.total.backward()
        accumulator.add()
        losses.append(terms.total.item())
        accuracies.append(terms.accuracy)
        if (batch + 1) % cfg.accumulation == 0:
            accumulator.step()
            steps += 1
    model.zero_grad()
    return float(np.mean(losses)), float(np.mean(accuracies)), steps


def _ensure_optimizers(model: ModelState, lr: float) -> None:
    for group in model.groups():
        state = model.optimizers.get(group)
        if state is None:
            model.optimizers[group] = AdamState(lr=lr)
        else:
            state.lr = lr


def linear_probe(
    model: ModelState,
    corpus: Corpus,
    cfg: TrainConfig,
    proto_cfg: ProtoConfig | None = None,
) -> tuple[ModelState, TrainLog]:
    """Train ``theta_f`` (and ``theta_d`` with DANN) for ``probe_epochs`` with the encoder frozen.

    The encoder parameters are bit-identical before and after.

    .. versionadded:: 0.1.0
    """
    proto_cfg = proto_cfg or ProtoConfig()
    dataset_ids = _training_dataset_ids(model, corpus, cfg)
    groups = ("theta_f", "theta_d") if dataset_ids is not None else ("theta_f",)
    _ensure_optimizers(model, cfg.lr)
    sampling_rng = substream(cfg.seed, "sampling.probe")
    dropout_rng = substream(cfg.seed, "dropout.probe")
    stream = validation_stream(corpus, cfg)

    train_log = TrainLog()
    log.info("Linear probing for %d epochs (encoder frozen)", cfg.probe_epochs)
    model.set_trainable("theta_m", False)
    try:
        for epoch in range(cfg.probe_epochs):
            started = time.perf_counter()
            loss, accuracy, steps = _run_epoch(
                model, corpus, cfg, groups, dataset_ids, proto_cfg, sampling_rng, dropout_rng
            )
            validation = validation_loss(model, corpus, stream, proto_cfg)
            record = EpochRecord(
                phase=TrainPhase.PROBE,
                epoch=epoch,
                train_loss=loss,
                train_accuracy=accuracy,
                validation_loss=validation[0] if validation else None,
                validation_accuracy=validation[1] if validation else None,
                optimizer_steps=steps,
                wall_time_s=time.perf_counter() - started,
            )
            train_log.records.append(record)
            _log_epoch(record)
    finally:
        model.set_trainable("theta_m", True)
    model.extras["probed"] = True
    return model, train_log


def _log_epoch(record: EpochRecord) -> None:
    validation = (
        f"val loss {record.validation_loss:.4f} acc {record.validation_accuracy:.3f}"
        if record.validation_loss is not None
        else "no validation"
    )
    log.info(
        "[%s %d] train loss %.4f acc %.3f, %s, %d steps, %.1fs",
        record.phase.value,
        record.epoch,
        record.train_loss,
        record.train_accuracy,
        validation,
        record.optimizer_steps,
        record.wall_time_s,
    )


def meta_train(
    model: ModelState,
    corpus: Corpus,
    cfg: TrainConfig,
    proto_cfg: ProtoConfig | None = None,
) -> tuple[ModelState, TrainLog]:
    """Train every parameter group episodically with validation-driven early stopping.

    The returned model is the snapshot with the lowest validation loss seen (the final
    model when the validation split is empty).

    :raises ConfigurationError: If probing is configured but has not been run.
    :raises FeasibilityError: If the training split cannot host the episode shape.

    .. versionadded:: 0.1.0
    """
    if cfg.probe_epochs > 0 and not model.extras.get("probed"):
        raise ConfigurationError(
            "run linear_probe before meta_train, or set probe_epochs to 0 to skip probing"
        )
    proto_cfg = proto_cfg or ProtoConfig()
    dataset_ids = _training_dataset_ids(model, corpus, cfg)
    groups = tuple(g for g in model.groups() if g != "theta_d" or dataset_ids is not None)
    _ensure_optimizers(model, cfg.lr)
    sampling_rng = substream(cfg.seed, "sampling.meta")
    dropout_rng = substream(cfg.seed, "dropout.meta")
    stream = validation_stream(corpus, cfg)

    train_log = TrainLog()
    best_loss = float("inf")
    best_blob: bytes | None = None
    stale = 0
    log.info(
        "Meta-training up to %d epochs: %d episodes/epoch, %d optimizer steps/epoch, "
        "sampling=%s, dann=%s",
        cfg.max_epochs,
        cfg.batches_per_epoch,
        cfg.steps_per_epoch,
        cfg.episode.sampling.value,
        dataset_ids is not None,
    )
    for epoch in range(cfg.max_epochs):
        started = time.perf_counter()
        loss, accuracy, steps = _run_epoch(
            model, corpus, cfg, groups, dataset_ids, proto_cfg, sampling_rng, dropout_rng
        )
        validation = validation_loss(model, corpus, stream, proto_cfg)
        record = EpochRecord(
            phase=TrainPhase.META,
            epoch=epoch,
            train_loss=loss,
            train_accuracy=accuracy,
            validation_loss=validation[0] if validation else None,
            validation_accuracy=validation[1] if validation else None,
            optimizer_steps=steps,
            wall_time_s=time.perf_counter() - started,
        )
        train_log.records.append(record)
        _log_epoch(record)
        if validation is None:
            continue
        if validation[0] < best_loss:
            best_loss = validation[0]
            best_blob = model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("Validation loss has not improved for %d epochs; stopping", stale)
                break

    if best_blob is not None:
        model = ModelState.restore(best_blob)
        log.info("Kept the best validation checkpoint (loss %.4f)", best_loss)
    return model, train_log


def save_checkpoint(
    model: ModelState,
    path: str | Path,
    train_config: TrainConfig | None = None,
    run_config: Mapping[str, Any] | None = None,
) -> Path:
    """Write ``model`` with optional training and run config echoes."""
    path = Path(path)
    extras = dict(model.extras)
    if train_config is not None:
        extras["train_config"] = train_config.to_dict()
    if run_config is not None:
        extras["run_config"] = dict(run_config)
    try:
        path.write_bytes(model.snapshot(extras))
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    log.info("Wrote checkpoint %s", path)
    return path


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> ModelState:
    """Read a checkpoint written by :func:`save_checkpoint`.

    :raises CheckpointFormatError: On a malformed file or a config mismatch.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return ModelState.restore(blob, expected_config)
    except CheckpointFormatError as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc
