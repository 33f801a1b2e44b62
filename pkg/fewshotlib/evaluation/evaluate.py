"""Episodic meta-test evaluation and reports.

:func:`evaluate` scores a model on a stream of episodes. Every episode runs on its own
copy restored from one snapshot of the model, so fine-tuning never leaks from one episode
into the next or back into the caller's model. Per episode:

1. restore a private copy of the model;
2. fine-tune it on the support set when the :class:`FinetuneConfig` is active;
3. embed support and query in eval mode, build prototypes from the full original support
   set and classify the queries.

Accuracies are grouped by the episode's source dataset. The overall figure is the mean of
the per-dataset means. Episodes may run on a thread pool (``jobs > 1``); results are
reduced by episode index, so the report does not depend on ``jobs``.

Example:
    Compare variant B against the unadapted baseline on the same episodes::

        from fewshotlib.evaluation.evaluate import compare_reports, evaluate
        from fewshotlib.evaluation.finetune import FinetuneConfig

        baseline = evaluate(model, corpus, stream, FinetuneConfig())
        tuned = evaluate(model, corpus, stream, FinetuneConfig(variant="b", steps=25, lr=1e-5))
        print(compare_reports(baseline, tuned))

.. versionadded:: 0.1.0
"""
from __future__ import annotations

import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from rich.console import Console
from rich.table import Table

from fewshotlib import log
from fewshotlib.episodes import Episode
from fewshotlib.exceptions import ConfigurationError, DataError
from fewshotlib.evaluation.finetune import FinetuneConfig, run_finetune
from fewshotlib.features import Corpus
from fewshotlib.model import ModelState, count_forwards
from fewshotlib.numerics import stack
from fewshotlib.protonet import ProtoConfig, classify, compute_prototypes, predictions

Z_95 = 1.96
REPORT_VERSION = 1


def half_width(values: Sequence[float]) -> float:
    """95% confidence half-width ``1.96 · σ / √n`` with the sample standard deviation."""
    if len(values) < 2:
        return 0.0
    return float(Z_95 * np.std(values, ddof=1) / np.sqrt(len(values)))


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one evaluated episode."""

    index: int
    dataset: str
    accuracy: float
    finetune_forwards: int
    eval_forwards: int
    finetune_seconds: float


@dataclass(frozen=True)
class DatasetAccuracy:
    dataset: str
    mean: float
    half_width: float
    episodes: int


@dataclass
class EvalReport:
    """Aggregated evaluation outcome.

    :ivar datasets: Per-dataset accuracy, keyed and ordered by dataset name.
    :ivar overall_mean: Mean of the per-dataset means.
    :ivar episodes: Number of episodes evaluated.
    :ivar finetune_forwards: Embedding forwards spent on fine-tuning, over all episodes.
    :ivar eval_forwards: Embedding forwards spent on final classification.
    :ivar finetune_wall_time_s: Fine-tuning wall time, over all episodes; not serialized.
    :ivar episode_accuracies: Accuracy of each episode, by episode index.
    :ivar episode_datasets: Source dataset of each episode, by episode index.
    :ivar finetune: Echo of the fine-tuning settings.

    .. versionadded:: 0.1.0
    """

    datasets: dict[str, DatasetAccuracy]
    overall_mean: float
    episodes: int
    finetune_forwards: int
    eval_forwards: int
    episode_accuracies: list[float]
    episode_datasets: list[str]
    finetune: dict[str, Any] = field(default_factory=dict)
    finetune_wall_time_s: float = 0.0

    @classmethod
    def from_results(cls, results: Sequence[EpisodeResult], finetune: FinetuneConfig) -> EvalReport:
        ordered = sorted(results, key=lambda r: r.index)
        by_dataset: dict[str, list[float]] = {}
        for result in ordered:
            by_dataset.setdefault(result.dataset, []).append(result.accuracy)
        datasets = {
            name: DatasetAccuracy(name, float(np.mean(accs)), half_width(accs), len(accs))
            for name, accs in sorted(by_dataset.items())
        }
        overall = float(np.mean([d.mean for d in datasets.values()])) if datasets else 0.0
        return cls(
            datasets=datasets,
            overall_mean=overall,
            episodes=len(ordered),
            finetune_forwards=sum(r.finetune_forwards for r in ordered),
            eval_forwards=sum(r.eval_forwards for r in ordered),
            episode_accuracies=[r.accuracy for r in ordered],
            episode_datasets=[r.dataset for r in ordered],
            finetune=finetune.to_dict(),
            finetune_wall_time_s=sum(r.finetune_seconds for r in ordered),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": REPORT_VERSION,
            "kind": "eval_report",
            "datasets": {
                name: {"mean": d.mean, "half_width": d.half_width, "episodes": d.episodes}
                for name, d in self.datasets.items()
            },
            "overall_mean": self.overall_mean,
            "episodes": self.episodes,
            "finetune_forwards": self.finetune_forwards,
            "eval_forwards": self.eval_forwards,
            "episode_accuracies": self.episode_accuracies,
            "episode_datasets": self.episode_datasets,
            "finetune": self.finetune,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EvalReport:
        try:
            if data.get("kind") != "eval_report":
                raise DataError(f"not an evaluation report (kind={data.get('kind')!r})")
            return cls(
                datasets={
                    name: DatasetAccuracy(
                        name, float(d["mean"]), float(d["half_width"]), int(d["episodes"])
                    )
                    for name, d in data["datasets"].items()
                },
                overall_mean=float(data["overall_mean"]),
                episodes=int(data["episodes"]),
                finetune_forwards=int(data["finetune_forwards"]),
                eval_forwards=int(data["eval_forwards"]),
                episode_accuracies=[float(a) for a in data["episode_accuracies"]],
                episode_datasets=[str(d) for d in data["episode_datasets"]],
                finetune=dict(data.get("finetune", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed evaluation report: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        try:
            path.write_text(self.to_json(), encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write report {path}: {exc}") from exc
        return path

    @classmethod
    def read(cls, path: str | Path) -> EvalReport:
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read report {path}: {exc}") from exc

    def render(self, title: str = "Test accuracy (%)") -> str:
        """Aligned text table: one row per dataset plus the overall mean."""
        table = Table(title=title)
        table.add_column("Dataset")
        table.add_column("Accuracy", justify="right")
        table.add_column("95% CI ±", justify="right")
        table.add_column("Episodes", justify="right")
        for d in self.datasets.values():
            table.add_row(
                d.dataset, f"{100 * d.mean:.2f}", f"{100 * d.half_width:.2f}", str(d.episodes)
            )
        table.add_row("Mean", f"{100 * self.overall_mean:.2f}", "", str(self.episodes))
        footer = (
            f"fine-tune forwards: {self.finetune_forwards}, eval forwards: {self.eval_forwards}, "
            f"fine-tune wall time: {self.finetune_wall_time_s:.2f}s"
        )
        return render_rich(table) + footer + "\n"


def render_rich(renderable: Any, width: int = 100) -> str:
    """Render a rich object to plain text."""
    console = Console(record=True, width=width, file=io.StringIO(), color_system=None)
    console.print(renderable)
    return console.export_text()


@dataclass(frozen=True)
class PairedComparison:
    """Accuracy difference between two reports over the same episodes."""

    mean_delta: float
    half_width: float
    episodes: int

    @property
    def significant(self) -> bool:
        """Whether the 95% interval excludes zero."""
        return abs(self.mean_delta) > self.half_width

    def __str__(self) -> str:
        return (
            f"delta {100 * self.mean_delta:+.2f} ± {100 * self.half_width:.2f} points over "
            f"{self.episodes} paired episodes"
        )


def compare_reports(baseline: EvalReport, treatment: EvalReport) -> PairedComparison:
    """Paired per-episode accuracy difference ``treatment - baseline``.

    :raises ConfigurationError: If the reports do not cover the same episode stream.
    """
    if baseline.episode_datasets != treatment.episode_datasets:
        raise ConfigurationError("reports were not produced from the same episode stream")
    deltas = np.array(treatment.episode_accuracies) - np.array(baseline.episode_accuracies)
    if deltas.size == 0:
        raise ConfigurationError("reports contain no episodes")
    return PairedComparison(float(deltas.mean()), half_width(list(deltas)), int(deltas.size))


def evaluate_episode(
    snapshot: bytes,
    corpus: Corpus,
    episode: Episode,
    index: int,
    ft: FinetuneConfig,
    proto_cfg: ProtoConfig,
) -> EpisodeResult:
    """Evaluate one episode on a fresh copy restored from ``snapshot``."""
    local = ModelState.restore(snapshot)
    support = [(corpus.features(record), label) for record, label in episode.support]
    rng = np.random.default_rng([ft.seed, index])

    started = time.perf_counter()
    with count_forwards(local) as tuning:
        run_finetune(local, support, ft, rng, proto_cfg)
    elapsed = time.perf_counter() - started

    with count_forwards(local) as scoring:
        support_embeddings = stack([local.embed(x) for x, _ in support])
        query_embeddings = stack(
            [local.embed(corpus.features(record)) for record, _ in episode.query]
        )
    protos = compute_prototypes(support_embeddings, [label for _, label in episode.support])
    logits = classify(query_embeddings, protos, proto_cfg)
    targets = np.array([label for _, label in episode.query])
    accuracy = float(np.mean(predictions(logits) == targets))
    log.debug("episode %d (%s): accuracy %.3f", index, episode.dataset, accuracy)
    return EpisodeResult(index, episode.dataset, accuracy, tuning.count, scoring.count, elapsed)


def evaluate(
    model: ModelState,
    corpus: Corpus,
    stream: Sequence[Episode],
    ft: FinetuneConfig,
    proto_cfg: ProtoConfig | None = None,
    jobs: int = 1,
    snapshot: bytes | None = None,
) -> EvalReport:
    """Evaluate ``model`` on every episode of ``stream``.

    ``model`` itself is never modified.

    :param jobs: Episodes evaluated concurrently, each on its own restored copy.
    :param snapshot: Pre-computed ``model.snapshot()``, to avoid re-serializing per call.
    :raises FinetuneConfigError: If variant B is requested for episodes with K < 2.

    .. versionadded:: 0.1.0
    """
    if jobs < 1:
        raise ConfigurationError(f"jobs must be at least 1, got {jobs}")
    proto_cfg = proto_cfg or ProtoConfig()
    for episode in stream:
        ft.validate_for(len(episode.support) // episode.n_way)
    blob = snapshot if snapshot is not None else model.snapshot()

    if jobs == 1:
        results = [
            evaluate_episode(blob, corpus, ep, i, ft, proto_cfg) for i, ep in enumerate(stream)
        ]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(evaluate_episode, blob, corpus, ep, i, ft, proto_cfg)
                for i, ep in enumerate(stream)
            ]
            results = [f.result() for f in futures]

    report = EvalReport.from_results(results, ft)
    log.info(
        "Evaluated %d episodes (fine-tune %s, %d steps): mean accuracy %.2f%%",
        report.episodes,
        ft.variant.value,
        ft.steps,
        100 * report.overall_mean,
    )
    return report
