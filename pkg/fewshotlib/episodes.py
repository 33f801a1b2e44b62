"""Corpus manifests, split management and episodic task sampling.

A manifest is a UTF-8 JSON array of sample records. Each record names one utterance, its
class label, the dataset (corpus) it came from, a language tag, the split it belongs to and
its duration. Splits are fixed per record, so train, validation and test never share samples.

Episodes are N-way K-shot classification problems drawn from one split. Two sampling modes
are supported:

    - ``within``: one dataset is drawn uniformly among those able to host the episode, then
      N of its classes; every sample of the episode comes from that dataset.
    - ``free``: classes are drawn across all datasets, a class being a (dataset, label) pair,
      so one episode may mix corpora.

Evaluation streams always use within-dataset sampling.

Classes:
    Split: Closed vocabulary of manifest splits.
    Sampling: Episode sampling modes.
    SampleRecord: One manifest entry.
    EpisodeSpec: Shape and sampling mode of an episode.
    Episode: Support and query sets with episode-local labels.
    ManifestError: Raised for malformed manifests.
    FeasibilityError: Raised when a corpus cannot host the requested episodes.

Example:
    Sample a 4-way 5-shot training episode::

        from fewshotlib.episodes import EpisodeSpec, load_manifest, sample_episode

        records = load_manifest("corpus/manifest.json")
        spec = EpisodeSpec(n_way=4, k_shot=5, query_per_class=12, seed=3)
        episode = sample_episode(records, spec)
        print(len(episode.support), len(episode.query))  # 20 48

.. versionadded:: 0.1.0
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fewshotlib import log
from fewshotlib.exceptions import ConfigurationError, DataError


class ManifestError(DataError):
    """Raised when a manifest cannot be parsed or violates its schema.

    The message names the record index (and id, when known) that failed.

    .. versionadded:: 0.1.0
    """


class FeasibilityError(ConfigurationError):
    """Raised when no episode of the requested shape can be drawn from the corpus.

    The message names the binding constraint (split, dataset count, classes, samples).

    .. versionadded:: 0.1.0
    """


class Split(str, Enum):
    """Manifest split a record belongs to."""
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class Sampling(str, Enum):
    """Episode construction mode."""
    FREE = "free"
    WITHIN = "within"


@dataclass(frozen=True)
class SampleRecord:
    """One manifest entry.

    :ivar id: Identifier, unique within a manifest.
    :ivar path: Feature file (``.fseq`` or ``.wav``) relative to the feature root.
    :ivar label: Class name.
    :ivar dataset: Dataset (corpus) identifier.
    :ivar language: Language tag.
    :ivar split: Split the record belongs to.
    :ivar duration_s: Duration of the underlying audio in seconds.
    """

    id: str
    path: str
    label: str
    dataset: str
    language: str
    split: Split
    duration_s: float

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["split"] = self.split.value
        return payload


_RECORD_FIELDS = ("id", "path", "label", "dataset", "language", "split", "duration_s")


@dataclass(frozen=True)
class EpisodeSpec:
    """Shape and sampling mode of an N-way K-shot episode.

    :ivar n_way: Classes per episode (N ≥ 2).
    :ivar k_shot: Support samples per class (K ≥ 1).
    :ivar query_per_class: Query samples per class (Q ≥ 1).
    :ivar sampling: ``within`` or ``free`` dataset sampling.
    :ivar split: Split the episode draws from.
    :ivar seed: Seed for the episode's random draws.
    """

    n_way: int = 4
    k_shot: int = 5
    query_per_class: int = 12
    sampling: Sampling = Sampling.WITHIN
    split: Split = Split.TRAIN
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_way < 2:
            raise ConfigurationError(f"n_way must be at least 2, got {self.n_way}")
        if self.k_shot < 1:
            raise ConfigurationError(f"k_shot must be at least 1, got {self.k_shot}")
        if self.query_per_class < 1:
            raise ConfigurationError(
                f"query_per_class must be at least 1, got {self.query_per_class}"
            )
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        object.__setattr__(self, "split", Split(self.split))


@dataclass(frozen=True)
class Episode:
    """Support and query sets of one task, labeled with episode-local class indices.

    :ivar support: ``(record, label)`` pairs, K per label, grouped by label.
    :ivar query: ``(record, label)`` pairs, Q per label.
    :ivar source_datasets: Datasets the samples were drawn from.
    :ivar class_names: ``(dataset, label)`` of each episode label, indexed by label.
    """

    support: tuple[tuple[SampleRecord, int], ...]
    query: tuple[tuple[SampleRecord, int], ...]
    source_datasets: frozenset[str]
    class_names: tuple[tuple[str, str], ...]

    @property
    def n_way(self) -> int:
        return len(self.class_names)

    @property
    def dataset(self) -> str:
        """Single source dataset, or ``"mixed"`` for free-mode episodes spanning several."""
        if len(self.source_datasets) == 1:
            return next(iter(self.source_datasets))
        return "mixed"


def _parse_record(raw: object, index: int) -> SampleRecord:
    if not isinstance(raw, dict):
        raise ManifestError(f"record {index}: expected an object, got {type(raw).__name__}")
    missing = [name for name in _RECORD_FIELDS if name not in raw]
    if missing:
        raise ManifestError(f"record {index}: missing fields {', '.join(missing)}")
    try:
        split = Split(raw["split"])
    except ValueError as exc:
        raise ManifestError(f"record {index}: unknown split {raw['split']!r}") from exc
    try:
        duration = float(raw["duration_s"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"record {index}: duration_s is not a number") from exc
    if not duration >= 0:
        raise ManifestError(f"record {index}: duration_s must be non-negative")
    return SampleRecord(
        id=str(raw["id"]),
        path=str(raw["path"]),
        label=str(raw["label"]),
        dataset=str(raw["dataset"]),
        language=str(raw["language"]),
        split=split,
        duration_s=duration,
    )


def validate_records(records: Iterable[SampleRecord]) -> list[SampleRecord]:
    """Check id uniqueness; return the records as a list.

    :raises ManifestError: On a duplicate id, naming the id and its index.
    """
    seen: dict[str, int] = {}
    result = list(records)
    for index, record in enumerate(result):
        if record.id in seen:
            raise ManifestError(
                f"record {index}: duplicate id {record.id!r} (first at record {seen[record.id]})"
            )
        seen[record.id] = index
    return result


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Read and validate a manifest file.

    :param path: Manifest JSON path.
    :return: Records in file order.
    :raises ManifestError: On unreadable files, malformed JSON, schema violations or duplicate ids.

    .. versionadded:: 0.1.0
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, list):
        raise ManifestError(f"manifest {path} must be a JSON array of records")
    records = validate_records(_parse_record(raw, i) for i, raw in enumerate(payload))
    log.debug("Loaded %d records from %s", len(records), path)
    return records


def write_manifest(records: Sequence[SampleRecord], path: str | Path) -> Path:
    """Write records as a manifest JSON array (stable key order, trailing newline)."""
    path = Path(path)
    payload = [r.to_dict() for r in validate_records(records)]
    text = json.dumps(payload, indent=2, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def summarize_manifest(records: Sequence[SampleRecord]) -> dict[str, dict]:
    """Count records per dataset, per (dataset, label) and per (dataset, split).

    :return: ``{"datasets": {...}, "classes": {...}, "splits": {...}}`` with nested counts.
    """
    datasets: Counter[str] = Counter()
    classes: dict[str, Counter[str]] = defaultdict(Counter)
    splits: dict[str, Counter[str]] = defaultdict(Counter)
    for record in records:
        datasets[record.dataset] += 1
        classes[record.dataset][record.label] += 1
        splits[record.dataset][record.split.value] += 1
    return {
        "datasets": dict(sorted(datasets.items())),
        "classes": {d: dict(sorted(c.items())) for d, c in sorted(classes.items())},
        "splits": {d: dict(sorted(s.items())) for d, s in sorted(splits.items())},
    }


def dataset_index(records: Sequence[SampleRecord], split: Split = Split.TRAIN) -> dict[str, int]:
    """Dense index over the datasets present in ``split``, in sorted order."""
    names = sorted({r.dataset for r in records if r.split == split})
    return {name: i for i, name in enumerate(names)}


def _class_pools(
    records: Sequence[SampleRecord], split: Split
) -> dict[tuple[str, str], list[SampleRecord]]:
    pools: dict[tuple[str, str], list[SampleRecord]] = defaultdict(list)
    for record in records:
        if record.split == split:
            pools[(record.dataset, record.label)].append(record)
    return dict(sorted(pools.items()))


def eligible_datasets(records: Sequence[SampleRecord], spec: EpisodeSpec) -> list[str]:
    """Datasets with at least N classes holding K + Q samples each in ``spec.split``."""
    need = spec.k_shot + spec.query_per_class
    qualifying: Counter[str] = Counter()
    for (dataset, _), pool in _class_pools(records, spec.split).items():
        if len(pool) >= need:
            qualifying[dataset] += 1
    return sorted(d for d, count in qualifying.items() if count >= spec.n_way)


def sample_episode(
    records: Sequence[SampleRecord], spec: EpisodeSpec, seed: int | None = None
) -> Episode:
    """Draw one episode.

    Classes are drawn without replacement and assigned episode labels in draw order, so
    the class-to-label mapping changes from episode to episode. Each class then contributes
    K support and Q query samples drawn without replacement.

    :param records: Manifest records (any split; only ``spec.split`` is used).
    :param spec: Episode shape, mode and split.
    :param seed: Overrides ``spec.seed`` when given.
    :return: The sampled episode; identical for identical inputs.
    :raises FeasibilityError: If the split cannot host an episode of this shape.

    .. versionadded:: 0.1.0
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    need = spec.k_shot + spec.query_per_class
    pools = _class_pools(records, spec.split)
    if not pools:
        raise FeasibilityError(f"split {spec.split.value!r} has no records")

    if spec.sampling == Sampling.WITHIN:
        datasets = eligible_datasets(records, spec)
        if not datasets:
            raise FeasibilityError(
                f"no dataset in split {spec.split.value!r} has {spec.n_way} classes with "
                f"at least {need} samples each (k_shot={spec.k_shot}, query={spec.query_per_class})"
            )
        chosen_dataset = datasets[int(rng.integers(len(datasets)))]
        candidates = [
            key for key, pool in pools.items() if key[0] == chosen_dataset and len(pool) >= need
        ]
    else:
        candidates = [key for key, pool in pools.items() if len(pool) >= need]
        if len(candidates) < spec.n_way:
            raise FeasibilityError(
                f"split {spec.split.value!r} has {len(candidates)} classes with at least "
                f"{need} samples; free sampling needs {spec.n_way}"
            )

    picks = rng.choice(len(candidates), size=spec.n_way, replace=False)
    class_names = tuple(candidates[int(i)] for i in picks)
    support: list[tuple[SampleRecord, int]] = []
    query: list[tuple[SampleRecord, int]] = []
    for label, key in enumerate(class_names):
        pool = pools[key]
        order = rng.permutation(len(pool))[:need]
        support.extend((pool[int(i)], label) for i in order[:spec.k_shot])
        query.extend((pool[int(i)], label) for i in order[spec.k_shot:])

    return Episode(
        support=tuple(support),
        query=tuple(query),
        source_datasets=frozenset(dataset for dataset, _ in class_names),
        class_names=class_names,
    )


def make_eval_stream(
    records: Sequence[SampleRecord], spec: EpisodeSpec, num_episodes: int
) -> list[Episode]:
    """Build a reproducible evaluation stream of within-dataset episodes.

    Episode ``i`` is drawn with seed ``spec.seed + i``. The sampling mode of ``spec`` is
    ignored: evaluation always samples within one dataset.

    :raises FeasibilityError: If the split cannot host an episode of this shape.

    .. versionadded:: 0.1.0
    """
    if num_episodes < 0:
        raise ConfigurationError(f"num_episodes must be non-negative, got {num_episodes}")
    within = replace(spec, sampling=Sampling.WITHIN)
    if num_episodes and not eligible_datasets(records, within):
        # surfaces the feasibility message once instead of per episode
        sample_episode(records, within)
    return [sample_episode(records, within, seed=spec.seed + i) for i in range(num_episodes)]
