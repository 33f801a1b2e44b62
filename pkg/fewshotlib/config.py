"""Run configuration: one JSON document for every command.

A :class:`RunConfig` aggregates the encoder, extractor, episode, training, fine-tuning,
classifier, synthetic-corpus, evaluation and path settings plus the root ``seed``. It is
assembled from four layers, lowest precedence first:

1. dataclass defaults;
2. JSON from the ``FEWSHOTLIB_CONFIG_JSON`` environment variable;
3. a JSON config file (``--config``);
4. command-line flags, given as dotted keys such as ``train.lr``.

Unknown sections or keys are rejected with a :class:`ConfigurationError` naming the dotted
key, before any compute starts. :meth:`RunConfig.to_dict` is the config echo embedded in
checkpoints and reports; feeding it back reproduces the run.

Environment Variables:
    FEWSHOTLIB_CONFIG_JSON (str): JSON object merged over the defaults.

Example:
    Layer a file and two overrides::

        from fewshotlib.config import load_run_config

        cfg = load_run_config("run.json", {"train.lr": 1e-3, "extractor.kind": "glu"})
        model_cfg = cfg.model_config(input_channels=40, num_datasets=2)

.. versionadded:: 0.1.0
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Mapping

from fewshotlib.episodes import EpisodeSpec, Sampling, Split
from fewshotlib.evaluation.finetune import FinetuneConfig, FinetuneVariant
from fewshotlib.evaluation.sweep import SweepGrid
from fewshotlib.exceptions import ConfigurationError
from fewshotlib.features import SpecAugmentConfig
from fewshotlib.model import EncoderConfig, ExtractorConfig, ModelConfig
from fewshotlib.numerics import substream
from fewshotlib.protonet import ProtoConfig
from fewshotlib.training import TrainConfig

__all__ = ["RunConfig", "load_run_config", "substream", "CONFIG_ENV_VAR"]

CONFIG_ENV_VAR = "FEWSHOTLIB_CONFIG_JSON"


@dataclass(frozen=True)
class EncoderSection:
    hidden_channels: int = 64
    num_layers: int = 3
    kernel_width: int = 5
    full_width: bool = False


@dataclass(frozen=True)
class EpisodeSection:
    n_way: int = 4
    k_shot: int = 5
    query_per_class: int = 12
    sampling: Sampling = Sampling.WITHIN


@dataclass(frozen=True)
class TrainSection:
    probe_epochs: int = 5
    batches_per_epoch: int = 1000
    accumulation: int = 20
    lr: float = 1e-4
    max_epochs: int = 10
    patience: int = 2
    validation_episodes: int = 50


@dataclass(frozen=True)
class DannSection:
    enabled: bool = False
    grl_lambda: float = 0.01


@dataclass(frozen=True)
class SynthSection:
    classes: int = 4
    per_class: int = 30
    datasets: int = 2
    channels: int = 40
    separation: float = 1.5
    noise: float = 1.0
    shift_scale: float = 1.0
    min_frames: int = 20
    max_frames: int = 60
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    heldout: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class EvaluationSection:
    episodes: int = 100
    split: Split = Split.TEST
    jobs: int = 1
    seed_offset: int = 20_000


@dataclass(frozen=True)
class FeaturesSection:
    n_mels: int = 40
    max_duration_s: float = 9.375


@dataclass(frozen=True)
class SweepSection:
    variants: tuple[str, ...] = ("a", "b")
    steps: tuple[int, ...] = (0, 1, 3, 5, 10, 15, 20, 25)
    lrs: tuple[float, ...] = (1e-3, 1e-4, 1e-5, 1e-6)
    support_sizes: tuple[int, ...] = (1, 2, 3, 4)
    split: Split = Split.VALIDATION


@dataclass(frozen=True)
class PathsSection:
    manifest: str | None = None
    features_root: str | None = None
    checkpoint: str | None = None
    out_dir: str | None = None
    train_log: str | None = None
    report: str | None = None
    table: str | None = None


_SECTIONS: dict[str, type] = {
    "encoder": EncoderSection,
    "extractor": ExtractorConfig,
    "episode": EpisodeSection,
    "train": TrainSection,
    "dann": DannSection,
    "finetune": FinetuneConfig,
    "proto": ProtoConfig,
    "synth": SynthSection,
    "features": FeaturesSection,
    "evaluation": EvaluationSection,
    "sweep": SweepSection,
    "paths": PathsSection,
}


def _build_section(name: str, cls: type, raw: Any) -> Any:
    if not isinstance(raw, Mapping):
        raise ConfigurationError(
            f"config section {name!r} must be an object, got {type(raw).__name__}"
        )
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(
            f"unknown config key {name}.{unknown[0]} (known: {', '.join(sorted(known))})"
        )
    values = dict(raw)
    if cls is FinetuneConfig and isinstance(values.get("augment"), Mapping):
        augment_known = {f.name for f in fields(SpecAugmentConfig)}
        bad = sorted(set(values["augment"]) - augment_known)
        if bad:
            raise ConfigurationError(f"unknown config key {name}.augment.{bad[0]}")
    for key in ("split_fractions", "variants", "steps", "lrs", "support_sizes"):
        if key in values and isinstance(values[key], (list, tuple)):
            values[key] = tuple(values[key])
    try:
        if cls is FinetuneConfig and isinstance(values.get("augment"), Mapping):
            values["augment"] = SpecAugmentConfig(**values["augment"])
        section = cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config section {name!r}: {exc}") from exc
    for enum_field, enum_cls in (("sampling", Sampling), ("split", Split)):
        if enum_field in values:
            try:
                object.__setattr__(section, enum_field, enum_cls(values[enum_field]))
            except ValueError as exc:
                raise ConfigurationError(
                    f"invalid {name}.{enum_field}: {values[enum_field]!r}"
                ) from exc
    return section


def _echo(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: _echo(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_echo(v) for v in value]
    if isinstance(value, dict):
        return {k: _echo(v) for k, v in value.items()}
    if hasattr(value, "value") and isinstance(value, str):
        return value.value
    return value


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration document of one command.

    .. versionadded:: 0.1.0
    """

    seed: int = 0
    encoder: EncoderSection = field(default_factory=EncoderSection)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    episode: EpisodeSection = field(default_factory=EpisodeSection)
    train: TrainSection = field(default_factory=TrainSection)
    dann: DannSection = field(default_factory=DannSection)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    proto: ProtoConfig = field(default_factory=ProtoConfig)
    synth: SynthSection = field(default_factory=SynthSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {self.seed!r}")
        # eagerly build the derived configs so invalid values fail before any compute
        self.episode_spec()
        self.train_config()
        self.sweep_grid()
        if self.evaluation.jobs < 1:
            raise ConfigurationError(
                f"evaluation.jobs must be at least 1, got {self.evaluation.jobs}"
            )
        if self.evaluation.episodes < 1:
            raise ConfigurationError(
                f"evaluation.episodes must be at least 1, got {self.evaluation.episodes}"
            )
        for key, split in self.synth.heldout.items():
            if not str(key).isdigit() or split not in (Split.VALIDATION.value, Split.TEST.value):
                raise ConfigurationError(
                    "synth.heldout maps dataset indices to 'validation' or 'test', "
                    f"got {key!r}: {split!r}"
                )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        """Strictly parse a config document.

        :raises ConfigurationError: On unknown sections or keys, or invalid values.
        """
        if not isinstance(data, Mapping):
            raise ConfigurationError("config document must be a JSON object")
        unknown = sorted(set(data) - set(_SECTIONS) - {"seed"})
        if unknown:
            raise ConfigurationError(f"unknown config section {unknown[0]!r}")
        sections = {
            name: _build_section(name, cls_, data[name])
            for name, cls_ in _SECTIONS.items()
            if name in data
        }
        return cls(seed=data.get("seed", 0), **sections)

    def to_dict(self) -> dict[str, Any]:
        return {"seed": self.seed, **{name: _echo(getattr(self, name)) for name in _SECTIONS}}

    def episode_spec(self, split: Split = Split.TRAIN, seed: int | None = None) -> EpisodeSpec:
        return EpisodeSpec(
            n_way=self.episode.n_way,
            k_shot=self.episode.k_shot,
            query_per_class=self.episode.query_per_class,
            sampling=self.episode.sampling,
            split=split,
            seed=self.seed if seed is None else seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            **asdict(self.train),
            episode=self.episode_spec(Split.TRAIN),
            dann_enabled=self.dann.enabled,
            grl_lambda=self.dann.grl_lambda,
            seed=self.seed,
        )

    def model_config(self, input_channels: int, num_datasets: int) -> ModelConfig:
        if self.encoder.full_width:
            encoder = EncoderConfig.full_width(input_channels)
        else:
            encoder = EncoderConfig(
                input_channels=input_channels,
                hidden_channels=self.encoder.hidden_channels,
                num_layers=self.encoder.num_layers,
                kernel_width=self.encoder.kernel_width,
            )
        return ModelConfig(
            encoder=encoder,
            extractor=self.extractor,
            dann_enabled=self.dann.enabled,
            num_datasets=num_datasets if self.dann.enabled else 0,
            grl_lambda=self.dann.grl_lambda,
        )

    def sweep_grid(self) -> SweepGrid:
        try:
            variants = tuple(FinetuneVariant(v) for v in self.sweep.variants)
        except ValueError as exc:
            raise ConfigurationError(
                f"sweep.variants must name a and/or b, got {self.sweep.variants}"
            ) from exc
        return SweepGrid(
            variants=variants,
            steps=tuple(int(s) for s in self.sweep.steps),
            lrs=tuple(float(lr) for lr in self.sweep.lrs),
            support_sizes=tuple(int(s) for s in self.sweep.support_sizes),
        )

    def eval_spec(self, split: Split | None = None) -> EpisodeSpec:
        seed = self.seed + self.evaluation.seed_offset
        return self.episode_spec(split or self.evaluation.split, seed=seed)


def _deep_merge(base: dict[str, Any], overlay: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _deep_merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def _expand_dotted(overrides: Mapping[str, Any]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for dotted, value in overrides.items():
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def _read_json(text: str, source: str) -> dict[str, Any]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source} must hold a JSON object")
    return data


def load_run_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Assemble a :class:`RunConfig` from defaults, environment, file and overrides.

    :param path: Optional JSON config file.
    :param overrides: Dotted-key values that win over every other layer.
    :param environ: Environment mapping, ``os.environ`` by default.
    :raises ConfigurationError: If any layer is malformed or the result is invalid.
    """
    environ = os.environ if environ is None else environ
    document: dict[str, Any] = {}
    env_json = environ.get(CONFIG_ENV_VAR)
    if env_json:
        document = _deep_merge(document, _read_json(env_json, f"${CONFIG_ENV_VAR}"))
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
        document = _deep_merge(document, _read_json(text, str(path)))
    if overrides:
        document = _deep_merge(document, _expand_dotted(overrides))
    return RunConfig.from_dict(document)
