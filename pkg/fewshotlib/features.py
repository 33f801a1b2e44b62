"""Feature ingestion, augmentation and synthetic corpora.

Utterances enter the library as frame-feature sequences: a T×F matrix of real values,
T time frames by F channels. They come either from precomputed feature files or from
16 kHz mono PCM16 WAV files passed through a log-mel frontend.

Functions:
    log_mel: Magnitude STFT, mel filterbank and log compression of a PCM signal.
    read_wav: Read a PCM16 mono 16 kHz WAV file.
    read_feature_file / write_feature_file: Binary ``FSEQ`` feature store files.
    filter_by_length: Drop records longer than a duration cap, never truncating.
    spec_augment: Time and frequency masking.
    generate_synthetic_corpus: Gaussian frame corpora with per-dataset domain shift.

Classes:
    FeatureSequence: One utterance's T×F frame matrix.
    SpecAugmentConfig: Mask counts, widths and fill value.
    SynthClassSpec: Per-class generator parameters.
    FeatureStore: Loads (and caches) the feature sequence behind a record.
    Corpus: Manifest records paired with their feature store.
    LengthError / FeatureFormatError: Raised for short signals and malformed files.

Feature File Format:
    ``FSEQ`` files are a 16-byte little-endian header (magic ``b"FSEQ"``, version u32,
    T u32, F u32) followed by T·F float32 values in row-major order.

Example:
    Turn a WAV file into a masked feature sequence::

        import numpy as np
        from fewshotlib.features import SpecAugmentConfig, log_mel, read_wav, spec_augment

        seq = log_mel(read_wav("clip.wav"), n_mels=40)
        masked = spec_augment(seq, SpecAugmentConfig(), np.random.default_rng(0))

.. versionadded:: 0.1.0
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import librosa
import numpy as np
import soundfile as sf

from fewshotlib import log
from fewshotlib.episodes import SampleRecord, Split
from fewshotlib.exceptions import DataError, NumericalError

SAMPLE_RATE_HZ = 16000
DEFAULT_HOP = 160
MAX_DURATION_S = 9.375
LOG_FLOOR = 1e-6

FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1
_FSEQ_HEADER = struct.Struct("<4sIII")


class LengthError(DataError):
    """Raised when a signal is too short to yield a single analysis frame."""


class FeatureFormatError(DataError):
    """Raised when a feature or audio file is unreadable or does not match its format.

    .. versionadded:: 0.1.0
    """


@dataclass(frozen=True)
class FeatureSequence:
    """A T×F frame matrix for one utterance.

    :ivar frames: float64 array of shape (T, F) with T ≥ 1.
    :ivar sample_rate_hz: Source sample rate when derived from audio.
    """

    frames: np.ndarray
    sample_rate_hz: int | None = None

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise NumericalError(
                f"feature sequence must be T×F with T, F ≥ 1, got shape {frames.shape}"
            )
        if not np.all(np.isfinite(frames)):
            raise NumericalError("feature sequence contains NaN or Inf")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_channels(self) -> int:
        return self.frames.shape[1]


def log_mel(
    pcm: np.ndarray,
    n_mels: int = 40,
    frame_length: int = 400,
    hop: int = DEFAULT_HOP,
    sample_rate: int = SAMPLE_RATE_HZ,
) -> FeatureSequence:
    """Compute log-mel features of a mono signal.

    Frames are not centered: ``T = 1 + (len(pcm) - frame_length) // hop``. Each frame is
    Hann-windowed, its magnitude spectrum projected onto ``n_mels`` mel bands and
    compressed with ``log(x + 1e-6)``.

    :param pcm: Mono samples in [-1, 1].
    :raises LengthError: If fewer than ``frame_length`` samples are given.
    :raises ValueError: If ``n_mels`` is not positive.
    """
    if n_mels < 1:
        raise ValueError(f"n_mels must be at least 1, got {n_mels}")
    signal = np.asarray(pcm, dtype=np.float64).reshape(-1)
    if signal.size < frame_length:
        raise LengthError(
            f"signal of {signal.size} samples is shorter than one {frame_length}-sample frame"
        )
    spectrum = np.abs(
        librosa.stft(
            signal,
            n_fft=frame_length,
            hop_length=hop,
            win_length=frame_length,
            window="hann",
            center=False,
        )
    )
    mel_basis = librosa.filters.mel(sr=sample_rate, n_fft=frame_length, n_mels=n_mels)
    frames = np.log(mel_basis @ spectrum + LOG_FLOOR).T
    return FeatureSequence(frames=frames, sample_rate_hz=sample_rate)


def read_wav(path: str | Path) -> np.ndarray:
    """Read a PCM16 mono 16 kHz WAV file as float samples in [-1, 1].

    :raises FeatureFormatError: If the file is unreadable, not mono, not 16 kHz or not PCM16.
    """
    path = Path(path)
    try:
        info = sf.info(str(path))
        samples, rate = sf.read(str(path), dtype="int16", always_2d=True)
    except (RuntimeError, sf.LibsndfileError) as exc:
        raise FeatureFormatError(f"cannot read WAV file {path}: {exc}") from exc
    if info.subtype != "PCM_16":
        raise FeatureFormatError(f"{path}: expected PCM16 samples, got {info.subtype}")
    if rate != SAMPLE_RATE_HZ:
        raise FeatureFormatError(
            f"{path}: expected {SAMPLE_RATE_HZ} Hz, got {rate} Hz (resampling is not supported)"
        )
    if samples.shape[1] != 1:
        raise FeatureFormatError(f"{path}: expected mono audio, got {samples.shape[1]} channels")
    return samples[:, 0].astype(np.float64) / 32768.0


def write_feature_file(path: str | Path, sequence: FeatureSequence) -> Path:
    """Write a sequence as an ``FSEQ`` file (values stored as float32)."""
    path = Path(path)
    frames, channels = sequence.frames.shape
    payload = sequence.frames.astype("<f4").tobytes(order="C")
    path.write_bytes(_FSEQ_HEADER.pack(FSEQ_MAGIC, FSEQ_VERSION, frames, channels) + payload)
    return path


def read_feature_file(path: str | Path) -> FeatureSequence:
    """Read an ``FSEQ`` file.

    :raises FeatureFormatError: On a bad magic, unknown version, zero extents or a payload
        size that does not match the header.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FeatureFormatError(f"cannot read feature file {path}: {exc}") from exc
    if len(blob) < _FSEQ_HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, frames, channels = _FSEQ_HEADER.unpack_from(blob)
    if magic != FSEQ_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}, expected {FSEQ_MAGIC!r}")
    if version != FSEQ_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if frames < 1 or channels < 1:
        raise FeatureFormatError(f"{path}: invalid extents T={frames}, F={channels}")
    expected = _FSEQ_HEADER.size + 4 * frames * channels
    if len(blob) != expected:
        raise FeatureFormatError(f"{path}: payload is {len(blob)} bytes, header implies {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=_FSEQ_HEADER.size).reshape(frames, channels)
    return FeatureSequence(frames=values.astype(np.float64))


def frames_to_seconds(
    num_frames: int, hop: int = DEFAULT_HOP, sample_rate: int = SAMPLE_RATE_HZ
) -> float:
    """Duration covered by ``num_frames`` hops."""
    return num_frames * hop / sample_rate


def max_frames(
    max_duration_s: float = MAX_DURATION_S,
    hop: int = DEFAULT_HOP,
    sample_rate: int = SAMPLE_RATE_HZ,
) -> int:
    """Largest frame count whose duration stays within ``max_duration_s``."""
    return int(max_duration_s * sample_rate // hop)


def filter_by_length(
    records: Sequence[SampleRecord],
    max_duration_s: float = MAX_DURATION_S,
    store: FeatureStore | None = None,
) -> list[SampleRecord]:
    """Keep records no longer than ``max_duration_s``; longer ones are dropped, not truncated.

    The default cap is 9.375 s, i.e. 150,000 samples at 16 kHz. Given a ``store``, a record
    is also dropped when its feature sequence has more than ``max_frames(max_duration_s)``
    frames, whatever its manifest duration says.
    """
    frame_cap = max_frames(max_duration_s)
    kept = [
        r
        for r in records
        if r.duration_s <= max_duration_s
        and (store is None or store.get(r).num_frames <= frame_cap)
    ]
    if len(kept) != len(records):
        removed = len(records) - len(kept)
        log.info(
            "Length filter removed %d of %d records over %.3f s",
            removed,
            len(records),
            max_duration_s,
        )
    return kept


@dataclass(frozen=True)
class SpecAugmentConfig:
    """SpecAugment mask counts and maximum widths.

    :ivar num_time_masks: Time masks per call.
    :ivar max_time_width: Maximum time-mask width in frames.
    :ivar num_freq_masks: Frequency masks per call.
    :ivar max_freq_width: Maximum frequency-mask width in channels.
    :ivar mask_value: Fill value of masked cells.
    """

    num_time_masks: int = 2
    max_time_width: int = 10
    num_freq_masks: int = 2
    max_freq_width: int = 8
    mask_value: float = 0.0

    def __post_init__(self) -> None:
        for name in ("num_time_masks", "max_time_width", "num_freq_masks", "max_freq_width"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")

    @classmethod
    def disabled(cls) -> SpecAugmentConfig:
        return cls(num_time_masks=0, num_freq_masks=0)


def spec_augment(
    x: FeatureSequence, cfg: SpecAugmentConfig, rng: np.random.Generator
) -> FeatureSequence:
    """Mask random time and frequency bands of a copy of ``x``.

    Each mask draws a width uniformly from ``[0, max_width]`` (clamped to the axis extent)
    and a start uniformly from ``[0, extent - width]``. The input is left untouched.
    """
    frames = x.frames.copy()
    length, channels = frames.shape
    for _ in range(cfg.num_time_masks):
        width = int(rng.integers(0, min(cfg.max_time_width, length) + 1))
        start = int(rng.integers(0, length - width + 1))
        frames[start:start + width, :] = cfg.mask_value
    for _ in range(cfg.num_freq_masks):
        width = int(rng.integers(0, min(cfg.max_freq_width, channels) + 1))
        start = int(rng.integers(0, channels - width + 1))
        frames[:, start:start + width] = cfg.mask_value
    return FeatureSequence(frames=frames, sample_rate_hz=x.sample_rate_hz)


@dataclass(frozen=True)
class SynthClassSpec:
    """Generator parameters of one synthetic class.

    Dataset ``d`` adds ``d * dataset_shift`` to every frame, so dataset 0 is unshifted and
    each further dataset drifts further from it.

    :ivar class_id: Class label.
    :ivar channel_means: Per-channel mean (F-vector).
    :ivar channel_stddevs: Per-channel standard deviation (F-vector, all > 0).
    :ivar length_range: Inclusive ``(T_min, T_max)`` frame-count range.
    :ivar dataset_shift: Per-dataset additive shift (F-vector).
    """

    class_id: str
    channel_means: np.ndarray
    channel_stddevs: np.ndarray
    length_range: tuple[int, int]
    dataset_shift: np.ndarray

    def __post_init__(self) -> None:
        means = np.asarray(self.channel_means, dtype=np.float64)
        stddevs = np.asarray(self.channel_stddevs, dtype=np.float64)
        shift = np.asarray(self.dataset_shift, dtype=np.float64)
        if means.ndim != 1 or stddevs.shape != means.shape or shift.shape != means.shape:
            raise ValueError(
                f"class {self.class_id}: means, stddevs and shift must be equal-length vectors"
            )
        if np.any(stddevs <= 0):
            raise ValueError(f"class {self.class_id}: stddevs must be positive")
        t_min, t_max = self.length_range
        if t_min < 1 or t_max < t_min:
            raise ValueError(f"class {self.class_id}: invalid length range {self.length_range}")
        object.__setattr__(self, "channel_means", means)
        object.__setattr__(self, "channel_stddevs", stddevs)
        object.__setattr__(self, "dataset_shift", shift)


class FeatureStore:
    """Resolve records to feature sequences, from disk or from memory.

    ``.wav`` paths go through :func:`read_wav` and :func:`log_mel`; any other path is read
    as an ``FSEQ`` file. Loaded sequences are cached by record id.

    .. versionadded:: 0.1.0
    """

    def __init__(self, root: str | Path | None = None, n_mels: int = 40) -> None:
        self.root = Path(root) if root is not None else None
        self.n_mels = n_mels
        self._cache: dict[str, FeatureSequence] = {}

    @classmethod
    def from_memory(cls, sequences: Mapping[str, FeatureSequence]) -> FeatureStore:
        store = cls()
        store._cache.update(sequences)
        return store

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._cache

    def get(self, record: SampleRecord) -> FeatureSequence:
        cached = self._cache.get(record.id)
        if cached is not None:
            return cached
        if self.root is None:
            raise FeatureFormatError(
                f"record {record.id!r} is not in memory and the store has no root"
            )
        path = self.root / record.path
        if path.suffix.lower() == ".wav":
            sequence = log_mel(read_wav(path), n_mels=self.n_mels)
        else:
            sequence = read_feature_file(path)
        self._cache[record.id] = sequence
        return sequence


@dataclass
class Corpus:
    """Manifest records together with the store that resolves their features."""

    records: list[SampleRecord]
    store: FeatureStore

    def features(self, record: SampleRecord) -> FeatureSequence:
        return self.store.get(record)

    @property
    def num_channels(self) -> int:
        if not self.records:
            raise DataError("corpus has no records")
        return self.features(self.records[0]).num_channels


@dataclass
class SyntheticCorpus:
    """Output of :func:`generate_synthetic_corpus`."""

    records: list[SampleRecord]
    sequences: dict[str, FeatureSequence] = field(default_factory=dict)

    def as_corpus(self) -> Corpus:
        return Corpus(records=list(self.records), store=FeatureStore.from_memory(self.sequences))


def _split_for(position: int, count: int, fractions: tuple[float, float, float]) -> Split:
    train_end = round(count * fractions[0])
    validation_end = train_end + round(count * fractions[1])
    if position < train_end:
        return Split.TRAIN
    if position < validation_end:
        return Split.VALIDATION
    return Split.TEST


def generate_synthetic_corpus(
    specs: Sequence[SynthClassSpec],
    per_class: int,
    num_datasets: int,
    rng: np.random.Generator,
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    heldout: Mapping[int, Split] | None = None,
    hop: int = DEFAULT_HOP,
) -> SyntheticCorpus:
    """Generate Gaussian frame sequences for every (dataset, class, sample).

    Every frame of a sample is drawn i.i.d. from ``N(means + d * shift, stddevs²)`` where
    ``d`` is the dataset index. Values are rounded to float32 so feature files reproduce
    them exactly. Within a dataset each class is split by ``split_fractions`` after a random
    shuffle; datasets listed in ``heldout`` go entirely to the given split.

    :param specs: One spec per class; all must share the channel count.
    :param per_class: Samples per class per dataset (≥ 1).
    :param num_datasets: Number of synthetic datasets (≥ 1).
    :param rng: Source of all randomness; equal seeds give bit-identical corpora.
    :return: Records (ids ``synth{d}-{class}-{i:04d}``) and their sequences.

    Example:
        4 classes × 30 samples × 2 datasets gives 240 records::

            corpus = generate_synthetic_corpus(specs, per_class=30, num_datasets=2, rng=rng)
            assert len(corpus.records) == 240

    .. versionadded:: 0.1.0
    """
    if per_class < 1:
        raise ValueError(f"per_class must be at least 1, got {per_class}")
    if num_datasets < 1:
        raise ValueError(f"num_datasets must be at least 1, got {num_datasets}")
    if not specs:
        raise ValueError("at least one class spec is required")
    channels = {spec.channel_means.shape[0] for spec in specs}
    if len(channels) != 1:
        raise ValueError(f"class specs disagree on channel count: {sorted(channels)}")
    heldout = dict(heldout or {})

    corpus = SyntheticCorpus(records=[])
    for d in range(num_datasets):
        dataset = f"synth{d}"
        for spec in specs:
            positions = rng.permutation(per_class)
            for i in range(per_class):
                t_min, t_max = spec.length_range
                length = int(rng.integers(t_min, t_max + 1))
                noise = rng.standard_normal((length, spec.channel_means.shape[0]))
                frames = spec.channel_means + d * spec.dataset_shift + spec.channel_stddevs * noise
                sequence = FeatureSequence(frames=frames.astype(np.float32).astype(np.float64))
                record_id = f"{dataset}-{spec.class_id}-{i:04d}"
                split = heldout.get(d) or _split_for(int(positions[i]), per_class, split_fractions)
                corpus.records.append(
                    SampleRecord(
                        id=record_id,
                        path=f"features/{record_id}.fseq",
                        label=spec.class_id,
                        dataset=dataset,
                        language=f"lang{d}",
                        split=split,
                        duration_s=frames_to_seconds(length, hop=hop),
                    )
                )
                corpus.sequences[record_id] = sequence
    log.debug("Generated %d synthetic records over %d datasets", len(corpus.records), num_datasets)
    return corpus


def default_class_specs(
    num_classes: int,
    channels: int,
    rng: np.random.Generator,
    separation: float = 1.5,
    noise: float = 1.0,
    shift_scale: float = 1.0,
    length_range: tuple[int, int] = (20, 60),
) -> list[SynthClassSpec]:
    """Random class specs: means ~ N(0, separation²), unit-scaled noise, a shared random shift."""
    shift = rng.normal(0.0, shift_scale, size=channels)
    return [
        SynthClassSpec(
            class_id=f"c{c}",
            channel_means=rng.normal(0.0, separation, size=channels),
            channel_stddevs=np.full(channels, noise),
            length_range=length_range,
            dataset_shift=shift,
        )
        for c in range(num_classes)
    ]
