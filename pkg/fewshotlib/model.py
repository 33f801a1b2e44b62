"""The trainable network: sequence encoder, feature-extractor heads and dataset discriminator.

A :class:`ModelState` holds three named parameter groups:

* ``theta_m``: the encoder, a stack of same-padded 1D convolutions with rectifiers that maps
  a T×F feature sequence to a T×H latent sequence;
* ``theta_f``: one feature-extractor head collapsing the latent sequence to a D-vector
  (Mean-FC, Lateral Inhibition or GLU);
* ``theta_d``: the dataset discriminator, a GLU head behind a gradient reversal layer whose
  output size is the number of training datasets. Present only when DANN is enabled.

Each group carries its own Adam state. The whole model serializes to a ``PEPC`` checkpoint
blob that round-trips bit-exactly.

Checkpoint Format:
    Little-endian. ``b"PEPC"``, version u32, JSON header length u32, UTF-8 JSON header
    (model config echo, optimizer scalars, caller extras; keys sorted), tensor count u32,
    then per tensor in name order: name length u16, name, ndim u8, dims u32 each, and the
    float64 payload. Adam moments are stored as ``adam.<group>.<m|v>.<parameter>``.

Example:
    Build a GLU model and embed one sequence::

        import numpy as np
        from fewshotlib.model import EncoderConfig, ModelConfig, ModelState

        config = ModelConfig(encoder=EncoderConfig(input_channels=40))
        model = ModelState.init(config, np.random.default_rng(0))
        embedding = model.embed(np.zeros((50, 40)))
        print(embedding.shape)  # (256,)

.. versionadded:: 0.1.0
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Iterator, Mapping

import numpy as np

from fewshotlib.exceptions import ConfigurationError, DataError
from fewshotlib.features import FeatureSequence
from fewshotlib.numerics import (
    DTYPE,
    AdamState,
    DimensionError,
    ParameterError,
    Value,
    add,
    conv1d,
    dropout,
    elementwise_mul,
    grad_reverse,
    heaviside_ste,
    matmul,
    max_over_time,
    mean_over_time,
    parameter,
    relu,
    sigmoid,
    transpose,
    zero_diagonal,
)

CHECKPOINT_MAGIC = b"PEPC"
CHECKPOINT_VERSION = 1

GROUPS = ("theta_m", "theta_f", "theta_d")


class CheckpointFormatError(DataError):
    """Raised when a checkpoint blob is malformed or does not match the expected config.

    .. versionadded:: 0.1.0
    """


class DannDisabledError(ConfigurationError):
    """Raised when the discriminator is used on a model built without DANN."""


class ExtractorKind(str, Enum):
    """Feature-extractor head variants."""

    MEAN_FC = "mean_fc"
    LATERAL_INHIBITION = "lateral_inhibition"
    GLU = "glu"


def _require_positive(owner: str, **extents: int) -> None:
    for name, value in extents.items():
        if value < 1:
            raise ConfigurationError(f"{owner}.{name} must be at least 1, got {value}")


@dataclass(frozen=True)
class EncoderConfig:
    """Convolutional encoder shape.

    :ivar input_channels: F, channels of the incoming feature sequence.
    :ivar hidden_channels: H, channels of every encoder layer.
    :ivar num_layers: Number of conv + rectifier layers.
    :ivar kernel_width: Conv kernel width in frames.
    """

    input_channels: int
    hidden_channels: int = 64
    num_layers: int = 3
    kernel_width: int = 5

    def __post_init__(self) -> None:
        _require_positive(
            "encoder",
            input_channels=self.input_channels,
            hidden_channels=self.hidden_channels,
            num_layers=self.num_layers,
            kernel_width=self.kernel_width,
        )

    @classmethod
    def full_width(cls, input_channels: int) -> EncoderConfig:
        """Preset whose hidden width matches a 1024-channel pretrained backbone."""
        return cls(input_channels=input_channels, hidden_channels=1024)


@dataclass(frozen=True)
class ExtractorConfig:
    """Feature-extractor head selection and hyperparameters."""

    kind: ExtractorKind = ExtractorKind.GLU
    embedding_dim: int = 256
    glu_kernel: int = 32
    glu_channel_dropout: float = 0.1
    fc_dropout: float = 0.5

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", ExtractorKind(self.kind))
        except ValueError as exc:
            choices = ", ".join(k.value for k in ExtractorKind)
            raise ConfigurationError(
                f"extractor.kind must be one of {choices}, got {self.kind!r}"
            ) from exc
        _require_positive("extractor", embedding_dim=self.embedding_dim, glu_kernel=self.glu_kernel)
        for name in ("glu_channel_dropout", "fc_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigurationError(
                    f"extractor.{name} must be in [0, 1), got {getattr(self, name)}"
                )


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a model's parameter shapes.

    :ivar dann_enabled: Whether the discriminator group ``theta_d`` exists.
    :ivar num_datasets: Discriminator output size; required (≥ 2) when DANN is enabled.
    :ivar grl_lambda: Gradient reversal scale.
    """

    encoder: EncoderConfig
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    dann_enabled: bool = False
    num_datasets: int = 0
    grl_lambda: float = 0.01

    def __post_init__(self) -> None:
        if self.dann_enabled and self.num_datasets < 2:
            raise ConfigurationError(
                f"DANN needs at least 2 training datasets to discriminate, got {self.num_datasets}"
            )
        if not self.grl_lambda > 0:
            raise ConfigurationError(f"grl_lambda must be positive, got {self.grl_lambda}")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["extractor"]["kind"] = self.extractor.kind.value
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ModelConfig:
        try:
            return cls(
                encoder=EncoderConfig(**data["encoder"]),
                extractor=ExtractorConfig(**data.get("extractor", {})),
                dann_enabled=bool(data.get("dann_enabled", False)),
                num_datasets=int(data.get("num_datasets", 0)),
                grl_lambda=float(data.get("grl_lambda", 0.01)),
            )
        except (KeyError, TypeError) as exc:
            raise CheckpointFormatError(f"model config echo is incomplete: {exc}") from exc


@dataclass
class ForwardTally:
    """Count of embedding-head forward invocations."""

    count: int = 0


def _flatten(data: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _draw(rng: np.random.Generator | None, std: float, shape: tuple[int, ...]) -> np.ndarray:
    # no generator: zero-filled template, e.g. before restoring stored tensors
    if rng is None:
        return np.zeros(shape, dtype=DTYPE)
    return rng.normal(0.0, std, size=shape)


def _conv_params(
    prefix: str,
    width: int,
    c_in: int,
    c_out: int,
    rng: np.random.Generator | None,
    gain: float,
) -> dict[str, Value]:
    std = float(np.sqrt(gain / (width * c_in)))
    return {
        f"{prefix}.kernel": parameter(_draw(rng, std, (width, c_in, c_out)), f"{prefix}.kernel"),
        f"{prefix}.bias": parameter(np.zeros(c_out), f"{prefix}.bias"),
    }


def _fc_params(c_in: int, c_out: int, rng: np.random.Generator | None) -> dict[str, Value]:
    std = float(np.sqrt(1.0 / c_in))
    return {
        "fc.weight": parameter(_draw(rng, std, (c_in, c_out)), "fc.weight"),
        "fc.bias": parameter(np.zeros(c_out), "fc.bias"),
    }


def _as_value(x: FeatureSequence | np.ndarray | Value) -> Value:
    if isinstance(x, Value):
        return x
    if isinstance(x, FeatureSequence):
        return Value(x.frames)
    return Value(np.asarray(x, dtype=DTYPE))


def encode(
    x: FeatureSequence | np.ndarray | Value, theta_m: Mapping[str, Value], config: EncoderConfig
) -> Value:
    """Run the conv + rectifier stack; the time length is preserved.

    :raises DimensionError: If the input channel count differs from ``config.input_channels``.
    """
    h = _as_value(x)
    if h.data.ndim != 2 or h.shape[0] < 1:
        raise DimensionError(f"encoder expects a T×F sequence with T ≥ 1, got shape {h.shape}")
    if h.shape[1] != config.input_channels:
        raise DimensionError(
            f"encoder expects {config.input_channels} input channels, got {h.shape[1]}"
        )
    for i in range(config.num_layers):
        h = relu(conv1d(h, theta_m[f"encoder.conv{i}.kernel"], theta_m[f"encoder.conv{i}.bias"]))
    return h


def _require_rng(training: bool, rng: np.random.Generator | None) -> None:
    if training and rng is None:
        raise ParameterError("training-mode forward needs a dropout random generator")


def extract_mean_fc(
    z: Value,
    theta_f: Mapping[str, Value],
    config: ExtractorConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Value:
    """Time-mean of the latent sequence followed by an affine map H→D."""
    _require_rng(training, rng)
    pooled = dropout(mean_over_time(z), config.fc_dropout, rng, training)  # type: ignore[arg-type]
    return add(matmul(pooled, theta_f["fc.weight"]), theta_f["fc.bias"])


def lateral_inhibition(z: Value, weight: Value, bias: Value) -> Value:
    """Gate every frame by ``Heaviside(x · ZeroDiag(Wᵀ) + b)``.

    Gates are exactly 0 or 1; a channel never takes part in its own gate.
    """
    pre = add(matmul(z, zero_diagonal(transpose(weight))), bias)
    return elementwise_mul(z, heaviside_ste(pre))


def extract_lateral_inhibition(
    z: Value,
    theta_f: Mapping[str, Value],
    config: ExtractorConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Value:
    """Per-frame lateral inhibition, then the FC layer, then the mean over time."""
    _require_rng(training, rng)
    gated = lateral_inhibition(z, theta_f["li.W"], theta_f["li.b"])
    gated = dropout(gated, config.fc_dropout, rng, training)  # type: ignore[arg-type]
    projected = add(matmul(gated, theta_f["fc.weight"]), theta_f["fc.bias"])
    return mean_over_time(projected)


def _glu_head(
    z: Value,
    params: Mapping[str, Value],
    prefix: str,
    channel_dropout: float,
    training: bool,
    rng: np.random.Generator | None,
) -> Value:
    z = dropout(z, channel_dropout, rng, training, channelwise=True)  # type: ignore[arg-type]
    linear = conv1d(z, params[f"{prefix}.a.kernel"], params[f"{prefix}.a.bias"])
    gate = sigmoid(conv1d(z, params[f"{prefix}.b.kernel"], params[f"{prefix}.b.bias"]))
    return max_over_time(elementwise_mul(linear, gate))


def extract_glu(
    z: Value,
    theta_f: Mapping[str, Value],
    config: ExtractorConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Value:
    """``Conv_A(z) · sigmoid(Conv_B(z))`` followed by a per-channel max over time."""
    _require_rng(training, rng)
    return _glu_head(z, theta_f, "glu", config.glu_channel_dropout, training, rng)


def discriminate_dataset(
    z: Value,
    theta_d: Mapping[str, Value] | None,
    lam: float,
    config: ExtractorConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    reverse: bool = True,
) -> Value:
    """Dataset logits for a latent sequence, behind a gradient reversal layer.

    The forward value does not depend on ``lam``. With ``reverse`` cleared the reversal
    layer is skipped, which is only useful as a control when comparing gradients.

    :raises DannDisabledError: If ``theta_d`` is missing.
    """
    if not theta_d:
        raise DannDisabledError(
            "dataset discriminator is unavailable: model was built without DANN"
        )
    _require_rng(training, rng)
    reversed_z = grad_reverse(z, lam) if reverse else z
    return _glu_head(reversed_z, theta_d, "disc", config.glu_channel_dropout, training, rng)


_EXTRACTORS = {
    ExtractorKind.MEAN_FC: extract_mean_fc,
    ExtractorKind.LATERAL_INHIBITION: extract_lateral_inhibition,
    ExtractorKind.GLU: extract_glu,
}


class ModelState:
    """Parameter groups, optimizer states and forward instrumentation of one model.

    Instances are mutated by a single thread. Use :meth:`copy` (or :meth:`restore` on a
    snapshot) to obtain an independent model for concurrent work.

    .. versionadded:: 0.1.0
    """

    def __init__(
        self,
        config: ModelConfig,
        theta_m: dict[str, Value],
        theta_f: dict[str, Value],
        theta_d: dict[str, Value] | None = None,
        optimizers: dict[str, AdamState] | None = None,
        extras: dict[str, Any] | None = None,
    ) -> None:
        if (theta_d is not None) != config.dann_enabled:
            raise ConfigurationError("theta_d must be present exactly when DANN is enabled")
        self.config = config
        self.theta_m = theta_m
        self.theta_f = theta_f
        self.theta_d = theta_d
        self.optimizers: dict[str, AdamState] = optimizers or {}
        self.extras: dict[str, Any] = extras or {}
        self._tallies: list[ForwardTally] = []

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, lr: float = 1e-4) -> ModelState:
        """Randomly initialize every group; ``theta_d`` is drawn last."""
        model = cls._build(config, rng)
        model.reset_optimizers(lr)
        return model

    @classmethod
    def _build(cls, config: ModelConfig, rng: np.random.Generator | None) -> ModelState:
        """Allocate every parameter group; weights are zero when ``rng`` is ``None``."""
        enc = config.encoder
        ext = config.extractor
        theta_m: dict[str, Value] = {}
        c_in = enc.input_channels
        for i in range(enc.num_layers):
            conv = _conv_params(
                f"encoder.conv{i}", enc.kernel_width, c_in, enc.hidden_channels, rng, gain=2.0
            )
            theta_m.update(conv)
            c_in = enc.hidden_channels

        hidden = enc.hidden_channels
        theta_f: dict[str, Value] = {}
        if ext.kind is ExtractorKind.LATERAL_INHIBITION:
            weights = _draw(rng, float(np.sqrt(1.0 / hidden)), (hidden, hidden))
            theta_f["li.W"] = parameter(weights, "li.W")
            theta_f["li.b"] = parameter(np.zeros(hidden), "li.b")
        if ext.kind in (ExtractorKind.MEAN_FC, ExtractorKind.LATERAL_INHIBITION):
            theta_f.update(_fc_params(hidden, ext.embedding_dim, rng))
        else:
            theta_f.update(
                _conv_params("glu.a", ext.glu_kernel, hidden, ext.embedding_dim, rng, gain=1.0)
            )
            theta_f.update(
                _conv_params("glu.b", ext.glu_kernel, hidden, ext.embedding_dim, rng, gain=1.0)
            )

        theta_d: dict[str, Value] | None = None
        if config.dann_enabled:
            theta_d = {}
            theta_d.update(
                _conv_params("disc.a", ext.glu_kernel, hidden, config.num_datasets, rng, gain=1.0)
            )
            theta_d.update(
                _conv_params("disc.b", ext.glu_kernel, hidden, config.num_datasets, rng, gain=1.0)
            )

        return cls(config, theta_m, theta_f, theta_d)

    def reset_optimizers(self, lr: float) -> None:
        """Replace every group's Adam state with a fresh one at ``lr``."""
        self.optimizers = {name: AdamState(lr=lr) for name in self.groups()}

    def groups(self) -> dict[str, dict[str, Value]]:
        """Present parameter groups keyed ``theta_m``, ``theta_f`` and (with DANN) ``theta_d``."""
        groups = {"theta_m": self.theta_m, "theta_f": self.theta_f}
        if self.theta_d is not None:
            groups["theta_d"] = self.theta_d
        return groups

    def parameters(self) -> dict[str, Value]:
        merged: dict[str, Value] = {}
        for params in self.groups().values():
            merged.update(params)
        return merged

    def set_trainable(self, group: str, trainable: bool) -> None:
        """Toggle gradient tracking for every parameter of ``group``."""
        try:
            params = self.groups()[group]
        except KeyError as exc:
            raise ConfigurationError(f"unknown parameter group {group!r}") from exc
        for param in params.values():
            param.requires_grad = trainable

    def zero_grad(self) -> None:
        for param in self.parameters().values():
            param.grad = None

    def latent(self, x: FeatureSequence | np.ndarray | Value) -> Value:
        return encode(x, self.theta_m, self.config.encoder)

    def extract(
        self, z: Value, training: bool = False, rng: np.random.Generator | None = None
    ) -> Value:
        """Apply the configured head to a latent sequence and count the forward."""
        for tally in self._tallies:
            tally.count += 1
        head = _EXTRACTORS[self.config.extractor.kind]
        return head(z, self.theta_f, self.config.extractor, training, rng)

    def embed(
        self,
        x: FeatureSequence | np.ndarray | Value,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Value:
        """Encoder plus head: one D-dimensional embedding for a T×F sequence."""
        return self.extract(self.latent(x), training, rng)

    def discriminate(
        self,
        z: Value,
        training: bool = False,
        rng: np.random.Generator | None = None,
        reverse: bool = True,
    ) -> Value:
        return discriminate_dataset(
            z, self.theta_d, self.config.grl_lambda, self.config.extractor, training, rng, reverse
        )

    def snapshot(self, extras: Mapping[str, Any] | None = None) -> bytes:
        """Serialize parameters, optimizer states, config echo and ``extras`` to a checkpoint blob.

        Identical states produce identical bytes.
        """
        tensors: dict[str, np.ndarray] = {name: p.data for name, p in self.parameters().items()}
        optimizer_scalars: dict[str, dict[str, float | int]] = {}
        for group, state in sorted(self.optimizers.items()):
            optimizer_scalars[group] = {
                "lr": state.lr,
                "beta1": state.beta1,
                "beta2": state.beta2,
                "eps": state.eps,
                "step_count": state.step_count,
            }
            for moment in ("m", "v"):
                for name, array in getattr(state, moment).items():
                    tensors[f"adam.{group}.{moment}.{name}"] = array
        header = {
            "config": self.config.to_dict(),
            "optimizers": optimizer_scalars,
            "extras": dict(extras) if extras is not None else self.extras,
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

        parts = [
            CHECKPOINT_MAGIC,
            struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)),
            header_bytes,
            struct.pack("<I", len(tensors)),
        ]
        for name in sorted(tensors):
            array = np.ascontiguousarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)) + encoded)
            parts.append(struct.pack("<B", array.ndim))
            parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
            parts.append(array.tobytes(order="C"))
        return b"".join(parts)

    @classmethod
    def restore(cls, blob: bytes, expected_config: ModelConfig | None = None) -> ModelState:
        """Rebuild a model from :meth:`snapshot` output.

        :param expected_config: When given, every field of the stored config must match.
        :raises CheckpointFormatError: On bad magic, unknown version, truncation, missing
            tensors or a config mismatch (the message names the differing field).
        """
        header, tensors = read_checkpoint(blob)
        config = ModelConfig.from_dict(header["config"])
        if expected_config is not None:
            stored = _flatten(config.to_dict())
            for key, wanted in _flatten(expected_config.to_dict()).items():
                if stored.get(key) != wanted:
                    raise CheckpointFormatError(
                        f"checkpoint config mismatch at {key}: "
                        f"stored {stored.get(key)!r}, expected {wanted!r}"
                    )

        template = cls._build(config, None)
        for params in template.groups().values():
            for name, param in params.items():
                stored_array = tensors.get(name)
                if stored_array is None:
                    raise CheckpointFormatError(f"checkpoint is missing tensor {name}")
                if stored_array.shape != param.shape:
                    raise CheckpointFormatError(
                        f"tensor {name} has shape {stored_array.shape}, expected {param.shape}"
                    )
                param.data = stored_array

        optimizers: dict[str, AdamState] = {}
        for group, scalars in header.get("optimizers", {}).items():
            state = AdamState(**scalars)
            for moment in ("m", "v"):
                prefix = f"adam.{group}.{moment}."
                getattr(state, moment).update(
                    {
                        name[len(prefix):]: array
                        for name, array in tensors.items()
                        if name.startswith(prefix)
                    }
                )
            optimizers[group] = state
        template.optimizers = optimizers
        template.extras = dict(header.get("extras", {}))
        return template

    def copy(self) -> ModelState:
        return ModelState.restore(self.snapshot())


def read_checkpoint(blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Decode a checkpoint blob into its JSON header and named tensors.

    :raises CheckpointFormatError: On any structural problem.
    """
    view = memoryview(blob)
    offset = 0

    def take(size: int, what: str) -> memoryview:
        nonlocal offset
        if offset + size > len(view):
            raise CheckpointFormatError(
                f"checkpoint truncated while reading {what} at byte {offset}"
            )
        chunk = view[offset:offset + size]
        offset += size
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(
            f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    version, header_len = struct.unpack("<II", take(8, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    try:
        header = json.loads(bytes(take(header_len, "header")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"checkpoint header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or "config" not in header:
        raise CheckpointFormatError("checkpoint header lacks the config echo")

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = bytes(take(name_len, "tensor name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"shape of {name}"))
        size = int(np.prod(shape, dtype=np.int64))
        payload = take(8 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(DTYPE)
    if offset != len(view):
        raise CheckpointFormatError(f"checkpoint has {len(view) - offset} trailing bytes")
    return header, tensors


def parameter_hash(model: ModelState, groups: tuple[str, ...] | None = None) -> str:
    """SHA-256 over parameter names, shapes and float64 bytes, in name order."""
    digest = hashlib.sha256()
    selected = model.groups()
    for group in groups or tuple(selected):
        for name in sorted(selected.get(group, {})):
            data = selected[group][name].data
            digest.update(name.encode("utf-8"))
            digest.update(str(data.shape).encode("ascii"))
            digest.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return digest.hexdigest()


def parameter_counts(model: ModelState) -> dict[str, int]:
    return {
        group: sum(p.data.size for p in params.values())
        for group, params in model.groups().items()
    }


@contextlib.contextmanager
def count_forwards(model: ModelState) -> Iterator[ForwardTally]:
    """Count embedding-head forwards on ``model`` within the ``with`` block.

    Example::

        with count_forwards(model) as tally:
            model.embed(x)
        assert tally.count == 1
    """
    tally = ForwardTally()
    model._tallies.append(tally)
    try:
        yield tally
    finally:
        model._tallies.remove(tally)
