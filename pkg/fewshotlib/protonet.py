"""Prototypical-network head: prototypes, cosine classification and the episode loss.

The head has no parameters of its own. Support embeddings are averaged per class into
prototypes; each query is scored against every prototype by temperature-scaled cosine
similarity, and the prediction is the highest-scoring class (lowest index on ties).

Example:
    Classify two queries against hand-made prototypes::

        import numpy as np
        from fewshotlib.numerics import Value
        from fewshotlib.protonet import ProtoConfig, classify, compute_prototypes, predictions

        support = Value(np.array([[1.0, 0.0], [0.0, 1.0]]))
        protos = compute_prototypes(support, [0, 1])
        logits = classify(Value(np.array([[2.0, 0.1], [0.0, 3.0]])), protos, ProtoConfig())
        print(predictions(logits))  # [0 1]

.. versionadded:: 0.1.0
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fewshotlib.exceptions import NumericalError
from fewshotlib.numerics import (
    DimensionError,
    ParameterError,
    Value,
    constant,
    cross_entropy,
    l2_normalize,
    matmul,
    scale,
    transpose,
)

COSINE_EPS = 1e-8


class UnbalancedSupportError(ParameterError):
    """Raised when support labels are not exactly K per class over ``[0, N)``."""


class DegenerateEmbeddingError(NumericalError):
    """Raised when a query embedding or prototype has exactly zero norm.

    .. versionadded:: 0.1.0
    """


@dataclass(frozen=True)
class ProtoConfig:
    """Classifier settings.

    :ivar temperature: Positive factor applied to cosine similarities before softmax.
    """

    temperature: float = 10.0

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class PrototypeSet:
    """One prototype row per episode class; row ``i`` belongs to episode label ``i``."""

    prototypes: Value
    shots: int

    @property
    def n_way(self) -> int:
        return self.prototypes.shape[0]


def compute_prototypes(support: Value, labels: Sequence[int] | np.ndarray) -> PrototypeSet:
    """Average support embeddings per episode label.

    The mean is taken through an N×(N·K) averaging matrix so gradients reach every
    support embedding.

    :param support: (N·K)×D support embeddings.
    :param labels: Episode label of each support row; every label in ``[0, N)`` must
        appear exactly K times.
    :raises UnbalancedSupportError: If the labels are not balanced over a dense range.
    """
    targets = np.asarray(labels, dtype=np.int64)
    if support.data.ndim != 2 or targets.shape != (support.shape[0],):
        raise DimensionError(f"support {support.shape} does not match {targets.size} labels")
    if targets.size == 0:
        raise UnbalancedSupportError("support set is empty")
    n_way = int(targets.max()) + 1
    counts = np.bincount(targets, minlength=n_way) if targets.min() >= 0 else None
    if counts is None or np.any(counts != counts[0]):
        raise UnbalancedSupportError(
            f"support labels must cover [0, N) equally often, got counts {counts}"
        )
    shots = int(counts[0])

    averaging = np.zeros((n_way, targets.size))
    averaging[targets, np.arange(targets.size)] = 1.0 / shots
    return PrototypeSet(prototypes=matmul(constant(averaging), support), shots=shots)


def _require_nonzero(matrix: Value, what: str) -> None:
    zero_rows = np.flatnonzero(~np.any(matrix.data != 0.0, axis=1))
    if zero_rows.size:
        raise DegenerateEmbeddingError(f"{what} rows {zero_rows.tolist()} have zero norm")


def classify(query: Value, protos: PrototypeSet, cfg: ProtoConfig) -> Value:
    """Return M×N logits ``temperature · cos(query_m, prototype_i)``.

    :raises DimensionError: If the embedding sizes differ.
    :raises DegenerateEmbeddingError: On an all-zero query or prototype.
    """
    if query.data.ndim != 2 or query.shape[1] != protos.prototypes.shape[1]:
        raise DimensionError(
            f"query {query.shape} does not match prototypes {protos.prototypes.shape}"
        )
    _require_nonzero(query, "query embedding")
    _require_nonzero(protos.prototypes, "prototype")
    similarity = matmul(
        l2_normalize(query, COSINE_EPS),
        transpose(l2_normalize(protos.prototypes, COSINE_EPS)),
    )
    return scale(similarity, cfg.temperature)


def predictions(logits: Value | np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, Value) else np.asarray(logits)
    return np.argmax(data, axis=1)


def episode_loss(
    support: Value,
    support_labels: Sequence[int] | np.ndarray,
    query: Value,
    query_labels: Sequence[int] | np.ndarray,
    cfg: ProtoConfig,
) -> tuple[Value, float]:
    """Cross-entropy of query logits against prototypes built from ``support``.

    :return: The differentiable mean loss and the query accuracy in ``[0, 1]``.
    """
    protos = compute_prototypes(support, support_labels)
    logits = classify(query, protos, cfg)
    targets = np.asarray(query_labels, dtype=np.int64)
    loss = cross_entropy(logits, targets)
    accuracy = float(np.mean(predictions(logits) == targets))
    return loss, accuracy
