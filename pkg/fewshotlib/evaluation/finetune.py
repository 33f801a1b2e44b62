"""Meta-test fine-tuning on an episode's support set.

Two variants adapt a copy of the model to one episode before its queries are classified:

* Variant A draws two independently SpecAugment-masked copies of every support sample on
  each step. One copy set plays inner support, the other inner query. Each step embeds
  2·N·K sequences.
* Variant B splits each class's K support samples into ``s`` inner-support and ``K - s``
  inner-query samples, with a fresh split on every step. Each step embeds N·K sequences,
  half of variant A's work. It needs at least two shots per class.

Both take one Adam step per fine-tuning step on the encoder and head parameters. The
discriminator, if any, is left alone. Fine-tuning forwards run in eval mode (no dropout).

Example:
    Adapt a restored copy with variant B::

        from fewshotlib.evaluation.finetune import finetune_variant_b

        local = ModelState.restore(snapshot)
        finetune_variant_b(local, support, steps=25, lr=1e-5, support_size=2, rng=rng)

.. versionadded:: 0.1.0
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np

from fewshotlib import log
from fewshotlib.exceptions import ConfigurationError
from fewshotlib.features import FeatureSequence, SpecAugmentConfig, spec_augment
from fewshotlib.model import ModelState
from fewshotlib.numerics import AdamState, Value, adam_step, stack
from fewshotlib.protonet import ProtoConfig, episode_loss

FINETUNED_GROUPS = ("theta_m", "theta_f")


class FinetuneConfigError(ConfigurationError):
    """Raised for fine-tuning settings an episode cannot support."""


class FinetuneVariant(str, Enum):
    NONE = "none"
    A = "a"
    B = "b"


@dataclass(frozen=True)
class FinetuneConfig:
    """Meta-test fine-tuning settings.

    :ivar variant: ``none``, ``a`` or ``b``.
    :ivar steps: Fine-tuning steps per episode; 0 disables fine-tuning.
    :ivar lr: Adam learning rate.
    :ivar support_size: Inner-support samples per class for variant B.
    :ivar augment: SpecAugment masks for variant A (and variant B when ``augment_b`` is set).
    :ivar augment_b: Apply ``augment`` in variant B too.
    :ivar seed: Root of the per-episode fine-tuning random streams.
    """

    variant: FinetuneVariant = FinetuneVariant.NONE
    steps: int = 0
    lr: float = 1e-5
    support_size: int = 2
    augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    augment_b: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "variant", FinetuneVariant(self.variant))
        except ValueError as exc:
            raise FinetuneConfigError(
                f"finetune.variant must be none, a or b, got {self.variant!r}"
            ) from exc
        if self.steps < 0:
            raise FinetuneConfigError(f"finetune.steps must be non-negative, got {self.steps}")
        if not self.lr > 0:
            raise FinetuneConfigError(f"finetune.lr must be positive, got {self.lr}")
        if self.support_size < 1:
            raise FinetuneConfigError(
                f"finetune.support_size must be at least 1, got {self.support_size}"
            )
        if self.seed < 0:
            raise FinetuneConfigError(f"finetune.seed must be non-negative, got {self.seed}")

    @property
    def active(self) -> bool:
        return self.variant is not FinetuneVariant.NONE and self.steps > 0

    def validate_for(self, k_shot: int) -> None:
        """Check the settings against an episode's shot count.

        :raises FinetuneConfigError: For variant B unless ``1 ≤ support_size < k_shot``.
        """
        if self.variant is FinetuneVariant.B and self.steps > 0:
            _check_support_size(self.support_size, k_shot)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["variant"] = self.variant.value
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FinetuneConfig:
        values = dict(data)
        if "augment" in values and isinstance(values["augment"], Mapping):
            values["augment"] = SpecAugmentConfig(**values["augment"])
        return cls(**values)


def _check_support_size(support_size: int, k_shot: int) -> None:
    if k_shot < 2:
        raise FinetuneConfigError(
            "variant B needs at least 2 shots per class to split the support set; "
            "it does not work for 1-shot episodes"
        )
    if not 1 <= support_size < k_shot:
        raise FinetuneConfigError(
            f"variant B support_size must satisfy 1 <= s < K={k_shot}, got {support_size}"
        )


def _balanced_classes(labels: np.ndarray) -> dict[int, np.ndarray]:
    classes = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    sizes = {len(idx) for idx in classes.values()}
    if len(sizes) != 1:
        raise FinetuneConfigError(f"support set is unbalanced: per-class sizes {sorted(sizes)}")
    return classes


def _trainable(model: ModelState) -> dict[str, Value]:
    params: dict[str, Value] = {}
    for group in FINETUNED_GROUPS:
        params.update(model.groups()[group])
    return params


def _step(model: ModelState, loss: Value, state: AdamState) -> None:
    loss.backward()
    params = _trainable(model)
    grads = {
        name: p.grad if p.grad is not None else np.zeros_like(p.data)
        for name, p in params.items()
    }
    adam_step(params, grads, state)
    model.zero_grad()


def finetune_variant_a(
    model: ModelState,
    support: Sequence[tuple[FeatureSequence, int]],
    steps: int,
    lr: float,
    augment: SpecAugmentConfig,
    rng: np.random.Generator,
    proto_cfg: ProtoConfig | None = None,
) -> ModelState:
    """Fine-tune on two masked views of the whole support set per step.

    :return: ``model``, updated in place.
    """
    proto_cfg = proto_cfg or ProtoConfig()
    labels = np.array([label for _, label in support], dtype=np.int64)
    state = AdamState(lr=lr)
    model.zero_grad()
    for step in range(steps):
        inner_support = [model.embed(spec_augment(x, augment, rng)) for x, _ in support]
        inner_query = [model.embed(spec_augment(x, augment, rng)) for x, _ in support]
        loss, accuracy = episode_loss(
            stack(inner_support), labels, stack(inner_query), labels, proto_cfg
        )
        log.debug("variant A step %d: loss %.4f acc %.3f", step, loss.item(), accuracy)
        _step(model, loss, state)
    return model


def variant_b_partition(
    labels: np.ndarray,
    support_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Split support indices per class into ``support_size`` inner-support and the rest inner-query.

    :return: ``(inner_support_indices, inner_query_indices)``, each grouped by class.
    """
    classes = _balanced_classes(np.asarray(labels))
    k_shot = len(next(iter(classes.values())))
    _check_support_size(support_size, k_shot)
    inner_support: list[int] = []
    inner_query: list[int] = []
    for _, indices in sorted(classes.items()):
        order = rng.permutation(indices)
        inner_support.extend(int(i) for i in order[:support_size])
        inner_query.extend(int(i) for i in order[support_size:])
    return np.array(inner_support, dtype=np.int64), np.array(inner_query, dtype=np.int64)


def finetune_variant_b(
    model: ModelState,
    support: Sequence[tuple[FeatureSequence, int]],
    steps: int,
    lr: float,
    support_size: int,
    rng: np.random.Generator,
    proto_cfg: ProtoConfig | None = None,
    augment: SpecAugmentConfig | None = None,
) -> ModelState:
    """Fine-tune on a fresh disjoint inner split of the support set per step.

    Every support sample is embedded exactly once per step.

    :raises FinetuneConfigError: Unless ``1 ≤ support_size < K``.
    :return: ``model``, updated in place.
    """
    proto_cfg = proto_cfg or ProtoConfig()
    labels = np.array([label for _, label in support], dtype=np.int64)
    _check_support_size(support_size, len(_balanced_classes(labels)[int(labels[0])]))
    state = AdamState(lr=lr)
    model.zero_grad()
    for step in range(steps):
        inner_support, inner_query = variant_b_partition(labels, support_size, rng)
        embeddings = [
            model.embed(spec_augment(x, augment, rng) if augment is not None else x)
            for x, _ in support
        ]
        loss, accuracy = episode_loss(
            stack([embeddings[i] for i in inner_support]),
            labels[inner_support],
            stack([embeddings[i] for i in inner_query]),
            labels[inner_query],
            proto_cfg,
        )
        log.debug("variant B step %d: loss %.4f acc %.3f", step, loss.item(), accuracy)
        _step(model, loss, state)
    return model


def run_finetune(
    model: ModelState,
    support: Sequence[tuple[FeatureSequence, int]],
    ft: FinetuneConfig,
    rng: np.random.Generator,
    proto_cfg: ProtoConfig | None = None,
) -> ModelState:
    """Dispatch to the configured variant; a no-op when fine-tuning is inactive."""
    if not ft.active:
        return model
    if ft.variant is FinetuneVariant.A:
        return finetune_variant_a(model, support, ft.steps, ft.lr, ft.augment, rng, proto_cfg)
    return finetune_variant_b(
        model,
        support,
        ft.steps,
        ft.lr,
        ft.support_size,
        rng,
        proto_cfg,
        augment=ft.augment if ft.augment_b else None,
    )
