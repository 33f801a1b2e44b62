"""Tests for prototypes, cosine classification and the episode loss."""

import numpy as np
import pytest

from fewshotlib.numerics import ParameterError, check_gradients, constant, parameter
from fewshotlib.protonet import (
    DegenerateEmbeddingError,
    ProtoConfig,
    UnbalancedSupportError,
    classify,
    compute_prototypes,
    episode_loss,
    predictions,
)


def test_prototypes_hand_case():
    """Class means of two hand-made classes."""
    support = constant(np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [0.0, 0.0]]))
    protos = compute_prototypes(support, [0, 0, 1, 1])
    np.testing.assert_allclose(protos.prototypes.data, [[0.5, 0.5], [1.0, 1.0]])
    assert (protos.n_way, protos.shots) == (2, 2)


def test_one_shot_prototypes_equal_support():
    """With K = 1 each prototype is its support embedding."""
    support = np.random.default_rng(0).normal(size=(3, 4))
    protos = compute_prototypes(constant(support), [0, 1, 2])
    np.testing.assert_array_equal(protos.prototypes.data, support)


def test_prototypes_match_brute_force_means():
    """Random episodes agree with an independent per-class mean."""
    rng = np.random.default_rng(1)
    for _ in range(200):
        n_way, k_shot, dim = (int(v) for v in rng.integers([2, 1, 1], [6, 9, 65]))
        labels = rng.permutation(np.repeat(np.arange(n_way), k_shot))
        support = rng.normal(size=(n_way * k_shot, dim))
        protos = compute_prototypes(constant(support), labels).prototypes.data
        for label in range(n_way):
            expected = sum(support[labels == label]) / k_shot
            np.testing.assert_allclose(protos[label], expected, rtol=0, atol=1e-12)


def test_duplicated_support_gives_same_prototypes():
    """Listing every support sample twice leaves the prototypes unchanged."""
    rng = np.random.default_rng(2)
    support = rng.normal(size=(6, 3))
    labels = np.array([0, 0, 1, 1, 2, 2])
    once = compute_prototypes(constant(support), labels).prototypes.data
    doubled = constant(np.vstack([support, support]))
    twice = compute_prototypes(doubled, np.tile(labels, 2)).prototypes.data
    np.testing.assert_allclose(once, twice, atol=1e-12)


@pytest.mark.parametrize("labels", [[0, 0, 1], [0, 0, 2, 2], [-1, -1, 0, 0]])
def test_unbalanced_support_raises(labels):
    """Labels must cover [0, N) equally often."""
    with pytest.raises(UnbalancedSupportError):
        compute_prototypes(constant(np.ones((len(labels), 2))), labels)


def test_classify_hand_case():
    """Query [1, 0] against [[1, 0], [0, 1]] at temperature 10 gives [10, 0]."""
    protos = compute_prototypes(constant(np.eye(2)), [0, 1])
    logits = classify(constant(np.array([[1.0, 0.0]])), protos, ProtoConfig())
    np.testing.assert_allclose(logits.data, [[10.0, 0.0]])


def test_query_equal_to_prototype_scores_temperature():
    """cos(v, v) = 1, so the matching logit equals the temperature."""
    rng = np.random.default_rng(3)
    support = rng.normal(size=(4, 5))
    protos = compute_prototypes(constant(support), [0, 1, 2, 3])
    logits = classify(constant(support[2:3]), protos, ProtoConfig(temperature=7.0))
    assert logits.data[0, 2] == pytest.approx(7.0)
    assert predictions(logits)[0] == 2


def test_orthogonal_query_ties_to_lowest_index():
    """All-zero logits predict class 0."""
    protos = compute_prototypes(constant(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])), [0, 1])
    logits = classify(constant(np.array([[0.0, 0.0, 1.0]])), protos, ProtoConfig())
    np.testing.assert_array_equal(logits.data, [[0.0, 0.0]])
    assert predictions(logits)[0] == 0


def test_logits_are_scale_invariant():
    """Positive rescaling of queries or of everything leaves logits unchanged."""
    rng = np.random.default_rng(4)
    support, query = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
    cfg = ProtoConfig()
    labels = [0, 1, 2, 3]
    protos = compute_prototypes(constant(support), labels)
    base = classify(constant(query), protos, cfg).data
    scaled_query = classify(constant(query * [[2.0], [0.5], [9.0]]), protos, cfg)
    scaled_protos = compute_prototypes(constant(3.0 * support), labels)
    scaled_all = classify(constant(3.0 * query), scaled_protos, cfg)
    np.testing.assert_allclose(scaled_query.data, base, atol=1e-12)
    np.testing.assert_allclose(scaled_all.data, base, atol=1e-12)


def test_label_permutation_permutes_logit_columns():
    """Relabelling support classes permutes the logit columns the same way."""
    rng = np.random.default_rng(5)
    support, query = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    cfg = ProtoConfig()
    base = classify(constant(query), compute_prototypes(constant(support), [0, 1, 2]), cfg).data
    permutation = np.array([2, 0, 1])
    permuted_protos = compute_prototypes(constant(support), permutation)
    permuted = classify(constant(query), permuted_protos, cfg).data
    np.testing.assert_allclose(permuted[:, permutation], base, atol=1e-12)


def test_zero_embeddings_raise():
    """Exactly zero queries or prototypes are degenerate, not silently clamped."""
    protos = compute_prototypes(constant(np.eye(2)), [0, 1])
    with pytest.raises(DegenerateEmbeddingError, match="query embedding rows \\[1\\]"):
        classify(constant(np.array([[1.0, 0.0], [0.0, 0.0]])), protos, ProtoConfig())
    zero_protos = compute_prototypes(constant(np.array([[1.0, 0.0], [0.0, 0.0]])), [0, 1])
    with pytest.raises(DegenerateEmbeddingError, match="prototype"):
        classify(constant(np.ones((1, 2))), zero_protos, ProtoConfig())


def test_temperature_must_be_positive():
    """A non-positive temperature is rejected."""
    with pytest.raises(ParameterError, match="temperature"):
        ProtoConfig(temperature=0.0)


def test_separated_clusters_classify_perfectly():
    """Well separated class clusters give accuracy 1."""
    rng = np.random.default_rng(6)
    centers = 10.0 * np.eye(4)
    support = np.repeat(centers, 5, axis=0) + rng.normal(scale=0.1, size=(20, 4))
    query = np.repeat(centers, 3, axis=0) + rng.normal(scale=0.1, size=(12, 4))
    support_labels, query_labels = np.repeat(np.arange(4), 5), np.repeat(np.arange(4), 3)
    loss, accuracy = episode_loss(
        constant(support), support_labels, constant(query), query_labels, ProtoConfig()
    )
    assert accuracy == 1.0
    assert loss.item() < 0.1


def test_random_embeddings_score_chance():
    """Signal-free 4-way episodes average 25% accuracy."""
    rng = np.random.default_rng(7)
    accuracies = []
    for _ in range(1000):
        support = constant(rng.normal(size=(20, 16)))
        query = constant(rng.normal(size=(48, 16)))
        _, accuracy = episode_loss(
            support, np.repeat(np.arange(4), 5), query, rng.integers(0, 4, size=48), ProtoConfig()
        )
        accuracies.append(accuracy)
    assert np.mean(accuracies) == pytest.approx(0.25, abs=0.02)


def test_episode_loss_gradients_match_finite_differences():
    """Loss gradients w.r.t. query and support embeddings agree with central differences."""
    rng = np.random.default_rng(8)
    support = parameter(rng.normal(size=(6, 4)))
    query = parameter(rng.normal(size=(6, 4)))
    support_labels, query_labels = np.repeat(np.arange(3), 2), np.tile(np.arange(3), 2)

    def fn():
        loss, _ = episode_loss(support, support_labels, query, query_labels, ProtoConfig())
        return loss

    assert check_gradients(fn, [query, support]) < 1e-5
