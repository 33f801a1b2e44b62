"""Tests for the encoder, the three extractor heads, the discriminator and checkpoints."""

from unittest.mock import Mock

import numpy as np
import pytest

from fewshotlib.exceptions import ConfigurationError
from fewshotlib.model import (
    CheckpointFormatError,
    DannDisabledError,
    EncoderConfig,
    ExtractorConfig,
    ExtractorKind,
    ModelConfig,
    ModelState,
    count_forwards,
    discriminate_dataset,
    encode,
    extract_glu,
    extract_lateral_inhibition,
    extract_mean_fc,
    lateral_inhibition,
    parameter_hash,
)
from fewshotlib.numerics import (
    DimensionError,
    ParameterError,
    Value,
    adam_step,
    check_gradients,
    constant,
    elementwise_mul,
    numeric_gradient,
    parameter,
    sum_all,
)
from tests.conftest import CHANNELS, tiny_config, tiny_model


def _fc(weight, bias):
    return {"fc.weight": parameter(weight), "fc.bias": parameter(bias)}


def test_encoder_preserves_length():
    """A one-frame input yields a one-frame latent of H channels."""
    model = tiny_model()
    assert model.latent(np.ones((1, CHANNELS))).shape == (1, 8)


def test_encoder_maps_zero_input_to_zero():
    """With zero biases a zero input stays zero through the rectified convs."""
    model = tiny_model()
    np.testing.assert_array_equal(model.latent(np.zeros((5, CHANNELS))).data, 0.0)


def test_encoder_rejects_channel_mismatch():
    """The input channel count must match the config."""
    with pytest.raises(DimensionError, match=f"expects {CHANNELS} input channels"):
        tiny_model().latent(np.zeros((4, CHANNELS + 1)))


def _relative_error(analytic, numeric, floor=1e-2):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _pin_gates(model, rng, open_only=False):
    """Hold every lateral-inhibition gate well away from its threshold."""
    if model.config.extractor.kind is not ExtractorKind.LATERAL_INHIBITION:
        return
    bias = model.theta_f["li.b"].data
    model.theta_f["li.W"].data[:] = 0.0
    bias[:] = 1.0 if open_only else rng.choice([-1.0, 1.0], size=bias.shape)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("kind", list(ExtractorKind))
def test_encoder_gradients_match_finite_differences(kind, seed):
    """Embedding gradients w.r.t. the encoder agree with central differences."""
    rng = np.random.default_rng(seed)
    model = tiny_model(kind=kind, dann=True, num_datasets=2, seed=seed)
    _pin_gates(model, rng, open_only=True)
    x = rng.normal(size=(int(rng.integers(1, 8)), CHANNELS))
    weights = rng.normal(size=8)

    def fn():
        return sum_all(elementwise_mul(model.embed(x), weights))

    assert check_gradients(fn, list(model.theta_m.values())) < 1e-5


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("kind", list(ExtractorKind))
def test_head_gradients_match_finite_differences(kind, seed):
    """Head gradients agree with central differences; the step-gate parameters are excluded."""
    rng = np.random.default_rng(50 + seed)
    model = tiny_model(kind=kind, dann=True, num_datasets=2, seed=seed)
    _pin_gates(model, rng)
    x = rng.normal(size=(int(rng.integers(1, 8)), CHANNELS))
    weights = rng.normal(size=8)

    def fn():
        return sum_all(elementwise_mul(model.embed(x), weights))

    checked = [p for name, p in model.theta_f.items() if not name.startswith("li.")]
    assert check_gradients(fn, checked) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_discriminator_gradients_match_finite_differences(seed):
    """Discriminator gradients match central differences; encoder ones are -lambda times theirs."""
    rng = np.random.default_rng(100 + seed)
    model = tiny_model(dann=True, num_datasets=2, seed=seed)
    x = rng.normal(size=(int(rng.integers(1, 8)), CHANNELS))
    weights = rng.normal(size=2)

    def fn():
        return sum_all(elementwise_mul(model.discriminate(model.latent(x)), weights))

    assert check_gradients(fn, list(model.theta_d.values())) < 1e-5
    model.zero_grad()
    fn().backward()
    lam = model.config.grl_lambda
    for name, param in model.theta_m.items():
        assert _relative_error(-param.grad / lam, numeric_gradient(fn, param)) < 1e-5, name


@pytest.mark.parametrize("kind", list(ExtractorKind))
@pytest.mark.parametrize("frames", [1, 7])
def test_every_head_returns_fixed_length_embedding(kind, frames):
    """Each head collapses any T >= 1 to a D-vector."""
    model = tiny_model(kind=kind)
    assert model.embed(np.ones((frames, CHANNELS))).shape == (8,)


def test_mean_fc_matches_two_step_oracle():
    """Time mean followed by the affine map."""
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 4))
    weight, bias = rng.normal(size=(4, 3)), rng.normal(size=3)
    config = ExtractorConfig(kind=ExtractorKind.MEAN_FC, embedding_dim=3)
    out = extract_mean_fc(constant(z), _fc(weight, bias), config)
    np.testing.assert_allclose(out.data, z.mean(axis=0) @ weight + bias, atol=1e-12)


def test_mean_fc_identity_returns_time_mean():
    """An identity FC with zero bias returns the time mean."""
    z = np.arange(12.0).reshape(3, 4)
    config = ExtractorConfig(kind=ExtractorKind.MEAN_FC, embedding_dim=4)
    out = extract_mean_fc(constant(z), _fc(np.eye(4), np.zeros(4)), config)
    np.testing.assert_allclose(out.data, z.mean(axis=0))


def _li_params(weight, bias, fc_weight, fc_bias):
    return {"li.W": parameter(weight), "li.b": parameter(bias), **_fc(fc_weight, fc_bias)}


def test_lateral_inhibition_open_gate_is_identity():
    """W = 0 and b > 0 open every gate."""
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(
        lateral_inhibition(constant(z), constant(np.zeros((3, 3))), constant(np.ones(3))).data, z
    )


def test_lateral_inhibition_closed_gate_yields_fc_bias():
    """W = 0 and b < 0 close every gate, leaving only the FC bias."""
    rng = np.random.default_rng(0)
    fc_bias = rng.normal(size=2)
    params = _li_params(np.zeros((3, 3)), -np.ones(3), rng.normal(size=(3, 2)), fc_bias)
    config = ExtractorConfig(kind=ExtractorKind.LATERAL_INHIBITION, embedding_dim=2)
    out = extract_lateral_inhibition(constant(rng.normal(size=(4, 3))), params, config)
    np.testing.assert_allclose(out.data, fc_bias)


def test_lateral_inhibition_ignores_self_weights():
    """Only diagonal weights cannot open a gate: a channel never gates itself."""
    z = np.abs(np.random.default_rng(0).normal(size=(3, 4))) + 1.0
    out = lateral_inhibition(constant(z), constant(100.0 * np.eye(4)), constant(-np.ones(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_lateral_inhibition_matches_matrix_oracle():
    """Random case agrees with explicit Diag/ZeroDiag matrix products per frame."""
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 4))
    weight, bias = rng.normal(size=(4, 4)), rng.normal(size=4) * 0.1
    fc_weight, fc_bias = rng.normal(size=(4, 2)), rng.normal(size=2)
    hollow = weight.T * (1.0 - np.eye(4))
    expected = []
    for x_t in z:
        gate = np.diag((x_t @ hollow + bias >= 0).astype(float))
        expected.append((x_t @ gate) @ fc_weight + fc_bias)
    config = ExtractorConfig(kind=ExtractorKind.LATERAL_INHIBITION, embedding_dim=2)
    params = _li_params(weight, bias, fc_weight, fc_bias)
    out = extract_lateral_inhibition(constant(z), params, config)
    np.testing.assert_allclose(out.data, np.mean(expected, axis=0), atol=1e-12)


def test_lateral_inhibition_gates_are_binary():
    """Gated outputs equal the input or exactly zero."""
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 5))
    weight, bias = constant(rng.normal(size=(5, 5))), constant(rng.normal(size=5))
    out = lateral_inhibition(constant(z), weight, bias)
    assert np.all((out.data == z) | (out.data == 0.0))


def _glu_params(a_kernel, a_bias, b_kernel, b_bias):
    return {
        "glu.a.kernel": parameter(a_kernel),
        "glu.a.bias": parameter(a_bias),
        "glu.b.kernel": parameter(b_kernel),
        "glu.b.bias": parameter(b_bias),
    }


def test_glu_with_zero_gate_branch_halves_linear_branch():
    """Conv_B = 0 gives max over time of 0.5 * Conv_A."""
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 3))
    kernel = rng.normal(size=(1, 3, 2))
    params = _glu_params(kernel, np.zeros(2), np.zeros((1, 3, 2)), np.zeros(2))
    out = extract_glu(constant(z), params, ExtractorConfig(embedding_dim=2, glu_kernel=1))
    np.testing.assert_allclose(out.data, (0.5 * (z @ kernel[0])).max(axis=0))


def test_glu_hand_computed_case():
    """Width-1 kernels on a 2×2 input match a hand computation."""
    z = np.array([[1.0, 2.0], [3.0, -1.0]])
    gate_bias = np.array([0.0, np.log(3.0)])
    params = _glu_params(np.eye(2)[None], np.zeros(2), np.zeros((1, 2, 2)), gate_bias)
    out = extract_glu(constant(z), params, ExtractorConfig(embedding_dim=2, glu_kernel=1))
    # gates are 0.5 and 0.75, giving frames [0.5, 1.5] and [1.5, -0.75]
    np.testing.assert_allclose(out.data, [1.5, 1.5])


def test_training_forward_needs_rng():
    """Dropout in training mode requires a generator."""
    model = tiny_model()
    with pytest.raises(ParameterError, match="random generator"):
        model.embed(np.ones((3, CHANNELS)), training=True)


def test_discriminator_forward_ignores_lambda():
    """The reversal scale only affects gradients."""
    model = tiny_model(dann=True, num_datasets=2)
    z = model.latent(np.random.default_rng(0).normal(size=(5, CHANNELS)))
    config = model.config.extractor
    low = discriminate_dataset(z, model.theta_d, 0.01, config)
    high = discriminate_dataset(z, model.theta_d, 1.0, config)
    assert low.shape == (2,)
    np.testing.assert_array_equal(low.data, high.data)


def test_discriminator_reverses_encoder_gradient():
    """Encoder gradients through the discriminator are -lambda times the unreversed control."""
    model = tiny_model(dann=True, num_datasets=2, seed=4)
    x = np.random.default_rng(0).normal(size=(5, CHANNELS))
    kernel = model.theta_m["encoder.conv0.kernel"]

    sum_all(model.discriminate(model.latent(x), reverse=False)).backward()
    control = kernel.grad.copy()
    model.zero_grad()
    sum_all(model.discriminate(model.latent(x))).backward()

    np.testing.assert_allclose(kernel.grad, -0.01 * control, rtol=1e-12, atol=1e-15)


def test_discriminator_requires_dann():
    """A model built without DANN has no discriminator."""
    model = tiny_model()
    with pytest.raises(DannDisabledError, match="without DANN"):
        model.discriminate(model.latent(np.ones((3, CHANNELS))))


def test_dann_needs_two_datasets():
    """One training dataset cannot be discriminated."""
    with pytest.raises(ConfigurationError, match="at least 2 training datasets"):
        tiny_config(dann=True, num_datasets=1)


def test_dann_branch_does_not_change_shared_parameters():
    """Enabling DANN draws the discriminator last, leaving encoder and head identical."""
    plain = tiny_model(seed=9)
    dann = tiny_model(dann=True, num_datasets=2, seed=9)
    shared = ("theta_m", "theta_f")
    assert parameter_hash(plain, shared) == parameter_hash(dann, shared)
    assert set(dann.groups()) == {"theta_m", "theta_f", "theta_d"}
    x = np.ones((4, CHANNELS))
    np.testing.assert_array_equal(plain.embed(x).data, dann.embed(x).data)


def test_snapshot_round_trip_is_bit_exact():
    """Restoring a snapshot reproduces parameters, optimizer moments and bytes."""
    model = tiny_model(dann=True, num_datasets=2)
    grads = {name: np.full(p.shape, 0.5) for name, p in model.theta_f.items()}
    adam_step(model.theta_f, grads, model.optimizers["theta_f"])
    blob = model.snapshot(extras={"probed": True})
    restored = ModelState.restore(blob)

    assert restored.snapshot() == blob
    assert parameter_hash(restored) == parameter_hash(model)
    assert restored.optimizers["theta_f"].step_count == 1
    assert restored.extras == {"probed": True}
    for name, moment in model.optimizers["theta_f"].m.items():
        np.testing.assert_array_equal(restored.optimizers["theta_f"].m[name], moment)


def test_restore_allocates_without_random_initialisation(monkeypatch):
    """Restoring fills a zero template instead of drawing and discarding a random model."""
    model = tiny_model(kind=ExtractorKind.LATERAL_INHIBITION, dann=True, num_datasets=2)
    blob = model.snapshot()
    monkeypatch.setattr(ModelState, "init", Mock(side_effect=AssertionError("init called")))
    monkeypatch.setattr(
        np.random, "default_rng", Mock(side_effect=AssertionError("generator created"))
    )
    restored = ModelState.restore(blob)
    assert parameter_hash(restored) == parameter_hash(model)
    assert restored.snapshot() == blob


def test_snapshot_is_deterministic():
    """Identical states serialize to identical bytes."""
    assert tiny_model(seed=1).snapshot() == tiny_model(seed=1).snapshot()


def test_restore_rejects_bad_magic():
    """A corrupted magic is a format error."""
    blob = tiny_model().snapshot()
    with pytest.raises(CheckpointFormatError, match="magic"):
        ModelState.restore(b"XXXX" + blob[4:])


def test_restore_rejects_truncation():
    """A truncated blob is a format error."""
    blob = tiny_model().snapshot()
    with pytest.raises(CheckpointFormatError, match="truncated"):
        ModelState.restore(blob[:-3])


def test_restore_names_mismatched_field():
    """A config mismatch names the dotted field."""
    blob = tiny_model().snapshot()
    encoder = EncoderConfig(CHANNELS, hidden_channels=16, num_layers=1, kernel_width=3)
    expected = ModelConfig(encoder=encoder, extractor=tiny_config().extractor)
    with pytest.raises(CheckpointFormatError, match="encoder.hidden_channels"):
        ModelState.restore(blob, expected_config=expected)


def test_count_forwards_counts_head_invocations():
    """Each embedding adds one head forward; counting stops outside the block."""
    model = tiny_model()
    x = np.ones((3, CHANNELS))
    with count_forwards(model) as tally:
        for _ in range(3):
            model.embed(x)
    model.embed(x)
    assert tally.count == 3


def test_copy_is_independent():
    """Mutating a copy leaves the original untouched."""
    model = tiny_model()
    clone = model.copy()
    clone.theta_m["encoder.conv0.bias"].data += 1.0
    assert parameter_hash(clone) != parameter_hash(model)


def test_set_trainable_freezes_group():
    """Frozen parameters receive no gradient."""
    model = tiny_model()
    model.set_trainable("theta_m", False)
    sum_all(model.embed(np.random.default_rng(0).normal(size=(4, CHANNELS)))).backward()
    assert all(p.grad is None for p in model.theta_m.values())
    assert all(p.grad is not None for p in model.theta_f.values())
    with pytest.raises(ConfigurationError, match="unknown parameter group"):
        model.set_trainable("theta_x", True)


def test_value_inputs_pass_through_encode():
    """encode accepts an existing graph node."""
    model = tiny_model()
    x = Value(np.ones((2, CHANNELS)))
    assert encode(x, model.theta_m, model.config.encoder).shape == (2, 8)
