"""Tests for feature files, log-mel extraction, SpecAugment and the synthetic corpus."""

from unittest.mock import Mock, call

import librosa
import numpy as np
import pytest
import soundfile as sf

from fewshotlib.episodes import SampleRecord, Split
from fewshotlib.features import (
    FeatureFormatError,
    FeatureSequence,
    FeatureStore,
    LengthError,
    SpecAugmentConfig,
    SyntheticCorpus,
    filter_by_length,
    generate_synthetic_corpus,
    log_mel,
    max_frames,
    read_feature_file,
    read_wav,
    spec_augment,
    write_feature_file,
)
from fewshotlib.numerics import NumericalError
from tests.conftest import class_specs


def _record(record_id="r0", path="features/r0.fseq", duration_s=1.0):
    return SampleRecord(
        id=record_id,
        path=path,
        label="c0",
        dataset="d0",
        language="en",
        split=Split.TRAIN,
        duration_s=duration_s,
    )


def test_feature_file_round_trip(tmp_path):
    """Float32-representable frames survive a write and read unchanged."""
    frames = np.arange(12, dtype=np.float32).reshape(4, 3).astype(np.float64) / 8
    path = write_feature_file(tmp_path / "x.fseq", FeatureSequence(frames=frames))
    loaded = read_feature_file(path)
    np.testing.assert_array_equal(loaded.frames, frames)
    assert (loaded.num_frames, loaded.num_channels) == (4, 3)


def test_feature_file_rejects_bad_magic(tmp_path):
    """A file that does not start with FSEQ is refused."""
    path = tmp_path / "x.fseq"
    write_feature_file(path, FeatureSequence(frames=np.ones((2, 2))))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FeatureFormatError, match="bad magic"):
        read_feature_file(path)


def test_feature_file_rejects_truncated_payload(tmp_path):
    """The payload size must match the header extents."""
    path = tmp_path / "x.fseq"
    write_feature_file(path, FeatureSequence(frames=np.ones((3, 2))))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FeatureFormatError, match="header implies"):
        read_feature_file(path)


def test_feature_sequence_rejects_empty_and_non_finite():
    """Sequences need T, F >= 1 and finite values."""
    with pytest.raises(NumericalError, match="T×F"):
        FeatureSequence(frames=np.zeros((0, 3)))
    with pytest.raises(NumericalError, match="NaN"):
        FeatureSequence(frames=np.array([[np.inf]]))


def test_log_mel_frame_count_and_shape():
    """One second at 16 kHz gives 1 + (16000 - 400) // 160 frames of n_mels channels."""
    pcm = np.random.default_rng(0).uniform(-0.5, 0.5, size=16000)
    features = log_mel(pcm, n_mels=40)
    assert features.frames.shape == (98, 40)
    assert features.sample_rate_hz == 16000


def test_log_mel_of_silence_is_log_floor():
    """Silent input maps to log(1e-6) in every cell."""
    features = log_mel(np.zeros(800), n_mels=8)
    np.testing.assert_allclose(features.frames, np.log(1e-6))


def test_log_mel_rejects_short_signal():
    """Fewer samples than one frame cannot be analysed."""
    with pytest.raises(LengthError, match="shorter than one 400-sample frame"):
        log_mel(np.zeros(399))


def test_read_wav_scales_pcm16(tmp_path):
    """PCM16 samples are read as floats in [-1, 1]."""
    path = tmp_path / "a.wav"
    sf.write(str(path), np.array([0, 16384, -32768], dtype=np.int16), 16000, subtype="PCM_16")
    np.testing.assert_allclose(read_wav(path), [0.0, 0.5, -1.0])


def test_read_wav_rejects_other_sample_rates(tmp_path):
    """Only 16 kHz input is accepted; nothing is resampled."""
    path = tmp_path / "a.wav"
    sf.write(str(path), np.zeros(100, dtype=np.int16), 8000, subtype="PCM_16")
    with pytest.raises(FeatureFormatError, match="16000 Hz"):
        read_wav(path)


def test_read_wav_rejects_stereo(tmp_path):
    """Multi-channel audio is refused."""
    path = tmp_path / "a.wav"
    sf.write(str(path), np.zeros((100, 2), dtype=np.int16), 16000, subtype="PCM_16")
    with pytest.raises(FeatureFormatError, match="mono"):
        read_wav(path)


def test_store_routes_wav_through_log_mel(tmp_path):
    """A .wav path yields log-mel features and is cached."""
    (tmp_path / "audio").mkdir()
    pcm = (np.random.default_rng(1).uniform(-0.3, 0.3, 4000) * 32767).astype(np.int16)
    sf.write(str(tmp_path / "audio" / "r0.wav"), pcm, 16000, subtype="PCM_16")
    store = FeatureStore(tmp_path, n_mels=16)
    record = _record(path="audio/r0.wav")
    features = store.get(record)
    assert features.frames.shape == (1 + (4000 - 400) // 160, 16)
    assert store.get(record) is features


def test_store_without_root_rejects_unknown_record():
    """An in-memory store only knows the sequences it was given."""
    with pytest.raises(FeatureFormatError, match="not in memory"):
        FeatureStore.from_memory({}).get(_record())


def test_length_filter_drops_long_records():
    """Records over the cap are removed, never truncated."""
    records = [_record("a", duration_s=9.375), _record("b", duration_s=9.376), _record("c")]
    assert [r.id for r in filter_by_length(records)] == ["a", "c"]
    assert max_frames() == 937


def test_length_filter_enforces_frame_cap_through_store():
    """A sequence over 937 frames is dropped even when its manifest duration is short."""
    records = [_record("fits"), _record("over")]
    store = FeatureStore.from_memory({
        "fits": FeatureSequence(frames=np.ones((937, 2))),
        "over": FeatureSequence(frames=np.ones((938, 2))),
    })
    assert [r.id for r in filter_by_length(records, store=store)] == ["fits"]
    assert [r.id for r in filter_by_length(records)] == ["fits", "over"]


def test_log_mel_peaks_in_band_nearest_sine():
    """A 440 Hz tone puts every frame's energy peak in the band centred nearest 440 Hz."""
    t = np.arange(16000) / 16000
    features = log_mel(0.5 * np.sin(2 * np.pi * 440.0 * t), n_mels=40)
    centres = librosa.mel_frequencies(n_mels=42, fmin=0.0, fmax=8000.0)[1:-1]
    expected = int(np.argmin(np.abs(centres - 440.0)))
    assert set(np.argmax(features.frames, axis=1).tolist()) == {expected}


def test_spec_augment_time_mask_zeroes_width_times_channels():
    """A width-3 time mask zeroes exactly 3·F cells; the width draw includes the maximum."""
    rng = Mock()
    rng.integers.side_effect = [3, 2]
    cfg = SpecAugmentConfig(num_time_masks=1, max_time_width=3, num_freq_masks=0)
    out = spec_augment(FeatureSequence(frames=np.ones((10, 5))), cfg, rng)
    assert int(np.sum(out.frames == 0.0)) == 3 * 5
    assert rng.integers.call_args_list == [call(0, 4), call(0, 8)]


def test_spec_augment_freq_mask_zeroes_width_times_frames():
    """A width-3 frequency mask zeroes exactly 3·T cells."""
    rng = Mock()
    rng.integers.side_effect = [3, 1]
    cfg = SpecAugmentConfig(num_time_masks=0, num_freq_masks=1, max_freq_width=3)
    out = spec_augment(FeatureSequence(frames=np.ones((10, 6))), cfg, rng)
    assert int(np.sum(out.frames == 0.0)) == 3 * 10
    np.testing.assert_array_equal(out.frames[:, 1:4], 0.0)


def test_spec_augment_differs_across_seeds():
    """Different generator seeds place different masks."""
    x = FeatureSequence(frames=np.arange(1.0, 201.0).reshape(20, 10))
    outputs = {
        spec_augment(x, SpecAugmentConfig(), np.random.default_rng(seed)).frames.tobytes()
        for seed in range(5)
    }
    assert len(outputs) > 1


def test_spec_augment_applies_scripted_masks():
    """Masks land at the drawn starts with the drawn widths."""
    rng = Mock()
    # time: (width 2, start 1), (width 0, start 0); freq: (width 1, start 3), (width 0, start 0)
    rng.integers.side_effect = [2, 1, 0, 0, 1, 3, 0, 0]
    x = FeatureSequence(frames=np.ones((6, 5)))
    out = spec_augment(x, SpecAugmentConfig(), rng)

    expected = np.ones((6, 5))
    expected[1:3, :] = 0.0
    expected[:, 3:4] = 0.0
    np.testing.assert_array_equal(out.frames, expected)
    np.testing.assert_array_equal(x.frames, np.ones((6, 5)))


def test_spec_augment_clamps_widths_to_extent():
    """Widths never exceed the axis, so a two-frame input is never indexed out of range."""
    x = FeatureSequence(frames=np.ones((2, 3)))
    for seed in range(20):
        out = spec_augment(x, SpecAugmentConfig(), np.random.default_rng(seed))
        assert out.frames.shape == (2, 3)


def test_spec_augment_disabled_is_identity():
    """With no masks the copy equals the input."""
    x = FeatureSequence(frames=np.arange(6.0).reshape(2, 3))
    out = spec_augment(x, SpecAugmentConfig.disabled(), np.random.default_rng(0))
    np.testing.assert_array_equal(out.frames, x.frames)


def test_synthetic_corpus_counts_and_splits():
    """4 classes, 30 samples, 2 datasets give 240 records split 18/6/6 per class."""
    corpus = generate_synthetic_corpus(class_specs(), 30, 2, np.random.default_rng(0))
    assert len(corpus.records) == 240
    class_records = [r for r in corpus.records if r.label == "c0" and r.dataset == "synth0"]
    per_split = {s: sum(r.split == s for r in class_records) for s in Split}
    assert per_split == {Split.TRAIN: 18, Split.VALIDATION: 6, Split.TEST: 6}
    assert all(4 <= corpus.sequences[r.id].num_frames <= 8 for r in corpus.records)


def test_synthetic_corpus_is_deterministic():
    """Equal seeds produce identical records and frames."""
    a = generate_synthetic_corpus(class_specs(), 5, 2, np.random.default_rng(3))
    b = generate_synthetic_corpus(class_specs(), 5, 2, np.random.default_rng(3))
    assert a.records == b.records
    for record in a.records:
        np.testing.assert_array_equal(a.sequences[record.id].frames, b.sequences[record.id].frames)


def test_synthetic_corpus_heldout_dataset():
    """A held-out dataset goes entirely to its assigned split."""
    rng = np.random.default_rng(0)
    corpus = generate_synthetic_corpus(class_specs(), 5, 3, rng, heldout={2: Split.TEST})
    assert {r.split for r in corpus.records if r.dataset == "synth2"} == {Split.TEST}


def test_synthetic_dataset_shift_moves_means():
    """Dataset d adds d times the shift vector to each frame."""
    specs = class_specs(num_classes=1, noise=1e-3, shift=5.0)
    corpus = generate_synthetic_corpus(specs, 4, 2, np.random.default_rng(0))

    def frames(dataset):
        return np.vstack([corpus.sequences[r.id].frames for r in corpus.records
                          if r.dataset == dataset])

    base, shifted = frames("synth0"), frames("synth1")
    assert shifted.mean() - base.mean() == pytest.approx(5.0, abs=0.05)


def test_generator_returns_synthetic_corpus_resolving_its_sequences():
    """The generator output converts to a corpus serving the generated frames."""
    synthetic = generate_synthetic_corpus(class_specs(), 3, 1, np.random.default_rng(0))
    assert isinstance(synthetic, SyntheticCorpus)
    corpus = synthetic.as_corpus()
    assert corpus.records == synthetic.records
    for record in corpus.records:
        assert corpus.features(record) is synthetic.sequences[record.id]
    assert corpus.num_channels == 6
