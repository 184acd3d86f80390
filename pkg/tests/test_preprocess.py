"""Windowing, spectral features against a naive DFT oracle, and synthesis."""

import numpy as np
import pytest

from reststream import preprocess
from reststream.errors import ValidationError
from reststream.preprocess import LOG_EPS, SynthConfig


def naive_dft_amplitudes(signal: np.ndarray) -> np.ndarray:
    """O(L^2) reference: |sum_n x_n exp(-2 pi i k n / L)| for k = 0..L//2."""
    length = signal.shape[0]
    k = np.arange(length // 2 + 1)
    n = np.arange(length)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / length)
    return np.abs(basis @ signal.astype(np.complex128))


# ---------------------------------------------------------------------------
# windowing


def test_window_partition_drops_trailing_remainder():
    stream = np.arange(10 * 4 * 2, dtype=float).reshape(40, 2)
    clips = preprocess.window_stream(stream, rate=4, clip_seconds=4)
    assert clips.shape == (2, 4, 4, 2)
    # seconds 0-4 then 4-8; the 8-10 remainder is dropped
    assert np.array_equal(clips[0].reshape(16, 2), stream[:16])
    assert np.array_equal(clips[1].reshape(16, 2), stream[16:32])


def test_window_unit_stride_overlap():
    stream = np.arange(10 * 4 * 1, dtype=float).reshape(40, 1)
    clips = preprocess.window_stream(stream, 4, 4, stride_seconds=1)
    assert clips.shape == (7, 4, 4, 1)
    for c in range(7):
        assert np.array_equal(clips[c].reshape(16, 1), stream[4 * c : 4 * c + 16])


def test_window_overlap_shares_exact_samples():
    rng = np.random.default_rng(0)
    stream = rng.standard_normal((12 * 8, 3))
    clips = preprocess.window_stream(stream, 8, 4, stride_seconds=2)
    # consecutive clips share (clip_seconds - stride) seconds of samples
    tail = clips[0].reshape(32, 3)[16:]
    head = clips[1].reshape(32, 3)[:16]
    assert np.array_equal(tail, head)


def test_window_short_stream_rejected():
    with pytest.raises(ValidationError, match="shorter"):
        preprocess.window_stream(np.zeros((12, 2)), rate=4, clip_seconds=4)


def test_window_shape_and_argument_validation():
    with pytest.raises(ValidationError):
        preprocess.window_stream(np.zeros(16), 4, 1)
    with pytest.raises(ValidationError):
        preprocess.window_stream(np.zeros((16, 2)), 4, 0)
    with pytest.raises(ValidationError):
        preprocess.window_stream(np.zeros((16, 2)), 4, 2, stride_seconds=0)


# ---------------------------------------------------------------------------
# spectral features


@pytest.mark.parametrize("length", [8, 200, 256])
def test_spectral_features_match_naive_dft(length):
    rng = np.random.default_rng(length)
    window = rng.standard_normal((length, 3))
    out = preprocess.spectral_features(window)
    m = length // 2
    assert out.shape == (m, 3)
    for ch in range(3):
        amps = naive_dft_amplitudes(window[:, ch])
        expect = np.log(amps[1 : m + 1] + LOG_EPS)
        denom = np.maximum(np.abs(expect), np.abs(out[:, ch]))
        rel = np.abs(out[:, ch] - expect) / np.maximum(denom, 1e-9)
        assert rel.max() <= 1e-6


def test_spectral_keep_dc_variant_matches_oracle():
    rng = np.random.default_rng(9)
    window = rng.standard_normal((16, 2))
    out = preprocess.spectral_features(window, keep_dc=True)
    amps = naive_dft_amplitudes(window[:, 0])
    expect = np.log(amps[0:8] + LOG_EPS)
    assert np.allclose(out[:, 0], expect, rtol=1e-9, atol=1e-9)


def test_unit_sine_peaks_at_its_bin():
    length, m = 200, 100
    t = np.arange(length)
    window = np.sin(2 * np.pi * 5 * t / length)[:, None]
    out = preprocess.spectral_features(window, m)
    assert out.shape == (m, 1)
    # DC is dropped, so oscillation bin 5 lands at feature index 4
    assert int(np.argmax(out[:, 0])) == 4
    kept = preprocess.spectral_features(window, m, keep_dc=True)
    assert int(np.argmax(kept[:, 0])) == 5


def test_constant_signal_gives_log_epsilon_features():
    window = np.full((32, 2), 3.7)
    out = preprocess.spectral_features(window)
    assert np.allclose(out, np.log(LOG_EPS), atol=1e-3)


def test_spectral_default_feature_count_and_bounds():
    out = preprocess.spectral_features(np.random.default_rng(0).standard_normal((200, 4)))
    assert out.shape == (100, 4)
    with pytest.raises(ValidationError):
        preprocess.spectral_features(np.zeros((8, 2)), n_features=5)
    with pytest.raises(ValidationError):
        preprocess.spectral_features(np.zeros((8, 2)), n_features=0)


# ---------------------------------------------------------------------------
# normalization


def test_znorm_mean_and_variance():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((3, 50, 4)) * 3.0 + 1.0
    out = preprocess.znorm_features(feats)
    mean = out.mean(axis=-2)
    var = out.var(axis=-2)
    assert np.abs(mean).max() <= 1e-6
    assert np.abs(var - 1.0).max() <= 1e-4


def test_znorm_constant_vector_maps_to_zeros():
    out = preprocess.znorm_features(np.full((2, 8, 3), 5.0))
    assert np.array_equal(out, np.zeros((2, 8, 3)))


def test_znorm_matches_two_pass_scalar_oracle():
    rng = np.random.default_rng(2)
    feats = rng.standard_normal((2, 9, 3))
    out = preprocess.znorm_features(feats)
    for t in range(2):
        for ch in range(3):
            v = feats[t, :, ch]
            mu = sum(v) / len(v)
            sd = np.sqrt(sum((x - mu) ** 2 for x in v) / len(v))
            expect = (v - mu) / (sd + preprocess.NORM_EPS)
            assert np.allclose(out[t, :, ch], expect, atol=1e-12)


def test_pipeline_shape_and_determinism():
    rng = np.random.default_rng(3)
    stream = rng.standard_normal((6 * 32, 5))
    a = preprocess.preprocess_stream(stream, 32, 3)
    b = preprocess.preprocess_stream(stream, 32, 3)
    assert a.shape == (2, 3, 16, 5)
    assert np.array_equal(a, b)
    # every feature vector is normalized
    assert np.abs(a.mean(axis=-2)).max() <= 1e-5
    assert np.abs(a.var(axis=-2) - 1.0).max() <= 1e-4


# ---------------------------------------------------------------------------
# datasets on disk


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    feats = rng.standard_normal((6, 2, 8, 3)).astype(np.float32).astype(np.float64)
    ds = preprocess.ClipSet(feats, np.array([0, 1, 0, 1, 0, 1]))
    preprocess.save_dataset(tmp_path, ds)
    back = preprocess.load_dataset(tmp_path)
    assert np.array_equal(back.features, feats)
    assert np.array_equal(back.labels, ds.labels)
    assert back.labels.dtype == np.int64
    assert len(back) == 6
    clip = back.clip(1)
    assert clip.label == 1
    assert np.array_equal(clip.features, feats[1])


def test_dataset_non_integer_labels_rejected(tmp_path):
    from reststream import tensorio

    feats = np.zeros((2, 1, 4, 2))
    preprocess.save_dataset(tmp_path, preprocess.ClipSet(feats, np.array([0, 1])))
    tensorio.save_tensor(tmp_path / "labels.rten", np.array([0.0, 1.5]))
    with pytest.raises(ValidationError, match="non-integer"):
        preprocess.load_dataset(tmp_path)


def test_clipset_shape_validation():
    with pytest.raises(ValidationError):
        preprocess.ClipSet(np.zeros((2, 3, 4)), np.array([0, 1]))
    with pytest.raises(ValidationError):
        preprocess.ClipSet(np.zeros((2, 1, 4, 2)), np.array([0, 1, 0]))


# ---------------------------------------------------------------------------
# synthetic task


def test_synth_noise_free_clip_is_periodic_on_cluster():
    config = SynthConfig(noise=0.0, seconds=2, clips_per_class=1)
    rng = np.random.default_rng(0)
    clip = preprocess.synth_raw_clip(config, label=0, rng=rng)
    period = config.rate // config.freqs[0]
    assert config.rate % config.freqs[0] == 0  # exact period in samples
    cluster = config.cluster(0)
    for node in range(config.nodes):
        if node in cluster:
            assert np.allclose(clip[:-period, node], clip[period:, node], atol=1e-9)
            assert np.abs(clip[:, node]).max() > 0
        else:
            assert np.array_equal(clip[:, node], np.zeros(clip.shape[0]))


def test_synth_deterministic_and_balanced():
    config = SynthConfig(clips_per_class=100, seconds=2)
    a = preprocess.make_synth_dataset(config)
    b = preprocess.make_synth_dataset(config)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    assert len(a) == 200
    assert int((a.labels == 0).sum()) == 100
    assert int((a.labels == 1).sum()) == 100


def test_synth_seed_changes_data():
    config = SynthConfig(clips_per_class=3, seconds=2)
    a = preprocess.make_synth_dataset(config, seed=0)
    b = preprocess.make_synth_dataset(config, seed=1)
    assert not np.array_equal(a.features, b.features)


def test_synth_clusters_are_disjoint():
    config = SynthConfig(nodes=8, classes=2, cluster_size=3)
    assert config.cluster(0) == [0, 1, 2]
    assert config.cluster(1) == [4, 5, 6]
    assert not set(config.cluster(0)) & set(config.cluster(1))


def test_synth_feature_shape_matches_config():
    config = SynthConfig(seconds=3, clips_per_class=2)
    ds = preprocess.make_synth_dataset(config)
    assert ds.features.shape == (4, 3, config.rate // 2, config.nodes)


def test_synth_config_validation():
    with pytest.raises(ValidationError):
        SynthConfig(freqs=(4,))  # one frequency for two classes
    with pytest.raises(ValidationError):
        SynthConfig(freqs=(4, 16))  # at the Nyquist limit for rate 32
    with pytest.raises(ValidationError):
        SynthConfig(cluster_size=5)  # clusters would overlap on 8 nodes
    with pytest.raises(ValidationError):
        SynthConfig(rate=31)
    with pytest.raises(ValidationError):
        SynthConfig(noise=-1.0)
    with pytest.raises(ValidationError):
        SynthConfig(amp_min=0.0)


def test_synth_config_from_mapping():
    config = SynthConfig.from_mapping(
        {"nodes": "6", "classes": "3", "freqs": "3,7,11", "cluster_size": "2",
         "noise": "0.5", "rate": "32", "seconds": "4"}
    )
    assert config.nodes == 6
    assert config.freqs == (3, 7, 11)
    assert config.cluster(2) == [4, 5]
    with pytest.raises(ValidationError, match="unknown config key"):
        SynthConfig.from_mapping({"wavelength": "9"})
    with pytest.raises(ValidationError, match="config key nodes"):
        SynthConfig.from_mapping({"nodes": "six"})


def test_circle_layout_points_on_unit_circle():
    names, coords = preprocess.circle_layout(8)
    assert len(names) == 8
    radii = np.sqrt((coords[:, :2] ** 2).sum(axis=1))
    assert np.allclose(radii, 1.0, atol=1e-12)
    assert np.array_equal(coords[:, 2], np.zeros(8))
