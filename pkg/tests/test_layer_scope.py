import numpy as np
import pandas as pd
import pytest

from errors import DataError, ShapeMismatchError
from layer_scope import (PROFILE_COLUMNS, SimilarityProfile, SimilarityRecord, compute_centroids,
                         cosine_matrix, export_profiles, identify_loi, layerwise_analysis, layerwise_cosine,
                         mean_profile)
from net_model import ActivationTrace, predict


def trace_of(*vectors):
    return ActivationTrace([np.asarray(v, dtype=np.float64) for v in vectors])


def brute_force_loi(values, first, start):
    best, loi = None, None
    for l in range(start + 1, first + len(values)):
        jump = values[l - first] - values[l - 1 - first]
        if best is None or jump > best:
            best, loi = jump, l
    return loi


def test_single_trace_centroid_is_the_trace():
    trace = trace_of([1.0, 2.0], [3.0, 0.0, 4.0])
    cents = compute_centroids([trace], (1, 2))
    np.testing.assert_array_equal(cents.centroid(1), [1.0, 2.0])
    np.testing.assert_array_equal(cents.centroid(2), [3.0, 0.0, 4.0])
    assert cents.sample_count == 1


def test_symmetric_centroid():
    cents = compute_centroids([trace_of([1.0, 0.0]), trace_of([0.0, 1.0])], (1, 1))
    np.testing.assert_array_equal(cents.centroid(1), [0.5, 0.5])


def test_centroid_matches_summation_oracle():
    rng = np.random.default_rng(0)
    vectors = rng.normal(size=(5, 8))
    cents = compute_centroids([trace_of(v) for v in vectors], (1, 1))
    oracle = [sum(vectors[i][j] for i in range(5)) / 5 for j in range(8)]
    np.testing.assert_allclose(cents.centroid(1), oracle, atol=1e-12)


def test_centroid_unchanged_by_duplication():
    rng = np.random.default_rng(1)
    traces = [trace_of(rng.uniform(size=4), rng.uniform(size=3)) for _ in range(6)]
    base = compute_centroids(traces, (1, 2))
    tripled = compute_centroids(traces * 3, (1, 2))
    for l in (1, 2):
        np.testing.assert_allclose(tripled.centroid(l), base.centroid(l), atol=1e-12)


def test_empty_and_inconsistent_traces_rejected():
    with pytest.raises(DataError):
        compute_centroids([], (1, 1))
    with pytest.raises(ShapeMismatchError):
        compute_centroids([trace_of([1.0, 2.0]), trace_of([1.0, 2.0, 3.0])], (1, 1))


def test_layer_range_outside_trace_rejected():
    with pytest.raises(DataError):
        compute_centroids([trace_of([1.0])], (1, 2))


def test_cosine_hand_values():
    cents = compute_centroids([trace_of([2.0, 1.0, 2.0], [1.0, 0.0], [1.0, 1.0])], (1, 3))
    record = layerwise_cosine(trace_of([1.0, 2.0, 2.0], [0.0, 3.0], [2.0, 2.0]), cents)
    assert record.value(1) == pytest.approx(8 / 9, abs=1e-12)
    assert record.value(2) == pytest.approx(0.0, abs=1e-12)
    assert record.value(3) == pytest.approx(1.0, abs=1e-12)


def test_zero_vector_cosine_is_zero():
    assert cosine_matrix(np.zeros((1, 3)), np.array([1.0, 2.0, 3.0]))[0] == 0.0
    assert cosine_matrix(np.ones((1, 3)), np.zeros(3))[0] == 0.0


def test_cosine_width_mismatch_rejected():
    cents = compute_centroids([trace_of([1.0, 2.0])], (1, 1))
    with pytest.raises(ShapeMismatchError):
        layerwise_cosine(trace_of([1.0, 2.0, 3.0]), cents)


def test_cosine_bounded_and_scale_invariant():
    rng = np.random.default_rng(2)
    centroid = rng.normal(size=16)
    feats = rng.normal(size=(1000, 16))
    cos = cosine_matrix(feats, centroid)
    assert np.all((cos >= -1) & (cos <= 1))
    np.testing.assert_allclose(cosine_matrix(feats * 37.5, centroid), cos, atol=1e-6)
    np.testing.assert_allclose(cosine_matrix(feats[:1], feats[0]), [1.0], atol=1e-12)


def test_mean_profile_arithmetic():
    records = [SimilarityRecord((1, 2), np.array([0.2, 0.8])), SimilarityRecord((1, 2), np.array([0.4, 0.6]))]
    profile = mean_profile(records, class_id=0)
    np.testing.assert_allclose(profile.values, [0.3, 0.7], atol=1e-12)
    single = mean_profile(records[:1], class_id=0)
    np.testing.assert_array_equal(single.values, records[0].values)


def test_mean_profile_matches_brute_force():
    rng = np.random.default_rng(3)
    matrix = rng.uniform(-1, 1, size=(100, 6))
    records = [SimilarityRecord((3, 8), row) for row in matrix]
    profile = mean_profile(records, class_id=2)
    oracle = [sum(matrix[i][j] for i in range(100)) / 100 for j in range(6)]
    np.testing.assert_allclose(profile.values, oracle, atol=1e-12)
    assert profile.layer_range == (3, 8)


def test_mean_profile_rejects_empty_and_mixed_ranges():
    with pytest.raises(DataError):
        mean_profile([], class_id=0)
    with pytest.raises(DataError):
        mean_profile([SimilarityRecord((1, 2), np.zeros(2)), SimilarityRecord((2, 3), np.zeros(2))], 0)


def test_loi_single_dominant_jump():
    profile = SimilarityProfile(0, (5, 9), np.array([0.20, 0.30, 0.35, 0.90, 0.95]))
    assert identify_loi(profile) == 8
    assert identify_loi(profile, start_layer=5) == 8


def test_loi_uniform_increments_keep_first_layer():
    profile = SimilarityProfile(0, (5, 9), np.array([0.0, 0.25, 0.5, 0.75, 1.0]))
    assert identify_loi(profile) == 6


def test_loi_matches_brute_force_on_random_profiles():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        values = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=10) if rng.uniform() < 0.3 \
            else rng.uniform(-1, 1, size=10)
        profile = SimilarityProfile(0, (1, 10), values)
        assert identify_loi(profile, start_layer=5) == brute_force_loi(values, 1, 5)


def test_loi_needs_two_layers():
    with pytest.raises(DataError):
        identify_loi(SimilarityProfile(0, (4, 4), np.array([0.5])))
    with pytest.raises(DataError):
        identify_loi(SimilarityProfile(0, (1, 6), np.zeros(6)), start_layer=6)


def test_export_profiles(tmp_path):
    benign = SimilarityProfile(0, (5, 9), np.array([0.20, 0.30, 0.35, 0.90, 0.95]))
    poisoned = SimilarityProfile(0, (5, 9), np.array([0.10, 0.30, 0.25, 0.40, 0.85]))
    path = tmp_path / 'profiles.csv'
    frame = export_profiles(benign, poisoned, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == ','.join(PROFILE_COLUMNS)
    assert len(lines) == 6
    assert lines[4] == '8,0.900000,0.400000,0.500000'
    np.testing.assert_allclose(frame['diff'], benign.values - poisoned.values)
    np.testing.assert_allclose(pd.read_csv(path)['layer'], [5, 6, 7, 8, 9])


def test_export_profiles_range_mismatch(tmp_path):
    a = SimilarityProfile(0, (5, 9), np.zeros(5))
    b = SimilarityProfile(0, (4, 8), np.zeros(5))
    with pytest.raises(DataError):
        export_profiles(a, b, str(tmp_path / 'x.csv'))


def test_layerwise_analysis_on_untrained_net(conv_net, tiny_data):
    _, test_set = tiny_data
    images = test_set.images
    labels = predict(conv_net.analysis_copy(), images)
    target = int(np.bincount(labels).argmax())
    analysis = layerwise_analysis(conv_net, images[:10], images, images[::-1], target)
    assert analysis.centroids.layer_range == (1, conv_net.tap_count)
    assert analysis.benign_profile.layer_range == (1, 4)
    assert 3 <= analysis.loi <= 4
    assert analysis.benign_count == int(np.sum(labels == target))


def test_oracles_on_random_small_inputs():
    rng = np.random.default_rng(10)
    for _ in range(1000):
        m, widths = int(rng.integers(1, 5)), [int(w) for w in rng.integers(1, 6, size=2)]
        traces = [trace_of(*(rng.uniform(0, 2, size=w) for w in widths)) for _ in range(m)]
        cents = compute_centroids(traces, (1, 2))
        records = [layerwise_cosine(t, cents) for t in traces]
        for l, w in zip((1, 2), widths):
            centroid = [sum(t.layer(l)[j] for t in traces) / m for j in range(w)]
            np.testing.assert_allclose(cents.centroid(l), centroid, atol=1e-12)
            c_norm = sum(c * c for c in centroid) ** 0.5
            for t, r in zip(traces, records):
                a = t.layer(l)
                a_norm = sum(v * v for v in a) ** 0.5
                expected = 0.0 if a_norm == 0 or c_norm == 0 else \
                    sum(a[j] * centroid[j] for j in range(w)) / (a_norm * c_norm)
                assert r.value(l) == pytest.approx(expected, abs=1e-12)
        profile = mean_profile(records, class_id=0)
        for i in range(2):
            assert profile.values[i] == pytest.approx(sum(r.values[i] for r in records) / m, abs=1e-12)
