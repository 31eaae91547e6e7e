import numpy as np
import pytest

from bench_model import AttackMetrics, DetectionMetrics, SweepReport, SweepRow, metrics_row
from errors import ComputationError, ConfigError, DataError
from evaluation import (ScoreCache, assert_disjoint, attack_metrics, check_grid, detection_metrics,
                        export_score_distribution, metric_comparison, per_layer_detection, split_calibration,
                        threshold_sweep)
from firewall import calibrate
from net_model import LayerSpec, Network
from poison_lab import ImageDataset, PoisonSpec, TriggerSpec, make_poisoned_test_set

SPEC = PoisonSpec(TriggerSpec.square_patch(2), target_class=1, poison_rate=0.1)


@pytest.fixture
def sets(tiny_data):
    _, test_set = tiny_data
    calib, benign = split_calibration(test_set, 0.1, seed=0)
    return calib, benign, make_poisoned_test_set(benign, SPEC)


def constant_net(target, num_classes=3, input_shape=(2, 8, 8)):
    """总是预测 target 的网络"""
    bias = np.zeros(num_classes)
    bias[target] = 1.0
    width = int(np.prod(input_shape))
    return Network([LayerSpec('flatten'),
                    LayerSpec('dense', {'weight': np.zeros((num_classes, width)), 'bias': bias})],
                   num_classes, input_shape)


def test_split_is_per_class_and_disjoint(tiny_data):
    _, test_set = tiny_data
    calib, rest = split_calibration(test_set, 0.1, seed=0)
    assert calib.class_counts().tolist() == [3, 3, 3]
    assert len(calib) + len(rest) == len(test_set)
    assert not set(calib.source_indices) & set(rest.source_indices)
    again, _ = split_calibration(test_set, 0.1, seed=0)
    np.testing.assert_array_equal(again.source_indices, calib.source_indices)


def test_split_keeps_two_calibration_samples(tiny_data):
    _, test_set = tiny_data
    calib, _ = split_calibration(test_set, 0.01, seed=0)
    assert calib.class_counts().tolist() == [2, 2, 2]


def test_split_needs_evaluation_samples():
    ds = ImageDataset(np.zeros((6, 1, 8, 8)), [0, 0, 1, 1, 1, 1], 2)
    with pytest.raises(DataError):
        split_calibration(ds, 0.5)


def test_overlap_detected(tiny_data):
    _, test_set = tiny_data
    with pytest.raises(DataError):
        assert_disjoint(test_set.subset([0, 1, 2]), test_set.subset([2, 3]))


def test_constant_predictor_has_full_asr(sets):
    _, benign, poisoned = sets
    metrics = attack_metrics(constant_net(1), benign, poisoned, 1)
    assert metrics.asr == 100.0
    assert metrics.ma == pytest.approx(100.0 * np.mean(benign.ground_truth == 1))


def test_counting_examples():
    attack = AttackMetrics.from_counts(9, 10, 3, 4)
    assert attack.ma == 90.0 and attack.asr == 75.0
    detection = DetectionMetrics.from_counts(9, 10, 1, 50)
    assert detection.tpr == 90.0 and detection.fpr == 2.0
    with pytest.raises(DataError):
        DetectionMetrics.from_counts(0, 0, 0, 1)


def test_detector_flagging_nothing(conv_net, sets):
    calib, benign, poisoned = sets
    fw = calibrate(conv_net, calib, tau=2.5)
    cache = ScoreCache.build(conv_net, fw, benign, poisoned)
    silent = cache.metrics(fw.with_tau(1e15))
    assert silent.tpr == 0.0 and silent.fpr == 0.0
    assert silent.total_poisoned == len(poisoned) and silent.total_benign == len(benign)


def test_empty_population_rejected(conv_net, sets):
    calib, benign, poisoned = sets
    fw = calibrate(conv_net, calib)
    with pytest.raises(DataError):
        detection_metrics(conv_net, fw, benign.subset([]), poisoned)


def test_threshold_sweep_is_monotone_and_matches_direct_run(conv_net, sets):
    calib, benign, poisoned = sets
    taus = [3.0, 0.5, 1.5, 2.5, 1.0, 2.0]
    rows = threshold_sweep(conv_net, calib, benign, poisoned, taus)
    assert [r.value for r in rows] == [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
    tprs = [r.get('tpr') for r in rows]
    fprs = [r.get('fpr') for r in rows]
    assert all(a >= b for a, b in zip(tprs, tprs[1:]))
    assert all(a >= b for a, b in zip(fprs, fprs[1:]))
    direct = detection_metrics(conv_net, calibrate(conv_net, calib, tau=2.5), benign, poisoned)
    assert rows[4].metrics == direct.to_dict()


def test_tau_grid_validation():
    assert check_grid([2.0, 1.0], 'tau', 0.0, float('inf')) == [1.0, 2.0]
    with pytest.raises(ConfigError):
        check_grid([1.0, 1.0], 'tau', 0.0, float('inf'))
    with pytest.raises(ConfigError):
        check_grid([0.0], 'tau', 0.0, float('inf'))
    with pytest.raises(ConfigError):
        check_grid([], 'tau', 0.0, float('inf'))
    assert check_grid([0.0, 1.0], 'beta', 0.0, 1.0, low_open=False, high_open=False) == [0.0, 1.0]


def test_per_layer_detection_structure(conv_net, sets):
    calib, benign, poisoned = sets
    rows = per_layer_detection(conv_net, calib, benign, poisoned, tau=2.5)
    assert len(rows) == conv_net.tap_count + 1
    assert [r.value for r in rows[:-1]] == [1, 2, 3, 4]
    assert rows[-1].label == 'ours'
    direct = detection_metrics(conv_net, calibrate(conv_net, calib, tau=2.5), benign, poisoned)
    assert rows[-1].metrics == direct.to_dict()


def test_metric_comparison_blocks(conv_net, sets):
    calib, benign, poisoned = sets
    taus = [1.0, 2.5]
    rows = metric_comparison(conv_net, calib, benign, poisoned, taus)
    assert len(rows) == 2 * len(taus)
    assert [r.block for r in rows] == ['cosine', 'cosine', 'euclidean', 'euclidean']
    plain = threshold_sweep(conv_net, calib, benign, poisoned, taus)
    assert [r.metrics for r in rows[:2]] == [r.metrics for r in plain]


def test_score_distribution_export(tmp_path, conv_net, sets):
    calib, benign, poisoned = sets
    fw = calibrate(conv_net, calib)
    frame = export_score_distribution(conv_net, fw, benign, poisoned, str(tmp_path / 'scores.csv'))
    assert len(frame) == len(benign) + len(poisoned)
    assert set(frame['population']) == {'benign', 'poisoned'}
    direct = detection_metrics(conv_net, fw, benign, poisoned)
    assert frame[frame.population == 'poisoned']['flagged'].sum() == direct.true_positives
    assert not set(frame[frame.population == 'benign']['index']) & set(calib.source_indices)


def test_report_rows_must_be_ordered():
    with pytest.raises(ConfigError):
        SweepReport('tau', 'tau', [SweepRow(2.0), SweepRow(1.0)])
    with pytest.raises(ComputationError):
        SweepReport('layer', 'layer', [SweepRow(1), SweepRow(None, label='ours'), SweepRow(2)])
    report = SweepReport('metric', 'tau', [SweepRow(1.0, block='cosine'), SweepRow(1.0, block='euclidean')])
    assert len(report) == 2


def test_report_files(tmp_path):
    rows = [metrics_row(0.5, detection=DetectionMetrics.from_counts(9, 10, 1, 50)),
            metrics_row(1.0, detection=DetectionMetrics.from_counts(4, 10, 0, 50))]
    report = SweepReport('tau', 'tau', rows, seed=7, config_digest='abc')
    csv_path, json_path = tmp_path / 'sweep.csv', tmp_path / 'sweep.json'
    report.write(str(csv_path), str(json_path))
    lines = csv_path.read_text(encoding='utf-8').splitlines()
    assert lines[:4] == ['# kind: tau', '# parameter: tau', '# seed: 7', '# config_digest: abc']
    assert lines[4] == 'tau,tpr,fpr,true_positives,total_poisoned,false_positives,total_benign'
    assert lines[5] == '0.500000,90.000000,2.000000,9,10,1,50'
    assert report.column('tpr') == [90.0, 40.0]
    assert report.get_row(1.0).get('fpr') == 0.0
    assert 'rows' in json_path.read_text(encoding='utf-8')
