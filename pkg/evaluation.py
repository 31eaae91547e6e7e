"""评估：校准集划分、MA/ASR、TPR/FPR、阈值扫描、逐层检测、度量对比、得分分布导出"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from bench_model import AttackMetrics, DetectionMetrics, SweepRow, metrics_row
from errors import ConfigError, DataError
from firewall import FirewallModel, calibrate, calibrate_window, flag_scores, score_arrays
from net_model import Network, predict
from poison_lab import ImageDataset
from utils import ensure_parent

logger = logging.getLogger(__name__)

DEFAULT_TAUS = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
SCORE_COLUMNS = ['population', 'index', 'true_label', 'predicted_class', 'score', 'threshold', 'flagged']


def split_calibration(test_set: ImageDataset, fraction: float = 0.1, seed: int = 0
                      ) -> Tuple[ImageDataset, ImageDataset]:
    """每类随机抽取 fraction 的良性测试样本作为校准集，其余用于评估；两者不相交"""
    if not 0 < fraction < 1:
        raise ConfigError(f"校准比例必须在 (0,1) 内: {fraction}")
    rng = np.random.default_rng(seed)
    labels = test_set.ground_truth
    picked = []
    for c in range(test_set.num_classes):
        idx = np.flatnonzero(labels == c)
        take = max(2, math.ceil(round(fraction * len(idx), 9)))
        if take >= len(idx):
            raise DataError(f"类 {c} 只有 {len(idx)} 个测试样本，无法划出 {take} 个校准样本并保留评估样本")
        picked.append(rng.choice(idx, size=take, replace=False))
    calib_idx = np.sort(np.concatenate(picked))
    mask = np.ones(len(test_set), dtype=bool)
    mask[calib_idx] = False
    calib, rest = test_set.subset(calib_idx), test_set.subset(np.flatnonzero(mask))
    assert_disjoint(calib, rest)
    return calib, rest


def assert_disjoint(calib: ImageDataset, evaluation: ImageDataset) -> None:
    """校准样本不得出现在评估集中"""
    overlap = np.intersect1d(calib.source_indices, evaluation.source_indices)
    if overlap.size:
        raise DataError(f"校准集与评估集有 {overlap.size} 个重叠样本: {overlap[:5].tolist()}")


def attack_metrics(net: Network, benign_test: ImageDataset, poisoned_test: ImageDataset,
                   target_class: int) -> AttackMetrics:
    """MA 以真实标签计，ASR 为投毒测试样本被判为目标类的比例"""
    if len(benign_test) == 0 or len(poisoned_test) == 0:
        raise DataError("良性或投毒测试集为空")
    benign_pred = predict(net, benign_test.images)
    poisoned_pred = predict(net, poisoned_test.images)
    return AttackMetrics.from_counts(
        int(np.sum(benign_pred == benign_test.ground_truth)), len(benign_test),
        int(np.sum(poisoned_pred == target_class)), len(poisoned_test))


@dataclass
class ScoreCache:
    """一次打分的缓存，换阈值时无需重新前向"""
    benign_preds: np.ndarray
    benign_scores: np.ndarray
    poisoned_preds: np.ndarray
    poisoned_scores: np.ndarray

    @classmethod
    def build(cls, net: Network, fw: FirewallModel, benign_test: ImageDataset,
              poisoned_test: ImageDataset) -> 'ScoreCache':
        if len(benign_test) == 0 or len(poisoned_test) == 0:
            raise DataError("良性或投毒评估集为空")
        bp, bs = score_arrays(net, fw, benign_test.images)
        pp, ps = score_arrays(net, fw, poisoned_test.images)
        return cls(bp, bs, pp, ps)

    def metrics(self, fw: FirewallModel) -> DetectionMetrics:
        benign_flags = flag_scores(fw, self.benign_preds, self.benign_scores)
        poisoned_flags = flag_scores(fw, self.poisoned_preds, self.poisoned_scores)
        return DetectionMetrics.from_counts(int(np.sum(poisoned_flags)), len(poisoned_flags),
                                            int(np.sum(benign_flags)), len(benign_flags))


def detection_metrics(net: Network, fw: FirewallModel, benign_test: ImageDataset,
                      poisoned_test: ImageDataset) -> DetectionMetrics:
    """所有良性样本计入 FPR 分母，所有投毒样本计入 TPR 分母，均按各自预测类判定"""
    return ScoreCache.build(net, fw, benign_test, poisoned_test).metrics(fw)


def check_grid(values: Sequence[float], name: str, low: float, high: float,
               low_open: bool = True, high_open: bool = True) -> List[float]:
    values = [float(v) for v in values]
    if not values:
        raise ConfigError(f"{name} 网格为空")
    for v in values:
        below = v <= low if low_open else v < low
        above = v >= high if high_open else v > high
        if below or above:
            raise ConfigError(f"{name} 取值超出范围: {v}")
    if len(set(values)) != len(values):
        raise ConfigError(f"{name} 网格有重复取值: {values}")
    return sorted(values)


def check_taus(taus: Sequence[float]) -> List[float]:
    return check_grid(taus, 'tau', 0.0, math.inf)


def threshold_sweep(net: Network, calib: ImageDataset, benign_test: ImageDataset,
                    poisoned_test: ImageDataset, taus: Sequence[float] = DEFAULT_TAUS,
                    metric: str = 'cosine', block: Optional[str] = None) -> List[SweepRow]:
    """一次校准 + 一次打分，逐个 τ 重新判定"""
    taus = check_taus(taus)
    fw = calibrate(net, calib, tau=taus[0], metric=metric)
    cache = ScoreCache.build(net, fw, benign_test, poisoned_test)
    return [metrics_row(tau, detection=cache.metrics(fw.with_tau(tau)), block=block) for tau in taus]


def per_layer_detection(net: Network, calib: ImageDataset, benign_test: ImageDataset,
                        poisoned_test: ImageDataset, tau: float = 2.5,
                        metric: str = 'cosine') -> List[SweepRow]:
    """每个分接层单独校准检测，最后一行为三层窗口方法"""
    rows = []
    for l in range(1, net.tap_count + 1):
        fw = calibrate_window(net, calib, (l,), tau=tau, metric=metric)
        rows.append(metrics_row(l, detection=detection_metrics(net, fw, benign_test, poisoned_test)))
    fw = calibrate(net, calib, tau=tau, metric=metric)
    rows.append(metrics_row(None, detection=detection_metrics(net, fw, benign_test, poisoned_test),
                            label='ours'))
    return rows


def metric_comparison(net: Network, calib: ImageDataset, benign_test: ImageDataset,
                      poisoned_test: ImageDataset, taus: Sequence[float] = DEFAULT_TAUS) -> List[SweepRow]:
    """余弦与欧氏两个块，每块 |taus| 行"""
    rows = []
    for metric in ('cosine', 'euclidean'):
        rows.extend(threshold_sweep(net, calib, benign_test, poisoned_test, taus, metric, block=metric))
    return rows


def score_frame(net: Network, fw: FirewallModel, benign_test: ImageDataset,
                poisoned_test: ImageDataset) -> pd.DataFrame:
    """逐样本窗口得分、预测类、阈值与判定"""
    cache = ScoreCache.build(net, fw, benign_test, poisoned_test)
    thresholds = fw.thresholds()
    frames = []
    for population, ds, preds, scores in (
            ('benign', benign_test, cache.benign_preds, cache.benign_scores),
            ('poisoned', poisoned_test, cache.poisoned_preds, cache.poisoned_scores)):
        frames.append(pd.DataFrame({
            'population': population,
            'index': ds.source_indices,
            'true_label': ds.ground_truth,
            'predicted_class': preds,
            'score': scores,
            'threshold': thresholds[preds],
            'flagged': flag_scores(fw, preds, scores).astype(int),
        }, columns=SCORE_COLUMNS))
    return pd.concat(frames, ignore_index=True)


def export_score_distribution(net: Network, fw: FirewallModel, benign_test: ImageDataset,
                              poisoned_test: ImageDataset, path: str) -> pd.DataFrame:
    """导出得分分布 CSV，用于绘制良性/投毒得分直方图"""
    frame = score_frame(net, fw, benign_test, poisoned_test)
    ensure_parent(path)
    frame.to_csv(path, index=False, float_format='%.6f', lineterminator='\n')
    return frame
