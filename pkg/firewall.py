"""后门防火墙：离线逐类校准（质心、LOI、μ/σ）与在线投毒判定"""
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import CalibrationError, ConfigError, DataError, ShapeMismatchError
from layer_scope import compute_centroids, cosine_matrix, identify_loi, layer_cosines, mean_profile
from net_model import Network, TraceBatch, forward_batch
from utils import read_json, write_json

logger = logging.getLogger(__name__)

METRICS = ('cosine', 'euclidean')
SIGMA_FLOOR = 1e-12
FIREWALL_FORMAT = 'lfa-firewall'
FIREWALL_VERSION = 1


@dataclass
class ClassCalibration:
    """单个类的校准结果"""
    class_id: int
    loi: int
    window: Tuple[int, ...]
    centroids: Dict[int, np.ndarray]
    mu: float
    sigma: float
    sample_count: int

    def __post_init__(self):
        self.window = tuple(int(l) for l in self.window)
        if not 1 <= len(self.window) <= 3 or any(b <= a for a, b in zip(self.window, self.window[1:])):
            raise CalibrationError(f"类 {self.class_id} 的检测窗口无效: {self.window}")
        if self.sigma < 0:
            raise CalibrationError(f"类 {self.class_id} 的 σ 为负: {self.sigma}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'class_id': self.class_id,
            'loi': self.loi,
            'window': list(self.window),
            'centroids': {str(l): self.centroids[l].tolist() for l in self.window},
            'mu': self.mu,
            'sigma': self.sigma,
            'sample_count': self.sample_count,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ClassCalibration':
        return cls(
            class_id=int(data['class_id']),
            loi=int(data['loi']),
            window=tuple(data['window']),
            centroids={int(l): np.asarray(v, dtype=np.float64) for l, v in data['centroids'].items()},
            mu=float(data['mu']),
            sigma=float(data['sigma']),
            sample_count=int(data['sample_count']),
        )


@dataclass
class Verdict:
    """单个输入的判定结果"""
    predicted_class: int
    score: float
    threshold_value: float
    is_poisoned: bool
    metric: str = 'cosine'

    def recompute(self) -> bool:
        """由得分和阈值重新推出判定"""
        return is_alarm(self.score, self.threshold_value, self.metric)


def is_alarm(score, threshold, metric: str):
    """余弦：得分严格低于阈值；欧氏：距离严格高于阈值"""
    if metric == 'cosine':
        return score < threshold
    return score > threshold


@dataclass
class FirewallModel:
    """所有类的校准结果加上检测阈值 τ 和度量方式"""
    calibrations: Dict[int, ClassCalibration]
    tau: float
    metric: str
    num_classes: int
    input_shape: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        check_defense_settings(self.tau, self.metric)
        missing = [c for c in range(self.num_classes) if c not in self.calibrations]
        if missing:
            raise CalibrationError(f"以下类没有校准结果: {missing}")

    def calibration(self, class_id: int) -> ClassCalibration:
        cal = self.calibrations.get(int(class_id))
        if cal is None:
            raise CalibrationError(f"预测类 {class_id} 没有校准结果，防火墙状态损坏")
        return cal

    def threshold(self, class_id: int) -> float:
        """μ - τσ（余弦）或 μ + τσ（欧氏），σ 取下限 1e-12"""
        cal = self.calibration(class_id)
        sigma = max(cal.sigma, SIGMA_FLOOR)
        if self.metric == 'cosine':
            return cal.mu - self.tau * sigma
        return cal.mu + self.tau * sigma

    def thresholds(self) -> np.ndarray:
        return np.array([self.threshold(c) for c in range(self.num_classes)], dtype=np.float64)

    def with_tau(self, tau: float) -> 'FirewallModel':
        """同一校准结果换一个阈值"""
        return replace(self, tau=float(tau))

    def summary(self) -> pd.DataFrame:
        rows = []
        for c in range(self.num_classes):
            cal = self.calibrations[c]
            rows.append({
                'class': c,
                'loi': cal.loi,
                'window': '-'.join(str(l) for l in cal.window),
                'mu': cal.mu,
                'sigma': cal.sigma,
                'm': cal.sample_count,
                'threshold': self.threshold(c),
            })
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'format': FIREWALL_FORMAT,
            'version': FIREWALL_VERSION,
            'tau': self.tau,
            'metric': self.metric,
            'num_classes': self.num_classes,
            'input_shape': list(self.input_shape),
            'calibrations': [self.calibrations[c].to_dict() for c in sorted(self.calibrations)],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FirewallModel':
        if data.get('format') != FIREWALL_FORMAT:
            raise DataError(f"不是防火墙文件: format={data.get('format')}")
        if data.get('version') != FIREWALL_VERSION:
            raise DataError(f"不支持的防火墙文件版本: {data.get('version')}")
        cals = [ClassCalibration.from_dict(d) for d in data['calibrations']]
        return cls(
            calibrations={cal.class_id: cal for cal in cals},
            tau=float(data['tau']),
            metric=data['metric'],
            num_classes=int(data['num_classes']),
            input_shape=tuple(data.get('input_shape') or ()),
        )


def check_defense_settings(tau: float, metric: str) -> None:
    if not tau > 0:
        raise ConfigError(f"检测阈值 τ 必须为正: {tau}")
    if metric not in METRICS:
        raise ConfigError(f"未知度量: {metric}，可选 {METRICS}")


def save_firewall(fw: FirewallModel, path: str) -> None:
    """写出防火墙文件（键排序 JSON，浮点可精确还原）"""
    write_json(fw.to_dict(), path)


def load_firewall(path: str) -> FirewallModel:
    try:
        data = read_json(path)
    except (OSError, ValueError) as e:
        raise DataError(f"无法读取防火墙文件 {path}: {e}")
    return FirewallModel.from_dict(data)


# ---------------------------------------------------------------- 得分

def window_scores(batch: TraceBatch, centroids: Dict[int, np.ndarray], window: Sequence[int],
                  metric: str) -> np.ndarray:
    """窗口内逐层余弦相似度之和，或逐层欧氏距离之和"""
    total = np.zeros(len(batch), dtype=np.float64)
    for l in window:
        feats = batch.layer(l)
        if metric == 'cosine':
            total += cosine_matrix(feats, centroids[l])
        else:
            diff = feats.astype(np.float64) - centroids[l][None, :]
            total += np.linalg.norm(diff, axis=1)
    return total


def default_window(loi: int) -> Tuple[int, ...]:
    """{LOI-2, LOI-1, LOI}，下限截到第 1 层"""
    return tuple(range(max(1, loi - 2), loi + 1))


def _unpack_labeled(samples) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple):
        return np.asarray(samples[0], dtype=np.float32), np.asarray(samples[1], dtype=np.int64)
    return samples.images, samples.ground_truth


def _calibrate(net: Network, benign_val, tau: float, metric: str,
               choose_window: Callable[[TraceBatch, int], Tuple[int, Tuple[int, ...], Tuple[int, int]]]
               ) -> FirewallModel:
    check_defense_settings(tau, metric)
    net.check_analyzable()
    images, labels = _unpack_labeled(benign_val)
    if tuple(images.shape[1:]) != net.input_shape:
        raise ShapeMismatchError(f"校准样本形状 {images.shape[1:]} 与网络输入 {net.input_shape} 不一致")
    counts = np.bincount(labels, minlength=net.num_classes)
    short = [c for c in range(net.num_classes) if counts[c] < 2]
    if short:
        raise DataError(f"以下类的校准样本少于 2 个: {short}")

    _, traces = forward_batch(net.analysis_copy(), images)
    calibrations = {}
    for c in range(net.num_classes):
        sub = traces.subset(np.flatnonzero(labels == c))
        loi, window, cent_range = choose_window(sub, c)
        cents = compute_centroids(sub, cent_range, c)
        centroids = {l: cents.centroid(l) for l in window}
        scores = window_scores(sub, centroids, window, metric)
        calibrations[c] = ClassCalibration(c, loi, window, centroids, float(np.mean(scores)),
                                           float(np.std(scores)), len(sub))
        logger.debug(f"[Firewall] 类 {c}: LOI={loi}, 窗口={window}, μ={calibrations[c].mu:.6f}, "
                     f"σ={calibrations[c].sigma:.6f}, m={len(sub)}")
    return FirewallModel(calibrations, float(tau), metric, net.num_classes, net.input_shape)


def calibrate(net: Network, benign_val, tau: float = 2.5, metric: str = 'cosine') -> FirewallModel:
    """逐类校准：质心覆盖 max(1,⌊L/2⌋-2)..L，按余弦曲线识别 LOI，窗口得分求 μ 和总体标准差 σ"""
    L = net.tap_count
    cent_range = (max(1, L // 2 - 2), L)

    def choose(sub: TraceBatch, c: int):
        cents = compute_centroids(sub, cent_range, c)
        profile = mean_profile(layer_cosines(sub, cents), c, cent_range)
        loi = identify_loi(profile, start_layer=L // 2)
        return loi, default_window(loi), cent_range

    fw = _calibrate(net, benign_val, tau, metric, choose)
    logger.info(f"[Firewall] 校准完成: {fw.num_classes} 类, 度量 {metric}, τ={tau}")
    return fw


def calibrate_window(net: Network, benign_val, window: Sequence[int], tau: float = 2.5,
                     metric: str = 'cosine') -> FirewallModel:
    """使用给定窗口校准（逐层检测实验用），LOI 记为窗口最后一层"""
    window = tuple(int(l) for l in window)
    if not window or window[0] < 1 or window[-1] > net.tap_count:
        raise ConfigError(f"窗口 {window} 超出 1..{net.tap_count}")

    def choose(sub: TraceBatch, c: int):
        return window[-1], window, (window[0], window[-1])

    return _calibrate(net, benign_val, tau, metric, choose)


def score_arrays(net: Network, fw: FirewallModel, images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """批量计算 (预测类, 窗口得分)"""
    images = np.asarray(images, dtype=np.float32)
    if fw.input_shape and tuple(images.shape[1:]) != tuple(fw.input_shape):
        raise ShapeMismatchError(f"输入形状 {images.shape[1:]} 与防火墙 {fw.input_shape} 不一致")
    logits, traces = forward_batch(net.analysis_copy(), images)
    preds = np.argmax(logits, axis=1).astype(np.int64)
    scores = np.zeros(len(preds), dtype=np.float64)
    for c in np.unique(preds):
        cal = fw.calibration(int(c))
        rows = np.flatnonzero(preds == c)
        scores[rows] = window_scores(traces.subset(rows), cal.centroids, cal.window, fw.metric)
    return preds, scores


def score_batch(net: Network, fw: FirewallModel, samples: np.ndarray) -> List[Tuple[int, float]]:
    """逐样本 (ŷ, 得分)"""
    preds, scores = score_arrays(net, fw, samples)
    return [(int(p), float(s)) for p, s in zip(preds, scores)]


def flag_scores(fw: FirewallModel, preds: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """按预测类的阈值判定，返回布尔数组"""
    thresholds = fw.thresholds()[np.asarray(preds, dtype=np.int64)]
    return is_alarm(np.asarray(scores), thresholds, fw.metric)


def detect(net: Network, fw: FirewallModel, x: np.ndarray) -> Verdict:
    """单个输入的在线判定"""
    x = np.asarray(x, dtype=np.float32)
    if tuple(x.shape) != net.input_shape:
        raise ShapeMismatchError(f"输入形状 {x.shape} 与网络输入 {net.input_shape} 不一致")
    (pred, score), = score_batch(net, fw, x[None])
    threshold = fw.threshold(pred)
    return Verdict(pred, score, threshold, bool(is_alarm(score, threshold, fw.metric)), fw.metric)
