"""逐层特征分析：类质心、逐层余弦相似度、平均相似度曲线、LOI 识别与曲线导出"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import DataError, ShapeMismatchError
from net_model import ActivationTrace, Network, TraceBatch, forward_batch
from utils import ensure_parent

logger = logging.getLogger(__name__)

PROFILE_COLUMNS = ['layer', 'benign_mean_cs', 'poisoned_mean_cs', 'diff']

Traces = Union[TraceBatch, Sequence[ActivationTrace]]


def _as_batch(traces: Traces) -> TraceBatch:
    if isinstance(traces, TraceBatch):
        if len(traces) == 0:
            raise DataError("轨迹列表为空")
        return traces
    return TraceBatch.from_traces(list(traces))


def _layers(layer_range: Tuple[int, int]) -> List[int]:
    first, last = layer_range
    return list(range(first, last + 1))


def _check_range(layer_range: Tuple[int, int], tap_count: int) -> Tuple[int, int]:
    first, last = int(layer_range[0]), int(layer_range[1])
    if first < 1 or last > tap_count or first > last:
        raise DataError(f"层范围 {first}..{last} 超出 1..{tap_count}")
    return first, last


@dataclass
class ClassCentroids:
    """类 t 在 layer_range 各层上的良性特征质心"""
    class_id: int
    layer_range: Tuple[int, int]
    centroids: Dict[int, np.ndarray]
    sample_count: int

    @property
    def layers(self) -> List[int]:
        return _layers(self.layer_range)

    def centroid(self, l: int) -> np.ndarray:
        if l not in self.centroids:
            raise DataError(f"类 {self.class_id} 没有第 {l} 层质心")
        return self.centroids[l]


@dataclass
class SimilarityRecord:
    """单个样本在各层与质心的余弦相似度"""
    layer_range: Tuple[int, int]
    values: np.ndarray

    def value(self, l: int) -> float:
        return float(self.values[l - self.layer_range[0]])


@dataclass
class SimilarityProfile:
    """类 t 的逐层平均相似度曲线"""
    class_id: int
    layer_range: Tuple[int, int]
    values: np.ndarray

    @property
    def layers(self) -> List[int]:
        return _layers(self.layer_range)

    def value(self, l: int) -> float:
        first, last = self.layer_range
        if not first <= l <= last:
            raise DataError(f"第 {l} 层不在曲线范围 {first}..{last} 内")
        return float(self.values[l - first])


def compute_centroids(traces: Traces, layer_range: Tuple[int, int], class_id: int = 0) -> ClassCentroids:
    """â_t^l：各层特征的逐元素均值（float64 累加）"""
    batch = _as_batch(traces)
    first, last = _check_range(layer_range, batch.tap_count)
    centroids = {l: batch.layer(l).astype(np.float64).mean(axis=0) for l in range(first, last + 1)}
    return ClassCentroids(class_id, (first, last), centroids, len(batch))


def cosine_matrix(features: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    """每行特征与质心的余弦相似度，零向量记为 0"""
    feats = np.asarray(features, dtype=np.float64)
    centroid = np.asarray(centroid, dtype=np.float64)
    if feats.shape[-1] != centroid.shape[0]:
        raise ShapeMismatchError(f"特征宽度 {feats.shape[-1]} 与质心宽度 {centroid.shape[0]} 不一致")
    a_norm = np.linalg.norm(feats, axis=-1)
    c_norm = np.linalg.norm(centroid)
    denom = a_norm * c_norm
    dots = feats @ centroid
    with np.errstate(invalid='ignore', divide='ignore'):
        cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)


def layer_cosines(batch: TraceBatch, cents: ClassCentroids, layers: Optional[Sequence[int]] = None) -> np.ndarray:
    """批量逐层余弦相似度，返回 (样本数, 层数)"""
    layers = cents.layers if layers is None else list(layers)
    return np.stack([cosine_matrix(batch.layer(l), cents.centroid(l)) for l in layers], axis=1)


def layerwise_cosine(trace: ActivationTrace, cents: ClassCentroids) -> SimilarityRecord:
    """cs^l = <a^l, â^l> / (|a^l|·|â^l|)"""
    values = []
    for l in cents.layers:
        vec = np.ravel(trace.layer(l))
        values.append(cosine_matrix(vec[None, :], cents.centroid(l))[0])
    return SimilarityRecord(cents.layer_range, np.asarray(values, dtype=np.float64))


def mean_profile(records: Union[Sequence[SimilarityRecord], np.ndarray], class_id: int,
                 layer_range: Optional[Tuple[int, int]] = None) -> SimilarityProfile:
    """逐层算术平均；可直接传入 (样本数, 层数) 矩阵并给出 layer_range"""
    if isinstance(records, np.ndarray):
        if records.ndim != 2 or records.shape[0] == 0:
            raise DataError("相似度记录为空")
        if layer_range is None or layer_range[1] - layer_range[0] + 1 != records.shape[1]:
            raise DataError(f"层范围 {layer_range} 与矩阵列数 {records.shape[1]} 不一致")
        return SimilarityProfile(class_id, tuple(layer_range), records.astype(np.float64).mean(axis=0))

    if len(records) == 0:
        raise DataError("相似度记录为空")
    ranges = {tuple(r.layer_range) for r in records}
    if len(ranges) != 1:
        raise DataError(f"相似度记录层范围不一致: {sorted(ranges)}")
    matrix = np.stack([r.values for r in records]).astype(np.float64)
    return SimilarityProfile(class_id, ranges.pop(), matrix.mean(axis=0))


def identify_loi(profile: SimilarityProfile, start_layer: Optional[int] = None) -> int:
    """取相邻层相似度增量最大的层；从 start+1 开始扫描，只在严格更大时更新"""
    first, last = profile.layer_range
    start = first if start_layer is None else int(start_layer)
    if start < first or start + 1 > last:
        raise DataError(f"曲线 {first}..{last} 不足以从第 {start} 层开始识别 LOI（至少需要两层）")
    values = profile.values
    loi = start + 1
    best = values[loi - first] - values[start - first]
    for l in range(start + 2, last + 1):
        jump = values[l - first] - values[l - 1 - first]
        if jump > best:
            best = jump
            loi = l
    return loi


def profile_frame(benign: SimilarityProfile, poisoned: SimilarityProfile) -> pd.DataFrame:
    if tuple(benign.layer_range) != tuple(poisoned.layer_range):
        raise DataError(f"曲线层范围不一致: {benign.layer_range} vs {poisoned.layer_range}")
    return pd.DataFrame({
        'layer': benign.layers,
        'benign_mean_cs': benign.values,
        'poisoned_mean_cs': poisoned.values,
        'diff': benign.values - poisoned.values,
    }, columns=PROFILE_COLUMNS)


def export_profiles(benign: SimilarityProfile, poisoned: SimilarityProfile, path: str) -> pd.DataFrame:
    """导出逐层曲线 CSV：layer,benign_mean_cs,poisoned_mean_cs,diff（6 位小数）"""
    frame = profile_frame(benign, poisoned)
    try:
        ensure_parent(path)
        frame.to_csv(path, index=False, float_format='%.6f', lineterminator='\n')
    except OSError as e:
        raise DataError(f"无法写出曲线文件 {path}: {e}")
    return frame


@dataclass
class LayerwiseAnalysis:
    """一次逐层分析的结果"""
    target_class: int
    centroids: ClassCentroids
    benign_profile: SimilarityProfile
    poisoned_profile: SimilarityProfile
    loi: int
    benign_count: int
    poisoned_count: int
    poisoned_fallback: bool


def layerwise_analysis(net: Network, calib_images: np.ndarray, benign_images: np.ndarray,
                       poisoned_images: np.ndarray, target_class: int) -> LayerwiseAnalysis:
    """用目标类校准样本求全部 L 层质心，比较被判为 t 的良性/投毒样本的逐层曲线"""
    net.check_analyzable()
    L = net.tap_count
    if len(calib_images) == 0:
        raise DataError(f"目标类 {target_class} 没有校准样本")
    net = net.analysis_copy()
    _, calib_traces = forward_batch(net, calib_images)
    cents = compute_centroids(calib_traces, (1, L), target_class)

    # 1. 良性：被判为 t 的目标类测试样本
    logits, benign_traces = forward_batch(net, benign_images)
    hit = np.flatnonzero(np.argmax(logits, axis=1) == target_class)
    if hit.size == 0:
        raise DataError(f"没有被判为目标类 {target_class} 的良性样本")
    benign_profile = mean_profile(layer_cosines(benign_traces.subset(hit), cents), target_class, (1, L))

    # 2. 投毒：被判为 t 的触发样本，没有则退回全部投毒样本
    logits, poisoned_traces = forward_batch(net, poisoned_images)
    p_hit = np.flatnonzero(np.argmax(logits, axis=1) == target_class)
    fallback = p_hit.size == 0
    if fallback:
        logger.warning(f"没有投毒样本被判为目标类 {target_class}，使用全部 {len(poisoned_images)} 个投毒样本")
        p_hit = np.arange(len(poisoned_images))
    poisoned_profile = mean_profile(layer_cosines(poisoned_traces.subset(p_hit), cents), target_class, (1, L))

    loi = identify_loi(benign_profile, start_layer=L // 2)
    logger.info(f"[Scope] 目标类 {target_class}: LOI={loi}, 良性 {hit.size} 个, 投毒 {p_hit.size} 个")
    return LayerwiseAnalysis(target_class, cents, benign_profile, poisoned_profile, loi,
                             int(hit.size), int(p_hit.size), fallback)
