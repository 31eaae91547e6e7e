"""投毒实验室：合成数据集、BadNets/Blended 触发器、投毒训练/测试集、自适应攻击训练"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DataError, ShapeMismatchError
from net_model import Network, TrainConfig, forward_batch
from trainer import BatchObjective, SGDTrainer, train

logger = logging.getLogger(__name__)

MOTIF_KINDS = ('square', 'hstripes', 'vstripes', 'disk')
MIN_IMAGE_SIZE = 8
BACKGROUND = 0.1


@dataclass
class ImageSample:
    """单张图像样本，像素形状 (C,H,W)，取值 [0,1]"""
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise ShapeMismatchError(f"图像必须是 (C,H,W)，实际为 {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise DataError("像素值必须在 [0,1] 内")
        self.label = int(self.label)


@dataclass
class ImageDataset:
    """图像样本集合

    labels 是训练/评估时使用的标签；投毒训练集中 true_labels 保留原始标签，
    投毒测试集中 labels 即真实标签，target_class 记录攻击目标。
    """
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    true_labels: Optional[np.ndarray] = None
    source_indices: Optional[np.ndarray] = None
    target_class: Optional[int] = None
    poison_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.poison_indices = np.asarray(self.poison_indices, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeMismatchError(f"图像数组必须是 (N,C,H,W)，实际为 {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"图像数 {self.images.shape[0]} 与标签数 {self.labels.shape[0]} 不一致")
        if self.source_indices is None:
            self.source_indices = np.arange(len(self.labels), dtype=np.int64)
        else:
            self.source_indices = np.asarray(self.source_indices, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def ground_truth(self) -> np.ndarray:
        """真实标签"""
        return self.true_labels if self.true_labels is not None else self.labels

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int]) -> 'ImageDataset':
        """按下标取子集，source_indices 继续指向原始集合"""
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            true_labels=None if self.true_labels is None else self.true_labels[idx],
            source_indices=self.source_indices[idx],
            target_class=self.target_class,
        )


# ---------------------------------------------------------------- 合成数据

@dataclass
class SyntheticDatasetConfig:
    """合成数据集配置"""
    num_classes: int = 10
    image_size: int = 16
    channels: int = 3
    train_count: int = 2000
    test_count: int = 500
    noise_level: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"类别数至少为 2: {self.num_classes}")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigError(f"样本数必须为正: train={self.train_count}, test={self.test_count}")
        if self.channels < 1:
            raise ConfigError(f"通道数必须为正: {self.channels}")
        if self.noise_level < 0:
            raise ConfigError(f"noise_level 不能为负: {self.noise_level}")
        if self.seed < 0:
            raise ConfigError(f"seed 必须为无符号整数: {self.seed}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'num_classes': self.num_classes,
            'image_size': self.image_size,
            'channels': self.channels,
            'train_count': self.train_count,
            'test_count': self.test_count,
            'noise_level': self.noise_level,
            'seed': self.seed,
        }


def _motif_mask(kind: str, size: int, top: int, left: int, extent: int) -> np.ndarray:
    """生成类别图案的二值掩码"""
    mask = np.zeros((size, size), dtype=bool)
    rows = slice(top, top + extent)
    cols = slice(left, left + extent)
    if kind == 'square':
        mask[rows, cols] = True
    elif kind == 'hstripes':
        mask[top:top + extent:2, cols] = True
    elif kind == 'vstripes':
        mask[rows, left:left + extent:2] = True
    else:
        yy, xx = np.mgrid[0:size, 0:size]
        r = (extent - 1) / 2.0
        cy, cx = top + r, left + r
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r + 0.25
    return mask


def _class_motifs(config: SyntheticDatasetConfig, rng: np.random.Generator) -> List[Dict[str, Any]]:
    size = config.image_size
    extent = max(3, size // 4)
    # 图案与右下角保持 3 像素间距，避免覆盖默认触发器位置
    hi = size - extent - 3
    motifs = []
    for c in range(config.num_classes):
        top = int(rng.integers(1, hi + 1))
        left = int(rng.integers(1, hi + 1))
        motifs.append({
            'mask': _motif_mask(MOTIF_KINDS[c % len(MOTIF_KINDS)], size, top, left, extent),
            'color': rng.uniform(0.35, 1.0, size=config.channels),
        })
    return motifs


def _render(motif: Dict[str, Any], config: SyntheticDatasetConfig, rng: np.random.Generator) -> np.ndarray:
    size = config.image_size
    img = np.full((config.channels, size, size), BACKGROUND, dtype=np.float64)
    brightness = 1.0
    if config.noise_level > 0:
        brightness = 1.0 + config.noise_level * rng.uniform(-1.0, 1.0)
    img[:, motif['mask']] = (motif['color'] * brightness)[:, None]
    if config.noise_level > 0:
        img += rng.normal(0.0, config.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_split(motifs, count: int, config: SyntheticDatasetConfig, rng) -> ImageDataset:
    labels = rng.permutation(np.arange(count) % config.num_classes)
    images = np.stack([_render(motifs[c], config, rng) for c in labels])
    return ImageDataset(images, labels, config.num_classes)


def gen_synthetic_dataset(config: SyntheticDatasetConfig) -> Tuple[ImageDataset, ImageDataset]:
    """生成 C 类程序化图像（形状/条纹/圆斑，类别相关的位置与颜色），返回 (训练集, 测试集)"""
    config.validate()
    if config.image_size < MIN_IMAGE_SIZE:
        raise DataError(f"图像尺寸 {config.image_size} 太小，至少需要 {MIN_IMAGE_SIZE}")
    rng = np.random.default_rng(config.seed)
    motifs = _class_motifs(config, rng)
    train_set = _render_split(motifs, config.train_count, config, rng)
    test_set = _render_split(motifs, config.test_count, config, rng)
    logger.info(f"[Data] 生成合成数据: {config.num_classes} 类, "
                f"{config.channels}x{config.image_size}x{config.image_size}, "
                f"训练 {len(train_set)} / 测试 {len(test_set)}")
    return train_set, test_set


# ---------------------------------------------------------------- 触发器

@dataclass
class TriggerSpec:
    """触发器：patch 为贴片，blended 为全图混合"""
    kind: str
    patch_pixels: Optional[np.ndarray] = None
    anchor: Optional[Tuple[int, int]] = None
    pattern: Optional[np.ndarray] = None
    blend_ratio: float = 0.1

    def __post_init__(self):
        if self.kind not in ('patch', 'blended'):
            raise ConfigError(f"未知触发器类型: {self.kind}")
        if self.kind == 'patch':
            if self.patch_pixels is None:
                raise ConfigError("patch 触发器需要 patch_pixels")
            self.patch_pixels = np.asarray(self.patch_pixels, dtype=np.float32)
            if self.patch_pixels.ndim != 3:
                raise ConfigError(f"patch_pixels 必须是 (C,h,w): {self.patch_pixels.shape}")
            if self.anchor is not None:
                self.anchor = (int(self.anchor[0]), int(self.anchor[1]))
        else:
            if self.pattern is None:
                raise ConfigError("blended 触发器需要 pattern")
            self.pattern = np.asarray(self.pattern, dtype=np.float32)
            if not 0 < self.blend_ratio < 1:
                raise ConfigError(f"blend_ratio 必须在 (0,1) 内: {self.blend_ratio}")

    @classmethod
    def square_patch(cls, channels: int, size: int = 2, value: float = 1.0,
                     anchor: Optional[Tuple[int, int]] = None) -> 'TriggerSpec':
        """纯色方块贴片，默认贴在右下角"""
        return cls('patch', patch_pixels=np.full((channels, size, size), value, dtype=np.float32), anchor=anchor)

    @classmethod
    def noise_blend(cls, image_shape: Sequence[int], ratio: float = 0.1, seed: int = 0) -> 'TriggerSpec':
        """随机噪声全图混合"""
        rng = np.random.default_rng(seed)
        pattern = rng.uniform(0.0, 1.0, size=tuple(image_shape)).astype(np.float32)
        return cls('blended', pattern=pattern, blend_ratio=ratio)

    def resolve_anchor(self, image_shape: Sequence[int]) -> Tuple[int, int]:
        """贴片左上角坐标；未指定时为右下角"""
        _, h, w = image_shape
        ph, pw = self.patch_pixels.shape[1:]
        if self.anchor is None:
            return h - ph, w - pw
        return self.anchor

    def check_image_shape(self, image_shape: Sequence[int]) -> None:
        image_shape = tuple(image_shape)
        if self.kind == 'patch':
            c, h, w = image_shape
            pc, ph, pw = self.patch_pixels.shape
            if pc != c:
                raise ShapeMismatchError(f"贴片通道数 {pc} 与图像通道数 {c} 不一致")
            row, col = self.resolve_anchor(image_shape)
            if row < 0 or col < 0 or row + ph > h or col + pw > w:
                raise DataError(f"贴片锚点 ({row},{col}) 越界，图像尺寸 {h}x{w}，贴片 {ph}x{pw}")
        elif self.pattern.shape != image_shape:
            raise ShapeMismatchError(f"混合图案形状 {self.pattern.shape} 与图像形状 {image_shape} 不一致")

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == 'patch':
            return {
                'kind': 'patch',
                'patch_pixels': self.patch_pixels.tolist(),
                'anchor': None if self.anchor is None else list(self.anchor),
            }
        return {'kind': 'blended', 'pattern': self.pattern.tolist(), 'blend_ratio': self.blend_ratio}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TriggerSpec':
        if data.get('kind') == 'patch':
            anchor = data.get('anchor')
            return cls('patch', patch_pixels=np.asarray(data['patch_pixels'], dtype=np.float32),
                       anchor=None if anchor is None else tuple(anchor))
        return cls('blended', pattern=np.asarray(data['pattern'], dtype=np.float32),
                   blend_ratio=float(data['blend_ratio']))


def stamp_trigger(images: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """对 (C,H,W) 或 (N,C,H,W) 图像施加触发器，返回新数组"""
    images = np.asarray(images, dtype=np.float32)
    trigger.check_image_shape(images.shape[-3:])
    if trigger.kind == 'patch':
        out = images.copy()
        row, col = trigger.resolve_anchor(images.shape[-3:])
        ph, pw = trigger.patch_pixels.shape[1:]
        out[..., row:row + ph, col:col + pw] = trigger.patch_pixels
        return out
    lam = trigger.blend_ratio
    blended = (1.0 - lam) * images.astype(np.float64) + lam * trigger.pattern.astype(np.float64)
    return np.clip(blended, 0.0, 1.0).astype(np.float32)


def apply_patch_trigger(img: ImageSample, trigger: TriggerSpec) -> ImageSample:
    """贴片触发器：覆盖锚定区域像素，标签不变"""
    if trigger.kind != 'patch':
        raise DataError(f"apply_patch_trigger 需要 patch 触发器，实际为 {trigger.kind}")
    return ImageSample(stamp_trigger(img.pixels, trigger), img.label)


def apply_blended_trigger(img: ImageSample, trigger: TriggerSpec) -> ImageSample:
    """混合触发器：clamp((1-λ)·x + λ·p, 0, 1)"""
    if trigger.kind != 'blended':
        raise DataError(f"apply_blended_trigger 需要 blended 触发器，实际为 {trigger.kind}")
    return ImageSample(stamp_trigger(img.pixels, trigger), img.label)


# ---------------------------------------------------------------- 投毒

@dataclass
class PoisonSpec:
    """投毒参数"""
    trigger: TriggerSpec
    target_class: int
    poison_rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.poison_rate < 1:
            raise ConfigError(f"poison_rate 必须在 (0,1) 内: {self.poison_rate}")
        if self.target_class < 0:
            raise ConfigError(f"target_class 不能为负: {self.target_class}")
        if self.seed < 0:
            raise ConfigError(f"seed 必须为无符号整数: {self.seed}")

    def check_classes(self, num_classes: int) -> None:
        if not 0 <= self.target_class < num_classes:
            raise DataError(f"目标类 {self.target_class} 超出范围 0..{num_classes - 1}")

    def poison_count(self, n: int) -> int:
        """⌈rate·N⌉"""
        return math.ceil(round(self.poison_rate * n, 9))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'trigger': self.trigger.to_dict(),
            'target_class': self.target_class,
            'poison_rate': self.poison_rate,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PoisonSpec':
        return cls(TriggerSpec.from_dict(data['trigger']), int(data['target_class']),
                   float(data['poison_rate']), int(data.get('seed', 0)))


def poison_train_set(train_set: ImageDataset, spec: PoisonSpec) -> Tuple[ImageDataset, np.ndarray]:
    """随机选取 ⌈rate·N⌉ 个样本施加触发器并改标为目标类（脏标签投毒）"""
    spec.check_classes(train_set.num_classes)
    n = len(train_set)
    if spec.poison_rate * n < 1:
        raise DataError(f"投毒比例 {spec.poison_rate} 在 {n} 个样本上不足 1 个")
    count = spec.poison_count(n)
    rng = np.random.default_rng(spec.seed)
    indices = np.sort(rng.choice(n, size=count, replace=False)).astype(np.int64)

    images = train_set.images.copy()
    images[indices] = stamp_trigger(images[indices], spec.trigger)
    labels = train_set.labels.copy()
    labels[indices] = spec.target_class
    poisoned = ImageDataset(
        images=images,
        labels=labels,
        num_classes=train_set.num_classes,
        true_labels=train_set.ground_truth.copy(),
        source_indices=train_set.source_indices,
        target_class=spec.target_class,
        poison_indices=indices,
    )
    logger.info(f"[Poison] 投毒 {count}/{n} 个训练样本, 目标类 {spec.target_class}, 触发器 {spec.trigger.kind}")
    return poisoned, indices


def make_poisoned_test_set(test_set: ImageDataset, spec: PoisonSpec) -> ImageDataset:
    """对真实标签不是目标类的测试样本施加触发器，保留真实标签"""
    spec.check_classes(test_set.num_classes)
    keep = np.flatnonzero(test_set.ground_truth != spec.target_class)
    if keep.size == 0:
        raise DataError(f"测试集全部属于目标类 {spec.target_class}，无法构造投毒测试集")
    subset = test_set.subset(keep)
    subset.images = stamp_trigger(subset.images, spec.trigger)
    subset.target_class = spec.target_class
    return subset


# ---------------------------------------------------------------- 自适应攻击

class AngularDeviationObjective(BatchObjective):
    """自适应攻击目标：(1-β)·交叉熵 + β·L_cd

    L_cd 为批内投毒样本在分析层上与目标类良性质心的平均余弦距离 (1 - cos)。
    质心在每轮开始时由良性目标类训练样本重新计算。
    """

    def __init__(self, images: np.ndarray, benign_target: np.ndarray, poison_mask: np.ndarray,
                 layers: Sequence[int], beta: float):
        self.images = images
        self.benign_target = benign_target
        self.poison_mask = poison_mask
        self.layers = list(layers)
        self.beta = float(beta)
        self.centroids: Dict[int, np.ndarray] = {}

    def on_epoch_start(self, net: Network, epoch: int) -> None:
        _, traces = forward_batch(net, self.images[self.benign_target])
        self.centroids = {l: traces.layer(l).astype(np.float64).mean(axis=0) for l in self.layers}

    def extra_terms(self, batch_indices: np.ndarray, taps: List[np.ndarray]
                    ) -> Tuple[float, Optional[Dict[int, np.ndarray]]]:
        rows = np.flatnonzero(self.poison_mask[batch_indices])
        if rows.size == 0:
            return 0.0, None
        scale = 1.0 / (rows.size * len(self.layers))
        total = 0.0
        tap_grads = {}
        for l in self.layers:
            tap = taps[l - 1]
            feats = tap[rows].reshape(rows.size, -1).astype(np.float64)
            centroid = self.centroids[l]
            c_norm = np.linalg.norm(centroid)
            a_norm = np.linalg.norm(feats, axis=1)
            valid = (a_norm > 0) & (c_norm > 0)
            safe_a = np.where(valid, a_norm, 1.0)
            safe_c = c_norm if c_norm > 0 else 1.0
            cos = np.where(valid, feats @ centroid / (safe_a * safe_c), 0.0)
            total += float(np.sum(1.0 - cos))
            # d(1-cos)/da = -(c/(|a||c|) - cos·a/|a|²)
            dcos = centroid[None, :] / (safe_a[:, None] * safe_c) - cos[:, None] * feats / (safe_a[:, None] ** 2)
            dcos[~valid] = 0.0
            grad = np.zeros((tap.shape[0], feats.shape[1]), dtype=np.float64)
            grad[rows] = -scale * dcos
            tap_grads[l] = grad.astype(tap.dtype)
        return total * scale, tap_grads


def analysis_layers(tap_count: int) -> List[int]:
    """网络后半部分的分接层 ⌊L/2⌋..L"""
    return list(range(max(1, tap_count // 2), tap_count + 1))


def train_adaptive(net: Network, poisoned_train: ImageDataset, poison_indices: Sequence[int],
                   target_class: int, beta: float, config: TrainConfig,
                   progress: bool = False) -> Network:
    """以 (1-β)·L_org + β·L_cd 训练自适应后门模型；β=0 时与普通训练逐位一致"""
    if not 0 <= beta <= 1:
        raise ConfigError(f"beta 必须在 [0,1] 内: {beta}")
    poison_mask = np.zeros(len(poisoned_train), dtype=bool)
    poison_mask[np.asarray(poison_indices, dtype=np.int64)] = True
    benign_target = np.flatnonzero((poisoned_train.labels == target_class) & ~poison_mask)
    if benign_target.size == 0:
        raise DataError(f"没有良性的目标类 {target_class} 训练样本，无法计算质心")
    if beta == 0:
        model, _ = train(net, poisoned_train, config, progress=progress)
        return model

    model = net.astype(np.float32)
    objective = AngularDeviationObjective(poisoned_train.images, benign_target, poison_mask,
                                          analysis_layers(model.tap_count), beta)
    trainer = SGDTrainer(config, progress=progress)
    trainer.fit(model, poisoned_train.images, poisoned_train.labels, objective=objective)
    logger.info(f"[Poison] 自适应训练完成 beta={beta}, 最终损失 {trainer.loss_history[-1]:.5f}")
    return model
