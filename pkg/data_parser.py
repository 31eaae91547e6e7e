import logging
import os
import struct
import traceback
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from errors import DataError, ShapeMismatchError
from poison_lab import ImageDataset, PoisonSpec
from utils import ensure_parent, file_digest, read_json, write_json

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'LFADATA\x00'
DATASET_VERSION = 1
_HEADER = '<IIIIII'  # version, count, C, channels, H, W


def manifest_path(file_path: str) -> str:
    """数据文件对应的清单路径"""
    return file_path + '.manifest.json'


def serialize_dataset(dataset: ImageDataset) -> bytes:
    """编码数据集：文件头 + 小端 float32 像素 + 小端 int32 标签"""
    count = len(dataset)
    channels, height, width = dataset.image_shape
    header = DATASET_MAGIC + struct.pack(_HEADER, DATASET_VERSION, count, dataset.num_classes,
                                         channels, height, width)
    pixels = np.ascontiguousarray(dataset.images, dtype='<f4').tobytes()
    labels = np.ascontiguousarray(dataset.labels, dtype='<i4').tobytes()
    return header + pixels + labels


def write_dataset(dataset: ImageDataset, file_path: str, poison_spec: Optional[PoisonSpec] = None,
                  extra: Optional[Dict[str, Any]] = None) -> str:
    """写出数据文件和清单，返回清单路径"""
    ensure_parent(file_path)
    with open(file_path, 'wb') as f:
        f.write(serialize_dataset(dataset))

    manifest = {
        'format_version': DATASET_VERSION,
        'file': os.path.basename(file_path),
        'sha256': file_digest(file_path),
        'count': len(dataset),
        'num_classes': dataset.num_classes,
        'image_shape': list(dataset.image_shape),
        'poison_indices': dataset.poison_indices.tolist(),
        'poison_spec': None if poison_spec is None else poison_spec.to_dict(),
        'target_class': dataset.target_class,
        'true_labels': None if dataset.true_labels is None else dataset.true_labels.tolist(),
        'source_indices': dataset.source_indices.tolist(),
    }
    if extra:
        manifest.update(extra)
    path = manifest_path(file_path)
    write_json(manifest, path)
    return path


class DatasetFileParser:
    """数据集文件解析器：读取本工具的二进制格式，或导入外部 .npz 数组"""

    def __init__(self, debug: bool = False):
        self.dataset: Optional[ImageDataset] = None
        self.manifest: Optional[Dict[str, Any]] = None
        self.source_path: Optional[str] = None
        self.debug = debug

    def log(self, message):
        """输出日志信息"""
        if self.debug:
            logger.info(f"[Parser] {message}")
        else:
            logger.debug(f"[Parser] {message}")

    def load_file(self, file_path: str) -> ImageDataset:
        """读取数据文件，若存在清单则恢复投毒信息"""
        self.log(f"加载文件: {file_path}")
        if not os.path.exists(file_path):
            raise DataError(f"数据文件不存在: {file_path}")
        with open(file_path, 'rb') as f:
            raw = f.read()

        # 1. 解析文件头
        head_size = len(DATASET_MAGIC) + struct.calcsize(_HEADER)
        if len(raw) < head_size or raw[:len(DATASET_MAGIC)] != DATASET_MAGIC:
            raise DataError(f"数据文件头无效: {file_path}")
        version, count, num_classes, channels, height, width = struct.unpack_from(
            _HEADER, raw, len(DATASET_MAGIC))
        if version != DATASET_VERSION:
            raise DataError(f"不支持的数据文件版本: {version}")
        self.log(f"文件头: {count} 个样本, {num_classes} 类, 形状 {channels}x{height}x{width}")

        # 2. 像素与标签
        n_pixels = count * channels * height * width
        expected = head_size + 4 * n_pixels + 4 * count
        if len(raw) != expected:
            raise DataError(f"数据文件长度 {len(raw)} 与文件头不符（应为 {expected}）")
        pixels = np.frombuffer(raw, dtype='<f4', count=n_pixels, offset=head_size)
        labels = np.frombuffer(raw, dtype='<i4', count=count, offset=head_size + 4 * n_pixels)
        images = pixels.reshape(count, channels, height, width).astype(np.float32)
        labels = labels.astype(np.int64)
        if count and (labels.min() < 0 or labels.max() >= num_classes):
            raise DataError(f"标签超出范围 0..{num_classes - 1}")

        # 3. 清单
        dataset = ImageDataset(images, labels, num_classes)
        self.manifest = None
        mpath = manifest_path(file_path)
        if os.path.exists(mpath):
            self.manifest = read_json(mpath)
            self._apply_manifest(dataset)
        else:
            self.log("未找到清单，按干净数据处理")

        self.dataset = dataset
        self.source_path = file_path
        return dataset

    def _apply_manifest(self, dataset: ImageDataset) -> None:
        manifest = self.manifest
        if manifest.get('count') != len(dataset):
            raise DataError(f"清单样本数 {manifest.get('count')} 与数据文件 {len(dataset)} 不一致")
        if manifest.get('true_labels') is not None:
            dataset.true_labels = np.asarray(manifest['true_labels'], dtype=np.int64)
        if manifest.get('source_indices') is not None:
            dataset.source_indices = np.asarray(manifest['source_indices'], dtype=np.int64)
        dataset.poison_indices = np.asarray(manifest.get('poison_indices') or [], dtype=np.int64)
        dataset.target_class = manifest.get('target_class')
        self.log(f"清单: 投毒样本 {len(dataset.poison_indices)} 个, 目标类 {dataset.target_class}")

    def get_poison_spec(self) -> Optional[PoisonSpec]:
        """清单中记录的投毒参数"""
        if not self.manifest or not self.manifest.get('poison_spec'):
            return None
        return PoisonSpec.from_dict(self.manifest['poison_spec'])

    def import_arrays(self, file_path: str, num_classes: Optional[int] = None) -> ImageDataset:
        """导入外部 .npz（图像 + 标签），支持 NHWC/NCHW 与 uint8 像素"""
        self.log(f"导入外部数组: {file_path}")
        try:
            archive = np.load(file_path)
        except Exception as e:
            traceback.print_exc()
            raise DataError(f"无法读取数组文件 {file_path}: {e}")

        with archive:
            image_key = self._find_key(archive.files, ['images', 'x', 'data', 'pixels', 'X'])
            label_key = self._find_key(archive.files, ['labels', 'y', 'targets', 'Y'])
            self.log(f"找到的数组: 图像={image_key}, 标签={label_key}")
            if image_key is None or label_key is None:
                raise DataError(f"数组文件缺少图像或标签: {archive.files}")
            images = np.asarray(archive[image_key])
            labels = np.asarray(archive[label_key]).astype(np.int64).ravel()

        if images.ndim == 3:
            images = images[:, None, :, :]
        if images.ndim != 4:
            raise ShapeMismatchError(f"图像数组维度必须为 3 或 4: {images.shape}")
        # 最后一维是通道时转为 NCHW
        if images.shape[-1] in (1, 3, 4) and images.shape[1] not in (1, 3, 4):
            images = images.transpose(0, 3, 1, 2)
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / 255.0
        images = np.clip(images.astype(np.float32), 0.0, 1.0)

        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DataError(f"标签超出范围 0..{num_classes - 1}")
        self.dataset = ImageDataset(images, labels, num_classes)
        self.manifest = None
        self.source_path = file_path
        return self.dataset

    def _find_key(self, names: List[str], keywords: List[str]) -> Optional[str]:
        """根据关键词查找数组名"""
        for kw in keywords:
            if kw in names:
                return kw
        for kw in keywords:
            for name in names:
                if kw.lower() in name.lower():
                    return name
        return None

    def get_dataset(self) -> ImageDataset:
        if self.dataset is None:
            raise DataError("尚未加载数据集")
        return self.dataset

    def class_table(self) -> pd.DataFrame:
        """每类样本数与投毒样本数"""
        ds = self.get_dataset()
        poisoned = np.zeros(len(ds), dtype=bool)
        poisoned[ds.poison_indices] = True
        return pd.DataFrame({
            'class': np.arange(ds.num_classes),
            'count': np.bincount(ds.labels, minlength=ds.num_classes),
            'poisoned': np.bincount(ds.labels[poisoned], minlength=ds.num_classes),
        })

    def get_summary(self) -> Dict[str, Any]:
        """数据集汇总信息"""
        if self.dataset is None:
            return {
                'count': 0,
                'num_classes': 0,
                'image_shape': None,
                'poisoned': 0,
                'target_class': None,
            }
        ds = self.dataset
        return {
            'count': len(ds),
            'num_classes': ds.num_classes,
            'image_shape': list(ds.image_shape),
            'poisoned': int(len(ds.poison_indices)),
            'target_class': ds.target_class,
        }
