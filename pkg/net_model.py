"""网络模型：层定义、带分接点的前向传播、网络构建与模型文件读写

分接点（tap）编号从 1 开始，与层号 l ∈ [1, L] 一致。模型文件格式见 README.md。
"""
import copy
import io
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DataError, ShapeMismatchError
from layers import KINDS, activation_pattern, layer_backward, layer_forward, output_shape
from utils import ensure_parent

MIN_ANALYSIS_TAPS = 4

MODEL_MAGIC = b'LFANET\x00\x00'
MODEL_VERSION = 1
_KIND_CODES = {'conv': 1, 'dense': 2, 'relu': 3, 'maxpool': 4, 'flatten': 5}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_OPTION_KEYS = {'conv': ('padding',), 'maxpool': ('size',)}
_DTYPE_CODES = {np.dtype('float32'): 1, np.dtype('float64'): 2}
_CODE_DTYPES = {1: np.dtype('<f4'), 2: np.dtype('<f8')}


@dataclass
class LayerSpec:
    """单层定义"""
    kind: str
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    options: Dict[str, int] = field(default_factory=dict)
    is_tap: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"未知层类型: {self.kind}")
        if self.kind in ('conv', 'dense') and set(self.params) != {'weight', 'bias'}:
            raise ConfigError(f"{self.kind} 层需要 weight 和 bias 参数")

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


@dataclass
class ActivationTrace:
    """单个输入在各分接点的展平特征 a^1..a^L"""
    features: List[np.ndarray]

    @property
    def tap_count(self) -> int:
        return len(self.features)

    def layer(self, l: int) -> np.ndarray:
        """取第 l 层（从 1 开始）的特征向量"""
        if not 1 <= l <= len(self.features):
            raise ShapeMismatchError(f"层号 {l} 超出范围 1..{len(self.features)}")
        return self.features[l - 1]


@dataclass
class TraceBatch:
    """一批输入的分接点特征，features[l-1] 形状为 (m, 第 l 层宽度)"""
    features: List[np.ndarray]

    def __len__(self) -> int:
        return self.features[0].shape[0] if self.features else 0

    @property
    def tap_count(self) -> int:
        return len(self.features)

    @property
    def widths(self) -> List[int]:
        return [f.shape[1] for f in self.features]

    def layer(self, l: int) -> np.ndarray:
        if not 1 <= l <= len(self.features):
            raise ShapeMismatchError(f"层号 {l} 超出范围 1..{len(self.features)}")
        return self.features[l - 1]

    def subset(self, indices: Sequence[int]) -> 'TraceBatch':
        idx = np.asarray(indices, dtype=np.int64)
        return TraceBatch([f[idx] for f in self.features])

    @classmethod
    def from_traces(cls, traces: Sequence[ActivationTrace]) -> 'TraceBatch':
        """把若干单样本轨迹堆叠成批"""
        if not traces:
            raise DataError("轨迹列表为空")
        count = traces[0].tap_count
        for t in traces:
            if t.tap_count != count:
                raise ShapeMismatchError(f"轨迹长度不一致: {t.tap_count} != {count}")
        feats = []
        for l in range(count):
            widths = {t.features[l].size for t in traces}
            if len(widths) != 1:
                raise ShapeMismatchError(f"第 {l + 1} 层宽度不一致: {sorted(widths)}")
            feats.append(np.stack([np.ravel(t.features[l]) for t in traces]))
        return cls(feats)

    @classmethod
    def concat(cls, batches: Sequence['TraceBatch']) -> 'TraceBatch':
        count = batches[0].tap_count
        return cls([np.concatenate([b.features[l] for b in batches]) for l in range(count)])


@dataclass
class PredictionResult:
    """预测结果"""
    logits: np.ndarray
    probabilities: np.ndarray
    predicted_class: int


@dataclass
class TrainConfig:
    """训练超参数"""
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    lr_decay_epochs: List[int] = field(default_factory=lambda: [20, 25])
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.lr_decay_epochs = [int(e) for e in self.lr_decay_epochs]
        self.validate()

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate 必须为正: {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum 必须在 [0,1): {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay 不能为负: {self.weight_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs/batch_size 必须为正整数: {self.epochs}/{self.batch_size}")
        if not self.lr_decay_factor > 0:
            raise ConfigError(f"lr_decay_factor 必须为正: {self.lr_decay_factor}")
        if self.seed < 0:
            raise ConfigError(f"seed 必须为无符号整数: {self.seed}")

    def learning_rate_at(self, epoch: int) -> float:
        """第 epoch 轮（从 0 开始）的学习率，阶梯衰减"""
        drops = sum(1 for m in self.lr_decay_epochs if m <= epoch)
        return self.learning_rate * (self.lr_decay_factor ** drops)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'learning_rate': self.learning_rate,
            'momentum': self.momentum,
            'weight_decay': self.weight_decay,
            'epochs': self.epochs,
            'batch_size': self.batch_size,
            'lr_decay_epochs': list(self.lr_decay_epochs),
            'lr_decay_factor': self.lr_decay_factor,
            'seed': self.seed,
        }


class Network:
    """由有序层组成的 C 类分类网络"""

    def __init__(self, layers: List[LayerSpec], num_classes: int, input_shape: Sequence[int]):
        self.layers = layers
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layer_shapes = self._check_shapes()

    def _check_shapes(self) -> List[Tuple[int, ...]]:
        """逐层推断输出形状并检查一致性"""
        if not self.layers:
            raise ConfigError("网络没有任何层")
        if self.num_classes < 2:
            raise ConfigError(f"类别数至少为 2: {self.num_classes}")
        shapes = []
        shape = self.input_shape
        for spec in self.layers:
            shape = output_shape(spec.kind, spec.params, spec.options, shape)
            shapes.append(shape)
        if shape != (self.num_classes,):
            raise ShapeMismatchError(f"最后一层输出 {shape} 与类别数 {self.num_classes} 不一致")
        if self.layers[-1].is_tap:
            raise ConfigError("输出层不能作为分接点")
        return shapes

    @property
    def tap_positions(self) -> List[int]:
        """分接点所在的层下标（从 0 开始，严格递增）"""
        return [i for i, spec in enumerate(self.layers) if spec.is_tap]

    @property
    def tap_count(self) -> int:
        return len(self.tap_positions)

    @property
    def tap_widths(self) -> List[int]:
        return [int(np.prod(self.layer_shapes[i])) for i in self.tap_positions]

    @property
    def dtype(self) -> np.dtype:
        for spec in self.layers:
            for p in spec.params.values():
                return p.dtype
        return np.dtype(np.float32)

    def check_analyzable(self):
        """逐层分析至少需要 4 个分接点"""
        if self.tap_count < MIN_ANALYSIS_TAPS:
            raise ConfigError(f"网络只有 {self.tap_count} 个分接点，逐层分析至少需要 {MIN_ANALYSIS_TAPS} 个")

    def parameters(self) -> Iterator[Tuple[int, str, np.ndarray]]:
        """遍历 (层下标, 参数名, 数组)"""
        for i, spec in enumerate(self.layers):
            for name in sorted(spec.params):
                yield i, name, spec.params[name]

    @property
    def parameter_count(self) -> int:
        return sum(spec.parameter_count for spec in self.layers)

    def copy(self) -> 'Network':
        return Network(copy.deepcopy(self.layers), self.num_classes, self.input_shape)

    def astype(self, dtype) -> 'Network':
        """返回参数转换为指定精度的副本"""
        layers = [LayerSpec(s.kind, {k: v.astype(dtype) for k, v in s.params.items()}, dict(s.options), s.is_tap)
                  for s in self.layers]
        return Network(layers, self.num_classes, self.input_shape)

    def analysis_copy(self) -> 'Network':
        """相似度计算用的 float64 副本，已是 float64 时返回自身"""
        return self if self.dtype == np.float64 else self.astype(np.float64)

    def same_weights(self, other: 'Network') -> bool:
        """逐位比较两个网络的参数"""
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind or a.is_tap != b.is_tap or set(a.params) != set(b.params):
                return False
            for k in a.params:
                if a.params[k].dtype != b.params[k].dtype or not np.array_equal(a.params[k], b.params[k]):
                    return False
        return True

    def summary(self) -> List[Dict[str, Any]]:
        """逐层摘要，供 inspect 打印"""
        rows = []
        tap_no = 0
        for i, spec in enumerate(self.layers):
            if spec.is_tap:
                tap_no += 1
            rows.append({
                'index': i,
                'kind': spec.kind,
                'output_shape': 'x'.join(str(s) for s in self.layer_shapes[i]),
                'parameters': spec.parameter_count,
                'tap': tap_no if spec.is_tap else '',
            })
        return rows


# ---------------------------------------------------------------- 前向传播

def softmax(logits: np.ndarray) -> np.ndarray:
    """数值稳定的 softmax，按最后一维归一化，保持输入精度"""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def _check_batch(net: Network, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != len(net.input_shape) + 1 or tuple(images.shape[1:]) != net.input_shape:
        raise ShapeMismatchError(f"输入形状 {images.shape[1:]} 与网络输入 {net.input_shape} 不一致")
    return images.astype(net.dtype, copy=False)


def propagate(net: Network, images: np.ndarray, keep_cache: bool = False
              ) -> Tuple[np.ndarray, List[np.ndarray], Optional[List[Any]]]:
    """批量前向，返回 (logits, 各分接点原始输出, 缓存)"""
    a = _check_batch(net, images)
    taps = []
    caches = [] if keep_cache else None
    for spec in net.layers:
        a, cache = layer_forward(spec.kind, spec.params, spec.options, a)
        if keep_cache:
            caches.append(cache)
        if spec.is_tap:
            taps.append(a)
    return a, taps, caches


def backpropagate(net: Network, caches: List[Any], dlogits: np.ndarray,
                  tap_grads: Optional[Dict[int, np.ndarray]] = None) -> List[Dict[str, np.ndarray]]:
    """反向传播，tap_grads 按层号给出加在分接点输出上的额外梯度"""
    grads: List[Dict[str, np.ndarray]] = [{} for _ in net.layers]
    g = dlogits
    tap_no = net.tap_count
    for i in reversed(range(len(net.layers))):
        spec = net.layers[i]
        if spec.is_tap:
            if tap_grads is not None and tap_grads.get(tap_no) is not None:
                g = g + tap_grads[tap_no].reshape(g.shape).astype(g.dtype, copy=False)
            tap_no -= 1
        g, grads[i] = layer_backward(spec.kind, spec.params, spec.options, g, caches[i], need_dx=i > 0)
    return grads


def activation_patterns(net: Network, caches: List[Any]) -> List[Any]:
    """收集 ReLU 掩码与池化位置，用于判断扰动是否越过折点"""
    return [activation_pattern(spec.kind, c) for spec, c in zip(net.layers, caches)]


def forward_batch(net: Network, images: np.ndarray, batch_size: int = 256
                  ) -> Tuple[np.ndarray, TraceBatch]:
    """分块批量前向，返回 (logits, 展平后的分接点特征)"""
    images = np.asarray(images)
    logits_parts, tap_parts = [], []
    for start in range(0, images.shape[0], batch_size):
        logits, taps, _ = propagate(net, images[start:start + batch_size])
        logits_parts.append(logits)
        tap_parts.append(TraceBatch([t.reshape(t.shape[0], -1) for t in taps]))
    if not logits_parts:
        raise DataError("输入批次为空")
    return np.concatenate(logits_parts), TraceBatch.concat(tap_parts)


def predict(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """批量预测类别"""
    images = np.asarray(images)
    preds = []
    for start in range(0, images.shape[0], batch_size):
        logits, _, _ = propagate(net, images[start:start + batch_size])
        preds.append(np.argmax(logits, axis=1))
    if not preds:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(preds).astype(np.int64)


def _prediction(logits_row: np.ndarray) -> PredictionResult:
    probs = softmax(logits_row.astype(np.float64))
    return PredictionResult(logits=logits_row, probabilities=probs, predicted_class=int(np.argmax(logits_row)))


def forward(net: Network, x: np.ndarray) -> PredictionResult:
    """单样本前向"""
    logits, _, _ = propagate(net, np.asarray(x)[None])
    return _prediction(logits[0])


def forward_traced(net: Network, x: np.ndarray) -> Tuple[PredictionResult, ActivationTrace]:
    """单样本前向并返回各分接点的展平特征"""
    logits, taps, _ = propagate(net, np.asarray(x)[None])
    trace = ActivationTrace([t[0].reshape(-1) for t in taps])
    return _prediction(logits[0]), trace


# ---------------------------------------------------------------- 网络构建

@dataclass
class BlockSpec:
    """网络块：conv 块 = 3x3 卷积 + ReLU (+ 2x2 池化)，dense 块 = 全连接 + ReLU"""
    type: str
    width: int
    pool: bool = False
    tap: bool = True

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BlockSpec':
        block_type = data.get('type')
        if block_type not in ('conv', 'dense'):
            raise ConfigError(f"未知网络块类型: {block_type}")
        width = data.get('out_channels', data.get('units', data.get('width')))
        if not isinstance(width, int) or width < 1:
            raise ConfigError(f"网络块宽度无效: {data}")
        return cls(block_type, width, bool(data.get('pool', False)), bool(data.get('tap', True)))

    def to_dict(self) -> Dict[str, Any]:
        key = 'out_channels' if self.type == 'conv' else 'units'
        return {'type': self.type, key: self.width, 'pool': self.pool, 'tap': self.tap}


@dataclass
class ArchitectureSpec:
    """网络结构描述，最后的输出层自动添加"""
    blocks: List[BlockSpec]
    kernel_size: int = 3

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ArchitectureSpec':
        blocks = [BlockSpec.from_dict(b) for b in data.get('blocks', [])]
        if not blocks:
            raise ConfigError("architecture.blocks 不能为空")
        kernel = int(data.get('kernel_size', 3))
        if kernel < 1 or kernel % 2 == 0:
            raise ConfigError(f"kernel_size 必须为正奇数: {kernel}")
        seen_dense = False
        for b in blocks:
            if b.type == 'dense':
                seen_dense = True
            elif seen_dense:
                raise ConfigError("卷积块必须位于全连接块之前")
        return cls(blocks, kernel)

    def to_dict(self) -> Dict[str, Any]:
        return {'kernel_size': self.kernel_size, 'blocks': [b.to_dict() for b in self.blocks]}


# 桌面规模默认结构：第一层卷积不作为分接点，共 6 个分接点
DESK_CNN = ArchitectureSpec([
    BlockSpec('conv', 8, pool=False, tap=False),
    BlockSpec('conv', 16, pool=True),
    BlockSpec('conv', 16),
    BlockSpec('conv', 32, pool=True),
    BlockSpec('conv', 32),
    BlockSpec('dense', 64),
    BlockSpec('dense', 32),
])


def _he_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def build_network(arch: ArchitectureSpec, input_shape: Sequence[int], num_classes: int, seed: int) -> Network:
    """按结构描述构建网络，He 初始化（按 fan-in 缩放），偏置为 0"""
    rng = np.random.default_rng(seed)
    input_shape = tuple(int(s) for s in input_shape)
    layers: List[LayerSpec] = []
    shape = input_shape
    k = arch.kernel_size
    for block in arch.blocks:
        if block.type == 'conv':
            if len(shape) != 3:
                raise ConfigError("卷积块需要图像输入")
            in_c = shape[0]
            weight = _he_init(rng, (block.width, in_c, k, k), in_c * k * k)
            layers.append(LayerSpec('conv', {'weight': weight, 'bias': np.zeros(block.width, np.float32)},
                                    {'padding': k // 2}))
            layers.append(LayerSpec('relu'))
            shape = (block.width, shape[1], shape[2])
            if block.pool:
                layers.append(LayerSpec('maxpool', options={'size': 2}))
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
        else:
            if len(shape) != 1:
                layers.append(LayerSpec('flatten'))
                shape = (int(np.prod(shape)),)
            weight = _he_init(rng, (block.width, shape[0]), shape[0])
            layers.append(LayerSpec('dense', {'weight': weight, 'bias': np.zeros(block.width, np.float32)}))
            layers.append(LayerSpec('relu'))
            shape = (block.width,)
        # 块的最后一层输出即分接点
        layers[-1].is_tap = block.tap
    if len(shape) != 1:
        layers.append(LayerSpec('flatten'))
        shape = (int(np.prod(shape)),)
    weight = _he_init(rng, (num_classes, shape[0]), shape[0])
    layers.append(LayerSpec('dense', {'weight': weight, 'bias': np.zeros(num_classes, np.float32)}))
    return Network(layers, num_classes, input_shape)


# ---------------------------------------------------------------- 模型文件

def serialize_network(net: Network) -> bytes:
    """按文档格式编码网络（小端序）"""
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack('<III', MODEL_VERSION, net.num_classes, len(net.input_shape)))
    buf.write(struct.pack(f'<{len(net.input_shape)}I', *net.input_shape))
    buf.write(struct.pack('<I', len(net.layers)))
    for spec in net.layers:
        buf.write(struct.pack('<BB', _KIND_CODES[spec.kind], 1 if spec.is_tap else 0))
        opts = [int(spec.options.get(key, 0)) for key in _OPTION_KEYS.get(spec.kind, ())]
        buf.write(struct.pack('<I', len(opts)))
        if opts:
            buf.write(struct.pack(f'<{len(opts)}i', *opts))
        names = [n for n in ('weight', 'bias') if n in spec.params]
        buf.write(struct.pack('<I', len(names)))
        for name in names:
            arr = spec.params[name]
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise DataError(f"不支持的参数精度: {arr.dtype}")
            buf.write(struct.pack('<BI', code, arr.ndim))
            buf.write(struct.pack(f'<{arr.ndim}I', *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    return buf.getvalue()


def deserialize_network(data: bytes) -> Network:
    """从字节解码网络"""
    view = memoryview(data)
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise DataError("模型文件被截断")
        values = struct.unpack_from(fmt, view, pos)
        pos += size
        return values

    if bytes(view[:8]) != MODEL_MAGIC:
        raise DataError("模型文件头无效")
    pos = 8
    version, num_classes, rank = take('<III')
    if version != MODEL_VERSION:
        raise DataError(f"不支持的模型文件版本: {version}")
    input_shape = take(f'<{rank}I')
    (num_layers,) = take('<I')
    layers = []
    for _ in range(num_layers):
        code, is_tap = take('<BB')
        kind = _CODE_KINDS.get(code)
        if kind is None:
            raise DataError(f"未知层类型编码: {code}")
        (n_opts,) = take('<I')
        opts = take(f'<{n_opts}i') if n_opts else ()
        options = dict(zip(_OPTION_KEYS.get(kind, ()), opts))
        (n_arrays,) = take('<I')
        params = {}
        for name in ('weight', 'bias')[:n_arrays]:
            dcode, ndim = take('<BI')
            if dcode not in _CODE_DTYPES:
                raise DataError(f"未知参数精度编码: {dcode}")
            shape = take(f'<{ndim}I')
            dtype = _CODE_DTYPES[dcode]
            count = int(np.prod(shape)) if ndim else 1
            nbytes = count * dtype.itemsize
            if pos + nbytes > len(view):
                raise DataError("模型文件被截断")
            arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape)
            params[name] = arr.astype(dtype.newbyteorder('='), copy=True)
            pos += nbytes
        layers.append(LayerSpec(kind, params, options, bool(is_tap)))
    if pos != len(view):
        raise DataError("模型文件末尾有多余数据")
    return Network(layers, num_classes, input_shape)


def save_model(net: Network, file_path: str) -> None:
    """保存模型文件"""
    ensure_parent(file_path)
    with open(file_path, 'wb') as f:
        f.write(serialize_network(net))


def load_model(file_path: str) -> Network:
    """读取模型文件"""
    with open(file_path, 'rb') as f:
        return deserialize_network(f.read())
