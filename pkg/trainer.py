"""训练引擎：带动量与权重衰减的小批量 SGD、交叉熵、梯度检查"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from errors import ComputationError, DataError, ShapeMismatchError
from net_model import (Network, TrainConfig, activation_patterns, backpropagate, predict,
                       propagate, softmax)

logger = logging.getLogger(__name__)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """批平均交叉熵，返回 (损失, 对 logits 的梯度)"""
    n = logits.shape[0]
    probs = softmax(logits)
    # 对数在 float64 下计算，避免饱和时 log(0)
    shifted = logits.astype(np.float64) - np.max(logits, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), labels]))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits /= n
    if not np.isfinite(loss):
        raise ComputationError(f"交叉熵损失非有限: {loss}")
    return loss, dlogits.astype(logits.dtype, copy=False)


def loss_and_gradients(net: Network, images: np.ndarray, labels: Sequence[int]
                       ) -> Tuple[float, List[Dict[str, np.ndarray]]]:
    """计算一批样本的交叉熵损失及各层参数梯度"""
    labels = np.asarray(labels, dtype=np.int64)
    logits, _, caches = propagate(net, images, keep_cache=True)
    loss, dlogits = cross_entropy(logits, labels)
    return loss, backpropagate(net, caches, dlogits)


class BatchObjective:
    """训练目标钩子：总损失为 (1-β)·交叉熵 + β·附加损失，子类给出分接点上的附加损失"""
    beta = 0.0

    def on_epoch_start(self, net: Network, epoch: int) -> None:
        pass

    def extra_terms(self, batch_indices: np.ndarray, taps: List[np.ndarray]
                    ) -> Tuple[float, Optional[Dict[int, np.ndarray]]]:
        """返回 (未加权的附加损失, 按层号给出的分接点梯度)"""
        return 0.0, None


def combined_objective(l_org: float, l_extra: float, beta: float) -> float:
    """(1-β)·原始损失 + β·附加损失"""
    return (1.0 - beta) * l_org + beta * l_extra


def check_labeled_set(net: Network, images: np.ndarray, labels: np.ndarray) -> None:
    """检查训练集非空、形状正确、标签在范围内"""
    if images.shape[0] == 0:
        raise DataError("训练集为空")
    if labels.shape[0] != images.shape[0]:
        raise DataError(f"样本数 {images.shape[0]} 与标签数 {labels.shape[0]} 不一致")
    if tuple(images.shape[1:]) != net.input_shape:
        raise ShapeMismatchError(f"样本形状 {images.shape[1:]} 与网络输入 {net.input_shape} 不一致")
    bad = (labels < 0) | (labels >= net.num_classes)
    if np.any(bad):
        raise DataError(f"标签超出范围 0..{net.num_classes - 1}: {labels[bad][:5].tolist()}")


class SGDTrainer:
    """小批量 SGD 训练器（动量、权重衰减、阶梯学习率）"""

    def __init__(self, config: TrainConfig, progress: bool = False, debug: bool = False):
        self.config = config
        self.progress = progress
        self.debug = debug
        self.loss_history: List[float] = []

    def log(self, message):
        """输出日志信息"""
        if self.debug:
            logger.info(f"[Trainer] {message}")
        else:
            logger.debug(f"[Trainer] {message}")

    def fit(self, net: Network, images: np.ndarray, labels: np.ndarray,
            objective: Optional[BatchObjective] = None) -> Tuple[Network, List[float]]:
        """原地训练 net，返回 (net, 每轮平均损失)"""
        cfg = self.config
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        check_labeled_set(net, images, labels)

        rng = np.random.default_rng(cfg.seed)
        velocity = {(i, name): np.zeros_like(p) for i, name, p in net.parameters()}
        n = images.shape[0]
        self.loss_history = []

        epochs = tqdm(range(cfg.epochs), desc="训练", disable=not self.progress, leave=False)
        for epoch in epochs:
            lr = cfg.learning_rate_at(epoch)
            if objective is not None:
                objective.on_epoch_start(net, epoch)
            # 每轮用种子打乱顺序
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                logits, taps, caches = propagate(net, images[idx], keep_cache=True)
                ce, dlogits = cross_entropy(logits, labels[idx])
                tap_grads = None
                if objective is None:
                    loss = ce
                else:
                    beta = objective.beta
                    extra, tap_grads = objective.extra_terms(idx, taps)
                    loss = combined_objective(ce, extra, beta)
                    dlogits = dlogits * np.float32(1.0 - beta)
                    if tap_grads:
                        tap_grads = {l: g * g.dtype.type(beta) for l, g in tap_grads.items()}
                grads = backpropagate(net, caches, dlogits, tap_grads)
                self._step(net, grads, velocity, lr)
                total += loss * len(idx)
            epoch_loss = total / n
            if not np.isfinite(epoch_loss):
                raise ComputationError(f"第 {epoch + 1} 轮损失非有限")
            self.loss_history.append(epoch_loss)
            self.log(f"第 {epoch + 1}/{cfg.epochs} 轮, lr={lr:.5f}, loss={epoch_loss:.5f}")
        return net, list(self.loss_history)

    def _step(self, net: Network, grads, velocity, lr: float) -> None:
        """SGD 更新：g = ∇ + wd·w，v = μ·v + g，w -= lr·v"""
        cfg = self.config
        for i, name, param in net.parameters():
            g = grads[i][name]
            if cfg.weight_decay:
                g = g + np.float32(cfg.weight_decay) * param
            v = velocity[(i, name)]
            v *= np.float32(cfg.momentum)
            v += g
            param -= np.float32(lr) * v


def _unpack_set(train_set) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(train_set, tuple):
        return np.asarray(train_set[0]), np.asarray(train_set[1])
    return np.asarray(train_set.images), np.asarray(train_set.labels)


def train(net: Network, train_set, config: TrainConfig, progress: bool = False
          ) -> Tuple[Network, List[float]]:
    """在网络副本上训练，返回 (训练后的网络, 损失历史)"""
    images, labels = _unpack_set(train_set)
    model = net.astype(np.float32)
    trainer = SGDTrainer(config, progress=progress)
    return trainer.fit(model, images, labels)


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray) -> float:
    """分类准确率（0~1）"""
    if len(labels) == 0:
        raise DataError("评估集为空")
    return float(np.mean(predict(net, images) == np.asarray(labels)))


def grad_check(net: Network, x: np.ndarray, y: int, eps: float = 1e-4, num_checks: int = 20,
               seed: int = 0, grad_floor: float = 1e-6, max_attempts: int = 200) -> float:
    """用中心差分检查解析梯度，返回随机参数子集上的最大相对误差

    在 float64 副本上计算；若扰动改变了 ReLU/池化的分段区域则换一个参数重新抽取。
    """
    if not eps > 0:
        raise ComputationError(f"eps 必须为正: {eps}")
    model = net.astype(np.float64)
    images = np.asarray(x, dtype=np.float64)[None]
    labels = np.array([y], dtype=np.int64)

    logits, _, caches = propagate(model, images, keep_cache=True)
    if not np.all(np.isfinite(logits)):
        raise ComputationError("前向输出非有限")
    loss, dlogits = cross_entropy(logits, labels)
    grads = backpropagate(model, caches, dlogits)
    base_pattern = activation_patterns(model, caches)

    params = list(model.parameters())
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    attempts = 0
    while checked < num_checks and attempts < max_attempts:
        attempts += 1
        i, name, arr = params[int(rng.integers(len(params)))]
        flat = int(rng.integers(arr.size))
        old = arr.flat[flat]

        arr.flat[flat] = old + eps
        plus, crossed_plus = _perturbed_loss(model, images, labels, base_pattern)
        arr.flat[flat] = old - eps
        minus, crossed_minus = _perturbed_loss(model, images, labels, base_pattern)
        arr.flat[flat] = old
        if crossed_plus or crossed_minus:
            continue

        numeric = (plus - minus) / (2 * eps)
        analytic = float(grads[i][name].flat[flat])
        scale = max(abs(analytic), abs(numeric), grad_floor)
        worst = max(worst, abs(analytic - numeric) / scale)
        checked += 1

    if checked == 0:
        raise ComputationError("所有抽样参数的扰动都越过了折点，无法检查梯度")
    return worst


def _perturbed_loss(model: Network, images, labels, base_pattern) -> Tuple[float, bool]:
    logits, _, caches = propagate(model, images, keep_cache=True)
    loss, _ = cross_entropy(logits, labels)
    pattern = activation_patterns(model, caches)
    crossed = any(a is not None and not np.array_equal(a, b) for a, b in zip(pattern, base_pattern))
    return loss, crossed
