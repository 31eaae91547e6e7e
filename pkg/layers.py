"""层算子：卷积、全连接、ReLU、最大池化、展平的前向与反向传播

所有算子按批处理，输入第一维是样本数。卷积固定步长 1，池化窗口与步长相同。
"""
from typing import Any, Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ShapeMismatchError

KINDS = ('conv', 'dense', 'relu', 'maxpool', 'flatten')


def output_shape(kind: str, params: Dict[str, np.ndarray], options: Dict[str, int],
                 in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """推断单个样本经过该层后的形状"""
    if kind == 'conv':
        weight = params['weight']
        if len(in_shape) != 3:
            raise ShapeMismatchError(f"卷积层需要 (C,H,W) 输入，实际为 {in_shape}")
        out_c, in_c, k, k2 = weight.shape
        if in_c != in_shape[0] or k != k2:
            raise ShapeMismatchError(f"卷积核 {weight.shape} 与输入 {in_shape} 不匹配")
        pad = options.get('padding', 0)
        h = in_shape[1] + 2 * pad - k + 1
        w = in_shape[2] + 2 * pad - k + 1
        if h <= 0 or w <= 0:
            raise ShapeMismatchError(f"卷积输出尺寸非正: 输入 {in_shape}, 核 {k}, 填充 {pad}")
        if params['bias'].shape != (out_c,):
            raise ShapeMismatchError(f"卷积偏置形状 {params['bias'].shape} 应为 ({out_c},)")
        return out_c, h, w
    if kind == 'dense':
        weight = params['weight']
        if len(in_shape) != 1 or weight.shape[1] != in_shape[0]:
            raise ShapeMismatchError(f"全连接权重 {weight.shape} 与输入 {in_shape} 不匹配")
        if params['bias'].shape != (weight.shape[0],):
            raise ShapeMismatchError(f"全连接偏置形状 {params['bias'].shape} 应为 ({weight.shape[0]},)")
        return (weight.shape[0],)
    if kind == 'relu':
        return tuple(in_shape)
    if kind == 'maxpool':
        size = options.get('size', 2)
        if len(in_shape) != 3 or in_shape[1] % size or in_shape[2] % size:
            raise ShapeMismatchError(f"池化窗口 {size} 不能整除输入 {in_shape}")
        return in_shape[0], in_shape[1] // size, in_shape[2] // size
    if kind == 'flatten':
        return (int(np.prod(in_shape)),)
    raise ShapeMismatchError(f"未知层类型: {kind}")


def layer_forward(kind: str, params: Dict[str, np.ndarray], options: Dict[str, int],
                  x: np.ndarray) -> Tuple[np.ndarray, Any]:
    """单层前向，返回 (输出, 反向所需缓存)"""
    if kind == 'conv':
        return _conv_forward(x, params['weight'], params['bias'], options.get('padding', 0))
    if kind == 'dense':
        return x @ params['weight'].T + params['bias'], x
    if kind == 'relu':
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask
    if kind == 'maxpool':
        return _maxpool_forward(x, options.get('size', 2))
    if kind == 'flatten':
        return x.reshape(x.shape[0], -1), x.shape
    raise ShapeMismatchError(f"未知层类型: {kind}")


def layer_backward(kind: str, params: Dict[str, np.ndarray], options: Dict[str, int],
                   dout: np.ndarray, cache: Any, need_dx: bool = True
                   ) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """单层反向，返回 (输入梯度, 参数梯度)"""
    if kind == 'conv':
        return _conv_backward(dout, cache, params['weight'], options.get('padding', 0), need_dx)
    if kind == 'dense':
        x = cache
        grads = {'weight': dout.T @ x, 'bias': dout.sum(axis=0)}
        dx = dout @ params['weight'] if need_dx else None
        return dx, grads
    if kind == 'relu':
        return dout * cache, {}
    if kind == 'maxpool':
        arg, x_shape = cache
        return _maxpool_backward(dout, arg, x_shape, options.get('size', 2)), {}
    if kind == 'flatten':
        return dout.reshape(cache), {}
    raise ShapeMismatchError(f"未知层类型: {kind}")


def activation_pattern(kind: str, cache: Any) -> Any:
    """返回决定分段线性区域的缓存部分（ReLU 掩码、池化最大值位置）"""
    if kind == 'relu':
        return cache
    if kind == 'maxpool':
        return cache[0]
    return None


def _conv_forward(x, weight, bias, padding):
    n, c = x.shape[0], x.shape[1]
    out_c, _, k, _ = weight.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    padded_shape = x.shape
    # (n, c, ho, wo, k, k) -> (n*ho*wo, c*k*k)
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ weight.reshape(out_c, -1).T + bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2))
    return out, (cols, padded_shape)


def _conv_backward(dout, cache, weight, padding, need_dx):
    cols, padded_shape = cache
    n, c, hp, wp = padded_shape
    out_c, _, k, _ = weight.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dout_mat = dout.transpose(0, 2, 3, 1).reshape(-1, out_c)
    grads = {
        'weight': (dout_mat.T @ cols).reshape(weight.shape),
        'bias': dout_mat.sum(axis=0),
    }
    if not need_dx:
        return None, grads

    dcols = (dout_mat @ weight.reshape(out_c, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
    return np.ascontiguousarray(dxp), grads


def _maxpool_forward(x, size):
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    blocks = x.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    # 并列最大值取第一个位置
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _maxpool_backward(dout, arg, x_shape, size):
    n, c, h, w = x_shape
    ho, wo = h // size, w // size
    dblocks = np.zeros((n, c, ho, wo, size * size), dtype=dout.dtype)
    np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
    return dblocks.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
