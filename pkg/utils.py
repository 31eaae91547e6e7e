import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

LOG_FORMAT = '%(asctime)s [%(levelname)-8s] [%(filename)s:%(lineno)d] %(message)s'
LOG_DATEFMT = '%Y-%m-%d:%H:%M:%S'


def format_percentage(value: float) -> str:
    """格式化百分比值（输入已是百分数）"""
    return f"{value:.2f}%"


def format_float(value: float, digits: int = 6) -> str:
    """格式化浮点数"""
    return f"{value:.{digits}f}"


def calculate_statistics(values: List[float]) -> Dict[str, float]:
    """计算统计数据（总体标准差）"""
    if not values:
        return {
            'mean': 0.0,
            'median': 0.0,
            'std': 0.0,
            'min': 0.0,
            'max': 0.0
        }

    arr = np.asarray(values, dtype=np.float64)
    return {
        'mean': float(np.mean(arr)),
        'median': float(np.median(arr)),
        'std': float(np.std(arr)),
        'min': float(np.min(arr)),
        'max': float(np.max(arr))
    }


def derive_seed(master_seed: int, name: str) -> int:
    """由主种子和阶段名派生子种子"""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode('utf-8')).digest()
    return int.from_bytes(digest[:4], 'little')


def canonical_json(obj: Any) -> str:
    """生成键排序、无多余空白的 JSON 文本"""
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), default=_json_default)


def config_digest(obj: Any) -> str:
    """计算配置摘要（SHA-256 前 16 位）"""
    return hashlib.sha256(canonical_json(obj).encode('utf-8')).hexdigest()[:16]


def file_digest(path: str) -> str:
    """计算文件的 SHA-256"""
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            h.update(chunk)
    return h.hexdigest()


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"无法序列化类型: {type(value).__name__}")


def write_json(data: Dict[str, Any], file_path: str) -> None:
    """写出格式化的 JSON 文件（键排序，结果可逐字节复现）"""
    ensure_parent(file_path)
    with open(file_path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(data, f, sort_keys=True, indent=2, default=_json_default)
        f.write('\n')


def read_json(file_path: str) -> Dict[str, Any]:
    """读取 JSON 文件"""
    with open(file_path, 'r', encoding='utf-8') as f:
        return json.load(f)


def ensure_parent(file_path: str) -> None:
    """确保文件所在目录存在"""
    parent = os.path.dirname(os.path.abspath(file_path))
    os.makedirs(parent, exist_ok=True)


def export_to_excel(sheets: Dict[str, pd.DataFrame], file_path: str) -> bool:
    """导出数据到Excel文件，每个表一个工作表"""
    try:
        ensure_parent(file_path)
        with pd.ExcelWriter(file_path, engine='openpyxl') as writer:
            for name, frame in sheets.items():
                frame.to_excel(writer, sheet_name=name[:31], index=False)
        return True
    except Exception as e:
        logging.getLogger(__name__).error(f"导出Excel失败: {e}")
        return False


def setup_logging(out_dir: Optional[str] = None, verbose: bool = False) -> logging.Logger:
    """配置根日志：控制台 + 输出目录下的 run.log"""
    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=LOG_DATEFMT)
    logger = logging.getLogger()
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)

    # 重复调用时只清掉本函数装上的处理器
    for handler in list(logger.handlers):
        if getattr(handler, '_workbench', False):
            logger.removeHandler(handler)
            handler.close()

    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(out_dir, 'run.log'), encoding='utf-8'))
    for handler in handlers:
        handler.setFormatter(formatter)
        handler._workbench = True
        logger.addHandler(handler)

    return logger
