from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

import pandas as pd

from errors import ComputationError, ConfigError, DataError
from utils import ensure_parent, format_percentage, write_json

Number = Union[int, float]


def _percent(numerator: int, denominator: int) -> float:
    if denominator <= 0:
        raise DataError("评估样本集为空")
    return 100.0 * numerator / denominator


@dataclass
class AttackMetrics:
    """攻击指标：MA 为良性样本准确率，ASR 为投毒样本被判为目标类的比例（百分数）"""
    ma: float
    asr: float
    benign_correct: int = 0
    benign_total: int = 0
    poisoned_hits: int = 0
    poisoned_total: int = 0

    def __post_init__(self):
        for name in ('ma', 'asr'):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise ComputationError(f"{name} 超出 [0,100]: {value}")

    @classmethod
    def from_counts(cls, benign_correct: int, benign_total: int,
                    poisoned_hits: int, poisoned_total: int) -> 'AttackMetrics':
        return cls(_percent(benign_correct, benign_total), _percent(poisoned_hits, poisoned_total),
                   int(benign_correct), int(benign_total), int(poisoned_hits), int(poisoned_total))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'ma': self.ma,
            'asr': self.asr,
            'benign_correct': self.benign_correct,
            'benign_total': self.benign_total,
            'poisoned_hits': self.poisoned_hits,
            'poisoned_total': self.poisoned_total,
        }

    def __str__(self) -> str:
        return f"MA={format_percentage(self.ma)}, ASR={format_percentage(self.asr)}"


@dataclass
class DetectionMetrics:
    """检测指标：TPR = 100·TP/P，FPR = 100·FP/B"""
    tpr: float
    fpr: float
    true_positives: int
    total_poisoned: int
    false_positives: int
    total_benign: int

    @classmethod
    def from_counts(cls, true_positives: int, total_poisoned: int,
                    false_positives: int, total_benign: int) -> 'DetectionMetrics':
        return cls(_percent(true_positives, total_poisoned), _percent(false_positives, total_benign),
                   int(true_positives), int(total_poisoned), int(false_positives), int(total_benign))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'tpr': self.tpr,
            'fpr': self.fpr,
            'true_positives': self.true_positives,
            'total_poisoned': self.total_poisoned,
            'false_positives': self.false_positives,
            'total_benign': self.total_benign,
        }

    def __str__(self) -> str:
        return (f"TPR={format_percentage(self.tpr)} ({self.true_positives}/{self.total_poisoned}), "
                f"FPR={format_percentage(self.fpr)} ({self.false_positives}/{self.total_benign})")


@dataclass
class SweepRow:
    """扫描结果的一行：参数取值 + 该取值下的指标

    value 为数值时参与排序；label 用于 "ours"、"mean"、"std" 这类汇总行。
    block 区分同一报告中的不同度量块。
    """
    value: Optional[Number]
    metrics: Dict[str, Any] = field(default_factory=dict)
    label: Optional[str] = None
    block: Optional[str] = None

    @property
    def id(self) -> str:
        key = self.label if self.label is not None else f"{self.value:g}"
        return f"{self.block}:{key}" if self.block else key

    def get(self, name: str) -> Any:
        return self.metrics[name]

    def to_dict(self, parameter: str) -> Dict[str, Any]:
        row = {}
        if self.block is not None:
            row['block'] = self.block
        row[parameter] = self.label if self.label is not None else self.value
        row.update(self.metrics)
        return row


class SweepReport:
    """扫描报告：有序的 SweepRow 集合，输出带自描述头的 CSV 和 JSON"""

    def __init__(self, kind: str, parameter: str, rows: List[SweepRow],
                 seed: int = 0, config_digest: str = ''):
        self.kind = kind
        self.parameter = parameter
        self.rows = list(rows)
        self.seed = seed
        self.config_digest = config_digest
        self._check_order()

    def _check_order(self):
        """同一块内数值参数严格递增，汇总行排在数值行之后"""
        last: Dict[Optional[str], float] = {}
        closed = set()
        for row in self.rows:
            if row.label is not None:
                closed.add(row.block)
                continue
            if row.block in closed:
                raise ComputationError(f"汇总行之后不能再有参数行: {row.id}")
            prev = last.get(row.block)
            if prev is not None and not row.value > prev:
                raise ConfigError(f"扫描参数必须严格递增且不重复: {prev} -> {row.value}")
            last[row.block] = row.value

    def __len__(self) -> int:
        return len(self.rows)

    def get_rows(self, block: Optional[str] = None) -> List[SweepRow]:
        return [r for r in self.rows if block is None or r.block == block]

    def get_row(self, value: Number, block: Optional[str] = None) -> Optional[SweepRow]:
        for row in self.get_rows(block):
            if row.label is None and row.value == value:
                return row
        return None

    def column(self, name: str, block: Optional[str] = None) -> List[Any]:
        """某一指标列（仅数值参数行）"""
        return [r.metrics[name] for r in self.get_rows(block) if r.label is None]

    def to_dataframe(self) -> pd.DataFrame:
        """转换为DataFrame格式"""
        if not self.rows:
            return pd.DataFrame()
        return pd.DataFrame([r.to_dict(self.parameter) for r in self.rows])

    def header_lines(self) -> List[str]:
        return [
            f"# kind: {self.kind}",
            f"# parameter: {self.parameter}",
            f"# seed: {self.seed}",
            f"# config_digest: {self.config_digest}",
        ]

    def to_dict(self) -> Dict[str, Any]:
        frame = self.to_dataframe()
        return {
            'kind': self.kind,
            'parameter': self.parameter,
            'seed': self.seed,
            'config_digest': self.config_digest,
            'columns': list(frame.columns),
            'rows': [r.to_dict(self.parameter) for r in self.rows],
        }

    def write(self, csv_path: str, json_path: Optional[str] = None) -> None:
        """写出 CSV（# 开头的元数据行 + 表头 + 数据，6 位小数）及 JSON 副本"""
        ensure_parent(csv_path)
        frame = self.to_dataframe()
        with open(csv_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write('\n'.join(self.header_lines()) + '\n')
            frame.to_csv(f, index=False, float_format='%.6f', lineterminator='\n')
        if json_path:
            write_json(self.to_dict(), json_path)

    def __str__(self) -> str:
        return f"扫描 {self.kind}: {len(self.rows)} 行"


def metrics_row(value: Optional[Number], attack: Optional[AttackMetrics] = None,
                detection: Optional[DetectionMetrics] = None, label: Optional[str] = None,
                block: Optional[str] = None, **extra) -> SweepRow:
    """把攻击/检测指标拼成一行"""
    metrics: Dict[str, Any] = {}
    if attack is not None:
        metrics['ma'] = attack.ma
        metrics['asr'] = attack.asr
    if detection is not None:
        metrics.update(detection.to_dict())
    metrics.update(extra)
    return SweepRow(value, metrics, label, block)
