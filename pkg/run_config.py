"""运行配置（YAML + 命令行覆盖）与运行清单"""
import copy
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence

import yaml

from errors import ConfigError, WorkbenchError
from firewall import check_defense_settings
from net_model import DESK_CNN, ArchitectureSpec, TrainConfig
from poison_lab import PoisonSpec, SyntheticDatasetConfig, TriggerSpec
from utils import config_digest, derive_seed, write_json

logger = logging.getLogger(__name__)

TOOL_VERSION = '1.0.0'

DEFAULTS: Dict[str, Any] = {
    'dataset': {
        'num_classes': 10,
        'image_size': 16,
        'channels': 3,
        'train_count': 2000,
        'test_count': 500,
        'noise_level': 0.1,
    },
    'architecture': DESK_CNN.to_dict(),
    'train': {
        'learning_rate': 0.05,
        'momentum': 0.9,
        'weight_decay': 5e-4,
        'epochs': 30,
        'batch_size': 64,
        'lr_decay_epochs': [20, 25],
        'lr_decay_factor': 0.1,
    },
    'poison': {
        'kind': 'patch',
        'target_class': 0,
        'poison_rate': 0.05,
        'patch_size': 2,
        'patch_value': 1.0,
        'anchor': None,
        'blend_ratio': 0.1,
        'compare_clean': False,
    },
    'adaptive': {
        'beta': None,
    },
    'defense': {
        'tau': 2.5,
        'metric': 'cosine',
        'calibration_fraction': 0.4,
    },
    'sweeps': {
        'taus': [0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
        'rates': [0.01, 0.03, 0.05, 0.10],
        'betas': [0.0, 0.5, 0.9, 0.95],
        'seeds': [0, 1, 2],
    },
    'run': {
        'out_dir': 'runs/default',
        'seed': 0,
        'workers': 1,
        'progress': False,
        'export_excel': False,
        'debug': False,
    },
}

# 命令行参数 -> 配置键
FLAG_KEYS = {
    'seed': ('run', 'seed'),
    'out': ('run', 'out_dir'),
    'tau': ('defense', 'tau'),
    'metric': ('defense', 'metric'),
    'beta': ('adaptive', 'beta'),
}


def merge_config(base: Dict[str, Any], override: Dict[str, Any], path: str = '') -> Dict[str, Any]:
    """递归合并配置，未知键报错"""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"未知配置项: {where}")
        if isinstance(base[key], dict) and key != 'architecture':
            if not isinstance(value, dict):
                raise ConfigError(f"配置项 {where} 应为字典")
            merged[key] = merge_config(base[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class PoisonSettings:
    """投毒设置（触发器参数 + 目标类 + 比例）"""
    kind: str = 'patch'
    target_class: int = 0
    poison_rate: float = 0.05
    patch_size: int = 2
    patch_value: float = 1.0
    anchor: Optional[List[int]] = None
    blend_ratio: float = 0.1
    compare_clean: bool = False

    def __post_init__(self):
        if self.kind not in ('patch', 'blended'):
            raise ConfigError(f"poison.kind 必须是 patch 或 blended: {self.kind}")
        if self.patch_size < 1:
            raise ConfigError(f"poison.patch_size 必须为正: {self.patch_size}")
        if not 0 <= self.patch_value <= 1:
            raise ConfigError(f"poison.patch_value 必须在 [0,1] 内: {self.patch_value}")
        if self.anchor is not None and len(self.anchor) != 2:
            raise ConfigError(f"poison.anchor 应为 [row, col]: {self.anchor}")


@dataclass
class DefenseSettings:
    tau: float = 2.5
    metric: str = 'cosine'
    calibration_fraction: float = 0.4

    def __post_init__(self):
        self.tau = float(self.tau)
        check_defense_settings(self.tau, self.metric)
        if not 0 < self.calibration_fraction < 1:
            raise ConfigError(f"defense.calibration_fraction 必须在 (0,1) 内: {self.calibration_fraction}")


@dataclass
class SweepSettings:
    taus: List[float] = field(default_factory=list)
    rates: List[float] = field(default_factory=list)
    betas: List[float] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)


@dataclass
class RunSettings:
    out_dir: str = 'runs/default'
    seed: int = 0
    workers: int = 1
    progress: bool = False
    export_excel: bool = False
    debug: bool = False

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"run.seed 必须为无符号整数: {self.seed}")
        if self.workers < 1:
            raise ConfigError(f"run.workers 必须为正: {self.workers}")


class RunConfig:
    """一次运行的完整配置，所有随机性由 run.seed 派生"""

    def __init__(self, data: Dict[str, Any]):
        self.data = merge_config(DEFAULTS, data)
        d = self.data
        try:
            self.run = RunSettings(**d['run'])
            self.poison = PoisonSettings(**d['poison'])
            self.defense = DefenseSettings(**d['defense'])
            self.sweeps = SweepSettings(**d['sweeps'])
            self.architecture = ArchitectureSpec.from_dict(d['architecture'])
            self.dataset = SyntheticDatasetConfig(seed=self.sub_seed('data'), **d['dataset'])
            self.train = TrainConfig(seed=self.sub_seed('train'), **d['train'])
        except TypeError as e:
            raise ConfigError(f"配置字段无效: {e}")
        beta = d['adaptive']['beta']
        if beta is not None and not 0 <= float(beta) <= 1:
            raise ConfigError(f"adaptive.beta 必须在 [0,1] 内: {beta}")
        self.beta: Optional[float] = None if beta is None else float(beta)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """读取 YAML 配置并应用命令行覆盖"""
        data: Dict[str, Any] = {}
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"配置文件不存在: {path}")
            try:
                with open(path, 'r', encoding='utf-8') as f:
                    data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"配置文件解析失败 {path}: {e}")
            if not isinstance(data, dict):
                raise ConfigError(f"配置文件顶层必须是字典: {path}")
        for flag, value in (overrides or {}).items():
            if value is None:
                continue
            section, key = FLAG_KEYS[flag]
            data.setdefault(section, {})[key] = value
        return cls(data)

    def with_values(self, **dotted: Any) -> 'RunConfig':
        """复制配置并修改若干键，键名形如 poison__poison_rate"""
        data = copy.deepcopy(self.data)
        for name, value in dotted.items():
            section, key = name.split('__', 1)
            data[section][key] = value
        return RunConfig(data)

    @property
    def digest(self) -> str:
        """只覆盖影响结果的配置，输出目录与运行方式不计入"""
        data = copy.deepcopy(self.data)
        data['run'] = {'seed': data['run']['seed']}
        return config_digest(data)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def out_dir(self) -> str:
        return self.run.out_dir

    @property
    def image_shape(self):
        return (self.dataset.channels, self.dataset.image_size, self.dataset.image_size)

    def sub_seed(self, name: str) -> int:
        return derive_seed(self.data['run']['seed'], name)

    def trigger(self) -> TriggerSpec:
        p = self.poison
        if p.kind == 'patch':
            return TriggerSpec.square_patch(self.dataset.channels, p.patch_size, p.patch_value,
                                            None if p.anchor is None else tuple(p.anchor))
        return TriggerSpec.noise_blend(self.image_shape, p.blend_ratio, seed=self.sub_seed('trigger'))

    def poison_spec(self) -> PoisonSpec:
        return PoisonSpec(self.trigger(), self.poison.target_class, self.poison.poison_rate,
                          seed=self.sub_seed('poison'))

    def path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)


@dataclass
class RunManifest:
    """运行清单：配置摘要、种子、版本、产物、各阶段耗时；失败时记录失败阶段"""
    command: str
    config_digest: str
    seed: int
    tool_version: str = TOOL_VERSION
    artifacts: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    status: str = 'running'
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    current_stage: Optional[str] = None

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """计时一个阶段，出错时记录阶段名"""
        self.current_stage = name
        start = time.perf_counter()
        logger.info(f"[Run] 阶段开始: {name}")
        try:
            yield
        except BaseException:
            self.failed_stage = name
            raise
        finally:
            self.timings[name] = round(time.perf_counter() - start, 3)
            self.current_stage = None

    def add_artifact(self, path: str) -> str:
        if path not in self.artifacts:
            self.artifacts.append(path)
        return path

    def add_artifacts(self, paths: Sequence[str]) -> None:
        for p in paths:
            self.add_artifact(p)

    def mark_success(self) -> None:
        missing = [p for p in self.artifacts if not os.path.exists(p)]
        if missing:
            raise WorkbenchError(f"清单中的产物不存在: {missing}")
        self.status = 'completed'

    def mark_failed(self, exc: BaseException) -> None:
        self.status = 'failed'
        if self.failed_stage is None:
            self.failed_stage = self.current_stage or 'setup'
        self.error = f"{type(exc).__name__}: {exc}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            'command': self.command,
            'config_digest': self.config_digest,
            'seed': self.seed,
            'tool_version': self.tool_version,
            'artifacts': list(self.artifacts),
            'timings': dict(self.timings),
            'status': self.status,
            'failed_stage': self.failed_stage,
            'error': self.error,
        }

    def write(self, path: str) -> None:
        write_json(self.to_dict(), path)
