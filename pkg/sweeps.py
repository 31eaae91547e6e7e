"""实验流水线（投毒 → 训练 → 划分校准集 → 校准 → 评估）与参数扫描"""
import concurrent.futures
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from bench_model import AttackMetrics, DetectionMetrics, SweepReport, SweepRow, metrics_row
from errors import ConfigError
from evaluation import (attack_metrics, check_grid, detection_metrics, metric_comparison,
                        per_layer_detection, split_calibration, threshold_sweep)
from firewall import FirewallModel, calibrate
from net_model import Network, build_network
from poison_lab import (ImageDataset, gen_synthetic_dataset, make_poisoned_test_set, poison_train_set,
                        train_adaptive)
from run_config import RunConfig
from trainer import accuracy, train
from utils import calculate_statistics

logger = logging.getLogger(__name__)

# 扫描类型 -> 报告中的参数列名
SWEEP_KINDS = {
    'tau': 'tau',
    'rate': 'poison_rate',
    'layer': 'layer',
    'beta': 'beta',
    'metric': 'tau',
    'repeat': 'seed',
}
MODEL_SWEEPS = ('tau', 'layer', 'metric')
SUMMARY_METRICS = ('ma', 'asr', 'tpr', 'fpr')


@dataclass
class EvaluationSets:
    """校准集、良性评估集、投毒评估集"""
    calib: ImageDataset
    benign: ImageDataset
    poisoned: ImageDataset


@dataclass
class PipelineResult:
    """一次完整流水线的结果"""
    net: Network
    sets: EvaluationSets
    firewall: FirewallModel
    attack: AttackMetrics
    detection: DetectionMetrics
    poison_indices: np.ndarray
    beta: Optional[float] = None
    loss_history: List[float] = field(default_factory=list)

    def row(self, value) -> SweepRow:
        return metrics_row(value, self.attack, self.detection)


class ExperimentPipeline:
    """按配置执行一次实验，各阶段的随机性来自 run.seed 派生的子种子"""

    def __init__(self, config: RunConfig, debug: bool = False):
        self.config = config
        self.debug = debug or config.run.debug

    def log(self, message):
        """输出日志信息"""
        if self.debug:
            logger.info(f"[Pipeline] {message}")
        else:
            logger.debug(f"[Pipeline] {message}")

    def generate_data(self) -> Tuple[ImageDataset, ImageDataset]:
        return gen_synthetic_dataset(self.config.dataset)

    def poison(self, train_set: ImageDataset) -> Tuple[ImageDataset, np.ndarray]:
        return poison_train_set(train_set, self.config.poison_spec())

    def evaluation_sets(self, test_set: ImageDataset) -> EvaluationSets:
        """每类 10% 作校准集，余下为良性评估集，其中非目标类样本加触发器作投毒评估集"""
        calib, benign = split_calibration(test_set, self.config.defense.calibration_fraction,
                                          seed=self.config.sub_seed('split'))
        poisoned = make_poisoned_test_set(benign, self.config.poison_spec())
        self.log(f"校准 {len(calib)} / 良性评估 {len(benign)} / 投毒评估 {len(poisoned)}")
        return EvaluationSets(calib, benign, poisoned)

    def initial_network(self) -> Network:
        cfg = self.config
        return build_network(cfg.architecture, cfg.image_shape, cfg.dataset.num_classes,
                             seed=cfg.sub_seed('init'))

    def train_model(self, train_set: ImageDataset, poison_indices: Sequence[int],
                    beta: Optional[float] = None) -> Tuple[Network, List[float]]:
        """beta 为 None 时普通训练，否则按自适应目标训练"""
        cfg = self.config
        net = self.initial_network()
        if beta is None:
            self.log(f"普通训练 {cfg.train.epochs} 轮")
            return train(net, train_set, cfg.train, progress=cfg.run.progress)
        self.log(f"自适应训练 beta={beta}")
        model = train_adaptive(net, train_set, poison_indices, cfg.poison.target_class, beta,
                               cfg.train, progress=cfg.run.progress)
        return model, []

    def defend(self, net: Network, sets: EvaluationSets, tau: Optional[float] = None,
               metric: Optional[str] = None) -> Tuple[FirewallModel, DetectionMetrics]:
        d = self.config.defense
        fw = calibrate(net, sets.calib, tau=d.tau if tau is None else tau,
                       metric=d.metric if metric is None else metric)
        return fw, detection_metrics(net, fw, sets.benign, sets.poisoned)

    def run(self, data: Optional[Tuple[ImageDataset, ImageDataset]] = None,
            beta: Optional[float] = None) -> PipelineResult:
        """完整流水线；beta 缺省时取配置中的 adaptive.beta"""
        train_set, test_set = data if data is not None else self.generate_data()
        beta = self.config.beta if beta is None else beta
        poisoned_train, indices = self.poison(train_set)
        net, history = self.train_model(poisoned_train, indices, beta)
        sets = self.evaluation_sets(test_set)
        attack = attack_metrics(net, sets.benign, sets.poisoned, self.config.poison.target_class)
        fw, detection = self.defend(net, sets)
        self.log(f"{attack}, {detection}")
        return PipelineResult(net, sets, fw, attack, detection, indices, beta, history)

    def run_clean(self, data: Optional[Tuple[ImageDataset, ImageDataset]] = None) -> Tuple[Network, float]:
        """不投毒的对照训练，返回 (网络, 良性评估集 MA 百分数)"""
        train_set, test_set = data if data is not None else self.generate_data()
        net, _ = self.train_model(train_set, [])
        _, benign = split_calibration(test_set, self.config.defense.calibration_fraction,
                                      seed=self.config.sub_seed('split'))
        ma = 100.0 * accuracy(net, benign.images, benign.ground_truth)
        self.log(f"干净模型 MA={ma:.2f}%")
        return net, ma


class SweepRunner:
    """参数扫描：整条流水线类扫描并行执行，基于已训练模型的扫描复用缓存"""

    def __init__(self, config: RunConfig, max_workers: Optional[int] = None, debug: bool = False):
        self.config = config
        self.max_workers = max_workers or config.run.workers
        self.debug = debug or config.run.debug
        self.rows: List[SweepRow] = []

    def log(self, message):
        """输出日志信息"""
        if self.debug:
            logger.info(f"[Sweep] {message}")
        else:
            logger.debug(f"[Sweep] {message}")

    def run(self, kind: str, result: Optional[PipelineResult] = None,
            net: Optional[Network] = None, sets: Optional[EvaluationSets] = None) -> SweepReport:
        """执行一种扫描并生成报告"""
        if kind not in SWEEP_KINDS:
            raise ConfigError(f"未知扫描类型: {kind}，可选 {sorted(SWEEP_KINDS)}")
        if kind in MODEL_SWEEPS:
            if result is not None:
                net, sets = result.net, result.sets
            if net is None or sets is None:
                result = ExperimentPipeline(self.config, self.debug).run()
                net, sets = result.net, result.sets
            rows = self.model_sweep(kind, net, sets)
        elif kind == 'rate':
            rows = self.poison_rates(self.config.sweeps.rates)
        elif kind == 'beta':
            rows = self.betas(self.config.sweeps.betas)
        else:
            rows = self.repeats(self.config.sweeps.seeds)
        self.rows = rows
        return SweepReport(kind, SWEEP_KINDS[kind], rows, seed=self.config.seed,
                           config_digest=self.config.digest)

    def model_sweep(self, kind: str, net: Network, sets: EvaluationSets) -> List[SweepRow]:
        d = self.config.defense
        taus = self.config.sweeps.taus
        if kind == 'tau':
            return threshold_sweep(net, sets.calib, sets.benign, sets.poisoned, taus, d.metric)
        if kind == 'layer':
            return per_layer_detection(net, sets.calib, sets.benign, sets.poisoned, d.tau, d.metric)
        return metric_comparison(net, sets.calib, sets.benign, sets.poisoned, taus)

    def poison_rates(self, rates: Sequence[float]) -> List[SweepRow]:
        """Table 式投毒比例扫描：每个比例跑一遍完整流水线，数据与种子共享"""
        rates = check_grid(rates, 'poison_rate', 0.0, 1.0)
        data = ExperimentPipeline(self.config, self.debug).generate_data()

        def evaluate(rate):
            cfg = self.config.with_values(poison__poison_rate=rate)
            return ExperimentPipeline(cfg, self.debug).run(data).row(rate)

        return self._run_parallel(evaluate, rates)

    def betas(self, betas: Sequence[float]) -> List[SweepRow]:
        """自适应攻击惩罚系数扫描"""
        betas = check_grid(betas, 'beta', 0.0, 1.0, low_open=False, high_open=False)
        data = ExperimentPipeline(self.config, self.debug).generate_data()

        def evaluate(beta):
            return ExperimentPipeline(self.config, self.debug).run(data, beta=beta).row(beta)

        return self._run_parallel(evaluate, betas)

    def repeats(self, seeds: Sequence[int]) -> List[SweepRow]:
        """不同主种子重复运行，附加均值与总体标准差行"""
        if not seeds or len(set(seeds)) != len(seeds) or any(int(s) < 0 for s in seeds):
            raise ConfigError(f"sweeps.seeds 必须是不重复的非负整数: {seeds}")

        def evaluate(seed):
            cfg = self.config.with_values(run__seed=int(seed))
            return ExperimentPipeline(cfg, self.debug).run().row(int(seed))

        rows = self._run_parallel(evaluate, sorted(int(s) for s in seeds))
        stats = {name: calculate_statistics([r.metrics[name] for r in rows]) for name in SUMMARY_METRICS}
        rows.append(SweepRow(None, {name: stats[name]['mean'] for name in SUMMARY_METRICS}, label='mean'))
        rows.append(SweepRow(None, {name: stats[name]['std'] for name in SUMMARY_METRICS}, label='std'))
        return rows

    def _run_parallel(self, evaluate: Callable, values: Sequence) -> List[SweepRow]:
        """并行评估各参数取值，结果按参数排序；任何一点失败则整体失败"""
        results: Dict = {}
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            future_to_params = {executor.submit(evaluate, v): v for v in values}
            for future in concurrent.futures.as_completed(future_to_params):
                value = future_to_params[future]
                try:
                    results[value] = future.result()
                    self.log(f"完成 {value}: {results[value].metrics}")
                except Exception as e:
                    logger.error(f"评估参数 {value} 时出错: {e}")
                    raise
        return [results[v] for v in sorted(results)]
