import argparse
import datetime
import logging
import os
import sys
import traceback
from typing import Any, Dict, List, Optional, Tuple

# 添加模块路径
sys.path.append(os.path.abspath(os.path.dirname(__file__)))

import pandas as pd

from bench_model import SweepReport, metrics_row
from data_parser import DATASET_MAGIC, DatasetFileParser, write_dataset
from errors import ConfigError, DataError, exit_code_for
from evaluation import attack_metrics, detection_metrics, export_score_distribution
from firewall import FIREWALL_FORMAT, calibrate, load_firewall, save_firewall
from layer_scope import export_profiles, layerwise_analysis
from net_model import MODEL_MAGIC, load_model, save_model
from poison_lab import ImageDataset
from run_config import DEFAULTS, RunConfig, RunManifest
from sweeps import MODEL_SWEEPS, SWEEP_KINDS, ExperimentPipeline, SweepRunner
from utils import export_to_excel, format_float, read_json, setup_logging

logger = logging.getLogger(__name__)

def write_error_log(out_dir: str, exc_type, exc_value, exc_traceback) -> None:
    """把异常追加写入 <out>/error_log.txt"""
    error_msg = "".join(traceback.format_exception(exc_type, exc_value, exc_traceback))
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, 'error_log.txt'), 'a', encoding='utf-8') as f:
            f.write(f"[{datetime.datetime.now()}] 异常:\n")
            f.write(error_msg)
            f.write("\n\n")
    except OSError:
        pass


def install_exception_handler(out_dir: str) -> None:
    """全局异常处理器：记录到错误日志后交给默认处理器"""

    def exception_handler(exc_type, exc_value, exc_traceback):
        write_error_log(out_dir, exc_type, exc_value, exc_traceback)
        sys.__excepthook__(exc_type, exc_value, exc_traceback)

    sys.excepthook = exception_handler


# ---------------------------------------------------------------- 数据与模型文件

def data_paths(config: RunConfig) -> Dict[str, str]:
    return {name: config.path('data', f'{name}.bin')
            for name in ('train', 'test', 'poisoned_train', 'poisoned_test')}


def load_datasets(config: RunConfig) -> Tuple[ImageDataset, ImageDataset]:
    paths = data_paths(config)
    for name in ('train', 'test'):
        if not os.path.exists(paths[name]):
            raise DataError(f"数据文件不存在: {paths[name]}，请先运行 gen-data")
    parser = DatasetFileParser(debug=config.run.debug)
    train_set = parser.load_file(paths['train'])
    test_set = parser.load_file(paths['test'])
    if train_set.num_classes != config.dataset.num_classes or train_set.image_shape != config.image_shape:
        raise DataError(f"数据文件与配置不一致: {train_set.num_classes} 类 {train_set.image_shape}，"
                        f"配置为 {config.dataset.num_classes} 类 {config.image_shape}")
    return train_set, test_set


def load_trained_model(config: RunConfig):
    path = config.path('model.bin')
    if not os.path.exists(path):
        raise DataError(f"模型文件不存在: {path}，请先运行 run-attack")
    return load_model(path)


def write_report(report: SweepReport, config: RunConfig, manifest: RunManifest, stem: str) -> None:
    csv_path, json_path = config.path(f'{stem}.csv'), config.path(f'{stem}.json')
    report.write(csv_path, json_path)
    manifest.add_artifacts([csv_path, json_path])
    if config.run.export_excel:
        xlsx_path = config.path(f'{stem}.xlsx')
        if export_to_excel({report.kind: report.to_dataframe()}, xlsx_path):
            manifest.add_artifact(xlsx_path)


# ---------------------------------------------------------------- 命令

def import_datasets(config: RunConfig, train_path: str, test_path: str) -> Tuple[ImageDataset, ImageDataset]:
    """导入外部 .npz 训练/测试集，形状与类别数须与配置一致"""
    parser = DatasetFileParser(debug=config.run.debug)
    sets = []
    for path in (train_path, test_path):
        ds = parser.import_arrays(path, num_classes=config.dataset.num_classes)
        if ds.image_shape != config.image_shape:
            raise DataError(f"{path} 的图像形状 {ds.image_shape} 与配置 {config.image_shape} 不一致")
        sets.append(ds)
    return sets[0], sets[1]


def cmd_gen_data(config: RunConfig, args, manifest: RunManifest) -> None:
    """生成合成训练/测试集（或导入外部 .npz）并写出数据文件和清单"""
    imported = args.train_npz or args.test_npz
    with manifest.stage('generate'):
        if imported:
            if not (args.train_npz and args.test_npz):
                raise ConfigError("--train-npz 与 --test-npz 必须同时给出")
            train_set, test_set = import_datasets(config, args.train_npz, args.test_npz)
        else:
            train_set, test_set = ExperimentPipeline(config).generate_data()
    with manifest.stage('write'):
        paths = data_paths(config)
        extra = {'config_digest': config.digest, 'dataset': config.dataset.to_dict()}
        if imported:
            extra['imported_from'] = [os.path.basename(args.train_npz), os.path.basename(args.test_npz)]
        for name, ds in (('train', train_set), ('test', test_set)):
            manifest.add_artifact(paths[name])
            manifest.add_artifact(write_dataset(ds, paths[name], extra=extra))
    logger.info(f"数据已写出: 训练 {len(train_set)} / 测试 {len(test_set)}")


def cmd_run_attack(config: RunConfig, args, manifest: RunManifest) -> None:
    """投毒、训练并报告 MA/ASR"""
    pipeline = ExperimentPipeline(config)
    t = config.poison.target_class
    with manifest.stage('load'):
        train_set, test_set = load_datasets(config)
    with manifest.stage('poison'):
        spec = config.poison_spec()
        poisoned_train, indices = pipeline.poison(train_set)
        sets = pipeline.evaluation_sets(test_set)
        paths = data_paths(config)
        for name, ds in (('poisoned_train', poisoned_train), ('poisoned_test', sets.poisoned)):
            manifest.add_artifact(paths[name])
            manifest.add_artifact(write_dataset(ds, paths[name], poison_spec=spec))
    with manifest.stage('train'):
        net, history = pipeline.train_model(poisoned_train, indices, config.beta)
        model_path = config.path('model.bin')
        save_model(net, model_path)
        manifest.add_artifact(model_path)
        if history:
            loss_path = config.path('train_loss.csv')
            pd.DataFrame({'epoch': range(1, len(history) + 1), 'loss': history}).to_csv(
                loss_path, index=False, float_format='%.6f', lineterminator='\n')
            manifest.add_artifact(loss_path)
    with manifest.stage('evaluate'):
        attack = attack_metrics(net, sets.benign, sets.poisoned, t)
        extra: Dict[str, Any] = {'beta': config.beta if config.beta is not None else ''}
        if config.poison.compare_clean:
            _, clean_ma = pipeline.run_clean((train_set, test_set))
            extra['clean_ma'] = clean_ma
            extra['ma_ratio'] = attack.ma / clean_ma if clean_ma > 0 else 0.0
        report = SweepReport('attack', 'target_class', [metrics_row(t, attack, **extra)],
                             seed=config.seed, config_digest=config.digest)
        write_report(report, config, manifest, 'attack_report')
    logger.info(f"攻击结果: {attack}")


def cmd_defend(config: RunConfig, args, manifest: RunManifest) -> None:
    """校准防火墙、检测评估集，并导出逐层曲线与得分分布"""
    pipeline = ExperimentPipeline(config)
    t = config.poison.target_class
    with manifest.stage('load'):
        net = load_trained_model(config)
        _, test_set = load_datasets(config)
        sets = pipeline.evaluation_sets(test_set)
    with manifest.stage('calibrate'):
        fw = calibrate(net, sets.calib, tau=config.defense.tau, metric=config.defense.metric)
        fw_path = config.path('firewall.json')
        save_firewall(fw, fw_path)
        manifest.add_artifact(fw_path)
    with manifest.stage('detect'):
        attack = attack_metrics(net, sets.benign, sets.poisoned, t)
        detection = detection_metrics(net, fw, sets.benign, sets.poisoned)
        report = SweepReport('defense', 'tau', [metrics_row(fw.tau, attack, detection, metric=fw.metric)],
                             seed=config.seed, config_digest=config.digest)
        write_report(report, config, manifest, 'detection_report')
        scores_path = config.path('scores.csv')
        export_score_distribution(net, fw, sets.benign, sets.poisoned, scores_path)
        manifest.add_artifact(scores_path)
    with manifest.stage('analyze'):
        calib_t = sets.calib.subset(sets.calib.class_indices(t))
        benign_t = sets.benign.subset(sets.benign.class_indices(t))
        analysis = layerwise_analysis(net, calib_t.images, benign_t.images, sets.poisoned.images, t)
        profile_path = config.path('profiles.csv')
        export_profiles(analysis.benign_profile, analysis.poisoned_profile, profile_path)
        manifest.add_artifact(profile_path)
    logger.info(f"检测结果 (τ={fw.tau}, {fw.metric}): {detection}; 目标类 LOI={analysis.loi}")


def cmd_sweep(config: RunConfig, args, manifest: RunManifest) -> None:
    """执行参数扫描并写出报告"""
    kind = args.kind
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"未知扫描类型: {kind}，可选 {sorted(SWEEP_KINDS)}")
    runner = SweepRunner(config)
    with manifest.stage(f'sweep-{kind}'):
        if kind in MODEL_SWEEPS:
            net = load_trained_model(config)
            _, test_set = load_datasets(config)
            sets = ExperimentPipeline(config).evaluation_sets(test_set)
            report = runner.run(kind, net=net, sets=sets)
        else:
            report = runner.run(kind)
    with manifest.stage('write'):
        write_report(report, config, manifest, f'sweep_{kind}')
    print(report.to_dataframe().to_string(index=False))


def _inspect_targets(config: RunConfig, target: Optional[str]) -> List[str]:
    if target:
        return [target]
    found = [p for p in (config.path('model.bin'), config.path('firewall.json')) if os.path.exists(p)]
    if not found:
        raise DataError(f"{config.out_dir} 下没有模型或防火墙文件")
    return found


def cmd_inspect(config: RunConfig, args, manifest: RunManifest) -> None:
    """打印模型、防火墙或数据文件摘要"""
    for path in _inspect_targets(config, args.target):
        if not os.path.exists(path):
            raise DataError(f"文件不存在: {path}")
        with open(path, 'rb') as f:
            head = f.read(8)
        print(f"== {path}")
        if head == MODEL_MAGIC:
            net = load_model(path)
            print(pd.DataFrame(net.summary()).to_string(index=False))
            print(f"分接点: {net.tap_count}, 宽度: {net.tap_widths}, 参数总数: {net.parameter_count}")
        elif head == DATASET_MAGIC:
            parser = DatasetFileParser()
            parser.load_file(path)
            print(parser.class_table().to_string(index=False))
            print(parser.get_summary())
        elif path.endswith('.json') and read_json(path).get('format') == FIREWALL_FORMAT:
            fw = load_firewall(path)
            frame = fw.summary()
            print(frame.to_string(index=False, float_format=format_float))
            print(f"τ={fw.tau}, 度量={fw.metric}")
        else:
            raise DataError(f"无法识别的文件: {path}")


HANDLERS = {
    'gen-data': cmd_gen_data,
    'run-attack': cmd_run_attack,
    'defend': cmd_defend,
    'sweep': cmd_sweep,
    'inspect': cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='YAML 配置文件路径')
    common.add_argument('--seed', type=int, default=None, help='主随机种子')
    common.add_argument('--out', type=str, default=None, help='输出目录')
    common.add_argument('--tau', type=float, default=None, help='检测阈值 τ')
    common.add_argument('--metric', choices=['cosine', 'euclidean'], default=None, help='相似度度量')
    common.add_argument('--beta', type=float, default=None, help='自适应攻击惩罚系数 β')
    common.add_argument('--verbose', action='store_true', help='输出调试日志')

    parser = argparse.ArgumentParser(description='逐层特征分析后门检测工作台')
    sub = parser.add_subparsers(dest='command', required=True)
    gen = sub.add_parser('gen-data', parents=[common], help='生成合成数据集或导入外部 .npz')
    gen.add_argument('--train-npz', type=str, default=None, help='外部训练集 .npz（图像 + 标签）')
    gen.add_argument('--test-npz', type=str, default=None, help='外部测试集 .npz（图像 + 标签）')
    sub.add_parser('run-attack', parents=[common], help='投毒训练并报告 MA/ASR')
    sub.add_parser('defend', parents=[common], help='校准防火墙并报告 TPR/FPR')
    sweep = sub.add_parser('sweep', parents=[common], help='参数扫描')
    sweep.add_argument('--kind', type=str, required=True, help=f"扫描类型: {', '.join(SWEEP_KINDS)}")
    inspect = sub.add_parser('inspect', parents=[common], help='打印模型/防火墙/数据文件摘要')
    inspect.add_argument('target', nargs='?', default=None, help='要查看的文件，缺省时查看输出目录')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """程序入口，返回退出码"""
    args = build_parser().parse_args(argv)
    out_dir = args.out or DEFAULTS['run']['out_dir']
    manifest = RunManifest(args.command, config_digest='', seed=args.seed if args.seed is not None else 0)
    install_exception_handler(out_dir)
    try:
        with manifest.stage('config'):
            overrides = {k: getattr(args, k) for k in ('seed', 'out', 'tau', 'metric', 'beta')}
            config = RunConfig.load(args.config, overrides)
            out_dir = config.out_dir
            install_exception_handler(out_dir)
            setup_logging(out_dir, verbose=args.verbose)
            manifest.config_digest = config.digest
            manifest.seed = config.seed
        HANDLERS[args.command](config, args, manifest)
        manifest.mark_success()
        return 0
    except Exception as exc:
        write_error_log(out_dir, type(exc), exc, exc.__traceback__)
        manifest.mark_failed(exc)
        logger.error(f"{args.command} 失败 (阶段 {manifest.failed_stage}): {exc}")
        return exit_code_for(exc)
    finally:
        if args.command != 'inspect':
            manifest.write(os.path.join(out_dir, f'run_manifest_{args.command}.json'))


if __name__ == "__main__":
    sys.exit(main())
