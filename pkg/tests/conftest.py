import copy
import os
import sys

import numpy as np
import pytest
import yaml

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from net_model import ArchitectureSpec, BlockSpec, LayerSpec, Network, build_network  # noqa: E402
from poison_lab import SyntheticDatasetConfig, gen_synthetic_dataset  # noqa: E402
from run_config import RunConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='运行桌面规模端到端测试')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: 桌面规模端到端测试，需要 --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='需要 --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


DENSE4 = ArchitectureSpec([BlockSpec('dense', 12), BlockSpec('dense', 10), BlockSpec('dense', 10),
                           BlockSpec('dense', 8)])
SMALL_CNN = ArchitectureSpec([
    BlockSpec('conv', 4, tap=False),
    BlockSpec('conv', 4, pool=True),
    BlockSpec('conv', 6),
    BlockSpec('dense', 16),
    BlockSpec('dense', 12),
])


def hand_dense_net(weights, biases, input_dim):
    """按给定权重搭建全连接网络（层间 ReLU，中间层为分接点）"""
    layers = []
    for i, (w, b) in enumerate(zip(weights, biases)):
        layers.append(LayerSpec('dense', {'weight': np.asarray(w, dtype=np.float64),
                                          'bias': np.asarray(b, dtype=np.float64)}))
        if i < len(weights) - 1:
            layers.append(LayerSpec('relu', is_tap=True))
    return Network(layers, len(biases[-1]), (input_dim,))


@pytest.fixture
def dense_net():
    return build_network(DENSE4, (1, 4, 4), 3, seed=7)


@pytest.fixture
def conv_net():
    return build_network(SMALL_CNN, (2, 8, 8), 3, seed=11)


@pytest.fixture(scope='session')
def tiny_data():
    config = SyntheticDatasetConfig(num_classes=3, image_size=8, channels=2, train_count=90,
                                    test_count=90, noise_level=0.05, seed=3)
    return gen_synthetic_dataset(config)


SMALL_CONFIG = {
    'dataset': {'num_classes': 3, 'image_size': 8, 'channels': 2, 'train_count': 90, 'test_count': 90,
                'noise_level': 0.05},
    'architecture': SMALL_CNN.to_dict(),
    'train': {'epochs': 10, 'batch_size': 16, 'lr_decay_epochs': []},
    'poison': {'target_class': 1, 'poison_rate': 0.1},
    'sweeps': {'taus': [1.0, 2.5], 'rates': [0.05, 0.1], 'betas': [0.0, 0.5], 'seeds': [0, 1]},
}


@pytest.fixture
def small_config(tmp_path):
    data = copy.deepcopy(SMALL_CONFIG)
    data['run'] = {'out_dir': str(tmp_path / 'run')}
    return RunConfig(data)


@pytest.fixture
def small_config_file(tmp_path):
    """写出小规模 YAML 配置，返回路径"""
    path = tmp_path / 'small.yaml'
    path.write_text(yaml.safe_dump(SMALL_CONFIG, sort_keys=True), encoding='utf-8')
    return str(path)
