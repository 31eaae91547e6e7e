class WorkbenchError(Exception):
    """工作台异常基类"""
    exit_code = 1


class ConfigError(WorkbenchError, ValueError):
    """配置文件或命令行参数无效"""
    exit_code = 2


class DataError(WorkbenchError, ValueError):
    """数据集、触发器或投毒参数无效"""
    exit_code = 3


class ShapeMismatchError(DataError):
    """输入形状与网络或触发器不一致"""


class ComputationError(WorkbenchError, RuntimeError):
    """训练、梯度或统计计算失败"""
    exit_code = 4


class CalibrationError(ComputationError):
    """防火墙校准失败或校准状态损坏"""


def exit_code_for(exc: BaseException) -> int:
    """根据异常类型返回命令行退出码"""
    if isinstance(exc, WorkbenchError):
        return exc.exit_code
    return 1
