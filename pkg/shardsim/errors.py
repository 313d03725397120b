"""
异常定义
所有库内错误都从 ShardsimError 派生，命令层统一捕获
"""


class ShardsimError(Exception):
    """shardsim 错误基类"""


class FormatError(ShardsimError, ValueError):
    """浮点格式非法，或向没有 NaN 编码的格式写入 NaN"""


class ShapeMismatchError(ShardsimError, ValueError):
    """张量形状不匹配"""


class ConfigurationError(ShardsimError, ValueError):
    """配置不一致（整除性、秩范围、未知实验等）"""


class CollectiveError(ShardsimError, ValueError):
    """集合通信参数错误（机器编号越界、参与者数量不对）"""


class CheckpointError(ShardsimError, OSError):
    """检查点缺失、损坏或与拓扑不匹配"""


class CalibrationError(ShardsimError, ValueError):
    """缩放常数校准失败（直方图为空）"""
