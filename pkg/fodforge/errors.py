"""
fodforge 异常定义
所有模块抛出的错误都继承 FodForgeError，CLI 根据 exit_code 决定退出码
"""


class FodForgeError(Exception):
    """所有 fodforge 错误的基类"""

    exit_code = 2


class InvalidInputError(FodForgeError, ValueError):
    """输入数据不合法（形状、范数、取值范围等）"""


class ParseError(FodForgeError, ValueError):
    """文本 / JSON 解析失败"""


class CapacityError(FodForgeError, ValueError):
    """请求的数量超过可用数量（例如某个 shell 的体积不足）"""


class ConfigError(FodForgeError, ValueError):
    """配置缺失或不一致"""


class SpecError(FodForgeError, ValueError):
    """PhantomSpec 不合法"""


class InvalidStateError(FodForgeError, RuntimeError):
    """在错误的状态下调用（例如 eval 模式下请求梯度）"""


class InternalError(FodForgeError, RuntimeError):
    """理论上不会发生的数值错误"""


class DivergenceError(FodForgeError, RuntimeError):
    """训练发散（loss 或梯度出现 NaN）"""

    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state


class VolumeIOError(FodForgeError, OSError):
    """文件读写失败或文件内容损坏"""

    exit_code = 3
