"""
运行配置加载
优先级：环境变量 > 项目根目录 config.py > 内置默认值
"""

import importlib
import logging
import os
import sys
from typing import Any, Callable, Optional

logger = logging.getLogger(__name__)

# 项目根目录（config.py 所在目录）
PROJECT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# 内置默认值
DEFAULTS = {
    "FODFORGE_THREADS": 1,
    "FODFORGE_SEED": 0,
    "FODFORGE_LOG_LEVEL": "INFO",
    "FODFORGE_MESH_SIZE": 724,
    "FODFORGE_CONSTRAINT_MESH_SIZE": 300,
}

_config_module = None
_config_loaded = False


def _load_config_module():
    """尝试导入根目录的 config.py（不存在时返回 None）"""
    global _config_module, _config_loaded
    if _config_loaded:
        return _config_module
    _config_loaded = True
    if PROJECT_DIR not in sys.path:
        sys.path.insert(0, PROJECT_DIR)
    try:
        _config_module = importlib.import_module("config")
    except ImportError:
        _config_module = None
    return _config_module


def get_setting(name: str, default: Any = None, cast: Optional[Callable[[Any], Any]] = None) -> Any:
    """
    读取一个配置项

    Args:
        name: 配置名（例如 "FODFORGE_THREADS"）
        default: 环境变量和 config.py 都没有时使用的值；None 时使用 DEFAULTS
        cast: 类型转换函数（环境变量总是字符串）

    Returns:
        配置值
    """
    if default is None:
        default = DEFAULTS.get(name)
    if cast is None and default is not None:
        cast = type(default)

    raw = os.getenv(name)
    if raw is None:
        module = _load_config_module()
        if module is not None and getattr(module, name, None) is not None:
            raw = getattr(module, name)
    if raw is None:
        return default

    try:
        return cast(raw) if cast is not None else raw
    except (TypeError, ValueError):
        logger.warning("[Config] %s=%r 无法解析，使用默认值 %r", name, raw, default)
        return default
