"""
工具库模块
Utilities Module

日志配置
Logging configuration shared by the CLI and entry scripts
"""

from .logger_config import (
    LoggerConfig,
    get_logger,
    get_run_logger,
)

__all__ = [
    'LoggerConfig',
    'get_logger',
    'get_run_logger',
]
