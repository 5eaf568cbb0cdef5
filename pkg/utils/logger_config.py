"""
日志配置工具库
Logger Configuration Utility

提供统一的日志配置和管理功能, 每次命令行运行一个日志文件
Provides unified logging configuration: one log file per CLI run, console
echo on stderr so stdout stays machine-readable.
"""

import os
import logging
import sys
from typing import Optional

DEFAULT_LOG_DIR = "log"
LOG_DIR_ENV = "SAAN_LOG_DIR"
LOG_LEVEL_ENV = "SAAN_LOG_LEVEL"


class LoggerConfig:
    """日志配置管理器"""

    def __init__(self,
                 log_dir: str = DEFAULT_LOG_DIR,
                 log_level: int = logging.INFO,
                 console_output: bool = True,
                 file_encoding: str = 'utf-8'):
        """
        初始化日志配置

        Args:
            log_dir: 日志目录
            log_level: 日志级别
            console_output: 是否输出到控制台 (stderr)
            file_encoding: 文件编码
        """
        self.log_dir = log_dir
        self.log_level = log_level
        self.console_output = console_output
        self.file_encoding = file_encoding
        self.log_format = "%(asctime)s - %(levelname)s - %(message)s"

    @classmethod
    def from_env(cls) -> 'LoggerConfig':
        """从环境变量 SAAN_LOG_DIR / SAAN_LOG_LEVEL 读取配置"""
        level_name = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
        level = logging.getLevelName(level_name)
        if not isinstance(level, int):
            level = logging.INFO
        return cls(log_dir=os.environ.get(LOG_DIR_ENV, DEFAULT_LOG_DIR), log_level=level)

    def setup_logger(self,
                     name: str,
                     log_file: Optional[str] = None,
                     file_mode: str = 'a') -> logging.Logger:
        """
        设置日志器

        Args:
            name: 日志器名称 (包名时其子模块日志一并写入)
            log_file: 日志文件名，默认 <name>.log
            file_mode: 文件模式 ('a' 追加, 'w' 覆盖)

        Returns:
            配置好的日志器
        """
        if log_file is None:
            log_file = f"{name}.log"

        # 确保日志目录存在
        os.makedirs(self.log_dir, exist_ok=True)

        formatter = logging.Formatter(self.log_format)

        logger = logging.getLogger(name)
        logger.setLevel(self.log_level)

        # 防止日志传播到根日志器（避免重复输出）
        logger.propagate = False

        # 清除现有处理器（避免重复）
        for handler in list(logger.handlers):
            handler.close()
        logger.handlers.clear()

        log_file_path = os.path.join(self.log_dir, log_file)
        file_handler = logging.FileHandler(
            log_file_path,
            mode=file_mode,
            encoding=self.file_encoding
        )
        file_handler.setLevel(self.log_level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

        # 控制台输出走 stderr, stdout 只留给结果
        if self.console_output:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(self.log_level)
            console_handler.setFormatter(formatter)
            logger.addHandler(console_handler)

        logger.info(f"📝 日志系统初始化完成 - 文件: {log_file_path}")
        return logger

    def get_run_logger(self, run_name: str, package: Optional[str] = None) -> logging.Logger:
        """
        获取单次运行的日志器

        Args:
            run_name: 运行名称 (子命令名)
            package: 挂载处理器的日志器名, 默认与 run_name 相同

        Returns:
            运行日志器, 日志文件 <run_name>_run.log
        """
        return self.setup_logger(
            name=package or run_name,
            log_file=f"{run_name}_run.log"
        )


def get_logger(name: str, log_file: Optional[str] = None) -> logging.Logger:
    """
    快速获取日志器的便捷函数 (配置取自环境变量)

    Args:
        name: 日志器名称
        log_file: 日志文件名

    Returns:
        配置好的日志器
    """
    return LoggerConfig.from_env().setup_logger(name, log_file)


def get_run_logger(run_name: str, package: Optional[str] = None) -> logging.Logger:
    """
    快速获取运行日志器的便捷函数

    Args:
        run_name: 运行名称
        package: 挂载处理器的日志器名

    Returns:
        运行日志器
    """
    return LoggerConfig.from_env().get_run_logger(run_name, package)
