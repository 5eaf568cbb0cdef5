"""
错误类型
Error Types

所有模块共用的异常层级，每个异常携带一个 CLI 退出码
Shared exception hierarchy; every exception carries a CLI exit code.
"""

import orjson


class SaanError(Exception):
    """
    Base error for the toolkit, capturing a message and a context dict.

    Args:
        message (str): Human readable description.
        context (dict, optional): Extra key-values (shapes, names, offsets) rendered with the message.
    """
    exit_code = 2

    def __init__(self, message, context=None):
        super().__init__(message)
        self.message = message
        self.context = {} if context is None else context

    def __repr__(self):
        if not self.context:
            return f'{type(self).__name__} :: {self.message}'
        ctx = orjson.dumps(self.context, default=str, option=orjson.OPT_SERIALIZE_NUMPY).decode()
        return f'{type(self).__name__} :: {self.message}\n{ctx}'

    __str__ = __repr__


class UsageError(SaanError):
    """Bad flags, unknown config keys or invalid config values."""
    exit_code = 1


class DimensionError(SaanError):
    """Shape or arity mismatch."""


class LabelError(SaanError):
    """Label values outside {0, 1}."""


class FormatError(SaanError):
    """Malformed image or manifest file."""

    def __init__(self, message, offset=None, context=None):
        context = {} if context is None else dict(context)
        if offset is not None:
            context['offset'] = offset
        super().__init__(message, context)
        self.offset = offset


class CheckpointError(SaanError):
    """Unreadable or incompatible checkpoint."""


class GradientError(SaanError):
    """Backward called on a non-scalar or detached loss."""


class NumericalError(SaanError):
    """Non-finite values in a primitive, loss or gradient."""
    exit_code = 3
