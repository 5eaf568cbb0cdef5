"""
配置文件解析
Configuration Files

`key = value` 配置文件 (python-dotenv 解析), 键名与各配置数据类字段一致
Line-oriented `key = value` files parsed with python-dotenv. Keys mirror the
field names of the configuration dataclasses; command-line values override
file values.
"""

import dataclasses
import logging
import typing
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

from dotenv import dotenv_values

from .data import SceneSpec
from .errors import UsageError
from .model import AblationFlags, DecoderConfig, EncoderConfig
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

T = TypeVar('T')

CONFIG_CLASSES = (TrainConfig, SceneSpec, EncoderConfig, DecoderConfig, AblationFlags)
EXTRA_KEYS = ('preset',)
_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def known_keys() -> set:
    keys = set(EXTRA_KEYS)
    for cls in CONFIG_CLASSES:
        keys.update(f.name for f in dataclasses.fields(cls))
    keys.discard('flags')
    return keys


def read_config_file(path: str) -> Dict[str, str]:
    """Parse a config file; unknown keys or keys without a value raise UsageError."""
    values = dotenv_values(path)
    unknown = sorted(set(values) - known_keys())
    if unknown:
        raise UsageError('unknown config keys', {'path': path, 'unknown': unknown})
    empty = sorted(k for k, v in values.items() if v is None or v == '')
    if empty:
        raise UsageError('config keys without a value', {'path': path, 'keys': empty})
    return dict(values)


def coerce(value: Any, annotation, key: str = '?') -> Any:
    """Convert a string value to the field type; non-string values pass through."""
    if not isinstance(value, str):
        return value
    text = value.strip()
    origin = typing.get_origin(annotation)
    try:
        if origin is tuple:
            args = [a for a in typing.get_args(annotation) if a is not Ellipsis] or [str]
            return tuple(args[0](item.strip()) for item in text.split(',') if item.strip())
        if origin is typing.Union:
            args = [a for a in typing.get_args(annotation) if a is not type(None)]
            return None if text.lower() == 'none' else coerce(text, args[0], key)
        if annotation is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f'not a boolean: {text!r}')
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        return text
    except ValueError as e:
        raise UsageError(f'invalid value for {key}: {e}', {'key': key, 'value': value})


def build(cls: Type[T], values: Mapping[str, Any], **overrides) -> T:
    """Instantiate ``cls`` from the subset of ``values`` naming its fields."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values and values[f.name] is not None:
            kwargs[f.name] = coerce(values[f.name], hints[f.name], f.name)
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise UsageError(f'cannot build {cls.__name__}: {e}')


def resolve_flags(values: Mapping[str, Any]) -> AblationFlags:
    """A preset selects the base row; individual flag keys override it."""
    preset = values.get('preset')
    base = dataclasses.asdict(AblationFlags.preset(preset)) if preset else {}
    merged = {**base, **{k: v for k, v in values.items() if v is not None}}
    return build(AblationFlags, merged)


def merge(file_values: Optional[Mapping[str, str]], cli_values: Mapping[str, Any]) -> Dict[str, Any]:
    """CLI values that were actually given win over file values."""
    merged: Dict[str, Any] = dict(file_values or {})
    merged.update({k: v for k, v in cli_values.items() if v is not None})
    return merged


def effective_config(values: Mapping[str, Any]) -> Dict[str, Any]:
    """All dataclass configs built from ``values``, as plain dicts for logging and headers."""
    flags = resolve_flags(values)
    return {
        'train': dataclasses.asdict(build(TrainConfig, values, flags=flags)),
        'scene': dataclasses.asdict(build(SceneSpec, values)),
        'encoder': dataclasses.asdict(encoder_config(values)),
        'decoder': dataclasses.asdict(build(DecoderConfig, values)),
    }


def encoder_config(values: Mapping[str, Any]) -> EncoderConfig:
    """``variant = resnet18`` selects the full-size preset unless channels are given explicitly."""
    variant = values.get('variant')
    if variant == 'resnet18' and values.get('stage_channels') is None:
        base = dataclasses.asdict(EncoderConfig.resnet18())
        return build(EncoderConfig, {**base, **{k: v for k, v in values.items() if v is not None}})
    return build(EncoderConfig, values)
