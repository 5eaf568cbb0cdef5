"""
PGM/PPM 图像读写
NetPBM Image Codec

8 位二进制 PGM (P5) 与 PPM (P6)，最近舍入 (半值向上)
8-bit binary PGM (P5) and PPM (P6) with nearest, half-up quantization.
"""

import logging
import os
from typing import Tuple

import numpy as np

from .errors import DimensionError, FormatError

logger = logging.getLogger(__name__)

MAXVAL = 255
_MAGIC_CHANNELS = {b'P5': 1, b'P6': 3}


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to uint8 with floor(v*255 + 0.5)."""
    scaled = np.floor(np.asarray(values, dtype=np.float64) * MAXVAL + 0.5)
    return np.clip(scaled, 0, MAXVAL).astype(np.uint8)


def encode_image(image: np.ndarray) -> bytes:
    """
    Encode a C,H,W array in [0,1] (C = 1 or 3) as P5/P6 bytes.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DimensionError('image must be 1,H,W or 3,H,W', {'shape': list(image.shape)})
    c, h, w = image.shape
    magic = 'P5' if c == 1 else 'P6'
    header = f'{magic}\n{w} {h}\n{MAXVAL}\n'.encode('ascii')
    payload = quantize(image).transpose(1, 2, 0).tobytes()
    return header + payload


def write_image(path: str, image: np.ndarray) -> None:
    """Write a 1-channel array as PGM or a 3-channel array as PPM."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as fh:
        fh.write(encode_image(image))


def _next_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    # 跳过空白和注释
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b'#':
            end = data.find(b'\n', pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b'#':
        pos += 1
    if start == pos:
        raise FormatError('unexpected end of header', offset=start)
    return data[start:pos], pos


def decode_image(data: bytes, source: str = '<bytes>') -> np.ndarray:
    """Decode P5/P6 bytes into a float32 C,H,W array in [0,1]."""
    magic = data[:2]
    if magic not in _MAGIC_CHANNELS:
        raise FormatError(f'bad magic bytes {magic!r}', offset=0, context={'source': source})
    channels = _MAGIC_CHANNELS[magic]
    pos = 2
    fields = []
    for label in ('width', 'height', 'maxval'):
        token, end = _next_token(data, pos)
        if not token.isdigit():
            raise FormatError(f'malformed {label} field {token!r}', offset=pos, context={'source': source})
        fields.append(int(token))
        pos = end
    width, height, maxval = fields
    if maxval != MAXVAL:
        raise FormatError(f'unsupported maxval {maxval}', offset=pos, context={'source': source})
    if width < 1 or height < 1:
        raise FormatError('empty image', offset=pos, context={'source': source})
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError('missing whitespace after header', offset=pos, context={'source': source})
    pos += 1
    expected = width * height * channels
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise FormatError('truncated payload', offset=pos + len(payload),
                          context={'source': source, 'expected_bytes': expected, 'got_bytes': len(payload)})
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / MAXVAL)


def read_image(path: str) -> np.ndarray:
    with open(path, 'rb') as fh:
        return decode_image(fh.read(), source=path)
