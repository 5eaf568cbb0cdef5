"""
检查点文件格式
Checkpoint File Format

SAANCKPT 二进制格式: 命名 f32 张量 + FNV-1a 校验和; 元数据以 JSON 字节张量保存
Binary SAANCKPT format: named little-endian f32 tensors followed by a 64-bit
FNV-1a checksum. Run metadata (configs, epoch, best score, RNG state) rides
along as a tensor of JSON byte values.
"""

import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import orjson
from numba import njit

from .errors import CheckpointError
from .model import AblationFlags, DecoderConfig, EncoderConfig, SaanModel

logger = logging.getLogger(__name__)

MAGIC = b'SAANCKPT'
FORMAT_VERSION = 1
META_TENSOR = 'meta.json'
OPTIMIZER_PREFIX = 'adam.'

FNV_OFFSET = np.uint64(0xcbf29ce484222325)
FNV_PRIME = np.uint64(0x100000001b3)


@njit(cache=True)
def _fnv1a64(data, offset, prime):
    h = offset
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * prime
    return h


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a of ``data``."""
    return int(_fnv1a64(np.frombuffer(data, dtype=np.uint8), FNV_OFFSET, FNV_PRIME))


@dataclass
class Checkpoint:
    """
    Decoded checkpoint.

    ``state`` holds model parameters and batchnorm statistics; ``optimizer``
    holds the ``adam.*`` tensors; ``meta`` is the decoded JSON metadata.
    """
    state: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def epoch(self) -> int:
        return int(self.meta.get('epoch', -1))

    @property
    def best_score(self) -> Optional[float]:
        return self.meta.get('best_score')


def model_meta(model: SaanModel) -> dict:
    return {'encoder': asdict(model.encoder_cfg), 'decoder': asdict(model.decoder_cfg),
            'flags': asdict(model.flags), 'model_seed': model.seed}


def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    raw_name = name.encode('utf-8')
    arr = np.ascontiguousarray(array, dtype='<f4')
    if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
        raise CheckpointError('tensor name or rank too large', {'tensor': name})
    head = struct.pack('<H', len(raw_name)) + raw_name + struct.pack('<B', arr.ndim)
    head += struct.pack(f'<{arr.ndim}I', *arr.shape)
    return head + arr.tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = dict(ckpt.state)
    tensors.update(ckpt.optimizer)
    meta = np.frombuffer(orjson.dumps(ckpt.meta, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY),
                         dtype=np.uint8)
    tensors[META_TENSOR] = meta.astype(np.float32)
    body = MAGIC + struct.pack('<II', ckpt.version, len(tensors))
    body += b''.join(_encode_tensor(name, arr) for name, arr in tensors.items())
    return body + struct.pack('<Q', fnv1a64(body))


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write via a temporary file so a crash never leaves a half-written checkpoint."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = f'{path}.tmp'
    with open(tmp, 'wb') as fh:
        fh.write(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logger.debug(f"checkpoint saved: {path} ({len(ckpt.state)} model tensors)")


class _Reader:
    def __init__(self, data: bytes, limit: int):
        self.data = data
        self.limit = limit
        self.pos = 0

    def take(self, n: int, what: str, tensor: str) -> bytes:
        if self.pos + n > self.limit:
            raise CheckpointError(f'truncated checkpoint while reading {what}',
                                  {'tensor': tensor, 'offset': self.pos, 'needed': n, 'available': self.limit - self.pos})
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def decode_checkpoint(data: bytes, source: str = '<bytes>') -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError('bad checkpoint magic', {'source': source, 'magic': data[:len(MAGIC)]})
    # 校验和之前先解析, 截断时能报告缺失的张量名
    reader = _Reader(data, max(len(data) - 8, 0))
    reader.pos = len(MAGIC)
    version, count = struct.unpack('<II', reader.take(8, 'header', '<header>'))
    if version != FORMAT_VERSION:
        raise CheckpointError('unsupported checkpoint version', {'source': source, 'version': version,
                                                                 'expected': FORMAT_VERSION})
    tensors: Dict[str, np.ndarray] = {}
    for i in range(count):
        label = f'#{i}'
        (name_len,) = struct.unpack('<H', reader.take(2, 'name length', label))
        name = reader.take(name_len, 'name', label).decode('utf-8')
        (ndim,) = struct.unpack('<B', reader.take(1, 'rank', name))
        dims = struct.unpack(f'<{ndim}I', reader.take(4 * ndim, 'shape', name))
        size = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(4 * size, 'payload', name)
        tensors[name] = np.frombuffer(payload, dtype='<f4').reshape(dims).astype(np.float32)
    if len(data) - reader.pos != 8:
        raise CheckpointError('checkpoint has trailing or missing checksum bytes',
                              {'source': source, 'offset': reader.pos, 'remaining': len(data) - reader.pos})
    (stored,) = struct.unpack('<Q', data[reader.pos:])
    actual = fnv1a64(data[:reader.pos])
    if stored != actual:
        raise CheckpointError('checkpoint checksum mismatch', {'source': source, 'stored': hex(stored),
                                                               'computed': hex(actual)})

    meta_bytes = tensors.pop(META_TENSOR, None)
    meta = {} if meta_bytes is None else orjson.loads(meta_bytes.astype(np.uint8).tobytes())
    optimizer = {k: v for k, v in tensors.items() if k.startswith(OPTIMIZER_PREFIX)}
    state = {k: v for k, v in tensors.items() if not k.startswith(OPTIMIZER_PREFIX)}
    return Checkpoint(state, optimizer, meta, version)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, 'rb') as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f'cannot read checkpoint: {e}', {'path': path})
    return decode_checkpoint(data, source=path)


def configs_from_meta(meta: dict) -> Tuple[EncoderConfig, AblationFlags, DecoderConfig]:
    try:
        return (EncoderConfig(**meta['encoder']), AblationFlags(**meta['flags']),
                DecoderConfig(**meta.get('decoder', {})))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f'checkpoint metadata lacks a model configuration: {e}')


def restore_model(ckpt: Checkpoint, encoder_cfg: EncoderConfig = None, flags: AblationFlags = None,
                  decoder_cfg: DecoderConfig = None) -> SaanModel:
    """
    Build a float32 model and load the checkpoint into it.

    Configs default to the ones recorded in the metadata; passing a different
    configuration makes the strict load report the mismatching tensor names.
    """
    meta_enc, meta_flags, meta_dec = configs_from_meta(ckpt.meta)
    model = SaanModel(encoder_cfg or meta_enc, flags or meta_flags, decoder_cfg or meta_dec,
                      seed=int(ckpt.meta.get('model_seed', 0)), dtype=np.float32)
    model.load_state_dict(ckpt.state)
    model.eval()
    return model
