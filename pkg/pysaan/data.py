"""
合成双时相数据集
Synthetic Bi-Temporal Dataset

基于计数器 RNG 的确定性场景生成器、精确变化掩膜、90 度增强以及数据集清单
Deterministic scene generator driven by a counter-based RNG, exact change
masks from object rasters, 90-degree/flip augmentation and the dataset
manifest that ties the image tree together.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import orjson

from .errors import DimensionError, FormatError, UsageError
from .netpbm import read_image, write_image

logger = logging.getLogger(__name__)

OBJECT_KINDS = ('rectangle', 'ellipse')
AUGMENT_OPS = ('none', 'rot90', 'rot180', 'rot270', 'hflip', 'vflip')
SPLITS = ('train', 'val', 'test')
MANIFEST_NAME = 'manifest.txt'
SPEC_NAME = 'scene_spec.json'
# 放置物体的最大尝试次数
PLACEMENT_ATTEMPTS = 64
TEXTURE_CELL = 8


@dataclass
class SceneSpec:
    """
    场景生成参数

    Objects are either added (t2 only), removed (t1 only) or kept (both);
    photometric jitter is applied to t2 and never touches the mask.
    """
    size: int = 64
    channels: int = 3
    min_objects: int = 2
    max_objects: int = 5
    kinds: Tuple[str, ...] = OBJECT_KINDS
    object_size_range: Tuple[int, int] = (8, 20)
    p_add: float = 0.35
    p_remove: float = 0.35
    p_keep: float = 0.30
    brightness_jitter: float = 0.2
    noise_sigma: float = 0.02
    texture_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.object_size_range = tuple(int(v) for v in self.object_size_range)
        if self.size < 8 or self.size & (self.size - 1):
            raise UsageError('scene size must be a power of two >= 8', {'size': self.size})
        if self.channels not in (1, 3):
            raise UsageError('scene channels must be 1 or 3', {'channels': self.channels})
        if not 0 <= self.min_objects <= self.max_objects:
            raise UsageError('object count range is invalid', {'min': self.min_objects, 'max': self.max_objects})
        unknown = [k for k in self.kinds if k not in OBJECT_KINDS]
        if not self.kinds or unknown:
            raise UsageError('unknown object kinds', {'kinds': list(self.kinds)})
        lo, hi = self.object_size_range
        if not 1 <= lo <= hi <= self.size:
            raise UsageError('object_size_range must satisfy 1 <= lo <= hi <= size', {'range': [lo, hi]})
        probs = (self.p_add, self.p_remove, self.p_keep)
        if min(probs) < 0 or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise UsageError('change probabilities must be >= 0 and sum to 1', {'probs': list(probs)})
        jitter = (self.brightness_jitter, self.noise_sigma, self.texture_amplitude)
        if not all(math.isfinite(v) and v >= 0 for v in jitter) or self.brightness_jitter >= 1:
            raise UsageError('jitter ranges must be finite, >= 0 and brightness_jitter < 1', {'jitter': list(jitter)})
        if not 0 <= self.seed < 2 ** 64:
            raise UsageError('seed must be a 64-bit unsigned integer', {'seed': self.seed})

    def to_json(self) -> bytes:
        return orjson.dumps(asdict(self), option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Philox stream keyed by (seed, index); independent of generation order."""
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(index)))


@dataclass(frozen=True)
class SceneObject:
    kind: str
    top: int
    left: int
    height: int
    width: int
    color: Tuple[float, ...]
    in_t1: bool
    in_t2: bool

    def overlaps(self, other: 'SceneObject') -> bool:
        return not (self.top + self.height <= other.top or other.top + other.height <= self.top
                    or self.left + self.width <= other.left or other.left + other.width <= self.left)


@dataclass
class SamplePair:
    """一对双时相图像及其变化掩膜 (C,H,W 与 1,H,W, float32)"""
    img_t1: np.ndarray
    img_t2: np.ndarray
    mask: np.ndarray
    index: int = -1
    objects: Tuple[SceneObject, ...] = field(default_factory=tuple)


def object_raster(obj: SceneObject, size: int) -> np.ndarray:
    """Boolean H,W coverage of a single object."""
    out = np.zeros((size, size), dtype=bool)
    box = (slice(obj.top, obj.top + obj.height), slice(obj.left, obj.left + obj.width))
    if obj.kind == 'rectangle':
        out[box] = True
        return out
    yy, xx = np.ogrid[0:obj.height, 0:obj.width]
    cy, cx = (obj.height - 1) / 2.0, (obj.width - 1) / 2.0
    ry, rx = obj.height / 2.0, obj.width / 2.0
    out[box] = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return out


def rasterize(objects: Sequence[SceneObject], size: int, time: int) -> np.ndarray:
    """Union of the rasters of every object present at ``time`` (1 or 2)."""
    cover = np.zeros((size, size), dtype=bool)
    for obj in objects:
        if obj.in_t1 if time == 1 else obj.in_t2:
            cover |= object_raster(obj, size)
    return cover


def _background(spec: SceneSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    base = rng.uniform(0.25, 0.75, size=spec.channels)
    cells = max(spec.size // TEXTURE_CELL, 1)
    low = rng.standard_normal((spec.channels, cells, cells))
    texture = np.kron(low, np.ones((spec.size // cells, spec.size // cells)))
    bg = base[:, None, None] + spec.texture_amplitude * texture
    return np.clip(bg, 0.0, 1.0), base


def _place_objects(spec: SceneSpec, rng: np.random.Generator, base: np.ndarray) -> List[SceneObject]:
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    lo, hi = spec.object_size_range
    fates = rng.choice(3, size=count, p=[spec.p_add, spec.p_remove, spec.p_keep])
    placed: List[SceneObject] = []
    for fate in fates:
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        # 颜色与背景保持足够对比度
        sign = np.where(rng.random(spec.channels) < 0.5, -1.0, 1.0)
        sign = np.where(base + sign * 0.3 > 1.0, -1.0, np.where(base + sign * 0.3 < 0.0, 1.0, sign))
        color = tuple(float(c) for c in np.clip(base + sign * rng.uniform(0.3, 0.5, spec.channels), 0.0, 1.0))
        for _ in range(PLACEMENT_ATTEMPTS):
            h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            top = int(rng.integers(0, spec.size - h + 1))
            left = int(rng.integers(0, spec.size - w + 1))
            obj = SceneObject(kind, top, left, h, w, color, in_t1=bool(fate != 0), in_t2=bool(fate != 1))
            if not any(obj.overlaps(other) for other in placed):
                placed.append(obj)
                break
    return placed


def _paint(canvas: np.ndarray, objects: Sequence[SceneObject], time: int) -> np.ndarray:
    img = canvas.copy()
    for obj in objects:
        if obj.in_t1 if time == 1 else obj.in_t2:
            cover = object_raster(obj, img.shape[1])
            img[:, cover] = np.asarray(obj.color)[:, None]
    return img


def generate_pair(spec: SceneSpec, index: int) -> SamplePair:
    """
    Render pair ``index`` of the scene family ``spec``.

    The result depends only on (spec, index). The mask is the symmetric
    difference of the t1 and t2 object coverages.
    """
    rng = sample_rng(spec.seed, index)
    canvas, base = _background(spec, rng)
    objects = _place_objects(spec, rng, base)
    img_t1 = _paint(canvas, objects, 1)
    img_t2 = _paint(canvas, objects, 2)

    if spec.brightness_jitter > 0:
        img_t2 = img_t2 * rng.uniform(1.0 - spec.brightness_jitter, 1.0 + spec.brightness_jitter)
    if spec.noise_sigma > 0:
        img_t2 = img_t2 + spec.noise_sigma * rng.standard_normal(img_t2.shape)
    img_t2 = np.clip(img_t2, 0.0, 1.0)

    mask = rasterize(objects, spec.size, 1) ^ rasterize(objects, spec.size, 2)
    return SamplePair(img_t1.astype(np.float32), img_t2.astype(np.float32),
                      mask[None].astype(np.float32), index, tuple(objects))


# ==================== 数据增强 ====================

def augment(sample: SamplePair, op: str) -> SamplePair:
    """Apply one exact rotation/flip to both images and the mask."""
    if op not in AUGMENT_OPS:
        raise UsageError(f'unknown augmentation {op!r}', {'known': list(AUGMENT_OPS)})
    h, w = sample.mask.shape[-2:]
    if op.startswith('rot') and h != w:
        raise DimensionError('rotations need square images', {'height': h, 'width': w})

    def _apply(a: np.ndarray) -> np.ndarray:
        if op == 'none':
            return a.copy()
        if op == 'hflip':
            out = a[..., ::-1]
        elif op == 'vflip':
            out = a[..., ::-1, :]
        else:
            out = np.rot90(a, int(op[3:]) // 90, axes=(-2, -1))
        return np.ascontiguousarray(out)

    objects = sample.objects if op == 'none' else ()
    return SamplePair(_apply(sample.img_t1), _apply(sample.img_t2), _apply(sample.mask), sample.index, objects)


def random_augment(sample: SamplePair, rng: np.random.Generator) -> SamplePair:
    return augment(sample, AUGMENT_OPS[int(rng.integers(len(AUGMENT_OPS)))])


# ==================== 数据集清单 ====================

@dataclass(frozen=True)
class ManifestEntry:
    split: str
    index: int
    t1: str
    t2: str
    mask: str

    def line(self) -> str:
        return f'split={self.split} index={self.index} t1={self.t1} t2={self.t2} mask={self.mask}\n'


@dataclass
class DatasetManifest:
    """数据集清单 (路径相对于 root)"""
    root: str
    entries: List[ManifestEntry]

    def split(self, name: str) -> List[ManifestEntry]:
        if name not in SPLITS:
            raise UsageError(f'unknown split {name!r}', {'known': list(SPLITS)})
        return [e for e in self.entries if e.split == name]

    def counts(self) -> Dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def resolve(self, relpath: str) -> str:
        return os.path.join(self.root, relpath)

    def load_pair(self, entry: ManifestEntry) -> SamplePair:
        mask = read_image(self.resolve(entry.mask))
        return SamplePair(read_image(self.resolve(entry.t1)), read_image(self.resolve(entry.t2)),
                          (mask > 0.5).astype(np.float32), entry.index)

    def iter_pairs(self, split: str) -> Iterator[SamplePair]:
        for entry in self.split(split):
            yield self.load_pair(entry)

    def scene_spec(self) -> Optional[SceneSpec]:
        path = os.path.join(self.root, SPEC_NAME)
        if not os.path.exists(path):
            return None
        with open(path, 'rb') as fh:
            return SceneSpec(**orjson.loads(fh.read()))


def build_manifest(spec: SceneSpec, root: str, counts: Sequence[int] = (8, 2, 2)) -> DatasetManifest:
    """
    Generate the dataset tree ``<root>/{t1,t2,mask}/<index>.p{p,g}m`` and its manifest.

    Splits take consecutive, disjoint index ranges in train/val/test order.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != len(SPLITS) or min(counts) < 1:
        raise UsageError('split counts must be three integers >= 1', {'counts': list(counts)})
    ext = 'ppm' if spec.channels == 3 else 'pgm'
    entries = []
    index = 0
    for split, count in zip(SPLITS, counts):
        for _ in range(count):
            pair = generate_pair(spec, index)
            entry = ManifestEntry(split, index, f't1/{index}.{ext}', f't2/{index}.{ext}', f'mask/{index}.pgm')
            write_image(os.path.join(root, entry.t1), pair.img_t1)
            write_image(os.path.join(root, entry.t2), pair.img_t2)
            write_image(os.path.join(root, entry.mask), pair.mask)
            entries.append(entry)
            index += 1

    with open(os.path.join(root, MANIFEST_NAME), 'w', encoding='utf-8', newline='\n') as fh:
        fh.writelines(e.line() for e in entries)
    with open(os.path.join(root, SPEC_NAME), 'wb') as fh:
        fh.write(spec.to_json())
    logger.info(f"✅ dataset written to {root}: {dict(zip(SPLITS, counts))}")
    return DatasetManifest(root, entries)


_MANIFEST_KEYS = ('split', 'index', 't1', 't2', 'mask')


def parse_manifest(text: str, root: str, source: str = MANIFEST_NAME) -> DatasetManifest:
    entries, seen = [], set()
    offset = 0
    for lineno, raw in enumerate(text.splitlines(keepends=True), start=1):
        line = raw.strip()
        start, offset = offset, offset + len(raw.encode('utf-8'))
        if not line or line.startswith('#'):
            continue
        try:
            fields = dict(token.split('=', 1) for token in line.split())
        except ValueError:
            raise FormatError('manifest token without "="', offset=start, context={'source': source, 'line': lineno})
        if sorted(fields) != sorted(_MANIFEST_KEYS):
            raise FormatError('manifest line must have split, index, t1, t2 and mask', offset=start,
                              context={'source': source, 'line': lineno, 'keys': sorted(fields)})
        if fields['split'] not in SPLITS or not fields['index'].isdigit():
            raise FormatError('bad split or index in manifest', offset=start,
                              context={'source': source, 'line': lineno})
        index = int(fields['index'])
        if index in seen:
            raise FormatError(f'index {index} listed twice', offset=start, context={'source': source, 'line': lineno})
        seen.add(index)
        entries.append(ManifestEntry(fields['split'], index, fields['t1'], fields['t2'], fields['mask']))
    return DatasetManifest(root, entries)


def load_manifest(path: str) -> DatasetManifest:
    """Read a manifest file or the manifest inside a dataset directory."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    with open(path, 'r', encoding='utf-8') as fh:
        text = fh.read()
    return parse_manifest(text, os.path.dirname(os.path.abspath(path)), source=path)


def stack_batch(samples: Sequence[SamplePair]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """N,C,H,W images and N,1,H,W masks."""
    return (np.stack([s.img_t1 for s in samples]), np.stack([s.img_t2 for s in samples]),
            np.stack([s.mask for s in samples]))
