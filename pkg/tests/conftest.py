import logging

import numpy as np
import pytest

from pysaan.autodiff import Tensor
from pysaan.data import SceneSpec, build_manifest
from pysaan.model import AblationFlags, EncoderConfig, SaanModel

TINY_CHANNELS = (4, 8)
TINY_SIZE = 16


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder():
    """Two-stage encoder; inputs must be multiples of 8."""
    return EncoderConfig(stage_channels=TINY_CHANNELS, blocks_per_stage=1, input_channels=3)


@pytest.fixture
def tiny_model(tiny_encoder):
    def _make(flags=None, dtype=np.float64, seed=0, decoder=None):
        return SaanModel(tiny_encoder, flags or AblationFlags(), decoder, seed=seed, dtype=dtype)
    return _make


@pytest.fixture
def image_pair(rng):
    def _make(n=2, size=TINY_SIZE, dtype=np.float64):
        t1 = Tensor(rng.random((n, 3, size, size)).astype(dtype))
        t2 = Tensor(rng.random((n, 3, size, size)).astype(dtype))
        return t1, t2
    return _make


@pytest.fixture
def tiny_spec():
    return SceneSpec(size=TINY_SIZE, min_objects=1, max_objects=2, object_size_range=(3, 6), seed=7)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec):
    root = tmp_path / 'data'
    return build_manifest(tiny_spec, str(root), (4, 2, 2))


@pytest.fixture(autouse=True)
def _quiet_pysaan_logger():
    yield
    # CLI runs attach file handlers to the package logger
    pkg = logging.getLogger('pysaan')
    for handler in list(pkg.handlers):
        handler.close()
        pkg.removeHandler(handler)
