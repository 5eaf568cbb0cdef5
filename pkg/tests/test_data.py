import os

import numpy as np
import pytest

from pysaan.data import (
    AUGMENT_OPS,
    MANIFEST_NAME,
    SamplePair,
    SceneSpec,
    augment,
    build_manifest,
    generate_pair,
    load_manifest,
    object_raster,
    parse_manifest,
    random_augment,
    rasterize,
    stack_batch,
)
from pysaan.errors import DimensionError, FormatError, UsageError


def still_spec(**kw):
    base = dict(size=32, p_add=0.0, p_remove=0.0, p_keep=1.0, brightness_jitter=0.0, noise_sigma=0.0, seed=11)
    base.update(kw)
    return SceneSpec(**base)


class TestSceneSpec:
    @pytest.mark.parametrize('kw', [
        dict(size=48),
        dict(size=4),
        dict(channels=2),
        dict(p_add=0.5, p_remove=0.5, p_keep=0.5),
        dict(kinds=('triangle',)),
        dict(object_size_range=(10, 5)),
        dict(brightness_jitter=1.0),
        dict(noise_sigma=float('nan')),
        dict(min_objects=3, max_objects=2),
    ])
    def test_rejects_invalid_fields(self, kw):
        with pytest.raises(UsageError):
            SceneSpec(**kw)


class TestGeneratePair:
    def test_deterministic(self, tiny_spec):
        a, b = generate_pair(tiny_spec, 3), generate_pair(tiny_spec, 3)
        np.testing.assert_array_equal(a.img_t1, b.img_t1)
        np.testing.assert_array_equal(a.img_t2, b.img_t2)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.objects == b.objects

    def test_indices_give_different_scenes(self, tiny_spec):
        assert not np.array_equal(generate_pair(tiny_spec, 0).img_t1, generate_pair(tiny_spec, 1).img_t1)

    def test_no_change_no_jitter_gives_identical_images(self):
        pair = generate_pair(still_spec(), 0)
        np.testing.assert_array_equal(pair.img_t1, pair.img_t2)
        assert not pair.mask.any()

    def test_single_added_rectangle(self):
        spec = still_spec(min_objects=1, max_objects=1, kinds=('rectangle',), p_add=1.0, p_keep=0.0)
        pair = generate_pair(spec, 5)
        (obj,) = pair.objects
        assert not obj.in_t1 and obj.in_t2
        np.testing.assert_array_equal(pair.mask[0], object_raster(obj, 32).astype(np.float32))
        assert pair.mask.sum() == obj.height * obj.width

    def test_mask_is_symmetric_difference_of_rasters(self):
        spec = SceneSpec(size=32, min_objects=3, max_objects=6, seed=99)
        for index in range(40):
            pair = generate_pair(spec, index)
            expected = rasterize(pair.objects, 32, 1) ^ rasterize(pair.objects, 32, 2)
            np.testing.assert_array_equal(pair.mask[0].astype(bool), expected)
            assert pair.img_t1.min() >= 0 and pair.img_t2.max() <= 1
            assert pair.img_t1.shape == (3, 32, 32) and pair.mask.shape == (1, 32, 32)

    def test_photometric_only_pairs_have_empty_masks(self):
        spec = still_spec(brightness_jitter=0.9, noise_sigma=0.5)
        for index in range(20):
            pair = generate_pair(spec, index)
            assert not pair.mask.any()
        assert not np.array_equal(pair.img_t1, pair.img_t2)

    def test_ellipse_raster_is_inside_its_box(self):
        spec = SceneSpec(size=32, kinds=('ellipse',), seed=3)
        for obj in generate_pair(spec, 0).objects:
            cover = object_raster(obj, 32)
            assert cover.sum() < obj.height * obj.width
            assert cover[obj.top:obj.top + obj.height, obj.left:obj.left + obj.width].sum() == cover.sum()

    def test_grayscale_scenes(self):
        pair = generate_pair(SceneSpec(size=16, channels=1, object_size_range=(3, 6)), 0)
        assert pair.img_t1.shape == (1, 16, 16)


class TestAugment:
    def test_identities(self, tiny_spec):
        pair = generate_pair(tiny_spec, 1)
        twice = augment(augment(pair, 'hflip'), 'hflip')
        np.testing.assert_array_equal(twice.img_t1, pair.img_t1)
        rotated = pair
        for _ in range(4):
            rotated = augment(rotated, 'rot90')
        np.testing.assert_array_equal(rotated.img_t2, pair.img_t2)
        np.testing.assert_array_equal(rotated.mask, pair.mask)
        halfway = augment(augment(pair, 'rot90'), 'rot90')
        np.testing.assert_array_equal(halfway.mask, augment(pair, 'rot180').mask)

    def test_same_transform_on_all_arrays(self, tiny_spec):
        pair = generate_pair(tiny_spec, 2)
        out = augment(pair, 'vflip')
        np.testing.assert_array_equal(out.img_t1, pair.img_t1[:, ::-1, :])
        np.testing.assert_array_equal(out.img_t2, pair.img_t2[:, ::-1, :])
        np.testing.assert_array_equal(out.mask, pair.mask[:, ::-1, :])

    @pytest.mark.parametrize('op', AUGMENT_OPS)
    def test_changed_pixel_count_is_invariant(self, tiny_spec, op):
        pair = generate_pair(tiny_spec, 0)
        assert augment(pair, op).mask.sum() == pair.mask.sum()

    def test_rotation_needs_square_input(self):
        pair = SamplePair(np.zeros((3, 4, 8), np.float32), np.zeros((3, 4, 8), np.float32),
                          np.zeros((1, 4, 8), np.float32))
        with pytest.raises(DimensionError):
            augment(pair, 'rot90')
        assert augment(pair, 'hflip').mask.shape == (1, 4, 8)

    def test_unknown_op(self, tiny_spec):
        with pytest.raises(UsageError):
            augment(generate_pair(tiny_spec, 0), 'rot45')

    def test_random_augment_is_seeded(self, tiny_spec):
        pair = generate_pair(tiny_spec, 0)
        a = random_augment(pair, np.random.default_rng(5))
        b = random_augment(pair, np.random.default_rng(5))
        np.testing.assert_array_equal(a.img_t1, b.img_t1)


class TestManifest:
    def test_layout_and_disjoint_splits(self, tmp_path, tiny_spec):
        manifest = build_manifest(tiny_spec, str(tmp_path / 'ds'), (8, 2, 2))
        lines = (tmp_path / 'ds' / MANIFEST_NAME).read_text().splitlines()
        assert len(lines) == 12
        assert lines[0] == 'split=train index=0 t1=t1/0.ppm t2=t2/0.ppm mask=mask/0.pgm'
        assert manifest.counts() == {'train': 8, 'val': 2, 'test': 2}
        splits = [{e.index for e in manifest.split(s)} for s in ('train', 'val', 'test')]
        assert not (splits[0] & splits[1]) and not (splits[1] & splits[2]) and not (splits[0] & splits[2])
        for entry in manifest.entries:
            assert os.path.exists(manifest.resolve(entry.t1))
            assert os.path.exists(manifest.resolve(entry.mask))

    def test_regeneration_is_byte_identical(self, tmp_path, tiny_spec):
        build_manifest(tiny_spec, str(tmp_path / 'a'), (2, 1, 1))
        build_manifest(tiny_spec, str(tmp_path / 'b'), (2, 1, 1))
        for rel in (MANIFEST_NAME, 'scene_spec.json', 't1/0.ppm', 't2/3.ppm', 'mask/2.pgm'):
            assert (tmp_path / 'a' / rel).read_bytes() == (tmp_path / 'b' / rel).read_bytes()

    def test_loaded_pairs_match_generation(self, tiny_dataset, tiny_spec):
        loaded = load_manifest(tiny_dataset.root)
        assert loaded.entries == tiny_dataset.entries
        assert loaded.scene_spec() == tiny_spec
        pair = loaded.load_pair(loaded.split('val')[0])
        fresh = generate_pair(tiny_spec, pair.index)
        np.testing.assert_array_equal(pair.mask, fresh.mask)
        assert np.abs(pair.img_t1 - fresh.img_t1).max() <= 1 / 510 + 1e-6
        t1, t2, masks = stack_batch(list(loaded.iter_pairs('train')))
        assert t1.shape == (4, 3, 16, 16) and masks.shape == (4, 1, 16, 16)

    def test_rejects_bad_counts(self, tmp_path, tiny_spec):
        with pytest.raises(UsageError):
            build_manifest(tiny_spec, str(tmp_path), (4, 0, 1))

    def test_unknown_split(self, tiny_dataset):
        with pytest.raises(UsageError):
            tiny_dataset.split('holdout')

    @pytest.mark.parametrize('text', [
        'split=train index=0 t1=a t2=b\n',
        'split=dev index=0 t1=a t2=b mask=c\n',
        'split=train index=x t1=a t2=b mask=c\n',
        'split=train index=0 t1=a t2=b mask=c\nsplit=val index=0 t1=a t2=b mask=c\n',
        'split=train index=0 t1 t2=b mask=c\n',
    ])
    def test_parse_errors(self, text):
        with pytest.raises(FormatError):
            parse_manifest(text, '/tmp')

    def test_parse_error_offset_points_at_line(self):
        text = 'split=train index=0 t1=a t2=b mask=c\nbroken line\n'
        with pytest.raises(FormatError) as info:
            parse_manifest(text, '/tmp')
        assert info.value.offset == len(text.splitlines(keepends=True)[0])
        assert info.value.context['line'] == 2

    def test_comments_and_blank_lines_skipped(self):
        manifest = parse_manifest('# header\n\nsplit=test index=4 t1=a t2=b mask=c\n', '/data')
        assert [e.index for e in manifest.split('test')] == [4]
