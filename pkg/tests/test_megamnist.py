import numpy as np
import pytest

from ipsel.data import (MegaMnistDataset, MegaMnistSpec, default_noise_count,
                        generate_image, generate_megamnist, labels_from_placements)
from ipsel.data.glyphs import default_glyph, glyph_set, ink_bbox
from ipsel.errors import ContractError, GenerationError


def small_spec(**kw):
    defaults = dict(image_side=150, train_count=6, test_count=3, seed=42)
    defaults.update(kw)
    return MegaMnistSpec(**defaults)


class TestGlyphs:
    def test_ten_distinct_glyphs(self):
        glyphs = glyph_set(28)
        flat = {g.tobytes() for g in glyphs}
        assert len(flat) == 10
        for g in glyphs:
            assert g.shape == (28, 28)
            assert g.max() == 1.0

    def test_scaling_preserves_ink(self):
        for size in (14, 28, 56):
            g = default_glyph(3, size)
            assert g.shape == (size, size)
            assert g.sum() > 0

    def test_ink_bbox(self):
        g = np.zeros((10, 10), dtype=np.float32)
        g[2:5, 3:8] = 1.0
        assert ink_bbox(g) == (2, 3, 5, 8)


class TestSpec:
    def test_noise_scales_linearly(self):
        assert default_noise_count(1500) == 50
        assert default_noise_count(500) == 17
        assert MegaMnistSpec(image_side=1500).noise_line_count == 50

    def test_too_small_image_rejected(self):
        with pytest.raises(ContractError):
            MegaMnistSpec(image_side=20)

    def test_placement_failure_raises(self):
        # 5 digits of 28px cannot fit without overlap in 27x27... side must
        # be >= digit; use a side where placement is impossible but legal.
        with pytest.raises(GenerationError):
            spec = small_spec(image_side=36)
            glyphs = glyph_set(spec.digit_size)
            for i in range(50):
                generate_image(spec, "train", i, glyphs)


class TestGeneration:
    def test_deterministic_per_seed(self, tmp_path):
        spec = small_spec()
        generate_megamnist(spec, tmp_path / "a")
        generate_megamnist(spec, tmp_path / "b")
        for name in ("spec.json", "train_images.bin", "train_labels.bin",
                     "test_images.bin", "test_labels.bin"):
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes(), name

    def test_labels_consistent_with_placements(self, tmp_path):
        spec = small_spec(train_count=20)
        ds = generate_megamnist(spec, tmp_path / "ds")
        split = ds.split("train")
        glyphs = glyph_set(spec.digit_size)
        for labels, placements in zip(split.labels, split.placements):
            recomputed = labels_from_placements(placements, glyphs)
            assert recomputed == labels

    def test_majority_class_placed_exactly_three_times(self, tmp_path):
        spec = small_spec(train_count=25)
        ds = generate_megamnist(spec, tmp_path / "ds")
        split = ds.split("train")
        for labels, placements in zip(split.labels, split.placements):
            classes = [p.cls for p in placements]
            assert classes.count(labels.majority) == 3
            assert len(classes) == 5

    def test_multi_label_popcount_and_majority_bit(self, tmp_path):
        spec = small_spec(train_count=25)
        split = generate_megamnist(spec, tmp_path / "ds").split("train")
        for labels in split.labels:
            bits = labels.multi_vector()
            assert bits.sum() in (1, 2, 3)
            assert bits[labels.majority] == 1

    def test_max_and_top_labels(self, tmp_path):
        spec = small_spec(train_count=25)
        split = generate_megamnist(spec, tmp_path / "ds").split("train")
        glyphs = glyph_set(spec.digit_size)
        for labels, placements in zip(split.labels, split.placements):
            assert labels.max_digit == max(p.cls for p in placements)
            tops = [(p.y + ink_bbox(glyphs[p.cls])[0], p.x, p.cls) for p in placements]
            assert labels.top == min(tops)[2]

    def test_digits_do_not_overlap(self, tmp_path):
        spec = small_spec(train_count=15)
        split = generate_megamnist(spec, tmp_path / "ds").split("train")
        ds_size = spec.digit_size
        for placements in split.placements:
            boxes = [(p.y, p.x) for p in placements]
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    dy = abs(boxes[i][0] - boxes[j][0])
                    dx = abs(boxes[i][1] - boxes[j][1])
                    assert dy >= ds_size or dx >= ds_size

    def test_noise_never_paints_digit_boxes(self):
        spec = small_spec(noise_line_count=40)
        glyphs = glyph_set(spec.digit_size)
        image, labels, placements = generate_image(spec, "train", 3, glyphs)
        clean = np.zeros_like(image)
        ds = spec.digit_size
        for p in placements:
            region = clean[p.y : p.y + ds, p.x : p.x + ds]
            np.maximum(region, glyphs[p.cls], out=region)
        for p in placements:
            a = image[p.y : p.y + ds, p.x : p.x + ds]
            b = clean[p.y : p.y + ds, p.x : p.x + ds]
            assert np.array_equal(a, b)

    def test_noise_present_outside_boxes(self):
        spec = small_spec(noise_line_count=30)
        glyphs = glyph_set(spec.digit_size)
        image, _, placements = generate_image(spec, "train", 0, glyphs)
        mask = np.ones_like(image, dtype=bool)
        ds = spec.digit_size
        for p in placements:
            mask[p.y : p.y + ds, p.x : p.x + ds] = False
        assert image[mask].sum() > 0

    def test_pixels_in_unit_range(self):
        spec = small_spec()
        glyphs = glyph_set(spec.digit_size)
        image, _, _ = generate_image(spec, "test", 1, glyphs)
        assert image.dtype == np.float32
        assert image.min() >= 0.0 and image.max() <= 1.0


class TestPersistence:
    def test_roundtrip_through_disk(self, tmp_path):
        spec = small_spec()
        generate_megamnist(spec, tmp_path / "ds")
        ds = MegaMnistDataset(tmp_path / "ds")
        assert ds.spec == spec
        split = ds.split("train")
        assert split.count == spec.train_count
        assert split.images.shape == (6, 150, 150)
        glyphs = glyph_set(spec.digit_size)
        img0, labels0, placements0 = generate_image(spec, "train", 0, glyphs)
        assert np.array_equal(np.asarray(split.images[0]), img0)
        assert split.labels[0] == labels0
        assert split.placements[0] == placements0

    def test_label_arrays_shapes(self, tiny_dataset):
        arrays = tiny_dataset.split("train").label_arrays()
        assert arrays["majority"].shape == (12,)
        assert arrays["multi"].shape == (12, 10)

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(ContractError, match="spec.json"):
            MegaMnistDataset(tmp_path / "nope")
