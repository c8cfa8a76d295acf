import numpy as np
import pytest

from cmeseg import dataset
from cmeseg.dataset import (AugmentSpec, Sample, TransformParams,
                            apply_transform, augment, load_manifest, split)
from cmeseg.errors import (BadSpec, EmptyDataset, ExtentMismatch,
                           MissingMask)

from .phantom import layered_phantom


def make_tree(root, patients, slices, h=24, w=20, with_g2=True, seed=0):
    rng = np.random.default_rng(seed)
    for p in range(patients):
        for s in range(slices):
            d = root / f"P{p:02d}" / str(s)
            d.mkdir(parents=True)
            img, mask = layered_phantom(rng, h, w)
            dataset.save_gray(d / "image.png", img)
            dataset.save_mask(d / "mask_g1.png", mask)
            if with_g2:
                dataset.save_mask(d / "mask_g2.png", mask ^ (rng.random(
                    mask.shape) < 0.05).astype(np.uint8))


class TestManifest:
    def test_full_tree(self, tmp_path):
        make_tree(tmp_path, 10, 11)
        samples = load_manifest(tmp_path)
        assert len(samples) == 110
        patients = {s.patient_id for s in samples}
        assert len(patients) == 10
        for pid in patients:
            assert sum(s.patient_id == pid for s in samples) == 11

    def test_missing_mask(self, tmp_path):
        make_tree(tmp_path, 1, 1)
        (tmp_path / "P00" / "0" / "mask_g1.png").unlink()
        with pytest.raises(MissingMask):
            load_manifest(tmp_path)

    def test_extent_mismatch(self, tmp_path):
        make_tree(tmp_path, 1, 1)
        dataset.save_mask(tmp_path / "P00" / "0" / "mask_g1.png",
                          np.zeros((5, 5), np.uint8))
        with pytest.raises(ExtentMismatch):
            load_manifest(tmp_path)

    def test_empty_root(self, tmp_path):
        with pytest.raises(EmptyDataset):
            load_manifest(tmp_path)
        with pytest.raises(EmptyDataset):
            load_manifest(tmp_path / "nope")

    def test_optional_grader2(self, tmp_path):
        make_tree(tmp_path, 1, 2, with_g2=False)
        samples = load_manifest(tmp_path)
        assert all(s.mask_g2_path is None for s in samples)
        with pytest.raises(MissingMask):
            samples[0].load_mask(2)

    def test_mask_values_mapped(self, tmp_path):
        make_tree(tmp_path, 1, 1)
        m = load_manifest(tmp_path)[0].load_mask(1)
        assert set(np.unique(m)) <= {0, 1}

    def test_write_manifest(self, tmp_path):
        make_tree(tmp_path, 2, 1)
        samples = load_manifest(tmp_path)
        out = tmp_path / "manifest.txt"
        dataset.write_manifest(samples, out)
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 2
        assert lines[0].startswith("patient=P00 slice=0 image=")


class TestTransforms:
    def test_identity_returns_exact_copy(self):
        rng = np.random.default_rng(0)
        img, mask = layered_phantom(rng, 32, 32)
        out_i, out_m = apply_transform(img, mask, TransformParams())
        assert out_i.tobytes() == img.tobytes()
        assert out_m.tobytes() == mask.tobytes()

    def test_hflip_is_involution(self):
        rng = np.random.default_rng(1)
        img, mask = layered_phantom(rng, 24, 28)
        t = TransformParams(hflip=True)
        once_i, once_m = apply_transform(img, mask, t)
        twice_i, twice_m = apply_transform(once_i, once_m, t)
        np.testing.assert_allclose(twice_i, img, atol=1e-12)
        np.testing.assert_array_equal(twice_m, mask)

    def test_translation_shifts_content(self):
        img = np.zeros((10, 10))
        img[4, 4] = 1.0
        mask = np.zeros((10, 10), np.uint8)
        mask[4, 4] = 1
        out_i, out_m = apply_transform(img, mask,
                                       TransformParams(translate=(2, 3)))
        assert out_i[6, 7] == pytest.approx(1.0)
        assert out_m[6, 7] == 1

    @pytest.mark.parametrize("seed", range(6))
    def test_masks_stay_binary(self, seed):
        rng = np.random.default_rng(seed)
        img, mask = layered_phantom(rng, 32, 32)
        t = TransformParams(translate=(3, -2), angle=7.5, hflip=True,
                            crop_fraction=0.9, crop_origin=(0.3, 0.7))
        _, out_m = apply_transform(img, mask, t)
        assert set(np.unique(out_m)) <= {0, 1}
        assert out_m.shape == mask.shape

    def test_crop_resize_preserves_extent(self):
        rng = np.random.default_rng(2)
        img, mask = layered_phantom(rng, 30, 40)
        t = TransformParams(crop_fraction=0.8, crop_origin=(0.5, 0.5))
        out_i, out_m = apply_transform(img, mask, t)
        assert out_i.shape == (30, 40) and out_m.shape == (30, 40)


class TestAugment:
    def fake_samples(self, tmp_path, n):
        make_tree(tmp_path, n, 1)
        return load_manifest(tmp_path)

    def test_counts(self, tmp_path):
        samples = self.fake_samples(tmp_path, 11)
        out = augment(samples * 10, AugmentSpec(target_count=2800))
        assert len(out) == 2800

    def test_identity_spec_reproduces_inputs(self, tmp_path):
        samples = self.fake_samples(tmp_path, 3)
        spec = AugmentSpec(target_count=7, max_translate=0, max_rotate=0.0,
                           allow_hflip=False, crop_fraction=1.0)
        out = augment(samples, spec)
        assert len(out) == 7
        for rec in out:
            img, mask = rec.load_planes()
            src_img = rec.source.load_image()
            assert img.tobytes() == src_img.tobytes()
            assert mask.tobytes() == rec.source.load_mask(1).tobytes()

    def test_deterministic_under_seed(self, tmp_path):
        samples = self.fake_samples(tmp_path, 2)
        a = augment(samples, AugmentSpec(target_count=8, seed=5))
        b = augment(samples, AugmentSpec(target_count=8, seed=5))
        for ra, rb in zip(a, b):
            assert ra.transform == rb.transform
            ia, ma = ra.load_planes()
            ib, mb = rb.load_planes()
            assert ia.tobytes() == ib.tobytes()
            assert ma.tobytes() == mb.tobytes()

    def test_different_seed_changes_transforms(self, tmp_path):
        samples = self.fake_samples(tmp_path, 2)
        a = augment(samples, AugmentSpec(target_count=8, seed=5))
        b = augment(samples, AugmentSpec(target_count=8, seed=6))
        assert any(ra.transform != rb.transform
                   for ra, rb in zip(a[2:], b[2:]))

    def test_target_below_source_count_rejected(self, tmp_path):
        samples = self.fake_samples(tmp_path, 3)
        with pytest.raises(BadSpec):
            augment(samples, AugmentSpec(target_count=2))

    def test_bad_crop_fraction_rejected(self):
        with pytest.raises(BadSpec):
            AugmentSpec(crop_fraction=0.4)

    def test_loaded_shape_for_training(self, tmp_path):
        samples = self.fake_samples(tmp_path, 1)
        img, mask = augment(samples, AugmentSpec(target_count=1))[0].load()
        assert img.shape == (1, 3, 24, 20)
        assert mask.shape == (24, 20)


class TestSplit:
    def test_source_level_fraction(self, tmp_path):
        make_tree(tmp_path, 10, 11, with_g2=False)
        samples = load_manifest(tmp_path)
        records = augment(samples, AugmentSpec(target_count=2800, seed=1))
        train, val = split(records, 0.2, seed=3)
        val_sources = {r.source_key for r in val}
        train_sources = {r.source_key for r in train}
        assert len(val_sources) == 22  # round(0.2 * 110)
        assert not (val_sources & train_sources)
        assert len(train) + len(val) == 2800

    def test_single_source_stays_together(self, tmp_path):
        make_tree(tmp_path, 1, 1, with_g2=False)
        records = augment(load_manifest(tmp_path),
                          AugmentSpec(target_count=5))
        train, val = split(records, 0.2, seed=0)
        assert len(val) == 0 and len(train) == 5

    def test_same_seed_same_split(self, tmp_path):
        make_tree(tmp_path, 4, 2, with_g2=False)
        records = augment(load_manifest(tmp_path),
                          AugmentSpec(target_count=20))
        a = split(records, 0.25, seed=7)
        b = split(records, 0.25, seed=7)
        assert [r.index for r in a[1]] == [r.index for r in b[1]]

    def test_bad_fraction(self):
        with pytest.raises(BadSpec):
            split([], 0.0, 0)
