"""Phantom generation, augmentation, dataset I/O, and splitting."""

import itertools

import numpy as np
import pytest
from PIL import Image

from mgunet.data import (LabeledSample, PhantomSpec, add_noise,
                         adjust_contrast, augment, flip_sample, gen_phantom,
                         load_dataset, make_split, save_dataset)
from mgunet.errors import ConfigError, DataError


def column_runs(col):
    return [int(k) for k, _ in itertools.groupby(col)]


def stratified_order_ok(col):
    """Non-disc column must read as a subsequence of (0, 1..9, 0)."""
    runs = column_runs(col)
    if runs and runs[0] == 0:
        runs = runs[1:]
    if runs and runs[-1] == 0:
        runs = runs[:-1]
    if any(not (1 <= v <= 9) for v in runs):
        return False
    return all(a < b for a, b in zip(runs, runs[1:]))


def disc_run_contiguous(col):
    pos = np.flatnonzero(col == 10)
    return len(pos) == 0 or (pos[-1] - pos[0] + 1 == len(pos))


SMALL = PhantomSpec(height=64, width=96, seed=5,
                    thickness_ranges=((4, 6), (3, 4), (3, 4), (3, 4), (3, 4),
                                      (4, 6), (3, 4), (3, 4), (5, 8)),
                    top_margin=(3.0, 6.0), wiggle_amplitude=1.5)


class TestGenPhantom:
    def test_anatomical_order_every_column(self):
        for s in gen_phantom(SMALL, 6):
            for x in range(s.label.shape[1]):
                col = s.label[:, x]
                if np.any(col == 10):
                    assert disc_run_contiguous(col), (s.sample_id, x)
                else:
                    assert stratified_order_ok(col), (s.sample_id, x)

    def test_disc_interrupts_stack(self):
        for s in gen_phantom(SMALL, 4):
            disc_cols = np.flatnonzero((s.label == 10).any(axis=0))
            assert disc_cols.size > 0
            center = disc_cols[len(disc_cols) // 2]
            col = s.label[:, center]
            assert not np.any(col == 1), "band 1 should be displaced at the disc center"

    def test_deterministic_under_seed(self):
        a = gen_phantom(SMALL, 5)
        b = gen_phantom(SMALL, 5)
        for sa, sb in zip(a, b):
            assert sa.image.tobytes() == sb.image.tobytes()
            assert np.array_equal(sa.label, sb.label)
            assert sa.sample_id == sb.sample_id

    def test_subject_grouping(self):
        samples = gen_phantom(SMALL, 6)
        assert [s.subject_id for s in samples] == \
            ["s000", "s000", "s001", "s001", "s002", "s002"]

    def test_disc_fraction_within_geometric_bounds(self):
        spec = PhantomSpec(seed=11)
        n = 100
        samples = gen_phantom(spec, n)
        fracs = [np.mean(s.label == 10) for s in samples]
        mean_frac = float(np.mean(fracs))

        w, h = spec.width, spec.height
        t_lo = 0.85 * sum(lo for lo, _ in spec.thickness_ranges[:8])
        t_hi = 1.15 * sum(hi for _, hi in spec.thickness_ranges[:8])
        area_lo = spec.disc_depth[0] * (4.0 / 3.0) * spec.disc_halfwidth[0] * w * t_lo
        area_hi = spec.disc_depth[1] * (4.0 / 3.0) * spec.disc_halfwidth[1] * w * t_hi
        margin = 2.0 * 2.0 * spec.disc_halfwidth[1] * w  # row rounding slop
        lo = (area_lo - margin) / (h * w)
        hi = (area_hi + margin) / (h * w)
        assert lo < mean_frac < hi, (lo, mean_frac, hi)

    def test_infeasible_spec_rejected(self):
        fat = PhantomSpec(thickness_ranges=tuple((20, 30) for _ in range(9)))
        with pytest.raises(ConfigError):
            fat.validate()
        off_center = PhantomSpec(disc_center=(0.05, 0.2))
        with pytest.raises(ConfigError):
            off_center.validate()

    def test_spec_file_roundtrip(self, tmp_path):
        path = tmp_path / "phantom.spec"
        SMALL.to_file(path)
        back = PhantomSpec.from_file(path)
        assert back == SMALL

    def test_spec_file_unknown_key(self, tmp_path):
        path = tmp_path / "bad.spec"
        path.write_text("bogus=1\n")
        with pytest.raises(DataError):
            PhantomSpec.from_file(path)


class TestAugment:
    def test_flip_is_involution(self):
        s = gen_phantom(SMALL, 1)[0]
        back = flip_sample(flip_sample(s))
        assert np.array_equal(back.image, s.image)
        assert np.array_equal(back.label, s.label)

    def test_identity_parameters_are_bitwise_noops(self, rng):
        s = gen_phantom(SMALL, 1)[0]
        assert add_noise(s.image, 0.0, rng) is s.image
        assert adjust_contrast(s.image, 1.0) is s.image

    def test_flip_preserves_column_order(self):
        s = flip_sample(gen_phantom(SMALL, 1)[0])
        for x in range(s.label.shape[1]):
            col = s.label[:, x]
            assert disc_run_contiguous(col)
            if not np.any(col == 10):
                assert stratified_order_ok(col)

    def test_label_multiset_preserved(self, rng):
        s = gen_phantom(SMALL, 1)[0]
        out = augment(s, rng)
        assert np.array_equal(np.bincount(out.label.ravel(), minlength=11),
                              np.bincount(s.label.ravel(), minlength=11))

    def test_augment_deterministic_under_rng(self):
        s = gen_phantom(SMALL, 1)[0]
        a = augment(s, np.random.default_rng(3))
        b = augment(s, np.random.default_rng(3))
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.label, b.label)

    def test_image_stays_in_unit_range(self, rng):
        s = gen_phantom(SMALL, 1)[0]
        for _ in range(10):
            out = augment(s, rng)
            assert out.image.min() >= 0.0 and out.image.max() <= 1.0


class TestDatasetIO:
    def test_save_load_roundtrip_bitwise(self, tmp_path):
        samples = gen_phantom(SMALL, 4)
        save_dataset(tmp_path / "ds", samples, split_of={"s000": "train", "s001": "val"})
        back, split_of = load_dataset(tmp_path / "ds")
        assert len(back) == 4
        for a, b in zip(samples, back):
            assert a.image.tobytes() == b.image.tobytes()
            assert np.array_equal(a.label, b.label)
            assert (a.sample_id, a.subject_id) == (b.sample_id, b.subject_id)
        assert split_of == {"s000": "train", "s001": "val"}

    def test_out_of_range_label_names_file(self, tmp_path):
        samples = gen_phantom(SMALL, 1)
        save_dataset(tmp_path / "ds", samples)
        bad = samples[0].label.astype(np.uint8)
        bad[0, 0] = 11
        lab_path = tmp_path / "ds" / "labels" / f"{samples[0].sample_id}.png"
        Image.fromarray(bad).save(lab_path)
        with pytest.raises(DataError, match=str(lab_path.name)):
            load_dataset(tmp_path / "ds")

    def test_missing_label_named(self, tmp_path):
        samples = gen_phantom(SMALL, 1)
        save_dataset(tmp_path / "ds", samples)
        (tmp_path / "ds" / "labels" / f"{samples[0].sample_id}.png").unlink()
        with pytest.raises(DataError, match="missing label"):
            load_dataset(tmp_path / "ds")

    def test_empty_directory_is_empty_dataset(self, tmp_path):
        samples, split_of = load_dataset(tmp_path / "nothing")
        assert samples == [] and split_of == {}


class TestMakeSplit:
    def test_ten_subjects_split_622(self):
        samples = gen_phantom(SMALL, 20)
        split = make_split(samples, seed=3)
        assert (len(split.train), len(split.val), len(split.test)) == (6, 2, 2)

    def test_no_subject_straddles(self):
        samples = gen_phantom(SMALL, 20)
        split = make_split(samples, seed=3)
        groups = [set(split.train), set(split.val), set(split.test)]
        for a, b in itertools.combinations(groups, 2):
            assert not (a & b)
        for part in ("train", "val", "test"):
            chosen = split.select(samples, part)
            assert all(s.subject_id in set(getattr(split, part)) for s in chosen)

    def test_same_seed_same_split(self):
        samples = gen_phantom(SMALL, 20)
        assert make_split(samples, seed=3) == make_split(samples, seed=3)
        assert make_split(samples, seed=3) != make_split(samples, seed=4)

    def test_too_few_subjects_rejected(self):
        samples = gen_phantom(SMALL, 8)  # 4 subjects
        with pytest.raises(ConfigError):
            make_split(samples, seed=0)

    def test_rounding_toward_train(self):
        samples = gen_phantom(SMALL, 22)  # 11 subjects
        split = make_split(samples, seed=0)
        assert (len(split.train), len(split.val), len(split.test)) == (7, 2, 2)
