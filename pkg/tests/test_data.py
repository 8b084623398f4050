import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from spatiodec.data import (
    DatasetManifest,
    PhantomSpec,
    block_response,
    desk_phantom_spec,
    load_block,
    make_splits,
    phantom_generate,
    read_volume,
    segment_windows,
    volume_extents,
    write_volume,
)
from spatiodec.errors import FormatError, PhantomSpecError, ShapeError, SplitError


class TestVolumeIO:
    def test_round_trip_bitwise(self, rng, tmp_path):
        vol = rng.standard_normal((5, 4, 3, 2)).astype(np.float32)
        path = tmp_path / "a.v4d"
        write_volume(vol, path)
        assert_array_equal(read_volume(path), vol)

    def test_header_extents(self, rng, tmp_path):
        vol = rng.standard_normal((7, 3, 4, 5)).astype(np.float32)
        path = tmp_path / "b.v4d"
        write_volume(vol, path)
        assert volume_extents(path) == (7, 3, 4, 5)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.v4d"
        path.write_bytes(b"XXXX" + b"\x00" * 40)
        with pytest.raises(FormatError, match="magic"):
            read_volume(path)

    def test_truncated_payload(self, rng, tmp_path):
        path = tmp_path / "c.v4d"
        write_volume(rng.standard_normal((2, 3, 3, 3)).astype(np.float32), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="payload"):
            read_volume(path)

    def test_non_finite_rejected_on_write(self, tmp_path):
        vol = np.zeros((2, 2, 2, 2), dtype=np.float32)
        vol[0, 0, 0, 0] = np.nan
        with pytest.raises(FormatError):
            write_volume(vol, tmp_path / "nan.v4d")


class TestSegmentWindows:
    def test_window_count_formula(self, rng):
        block = rng.standard_normal((39, 4, 4, 4)).astype(np.float32)
        windows = segment_windows(block, 15, 3)
        assert windows.shape == (9, 1, 15, 4, 4, 4)

    def test_full_length_single_window(self, rng):
        block = rng.standard_normal((15, 3, 3, 3)).astype(np.float32)
        windows = segment_windows(block, 15, 3)
        assert windows.shape[0] == 1
        assert_array_equal(windows[0, 0], block)

    def test_non_overlapping_partition_prefix(self, rng):
        block = rng.standard_normal((20, 2, 2, 2)).astype(np.float32)
        windows = segment_windows(block, 5, 5)
        assert_array_equal(np.concatenate([w[0] for w in windows]), block)

    def test_undersized_block(self, rng):
        with pytest.raises(ShapeError):
            segment_windows(rng.standard_normal((10, 2, 2, 2)), 15, 3)

    @settings(max_examples=60, deadline=None)
    @given(
        l_b=st.integers(min_value=1, max_value=60),
        length=st.integers(min_value=1, max_value=60),
        stride=st.integers(min_value=1, max_value=8),
    )
    def test_count_matches_formula(self, l_b, length, stride):
        block = np.zeros((l_b, 2, 2, 2), dtype=np.float32)
        if l_b < length:
            with pytest.raises(ShapeError):
                segment_windows(block, length, stride)
        else:
            windows = segment_windows(block, length, stride)
            assert windows.shape == ((l_b - length) // stride + 1, 1, length, 2, 2, 2)


class TestSplits:
    def _manifest(self, n_subjects):
        from spatiodec.data import ManifestEntry

        entries = [ManifestEntry(f"v{i}.v4d", f"subj{i:03d}", 0, 20) for i in range(n_subjects)]
        return DatasetManifest(entries, ["class0"])

    def test_ten_subjects_proportions(self):
        plan = make_splits(self._manifest(10), 5, 0, seed=3)
        assert (len(plan.train), len(plan.val), len(plan.test)) == (7, 1, 2)

    def test_twenty_subjects_70_10_20(self):
        plan = make_splits(self._manifest(20), 5, 2, seed=3)
        assert (len(plan.train), len(plan.val), len(plan.test)) == (14, 2, 4)

    def test_folds_partition_subjects(self):
        manifest = self._manifest(13)
        all_test = []
        for fold in range(5):
            plan = make_splits(manifest, 5, fold, seed=9)
            all_test.extend(plan.test)
            assert set(plan.train) | set(plan.val) | set(plan.test) == set(manifest.subjects())
        assert sorted(all_test) == manifest.subjects()

    def test_deterministic(self):
        manifest = self._manifest(15)
        a = make_splits(manifest, 5, 1, seed=42)
        b = make_splits(manifest, 5, 1, seed=42)
        assert a == b

    def test_too_few_subjects(self):
        with pytest.raises(SplitError):
            make_splits(self._manifest(9), 5, 0, seed=0)

    def test_no_leakage_any_fold(self):
        manifest = self._manifest(23)
        for fold in range(5):
            plan = make_splits(manifest, 5, fold, seed=1)
            assert not set(plan.train) & set(plan.val)
            assert not set(plan.train) & set(plan.test)
            assert not set(plan.val) & set(plan.test)


class TestPhantom:
    def test_regeneration_is_bitwise(self, tmp_path):
        spec = desk_phantom_spec(num_subjects=2, blocks_per_subject_per_class=1, seed=5)
        m1 = phantom_generate(spec, tmp_path / "a")
        m2 = phantom_generate(spec, tmp_path / "b")
        for e1, e2 in zip(m1.entries, m2.entries):
            assert_array_equal(load_block(m1, e1), load_block(m2, e2))

    def test_zero_snr_is_pure_noise(self, tmp_path):
        spec = desk_phantom_spec(num_subjects=2, blocks_per_subject_per_class=1, snr=0.0, seed=5)
        noisy = phantom_generate(spec, tmp_path / "zero")
        spec2 = desk_phantom_spec(num_subjects=2, blocks_per_subject_per_class=1, snr=2.0, seed=5)
        signal = phantom_generate(spec2, tmp_path / "sig")
        b0 = load_block(noisy, noisy.entries[0])
        b1 = load_block(signal, signal.entries[0])
        assert abs(b0.mean()) < 0.05 and abs(b0.std() - 1.0) < 0.05
        assert not np.array_equal(b0, b1)

    def test_center_voxel_tracks_response(self, tmp_path):
        # frozen by first execution: population correlation snr/sqrt(snr^2+1)
        spec = desk_phantom_spec(num_subjects=3, blocks_per_subject_per_class=1, snr=3.0, subject_jitter=0, seed=21)
        manifest = phantom_generate(spec, tmp_path / "corr")
        cors = []
        for e in manifest.entries:
            cls = e.class_label
            center = spec.regions[cls][0]
            series = load_block(manifest, e)[:, center[0], center[1], center[2]]
            g = block_response(e.block_length, spec.peak_time_for(cls), spec.hrf[1])
            cors.append(np.corrcoef(series, g)[0, 1])
        assert np.mean(cors) > 0.9

    def test_class_means_differ_only_in_regions(self, tmp_path):
        spec = desk_phantom_spec(num_subjects=6, blocks_per_subject_per_class=2, snr=3.0, subject_jitter=0, seed=13)
        manifest = phantom_generate(spec, tmp_path / "diff")
        from spatiodec.data import _sphere_mask

        pair_union = _sphere_mask(spec.extents, *spec.regions[0]) | _sphere_mask(spec.extents, *spec.regions[1])
        means = {}
        for cls in (0, 1):
            blocks = [load_block(manifest, e).mean(axis=0) for e in manifest.entries if e.class_label == cls]
            means[cls] = np.mean(blocks, axis=0)
        diff = means[0] - means[1]
        # each class mean pools (blocks x frames) noise samples per voxel
        samples = sum(e.block_length for e in manifest.entries if e.class_label == 0)
        sigma = np.sqrt(2.0 / samples)
        outside = diff[~pair_union]
        assert np.mean(np.abs(outside) > 3.0 * sigma) < 0.01
        assert np.abs(diff[pair_union]).max() > 10.0 * sigma

    def test_region_escape_rejected(self):
        spec = PhantomSpec(num_classes=1, regions=[((1, 1, 1), 3.0)], extents=(8, 8, 8))
        with pytest.raises(PhantomSpecError, match="escapes"):
            spec.validate()

    def test_negative_snr_rejected(self):
        spec = desk_phantom_spec(snr=-1.0)
        with pytest.raises(PhantomSpecError):
            spec.validate()

    def test_manifest_round_trip(self, tiny_phantom):
        _, manifest = tiny_phantom
        reloaded = DatasetManifest.load(manifest.root / "manifest.json")
        assert reloaded.class_names == manifest.class_names
        assert [e.path for e in reloaded.entries] == [e.path for e in manifest.entries]
        assert reloaded.subjects() == manifest.subjects()

    def test_block_lengths_echo_configured_range(self, tiny_phantom):
        spec, manifest = tiny_phantom
        lengths = {e.class_label: e.block_length for e in manifest.entries}
        assert lengths == {0: 20, 1: 24, 2: 19}


def test_block_response_is_unit_variance():
    g = block_response(30, 3.0, 0.35)
    assert g.std() == pytest.approx(1.0, rel=1e-12)
    assert g.mean() > 0  # activation raises the baseline
    # lagged rise: the response peaks after the first few frames
    assert g.argmax() > 3
    gz = block_response(30, 3.0, 0.35, zero_mean=True)
    assert gz.mean() == pytest.approx(0.0, abs=1e-12)
    assert gz.std() == pytest.approx(1.0, rel=1e-12)
