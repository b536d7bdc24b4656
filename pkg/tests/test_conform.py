import numpy as np
import pytest

from headseg.conform import (
    conform,
    conform_256,
    conform_labels,
    normalize_intensity,
    reorient_to_ras,
    resample_isotropic,
    restore_native,
)
from headseg.errors import DegenerateImageError, DomainError, GeometryError
from headseg.volume import ConformRecord, LabelVolume, Volume, percentile


def _vol(data, spacing=(1, 1, 1), affine=None):
    data = np.asarray(data, dtype=np.float32)
    if affine is None:
        affine = np.diag(list(spacing) + [1.0])
    return Volume(data, spacing, affine)


class TestPercentile:
    def test_median_of_four(self):
        # oracle: rank p*(n-1) = 1.5 -> midpoint of 2 and 3
        assert percentile([1, 2, 3, 4], 0.5) == 2.5

    def test_p0_is_min_p1_is_max(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            vals = rng.standard_normal(rng.integers(1, 40))
            assert percentile(vals, 0.0) == pytest.approx(vals.min())
            assert percentile(vals, 1.0) == pytest.approx(vals.max())

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            percentile([], 0.5)


class TestResample:
    def test_noop_when_isotropic(self):
        v = _vol(np.random.default_rng(0).standard_normal((8, 8, 8)))
        rec = ConformRecord()
        out = resample_isotropic(v, record=rec)
        assert np.array_equal(out.data, v.data)
        assert rec.resample_skipped
        assert out.provenance[-1] == {"step": "resample", "skipped": True}

    def test_constant_preserved(self):
        v = _vol(np.full((6, 6, 6), 7.0), spacing=(2, 2, 2))
        out = resample_isotropic(v)
        assert np.allclose(out.data, 7.0)
        assert out.spacing == (1.0, 1.0, 1.0)

    def test_linear_ramp_halves_step(self):
        # oracle: closed-form trilinear values at the new voxel centers
        ramp = np.zeros((5, 4, 4), np.float32)
        for i in range(5):
            ramp[i] = 2.0 * i
        v = _vol(ramp, spacing=(2, 2, 2))
        out = resample_isotropic(v)
        assert out.shape[0] == 9
        expected = np.arange(9, dtype=np.float64) * 1.0
        assert np.allclose(out.data[:, 0, 0], expected, atol=1e-6)

    def test_world_positions_preserved(self):
        rng = np.random.default_rng(1)
        v = _vol(rng.standard_normal((7, 6, 5)), spacing=(2, 1.5, 3))
        out = resample_isotropic(v)
        # voxel center (0,0,0) and the last in-grid sample keep their world coords
        assert np.allclose(out.affine[:3, 3], v.affine[:3, 3], atol=1e-3)
        assert np.allclose(np.linalg.norm(out.affine[:3, :3], axis=0), 1.0, atol=1e-6)

    def test_nonpositive_spacing_rejected(self):
        v = _vol(np.ones((4, 4, 4)))
        v.spacing = (1.0, -1.0, 1.0)
        with pytest.raises(GeometryError):
            resample_isotropic(v)


class TestReorient:
    def test_ras_identity(self):
        v = _vol(np.random.default_rng(2).standard_normal((5, 6, 7)))
        rec = ConformRecord()
        out = reorient_to_ras(v, record=rec)
        assert np.array_equal(out.data, v.data)
        assert rec.permutation == (0, 1, 2)
        assert rec.flips == (False, False, False)

    def test_lps_flips_first_two_axes(self):
        # oracle: explicit index map on a small grid
        n = 3
        data = np.arange(n**3, dtype=np.float32).reshape(n, n, n)
        affine = np.diag([-1.0, -1.0, 1.0, 1.0])
        v = _vol(data, affine=affine)
        out = reorient_to_ras(v)
        for k in range(n):
            assert out.data[n - 1, n - 1, k] == data[0, 0, k]
        for idx in [(0, 0, 0), (1, 2, 0), (2, 1, 2)]:
            w_in = affine[:3, :3] @ np.array(idx) + affine[:3, 3]
            pos = np.argwhere(out.data == data[idx])[0]
            w_out = out.affine[:3, :3] @ pos + out.affine[:3, 3]
            assert np.allclose(w_in, w_out)

    def test_value_multiset_preserved(self):
        rng = np.random.default_rng(3)
        data = rng.standard_normal((4, 5, 6)).astype(np.float32)
        affine = np.eye(4)[:, [1, 2, 0, 3]]
        affine[:3, 1] *= -1
        v = Volume(data, (1, 1, 1), affine)
        out = reorient_to_ras(v)
        assert np.array_equal(np.sort(out.data.ravel()), np.sort(data.ravel()))


class TestConform256:
    def test_standard_head_dims_offsets(self):
        v = _vol(np.ones((181, 217, 181)))
        rec = ConformRecord()
        out = conform_256(v, record=rec)
        assert out.shape == (256, 256, 256)
        assert rec.offsets == (37, 19, 37)  # floor((256 - n) / 2)

    def test_identity_at_256(self):
        v = _vol(np.random.default_rng(4).standard_normal((256, 256, 256)))
        out = conform_256(v)
        assert np.array_equal(out.data, v.data)

    def test_crop_offsets(self):
        v = _vol(np.ones((300, 300, 300)))
        rec = ConformRecord()
        out = conform_256(v, record=rec)
        assert out.shape == (256, 256, 256)
        assert rec.offsets == (-22, -22, -22)  # floor((300 - 256) / 2) removed

    def test_world_coordinates_preserved(self):
        rng = np.random.default_rng(5)
        v = _vol(rng.standard_normal((20, 30, 40)))
        out = conform_256(v)
        # original voxel (0,0,0) sits at padded index (118, 113, 108)
        off = [(256 - n) // 2 for n in (20, 30, 40)]
        w_in = v.affine[:3, 3]
        w_out = out.affine[:3, :3] @ np.array(off) + out.affine[:3, 3]
        assert np.allclose(w_in, w_out, atol=1e-9)
        assert out.data[off[0], off[1], off[2]] == v.data[0, 0, 0]


class TestNormalize:
    def test_constant_becomes_one(self):
        v = _vol(np.full((4, 4, 4), 10.0))
        out = normalize_intensity(v)
        assert np.all(out.data == 1.0)

    def test_percentile_oracle_0_to_100(self):
        # oracle: sorted rank 0.95 * (n-1) = 95 exactly
        data = np.arange(101, dtype=np.float32)
        rng = np.random.default_rng(6)
        cube = np.zeros((101, 1, 1), np.float32)
        cube[:, 0, 0] = rng.permutation(data)
        v = Volume(cube, (1, 1, 1), np.eye(4))
        rec = ConformRecord()
        out = normalize_intensity(v, record=rec)
        assert rec.p95 == pytest.approx(95.0)
        assert out.data.max() == pytest.approx(100.0 / 95.0)

    @pytest.mark.parametrize("c", [0.5, 3.0, 100.0])
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(7)
        base = np.abs(rng.standard_normal((6, 6, 6))).astype(np.float32) + 0.1
        a = normalize_intensity(_vol(base))
        b = normalize_intensity(_vol(base * np.float32(c)))
        assert np.allclose(a.data, b.data, atol=1e-6)

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateImageError):
            normalize_intensity(_vol(np.zeros((4, 4, 4))))


class TestFullPipeline:
    def test_idempotent_bitwise(self):
        # foreground must cover well over 5% of the padded cube, or the
        # padding-inclusive p95 is legitimately degenerate
        rng = np.random.default_rng(8)
        data = np.abs(rng.standard_normal((100, 110, 95))).astype(np.float32) + 0.2
        v = _vol(data, spacing=(2, 2, 2), affine=np.diag([2.0, 2.0, 2.0, 1.0]))
        once, _ = conform(v)
        twice, _ = conform(once)
        assert np.array_equal(once.data, twice.data)
        assert np.array_equal(once.affine, twice.affine)

    def test_restore_geometry_identity(self):
        rng = np.random.default_rng(9)
        affine = np.diag([-2.0, 2.0, 2.0, 1.0])
        affine[:3, 3] = (30.0, -20.0, 10.0)
        data = np.abs(rng.standard_normal((100, 105, 110))).astype(np.float32) + 0.2
        v = Volume(data, (2, 2, 2), affine)
        conformed, rec = conform(v)
        labels = LabelVolume(
            (conformed.data > 0.8).astype(np.uint8) * 3, conformed.spacing, conformed.affine
        )
        native = restore_native(labels, rec)
        assert native.shape == v.shape
        assert np.allclose(native.affine, v.affine, atol=1e-6)

    def test_label_round_trip_agreement(self):
        # oracle: nearest-neighbor round-trip on random labels at 2 mm
        rng = np.random.default_rng(10)
        labels = rng.integers(0, 7, (40, 40, 40)).astype(np.uint8)
        lab = LabelVolume(labels, (2, 2, 2), np.diag([2.0, 2.0, 2.0, 1.0]))
        rec = ConformRecord()
        clab = conform_labels(lab, record=rec)
        back = restore_native(clab, rec)
        agreement = np.mean(back.data == labels)
        assert agreement >= 0.99

    def test_restore_native_dims_from_record(self):
        v = _vol(np.abs(np.random.default_rng(11).standard_normal((181, 181, 181))) + 0.1)
        conformed, rec = conform(v)
        labels = LabelVolume(np.zeros((256, 256, 256), np.uint8), (1, 1, 1), conformed.affine)
        native = restore_native(labels, rec)
        assert native.shape == (181, 181, 181)

    def test_conform_then_restore_canonical_identity(self):
        rng = np.random.default_rng(12)
        labels = rng.integers(0, 7, (256, 256, 256)).astype(np.uint8)
        lab = LabelVolume(labels, (1, 1, 1), np.eye(4))
        rec = ConformRecord()
        clab = conform_labels(lab, record=rec)
        assert np.array_equal(clab.data, labels)
        back = restore_native(clab, rec)
        assert np.array_equal(back.data, labels)
