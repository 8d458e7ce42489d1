"""Metric tests: label warping, Dice, HD95, non-positive-determinant
fraction, and landmark registration error, each against a brute-force
oracle on small instances."""

import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from gpreg import (
    DisplacementField,
    LabelMap,
    LandmarkSet,
    PreconditionError,
    dice,
    gaussian_blur,
    hd95,
    ndv,
    tre,
    warp_labels,
)
from gpreg.grids import Volume


def random_labels(rng, dims, n_labels=3):
    return LabelMap(rng.integers(0, n_labels + 1, size=dims).astype(np.int64))


def random_smooth_field(rng, dims, scale):
    comps = [gaussian_blur(Volume(rng.standard_normal(dims)), 1.5).data for _ in range(3)]
    field = np.stack(comps)
    return DisplacementField(field * (scale / np.abs(field).max()))


class TestWarpLabels:
    def test_zero_field_identity(self):
        rng = np.random.default_rng(60)
        labels = random_labels(rng, (6, 6, 6))
        out = warp_labels(labels, DisplacementField.zeros((6, 6, 6)))
        np.testing.assert_array_equal(out.data, labels.data)

    def test_constant_integer_shift(self):
        dims = (8, 8, 8)
        data = np.zeros(dims, dtype=np.int64)
        data[3:5, 3:5, 5:7] = 2
        field = np.zeros((3,) + dims)
        field[0] = 2.0  # lookup at x+2 pulls the block 2 voxels toward -x
        out = warp_labels(LabelMap(data), DisplacementField(field))
        expected = np.zeros(dims, dtype=np.int64)
        expected[3:5, 3:5, 3:5] = 2
        np.testing.assert_array_equal(out.data, expected)

    def test_output_labels_subset_of_input(self):
        rng = np.random.default_rng(61)
        labels = random_labels(rng, (7, 7, 7), n_labels=4)
        field = random_smooth_field(rng, (7, 7, 7), 1.5)
        out = warp_labels(labels, field)
        assert set(np.unique(out.data)) <= set(np.unique(labels.data))


class TestDice:
    def test_identical_maps(self):
        rng = np.random.default_rng(62)
        labels = random_labels(rng, (6, 6, 6))
        per_label, mean = dice(labels, labels)
        assert all(v == 1.0 for v in per_label.values())
        assert mean == 1.0

    def test_disjoint_supports(self):
        dims = (4, 4, 4)
        a = np.zeros(dims, dtype=np.int64)
        b = np.zeros(dims, dtype=np.int64)
        a[0, 0, 0] = 1
        b[3, 3, 3] = 1
        per_label, mean = dice(LabelMap(a), LabelMap(b))
        assert per_label[1] == 0.0 and mean == 0.0

    def test_hand_count(self):
        dims = (4, 4, 4)
        a = np.zeros(dims, dtype=np.int64)
        b = np.zeros(dims, dtype=np.int64)
        a[0, 0, 0] = a[0, 0, 1] = 1
        b[0, 0, 1] = b[0, 0, 2] = 1
        per_label, _ = dice(LabelMap(a), LabelMap(b))
        assert per_label[1] == 0.5

    def test_label_in_one_map_only(self):
        dims = (4, 4, 4)
        a = np.zeros(dims, dtype=np.int64)
        a[0, 0, 0] = 7
        per_label, mean = dice(LabelMap(a), LabelMap(np.zeros(dims, dtype=np.int64)))
        assert per_label[7] == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(63)
        a = random_labels(rng, (6, 6, 6))
        b = random_labels(rng, (6, 6, 6))
        pa, ma = dice(a, b)
        pb, mb = dice(b, a)
        assert pa == pb and ma == mb

    def test_background_only_rejected(self):
        z = LabelMap(np.zeros((3, 3, 3), dtype=np.int64))
        with pytest.raises(PreconditionError):
            dice(z, z)


def brute_force_hd95(a_data, b_data, label, spacing):
    # boundary: mask voxel with a non-mask 6-neighbor or on the volume border
    def boundary(mask):
        core = binary_erosion(mask, structure=np.array(
            [[[0, 0, 0], [0, 1, 0], [0, 0, 0]],
             [[0, 1, 0], [1, 1, 1], [0, 1, 0]],
             [[0, 0, 0], [0, 1, 0], [0, 0, 0]]], dtype=bool), border_value=0)
        pts = np.argwhere(mask & ~core)
        return pts[:, ::-1].astype(np.float64)  # (x, y, z)

    sp = np.asarray(spacing, dtype=np.float64)

    def directed(p_mm, q_mm):
        dists = np.empty(len(p_mm))
        for i, point in enumerate(p_mm):
            diff = point - q_mm
            dists[i] = np.sqrt((diff * diff).sum(axis=1)).min()
        dists.sort()
        k = int(np.ceil(0.95 * len(dists)))
        return dists[k - 1]

    pa = boundary(a_data == label) * sp
    pb = boundary(b_data == label) * sp
    return max(directed(pa, pb), directed(pb, pa))


class TestHd95:
    def test_identical_masks_zero(self):
        rng = np.random.default_rng(64)
        labels = random_labels(rng, (6, 6, 6), n_labels=1)
        assert hd95(labels, labels, 1) == 0.0

    def test_single_voxel_pair(self):
        dims = (5, 5, 9)
        a = np.zeros(dims, dtype=np.int64)
        b = np.zeros(dims, dtype=np.int64)
        a[2, 2, 2] = 1
        b[2, 2, 5] = 1
        assert hd95(LabelMap(a), LabelMap(b), 1) == 3.0

    def test_missing_label_rejected(self):
        dims = (4, 4, 4)
        a = np.zeros(dims, dtype=np.int64)
        a[1, 1, 1] = 1
        with pytest.raises(PreconditionError):
            hd95(LabelMap(a), LabelMap(np.zeros(dims, dtype=np.int64)), 1)

    def test_brute_force_oracle_exact(self):
        rng = np.random.default_rng(65)
        for trial in range(10):
            dims = (7, 7, 7)
            a = (rng.random(dims) < 0.3).astype(np.int64)
            b = (rng.random(dims) < 0.3).astype(np.int64)
            if not a.any() or not b.any():
                continue
            spacing = tuple(rng.uniform(0.5, 2.0, size=3))
            got = hd95(LabelMap(a, spacing=spacing), LabelMap(b, spacing=spacing), 1)
            expected = brute_force_hd95(a, b, 1, spacing)
            assert got == expected

    def test_symmetry(self):
        rng = np.random.default_rng(66)
        a = (rng.random((6, 6, 6)) < 0.4).astype(np.int64)
        b = (rng.random((6, 6, 6)) < 0.4).astype(np.int64)
        assert hd95(LabelMap(a), LabelMap(b), 1) == hd95(LabelMap(b), LabelMap(a), 1)


def brute_force_ndv(u):
    data = u.data
    d, h, w = data.shape[1:]
    count = 0
    total = 0
    for z in range(d - 1):
        for y in range(h - 1):
            for x in range(w - 1):
                jac = np.empty((3, 3))
                here = data[:, z, y, x]
                jac[:, 0] = data[:, z, y, x + 1] - here
                jac[:, 1] = data[:, z, y + 1, x] - here
                jac[:, 2] = data[:, z + 1, y, x] - here
                jac += np.eye(3)
                det = (
                    jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
                    - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
                    + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
                )
                count += det <= 0.0
                total += 1
    return count / total


class TestNdv:
    def test_zero_field(self):
        assert ndv(DisplacementField.zeros((5, 5, 5))) == 0.0

    def test_strong_fold(self):
        dims = (6, 6, 6)
        xx = np.arange(dims[2], dtype=np.float64)
        field = np.zeros((3,) + dims)
        field[0] = np.broadcast_to(-2.0 * xx, dims)
        u = DisplacementField(field)
        got = ndv(u)
        assert got > 0.0
        assert got == brute_force_ndv(u)

    def test_linear_field_positive_det(self):
        rng = np.random.default_rng(67)
        a = 0.05 * rng.standard_normal((3, 3))
        assert np.linalg.det(np.eye(3) + a) > 0
        dims = (6, 6, 6)
        zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
        coords = np.stack([xx, yy, zz])
        field = np.einsum("ij,jdhw->idhw", a, coords)
        assert ndv(DisplacementField(field)) == 0.0

    def test_brute_force_oracle_exact(self):
        rng = np.random.default_rng(68)
        for _ in range(5):
            u = DisplacementField(2.0 * rng.standard_normal((3, 5, 5, 5)))
            assert ndv(u) == brute_force_ndv(u)

    def test_translation_invariance(self):
        rng = np.random.default_rng(69)
        u = DisplacementField(0.8 * rng.standard_normal((3, 5, 5, 5)))
        shifted = DisplacementField(u.data + 4.25)
        assert ndv(u) == ndv(shifted)


def brute_force_interp(u, p):
    # independent trilinear interpolation of each field component at p
    out = np.empty(3)
    for c in range(3):
        from gpreg import sample_trilinear

        out[c] = sample_trilinear(Volume(np.ascontiguousarray(u.data[c])), p)
    return out


class TestTre:
    def test_zero_field_identical_landmarks(self):
        pts = np.array([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]])
        ids = np.array([1, 2])
        a = LandmarkSet(pts, ids)
        mean, std, per = tre(a, a, DisplacementField.zeros((6, 6, 6)))
        assert mean == 0.0 and std == 0.0
        np.testing.assert_array_equal(per, [0.0, 0.0])

    def test_constant_field_cancellation(self):
        dims = (8, 8, 8)
        c = 1.5
        field = np.zeros((3,) + dims)
        field[0] = c
        fixed = LandmarkSet(np.array([[2.0, 3.0, 4.0]]), np.array([1]))
        moving = LandmarkSet(np.array([[2.0 + c, 3.0, 4.0]]), np.array([1]))
        mean, _, _ = tre(fixed, moving, DisplacementField(field))
        assert mean == 0.0

    def test_pointwise_oracle_exact(self):
        rng = np.random.default_rng(70)
        dims = (9, 9, 9)
        u = random_smooth_field(rng, dims, 2.0)
        n = 12
        pts = rng.uniform(0.0, 8.0, size=(n, 3))
        ids = np.arange(n)
        spacing = (1.0, 1.25, 0.8)
        moving_pts = rng.uniform(0.0, 8.0, size=(n, 3))
        mean, std, per = tre(
            LandmarkSet(pts, ids), LandmarkSet(moving_pts, ids), u, spacing=spacing
        )
        expected = np.empty(n)
        sp = np.asarray(spacing)
        for i in range(n):
            mapped = pts[i] + brute_force_interp(u, pts[i])
            diff = (mapped - moving_pts[i]) * sp
            expected[i] = np.sqrt((diff * diff).sum())
        np.testing.assert_array_equal(per, expected)
        assert mean == np.mean(expected)
        assert std == np.std(expected)

    def test_id_order_does_not_matter(self):
        rng = np.random.default_rng(71)
        dims = (6, 6, 6)
        u = random_smooth_field(rng, dims, 1.0)
        pts = rng.uniform(0.0, 5.0, size=(4, 3))
        ids = np.array([3, 1, 4, 2])
        perm = np.array([2, 0, 3, 1])
        a = LandmarkSet(pts, ids)
        b = LandmarkSet(pts[perm] + 0.5, ids[perm])
        mean1, _, _ = tre(a, b, u)
        b_sorted_ids = np.sort(ids)
        order = np.argsort(ids)
        b2 = LandmarkSet((pts[perm] + 0.5)[np.argsort(ids[perm])], b_sorted_ids)
        a2 = LandmarkSet(pts[order], b_sorted_ids)
        mean2, _, _ = tre(a2, b2, u)
        assert mean1 == pytest.approx(mean2, abs=1e-12)

    def test_id_mismatch_rejected(self):
        a = LandmarkSet(np.array([[1.0, 1.0, 1.0]]), np.array([1]))
        b = LandmarkSet(np.array([[1.0, 1.0, 1.0]]), np.array([2]))
        with pytest.raises(PreconditionError):
            tre(a, b, DisplacementField.zeros((4, 4, 4)))

    def test_out_of_bounds_landmark_rejected(self):
        a = LandmarkSet(np.array([[10.0, 1.0, 1.0]]), np.array([1]))
        with pytest.raises(PreconditionError):
            tre(a, a, DisplacementField.zeros((4, 4, 4)))


class TestDomainTypes:
    def test_label_map_rejects_negative(self):
        with pytest.raises(PreconditionError):
            LabelMap(np.array([[[-1]]], dtype=np.int64))

    def test_label_map_coerces_integral_floats(self):
        data = np.array([[[1.0, 2.0], [0.0, 3.0]]] * 2)
        lm = LabelMap(data)
        assert lm.data.dtype == np.int64

    def test_label_map_rejects_fractional_floats(self):
        with pytest.raises(PreconditionError):
            LabelMap(np.array([[[0.5]]]))

    def test_landmark_set_validation(self):
        with pytest.raises(PreconditionError):
            LandmarkSet(np.zeros((2, 3)), np.array([1]))  # length mismatch
        with pytest.raises(PreconditionError):
            LandmarkSet(np.full((1, 3), np.nan), np.array([1]))
        with pytest.raises(PreconditionError):
            LandmarkSet(np.zeros((2, 3)), np.array([1, 1]))  # duplicate ids
