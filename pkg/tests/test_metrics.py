import numpy as np
import pytest

from archdiff.geometry import (
    GeometryError,
    JawModel,
    ToothLabel,
    ToothMesh,
    TransformParams,
    se3_exp,
    so3_exp,
)
from archdiff.metrics import (
    add_metric,
    aggregate_reports,
    arch_curve,
    arch_order,
    csa_metric,
    discrete_frechet,
    distance_histogram,
    evaluate_record,
    fd_cur_metric,
    kabsch,
    me_rot_metric,
    pa_add_metric,
    spline_through,
)
from archdiff.synth import ArchSpec, PerturbSpec, generate_jaw, perturb

from conftest import random_cloud_jaw
from oracles import frechet_recursive, hausdorff, mean_pair_distance


def _rigidly_moved(jaw, r, m):
    R = so3_exp(r)
    return JawModel(
        {
            k: mesh.with_vertices(mesh.vertices @ R.T + m)
            for k, mesh in jaw.teeth.items()
        },
        jaw.metadata,
    )


def _params(labels, vecs):
    return TransformParams({ToothLabel(c): np.asarray(v, float) for c, v in zip(labels, vecs)})


class TestADD:
    def test_zero_on_equal(self, rng):
        jaw = random_cloud_jaw(rng)
        assert add_metric(jaw, jaw) == 0.0

    def test_uniform_offset(self, rng):
        jaw = random_cloud_jaw(rng)
        moved = jaw.translated([1.0, 0.0, 0.0])
        assert add_metric(moved, jaw) == pytest.approx(1.0, abs=1e-12)

    def test_matches_pair_sum_oracle(self, rng):
        a = random_cloud_jaw(rng, labels=(11, 12, 21))
        b = random_cloud_jaw(rng, labels=(11, 12, 21))
        expected = mean_pair_distance(a.all_vertices(), b.all_vertices())
        assert add_metric(a, b) == pytest.approx(expected, abs=1e-12)

    def test_vertex_count_mismatch(self, rng):
        a = random_cloud_jaw(rng, n_points=10)
        b = random_cloud_jaw(rng, n_points=11)
        with pytest.raises(GeometryError):
            add_metric(a, b)


class TestPAADD:
    def test_recovers_global_rigid_transform(self, rng):
        jaw = random_cloud_jaw(rng, labels=(11, 12, 21, 31))
        moved = _rigidly_moved(jaw, rng.normal(size=3), rng.normal(size=3) * 5)
        value, degenerate = pa_add_metric(moved, jaw)
        assert not degenerate
        assert value < 1e-8

    def test_identity_on_equal(self, rng):
        jaw = random_cloud_jaw(rng)
        a, b = jaw.all_vertices(), jaw.all_vertices()
        R, t, _ = kabsch(a, b)
        assert np.abs(R - np.eye(3)).max() < 1e-9
        assert np.abs(t).max() < 1e-9
        value, _ = pa_add_metric(jaw, jaw)
        assert value < 1e-12

    def test_noisy_registration_beats_raw_add(self, rng):
        for _ in range(10):
            jaw = random_cloud_jaw(rng, labels=(11, 12, 21), n_points=40)
            moved = _rigidly_moved(jaw, rng.normal(size=3) * 0.3, rng.normal(size=3))
            noisy = JawModel(
                {
                    k: mesh.with_vertices(
                        mesh.vertices + rng.normal(scale=0.01, size=mesh.vertices.shape)
                    )
                    for k, mesh in moved.teeth.items()
                }
            )
            pa, _ = pa_add_metric(noisy, jaw)
            assert pa < add_metric(noisy, jaw)

    def test_invariant_under_rigid_motion_of_pred(self, rng):
        pred = random_cloud_jaw(rng, labels=(11, 12, 21))
        gt = random_cloud_jaw(rng, labels=(11, 12, 21))
        base, _ = pa_add_metric(pred, gt)
        moved = _rigidly_moved(pred, rng.normal(size=3), rng.normal(size=3) * 4)
        value, _ = pa_add_metric(moved, gt)
        assert value == pytest.approx(base, abs=1e-9)
        assert add_metric(moved, gt) != pytest.approx(add_metric(pred, gt), abs=1e-3)

    def test_degenerate_falls_back_to_translation(self):
        lab = ToothLabel(11)
        pts = np.zeros((5, 3))
        pts[:, 0] = np.arange(5)  # collinear: rank-1 covariance
        jaw_a = JawModel({lab: ToothMesh(lab, pts, np.zeros((0, 3), np.int64))})
        jaw_b = JawModel({lab: ToothMesh(lab, pts + [0, 1, 0], np.zeros((0, 3), np.int64))})
        value, degenerate = pa_add_metric(jaw_a, jaw_b)
        assert degenerate
        assert value < 1e-12  # translation-only alignment suffices here


class TestCSA:
    def test_perfect(self):
        p = _params([11, 12], [[1, 0, 0, 0, 0, 0], [0, 1, 0, 0.1, 0, 0]])
        assert csa_metric(p, p) == pytest.approx(1.0)

    def test_antiparallel(self):
        a = _params([11], [[1, 2, 3, 0.1, 0.2, 0.3]])
        b = _params([11], [[-1, -2, -3, -0.1, -0.2, -0.3]])
        assert csa_metric(a, b) == pytest.approx(-1.0)

    def test_orthogonal(self):
        a = _params([11], [[1, 0, 0, 0, 0, 0]])
        b = _params([11], [[0, 1, 0, 0, 0, 0]])
        assert csa_metric(a, b) == pytest.approx(0.0)

    def test_zero_vector_conventions(self):
        zero = _params([11], [np.zeros(6)])
        nonzero = _params([11], [[1, 0, 0, 0, 0, 0]])
        assert csa_metric(zero, zero) == 1.0
        assert csa_metric(zero, nonzero) == 0.0

    def test_scale_invariance(self, rng):
        vecs = rng.normal(size=(3, 6)) * 0.2
        a = _params([11, 12, 13], vecs)
        b = _params([11, 12, 13], rng.normal(size=(3, 6)) * 0.2)
        a2 = _params([11, 12, 13], vecs * 3.0)
        b2 = _params([11, 12, 13], b.stacked() * 3.0)
        assert csa_metric(a, b) == pytest.approx(csa_metric(a2, b2), abs=1e-12)


class TestMERot:
    def test_zero_on_equal(self, rng):
        p = _params([11, 12], rng.normal(size=(2, 6)) * 0.3)
        assert me_rot_metric(p, p) == pytest.approx(0.0, abs=1e-9)

    def test_ten_degrees_about_z(self):
        angle = np.deg2rad(10.0)
        pred = _params([11], [[0, 0, 0, 0, 0, angle]])
        gt = _params([11], [np.zeros(6)])
        # oracle: trace of the hand-built z rotation
        c, s = np.cos(angle), np.sin(angle)
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        expected = np.degrees(np.arccos((np.trace(R) - 1) / 2))
        assert expected == pytest.approx(10.0, abs=1e-9)
        assert me_rot_metric(pred, gt) == pytest.approx(10.0, abs=1e-6)

    def test_symmetric(self, rng):
        a = _params([11, 12], rng.normal(size=(2, 6)) * 0.4)
        b = _params([11, 12], rng.normal(size=(2, 6)) * 0.4)
        assert me_rot_metric(a, b) == pytest.approx(me_rot_metric(b, a), abs=1e-12)

    def test_range(self, rng):
        for _ in range(20):
            a = _params([11], [np.concatenate([rng.normal(size=3), rng.normal(size=3)])])
            b = _params([11], [np.concatenate([rng.normal(size=3), rng.normal(size=3)])])
            v = me_rot_metric(a, b)
            assert 0.0 <= v <= 180.0


class TestArchCurve:
    def test_order_upper(self):
        labels = [ToothLabel(c) for c in (11, 12, 21, 22, 31, 41)]
        order = [l.code for l in arch_order(labels, "upper")]
        assert order == [12, 11, 21, 22]

    def test_order_lower(self):
        labels = [ToothLabel(c) for c in (31, 32, 41, 42, 11)]
        order = [l.code for l in arch_order(labels, "lower")]
        assert order == [32, 31, 41, 42]

    def test_interpolates_landmarks(self):
        jaw = generate_jaw(ArchSpec(), seed=0)
        curve = arch_curve(jaw, "upper")
        recon = curve.spline(curve.params)
        assert np.abs(recon - curve.landmarks).max() < 1e-6

    def test_collinear_landmarks_stay_collinear(self):
        landmarks = np.stack(
            [np.linspace(0, 9, 6), np.zeros(6), np.zeros(6)], axis=1
        )
        curve = spline_through(landmarks, 50)
        assert np.abs(curve.samples[:, 1:]).max() < 1e-6

    def test_reversal_traverses_backward(self, rng):
        landmarks = np.cumsum(rng.uniform(0.5, 1.5, size=(7, 3)), axis=0)
        fwd = spline_through(landmarks, 64)
        bwd = spline_through(landmarks[::-1], 64)
        assert np.abs(fwd.samples - bwd.samples[::-1]).max() < 1e-6

    def test_too_few_teeth(self):
        jaw = generate_jaw(ArchSpec(), seed=0)
        upper_only3 = JawModel(
            {k: jaw.teeth[k] for k in jaw.labels if k.code in (11, 12, 13, 31, 32, 33, 34, 41)}
        )
        with pytest.raises(GeometryError):
            arch_curve(upper_only3, "upper")


class TestFrechet:
    def test_zero_on_equal(self):
        jaw = generate_jaw(ArchSpec(), seed=1)
        assert fd_cur_metric(jaw, jaw) == 0.0

    def test_parallel_polylines(self):
        t = np.linspace(0, 10, 30)
        p = np.stack([t, np.zeros_like(t), np.zeros_like(t)], axis=1)
        q = p + [0.0, 0.5, 0.0]
        assert discrete_frechet(p, q) == pytest.approx(0.5, abs=1e-12)

    def test_matches_recursive_oracle(self, rng):
        for _ in range(10):
            p = rng.normal(size=(20, 3)).cumsum(axis=0)
            q = rng.normal(size=(17, 3)).cumsum(axis=0)
            assert discrete_frechet(p, q) == pytest.approx(
                frechet_recursive(p, q), abs=1e-12
            )

    def test_at_least_hausdorff(self, rng):
        for _ in range(10):
            p = rng.normal(size=(15, 3)).cumsum(axis=0)
            q = rng.normal(size=(12, 3)).cumsum(axis=0)
            assert discrete_frechet(p, q) >= hausdorff(p, q) - 1e-12

    def test_symmetry_and_triangle_inequality(self, rng):
        for _ in range(5):
            curves = [rng.normal(size=(10, 3)).cumsum(axis=0) for _ in range(3)]
            a, b, c = curves
            assert discrete_frechet(a, b) == pytest.approx(
                discrete_frechet(b, a), abs=1e-9
            )
            assert discrete_frechet(a, c) <= (
                discrete_frechet(a, b) + discrete_frechet(b, c) + 1e-9
            )

    def test_jaw_translation_shows_up(self):
        jaw = generate_jaw(ArchSpec(), seed=2)
        moved = jaw.translated([0.0, 0.0, 0.5])
        assert fd_cur_metric(moved, jaw) == pytest.approx(0.5, abs=1e-9)


class TestHistogram:
    def test_all_perfect(self):
        acc = distance_histogram([0.0, 0.0, 0.0], [0.5, 1.0, 2.0])
        assert np.allclose(acc, 1.0)

    def test_single_record(self):
        acc = distance_histogram([1.5], [1.0, 1.4, 1.5, 2.0])
        assert np.allclose(acc, [0.0, 0.0, 1.0, 1.0])

    def test_monotone(self, rng):
        dists = rng.uniform(0, 3, size=50)
        acc = distance_histogram(dists, np.linspace(0.1, 3.0, 15))
        assert (np.diff(acc) >= 0).all()

    def test_unsorted_edges_rejected(self):
        with pytest.raises(GeometryError):
            distance_histogram([1.0], [2.0, 1.0])

    def test_empty_records_rejected(self):
        with pytest.raises(GeometryError):
            distance_histogram([], [1.0])


class TestReportPlumbing:
    def test_evaluate_record_schema(self):
        jaw = generate_jaw(ArchSpec(), seed=3)
        rec = perturb(jaw, PerturbSpec(), seed=0)
        report = evaluate_record(
            rec.input, rec.gt,
            TransformParams.zeros(jaw.labels), rec.z0,
        )
        for key in ("add", "pa_add", "csa", "me_rot", "fd_cur"):
            assert key in report
        assert report["add"] >= report["pa_add"] - 1e-9

    def test_aggregate(self):
        reports = [
            {"add": 1.0, "pa_add": 0.5, "csa": 0.9, "me_rot": 3.0, "fd_cur": 1.0},
            {"add": 2.0, "pa_add": 1.5, "csa": 0.7, "me_rot": 5.0, "fd_cur": 2.0},
        ]
        agg = aggregate_reports(reports)
        assert agg.add == pytest.approx(1.5)
        assert agg.pa_add == pytest.approx(1.0)
        assert agg.summary()["fd_cur"] == pytest.approx(1.5)


def test_add_monotone_in_perturbation_sigma():
    # corpus-level invariant: mean input ADD grows with trans_sigma
    arch = ArchSpec(n_teeth_per_jaw=8)
    means = []
    for sigma in (0.5, 1.0, 2.0):
        vals = []
        for seed in range(30):
            jaw = generate_jaw(arch, seed=seed % 3)
            rec = perturb(jaw, PerturbSpec(trans_sigma=sigma, trans_clip=2.5 * sigma), seed=seed)
            vals.append(add_metric(rec.input, rec.gt))
        means.append(np.mean(vals))
    assert means[0] < means[1] < means[2]
