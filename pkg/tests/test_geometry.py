"""Camera and rig I/O, structured-light triangulation, feature tracking
and filtering, essential-matrix estimation with outlier rejection, pose
recovery, two-view triangulation, and metric scale registration."""

import numpy as np
import pytest

from oracles import epipolar_residual_naive, project_naive
from superspectral import geometry as gm
from superspectral import scenes as sc
from superspectral.dataset import SpotSet
from superspectral.errors import (ConfigError, DataError, EstimationError,
                                  InsufficientDataError, ShapeError)


# ---------------------------------------------------------------------------
# Cameras and rigs
# ---------------------------------------------------------------------------

class TestPinholeCamera:
    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ConfigError):
            gm.PinholeCamera(fx=-1.0, fy=800.0, cx=320, cy=240, width=640, height=480)
        with pytest.raises(ConfigError):
            gm.PinholeCamera(fx=800.0, fy=800.0, cx=700, cy=240, width=640, height=480)

    def test_projection_matches_oracle(self):
        cam = sc.default_camera()
        rng = np.random.default_rng(0)
        pts = rng.uniform([-5, -5, 20], [5, 5, 40], size=(30, 3))
        expected = project_naive(pts, np.eye(3), np.zeros(3),
                                 cam.fx, cam.fy, cam.cx, cam.cy)
        np.testing.assert_allclose(cam.project(pts), expected, atol=1e-12)

    def test_ray_inverts_projection(self):
        cam = sc.default_camera()
        rng = np.random.default_rng(1)
        pts = rng.uniform([-5, -5, 20], [5, 5, 40], size=(20, 3))
        rays = cam.ray(cam.project(pts))
        # each ray must be unit length and parallel to its source point
        np.testing.assert_allclose(np.linalg.norm(rays, axis=1), 1.0, atol=1e-12)
        cos = np.sum(rays * pts, axis=1) / np.linalg.norm(pts, axis=1)
        np.testing.assert_allclose(cos, 1.0, atol=1e-12)

    def test_normalized_coordinates(self):
        cam = sc.default_camera()
        uv = np.array([[cam.cx, cam.cy], [cam.cx + cam.fx, cam.cy - cam.fy]])
        np.testing.assert_allclose(cam.normalized(uv), [[0, 0], [1, -1]], atol=1e-12)

    def test_contains(self):
        cam = sc.default_camera()
        uv = np.array([[0, 0], [639, 479], [-1, 5], [5, 480]])
        np.testing.assert_array_equal(cam.contains(uv), [True, True, False, False])

    def test_json_round_trip(self, tmp_path):
        cam = gm.PinholeCamera(fx=812.5, fy=790.25, cx=321.5, cy=239.5,
                               width=640, height=480)
        path = tmp_path / "cam.json"
        gm.save_camera(path, cam)
        assert gm.load_camera(path) == cam

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "cam.json"
        path.write_text("{\"fx\": 800.0}")
        with pytest.raises(DataError):
            gm.load_camera(path)
        with pytest.raises(DataError):
            gm.load_camera(tmp_path / "missing.json")


class TestProbeRig:
    def test_rays_are_normalized_on_construction(self):
        rig = gm.ProbeRig(rays={0: (0.0, 0.0, 2.0), 1: (3.0, 0.0, 4.0)})
        np.testing.assert_allclose(rig.rays[0], [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(rig.rays[1], [0.6, 0, 0.8], atol=1e-15)

    def test_rejects_degenerate_inputs(self):
        with pytest.raises(DataError):
            gm.ProbeRig(rays={0: (0.0, 0.0, 0.0)})
        with pytest.raises(ConfigError):
            gm.ProbeRig(baseline_mm=0.0)

    def test_tilt_turns_axis_ray_toward_camera(self):
        rig = gm.ProbeRig(baseline_mm=5.0, angle_deg=10.0, rays={0: (0.0, 0.0, 1.0)})
        d = rig.ray_in_camera(0)
        assert d[0] < 0  # converges back across the optical axis
        assert d[2] > 0.98
        np.testing.assert_allclose(rig.origin(), [5.0, 0.0, 0.0])

    def test_unknown_spot_rejected(self):
        rig = gm.ProbeRig(rays={0: (0.0, 0.0, 1.0)})
        with pytest.raises(DataError):
            rig.ray_in_camera(7)

    def test_json_round_trip(self, tmp_path):
        rig = sc.default_rig(n_spots=5)
        path = tmp_path / "rig.json"
        gm.save_rig(path, rig)
        back = gm.load_rig(path)
        assert back.baseline_mm == rig.baseline_mm
        assert back.angle_deg == rig.angle_deg
        assert set(back.rays) == set(rig.rays)
        for sid in rig.rays:
            np.testing.assert_allclose(back.rays[sid], rig.rays[sid], atol=1e-15)
        assert back.wavelengths_nm == rig.wavelengths_nm

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "rig.json"
        path.write_text("not json")
        with pytest.raises(DataError):
            gm.load_rig(path)


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

class TestPointCloud:
    def test_validation(self):
        with pytest.raises(DataError):
            gm.PointCloud(np.array([[0.0, 0.0, np.nan]]))
        with pytest.raises(ConfigError):
            gm.PointCloud(np.zeros((1, 3)), scale_status="approximate")
        with pytest.raises(ConfigError):
            gm.PointCloud(np.zeros((1, 3)), source="lidar")
        with pytest.raises(ShapeError):
            gm.PointCloud(np.zeros((2, 3)), ids=np.array([1]))

    def test_ply_round_trip_with_scalar_values(self, tmp_path):
        rng = np.random.default_rng(2)
        cloud = gm.PointCloud(rng.normal(size=(12, 3)) * 10, scale_status="metric",
                              source="SL", values=rng.uniform(0, 1, 12))
        path = tmp_path / "cloud.ply"
        gm.save_ply(path, cloud)
        back = gm.load_ply(path)
        np.testing.assert_array_equal(back.points, cloud.points)
        np.testing.assert_array_equal(back.values, cloud.values)
        assert back.scale_status == "metric"
        assert back.source == "SL"

    def test_ply_round_trip_with_rgb(self, tmp_path):
        cloud = gm.PointCloud(np.arange(9.0).reshape(3, 3),
                              values=np.array([[0, 128, 255]] * 3, dtype=float))
        path = tmp_path / "rgb.ply"
        gm.save_ply(path, cloud)
        back = gm.load_ply(path)
        np.testing.assert_array_equal(back.values, cloud.values)
        assert back.scale_status == "up-to-scale"

    def test_ply_empty_cloud(self, tmp_path):
        path = tmp_path / "empty.ply"
        gm.save_ply(path, gm.PointCloud(np.zeros((0, 3))))
        assert len(gm.load_ply(path)) == 0

    def test_non_ply_rejected(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text("off\n3 0 0\n")
        with pytest.raises(DataError):
            gm.load_ply(path)


# ---------------------------------------------------------------------------
# Structured-light triangulation
# ---------------------------------------------------------------------------

class TestTriangulateSl:
    @pytest.mark.parametrize("depth_mm", [15.0, 30.0, 40.0])
    def test_exact_recovery_on_plane(self, depth_mm):
        cam = sc.default_camera()
        rig = sc.default_rig(n_spots=9)
        scene = sc.sl_scene(sc.Plane(point=(0.0, 0.0, depth_mm)), cam, rig)
        assert len(scene.spots) == 9
        cloud = gm.triangulate_sl(scene.spots, cam, rig)
        assert cloud.scale_status == "metric"
        assert cloud.source == "SL"
        err = np.linalg.norm(cloud.points - scene.true_points, axis=1)
        assert err.max() < 1e-9
        np.testing.assert_array_equal(cloud.ids, scene.spots.ids)
        assert cloud.per_point_error.max() < 1e-9  # mm ray gap

    def test_exact_recovery_on_sphere(self):
        cam = sc.default_camera()
        rig = sc.default_rig(n_spots=16)
        scene = sc.sl_scene(sc.Sphere(), cam, rig)
        cloud = gm.triangulate_sl(scene.spots, cam, rig)
        err = np.linalg.norm(cloud.points - scene.true_points, axis=1)
        assert err.max() < 1e-9

    def test_drop_reasons(self):
        cam = sc.default_camera()
        rig = sc.default_rig(n_spots=9)
        scene = sc.sl_scene(sc.Plane(), cam, rig)
        uv = scene.spots.uv.copy()
        uv[0] = [-5.0, 10.0]  # off frame
        uv[3] += [0.0, 20.0]  # 20 px off the epipolar plane: ~0.75 mm gap
        ids = scene.spots.ids.copy()
        ids[1] = 999  # no calibrated ray
        diag = gm.SlDiagnostics()
        spots = SpotSet(ids=ids, uv=uv, wavelengths_nm=scene.spots.wavelengths_nm)
        cloud = gm.triangulate_sl(spots, cam, rig, diagnostics=diag)
        assert len(cloud) == 6
        assert dict(diag.dropped) == {0: "frustum", 999: "uncalibrated", 3: "skew"}

    def test_parallel_rays_dropped(self):
        cam = sc.default_camera()
        rig = gm.ProbeRig(baseline_mm=5.0, angle_deg=0.0, rays={0: (0.0, 0.0, 1.0)})
        spots = SpotSet(ids=np.array([0]), uv=np.array([[cam.cx, cam.cy]]),
                        wavelengths_nm=np.zeros(1))
        diag = gm.SlDiagnostics()
        cloud = gm.triangulate_sl(spots, cam, rig, diagnostics=diag)
        assert len(cloud) == 0
        assert diag.dropped == [(0, "parallel")]

    def test_behind_camera_dropped(self):
        cam = sc.default_camera()
        # probe ray marching off to +x: its closest approach to the optical
        # axis lies behind both the camera and the probe
        rig = gm.ProbeRig(baseline_mm=5.0, angle_deg=0.0, rays={0: (0.994, 0.0, 0.11)})
        spots = SpotSet(ids=np.array([0]), uv=np.array([[cam.cx, cam.cy]]),
                        wavelengths_nm=np.zeros(1))
        diag = gm.SlDiagnostics()
        cloud = gm.triangulate_sl(spots, cam, rig, diagnostics=diag)
        assert len(cloud) == 0
        assert diag.dropped == [(0, "behind")]

    def test_noise_degrades_gracefully(self):
        cam = sc.default_camera()
        rig = sc.default_rig(n_spots=16)
        scene = sc.sl_scene(sc.Plane(), cam, rig, noise_px=0.5, seed=4)
        cloud = gm.triangulate_sl(scene.spots, cam, rig)
        kept = np.isin(scene.spots.ids, cloud.ids)
        idx = {int(i): k for k, i in enumerate(scene.spots.ids)}
        truth = np.array([scene.true_points[idx[int(i)]] for i in cloud.ids])
        err = np.linalg.norm(cloud.points - truth, axis=1)
        assert len(cloud) >= 12  # a skew gate may eat a spot or two
        assert err.max() < 2.0
        assert kept.sum() == len(cloud)


# ---------------------------------------------------------------------------
# Feature detection, tracking, filtering
# ---------------------------------------------------------------------------

class TestCornersAndFlow:
    def test_constant_frame_has_no_corners(self):
        kp, desc = gm.detect_corners(np.full((80, 80), 7.0))
        assert len(kp) == 0 and len(desc) == 0

    def test_corners_found_inside_border(self):
        fa, _ = sc.textured_frames(seed=0)
        kp, desc = gm.detect_corners(fa, max_corners=50, border=8)
        assert len(kp) == 50
        assert desc.shape == (50, 49)
        assert kp[:, 0].min() >= 8 and kp[:, 0].max() <= fa.shape[1] - 9
        assert kp[:, 1].min() >= 8 and kp[:, 1].max() <= fa.shape[0] - 9

    def test_identity_flow_is_zero(self):
        fa, _ = sc.textured_frames(seed=1)
        kp, _ = gm.detect_corners(fa, max_corners=30)
        tracked, ok = gm.lk_flow(fa, fa, kp)
        # a weak corner may fail the structure-tensor gate at coarse levels
        assert ok.sum() >= 25
        np.testing.assert_array_equal(tracked[ok], kp[ok])

    def test_integer_shift_recovered(self):
        fa, fb = sc.textured_frames(shift_px=(3.0, 0.0), seed=0)
        kp, _ = gm.detect_corners(fa, max_corners=60)
        tracked, ok = gm.lk_flow(fa, fb, kp)
        assert ok.sum() >= 40
        err = np.linalg.norm(tracked[ok] - kp[ok] - [3.0, 0.0], axis=1)
        assert err.max() < 0.1

    def test_subpixel_shift_recovered(self):
        fa, fb = sc.textured_frames(shift_px=(2.4, -1.3), seed=5)
        kp, _ = gm.detect_corners(fa, max_corners=60)
        tracked, ok = gm.lk_flow(fa, fb, kp)
        assert ok.sum() >= 40
        err = np.linalg.norm(tracked[ok] - kp[ok] - [2.4, -1.3], axis=1)
        assert err.max() < 0.1

    def test_mismatched_frames_rejected(self):
        with pytest.raises(ShapeError):
            gm.lk_flow(np.zeros((40, 40)), np.zeros((40, 50)), np.zeros((1, 2)))


def tracked_pair(p, q, ddist=0.0, sym=0.0, accepted=True, reason=None):
    p, q = np.asarray(p, float), np.asarray(q, float)
    return gm.CorrespondencePair(p, q, descriptor_dist=ddist,
                                 flow_len_px=float(np.linalg.norm(q - p)),
                                 sym_residual_px=sym, accepted=accepted,
                                 reject_reason=reason)


class TestTrackAndFilter:
    def test_track_features_end_to_end(self):
        fa, fb = sc.textured_frames(shift_px=(3.0, 0.0), seed=0)
        cset = gm.track_features(fa, fb)
        acc = cset.accepted_pairs()
        assert len(acc) >= 40
        flows = np.array([p.q - p.p for p in acc])
        assert np.linalg.norm(np.median(flows, axis=0) - [3.0, 0.0]) < 0.05
        lost = [p for p in cset.pairs if not p.accepted]
        assert all(p.reject_reason == "lost" for p in lost)

    def test_each_gate_fires_with_its_reason(self):
        base = [tracked_pair([50 + i, 50], [53 + i, 50]) for i in range(10)]
        bad = [
            tracked_pair([70, 50], [73, 50], ddist=0.9),
            tracked_pair([72, 50], [172, 50]),  # 100 px flow
            tracked_pair([74, 50], [77, 50], sym=50.0),
            tracked_pair([76, 50], [66, 80]),  # against the local median
        ]
        out = gm.filter_correspondences(gm.CorrespondenceSet(base + bad))
        reasons = [p.reject_reason for p in out.pairs[10:]]
        assert reasons == ["descriptor", "flow", "symmetric", "smoothness"]
        assert all(p.accepted for p in out.pairs[:10])

    def test_infinite_thresholds_keep_everything_tracked(self):
        pairs = [tracked_pair([50, 50], [60, 50], ddist=5.0, sym=9.0),
                 tracked_pair([52, 50], [40, 90]),
                 tracked_pair([54, 50], [55, 50], accepted=False, reason="lost")]
        inf = gm.FilterThresholds(max_descriptor_dist=np.inf, max_flow_px=np.inf,
                                  max_sym_residual_px=np.inf,
                                  max_median_deviation_px=np.inf)
        out = gm.filter_correspondences(gm.CorrespondenceSet(pairs), inf)
        assert [p.accepted for p in out.pairs] == [True, True, False]
        assert out.pairs[2].reject_reason == "lost"

    def test_tightening_never_accepts_more(self):
        rng = np.random.default_rng(3)
        pairs = [tracked_pair(rng.uniform(20, 100, 2), rng.uniform(20, 100, 2),
                              ddist=rng.uniform(0, 1), sym=rng.uniform(0, 2))
                 for _ in range(40)]
        cset = gm.CorrespondenceSet(pairs)
        loose = gm.FilterThresholds(max_descriptor_dist=0.8, max_sym_residual_px=1.5)
        tight = gm.FilterThresholds(max_descriptor_dist=0.4, max_sym_residual_px=0.7)
        kept_loose = {i for i, p in enumerate(gm.filter_correspondences(cset, loose).pairs)
                      if p.accepted}
        kept_tight = {i for i, p in enumerate(gm.filter_correspondences(cset, tight).pairs)
                      if p.accepted}
        assert kept_tight <= kept_loose

    def test_insufficient_property(self):
        pairs = [tracked_pair([i, 0], [i, 1]) for i in range(7)]
        assert gm.CorrespondenceSet(pairs).insufficient
        pairs.append(tracked_pair([9, 0], [9, 1]))
        assert not gm.CorrespondenceSet(pairs).insufficient

    def test_csv_round_trip(self, tmp_path):
        pairs = [tracked_pair([1.25, 2.5], [3.75, 4.125]),
                 tracked_pair([5.0, 6.0], [7.0, 8.0]),
                 tracked_pair([0, 0], [1, 1], accepted=False, reason="lost")]
        path = tmp_path / "pairs.csv"
        gm.save_correspondences(path, gm.CorrespondenceSet(pairs))
        back = gm.load_correspondences(path)
        assert len(back) == 2  # rejected pairs are not exported
        pa, pb = back.points()
        np.testing.assert_array_equal(pa, [[1.25, 2.5], [5.0, 6.0]])
        np.testing.assert_array_equal(pb, [[3.75, 4.125], [7.0, 8.0]])

    def test_csv_bad_header_rejected(self, tmp_path):
        path = tmp_path / "pairs.csv"
        path.write_text("x1,y1,x2,y2\n1,2,3,4\n")
        with pytest.raises(DataError):
            gm.load_correspondences(path)


# ---------------------------------------------------------------------------
# Essential matrix
# ---------------------------------------------------------------------------

def sphere_sfm(seed=0, **kwargs):
    ref = sc.reference_scene()
    return sc.sfm_scene(ref.surface, ref.camera, ref.r, ref.t_mm,
                        n_points=40, seed=seed, **kwargs)


class TestEstimateEssential:
    def test_noiseless_epipolar_residual(self):
        scene = sphere_sfm()
        e, mask = gm.estimate_essential(scene.cset, scene.camera)
        assert mask.all()
        pa, pb = scene.cset.points()
        xa = np.hstack([scene.camera.normalized(pa), np.ones((len(pa), 1))])
        xb = np.hstack([scene.camera.normalized(pb), np.ones((len(pb), 1))])
        assert epipolar_residual_naive(e, xa, xb).max() < 1e-9

    def test_matches_true_essential(self):
        scene = sphere_sfm(seed=2)
        e, _ = gm.estimate_essential(scene.cset, scene.camera)
        # both are deterministically signed, so they compare directly
        assert np.linalg.norm(e - scene.e_true) < 1e-9

    def test_pure_translation_form(self):
        # t along x gives E proportional to the x cross-product matrix
        ref = sc.reference_scene()
        scene = sc.sfm_scene(ref.surface, ref.camera, np.eye(3),
                             np.array([1.0, 0.0, 0.0]), n_points=30, seed=7)
        e, _ = gm.estimate_essential(scene.cset, scene.camera)
        expected = sc.cross_matrix([1.0, 0.0, 0.0]) / np.sqrt(2.0)
        assert np.linalg.norm(e - expected) < 1e-9

    def test_too_few_pairs_rejected(self):
        scene = sphere_sfm()
        small = gm.CorrespondenceSet(scene.cset.pairs[:7])
        with pytest.raises(InsufficientDataError):
            gm.estimate_essential(small, scene.camera)

    def test_rejected_pairs_never_become_inliers(self):
        scene = sphere_sfm(seed=3)
        scene.cset.pairs[5].accepted = False
        scene.cset.pairs[5].reject_reason = "descriptor"
        e, mask = gm.estimate_essential(scene.cset, scene.camera)
        assert not mask[5]
        assert mask.sum() == len(scene.cset.pairs) - 1

    def test_outlier_rejection_over_twenty_trials(self):
        # 30% planted outliers: none accepted, at least 95% of inliers kept
        for seed in range(20):
            scene = sphere_sfm(seed=seed, outlier_fraction=0.3)
            e, mask = gm.estimate_essential(scene.cset, scene.camera,
                                            gm.RansacConfig(seed=seed))
            assert int((mask & ~scene.inlier_labels).sum()) == 0
            recall = (mask & scene.inlier_labels).sum() / scene.inlier_labels.sum()
            assert recall >= 0.95

    def test_deterministic_for_fixed_seed(self):
        scene = sphere_sfm(seed=4, noise_px=0.2)
        cfg = gm.RansacConfig(seed=11, sampson_threshold=5e-3)
        e1, m1 = gm.estimate_essential(scene.cset, scene.camera, cfg)
        e2, m2 = gm.estimate_essential(scene.cset, scene.camera, cfg)
        np.testing.assert_array_equal(e1, e2)
        np.testing.assert_array_equal(m1, m2)

    def test_all_outliers_rejected_with_estimation_error(self):
        rng = np.random.default_rng(9)
        cam = sc.default_camera()
        pairs = [gm.CorrespondencePair(rng.uniform(0, 600, 2), rng.uniform(0, 400, 2))
                 for _ in range(30)]
        with pytest.raises(EstimationError):
            gm.estimate_essential(gm.CorrespondenceSet(pairs), cam,
                                  gm.RansacConfig(iterations=50, min_inliers=25, seed=0))


class TestRecoverPose:
    def test_noiseless_pose_exact(self):
        scene = sphere_sfm(seed=1)
        e, mask = gm.estimate_essential(scene.cset, scene.camera)
        r, t = gm.recover_pose(e, scene.cset, scene.camera, mask)
        assert abs(np.linalg.det(r) - 1.0) < 1e-9
        # matrix-difference norms sidestep the arccos precision floor
        assert np.linalg.norm(r - scene.r) < 1e-6
        assert np.linalg.norm(t - scene.t_unit) < 1e-6

    def test_chirality_unique_among_candidates(self):
        scene = sphere_sfm(seed=6)
        pa, pb = scene.cset.points()
        xa = scene.camera.normalized(pa)
        xb = scene.camera.normalized(pb)
        counts = []
        for r, t in gm._pose_candidates(scene.e_true):
            _, za, zb, par = gm._triangulate_pairs(r, t, xa, xb)
            counts.append(int(np.sum((za > 0) & (zb > 0) & ~par)))
        counts.sort(reverse=True)
        assert counts[0] == len(pa)
        assert counts[1] < counts[0]

    def test_zero_matrix_rejected(self):
        scene = sphere_sfm()
        with pytest.raises(EstimationError):
            gm.recover_pose(np.zeros((3, 3)), scene.cset, scene.camera)

    def test_tied_candidates_reported_as_ambiguity(self):
        # two pairs on one epipolar line with opposite apparent motion
        # support opposite translation signs, one point each
        cam = sc.default_camera()
        e = sc.essential_from_pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        pairs = [tracked_pair([320.0, 240.0], [340.0, 240.0]),
                 tracked_pair([100.0, 240.0], [80.0, 240.0])]
        with pytest.raises(EstimationError, match="ambiguity"):
            gm.recover_pose(e, gm.CorrespondenceSet(pairs), cam)

    def test_no_point_in_front_rejected(self):
        cam = sc.default_camera()
        e = sc.essential_from_pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        # identical pixels triangulate as parallel rays under every candidate
        pairs = [tracked_pair([320.0, 240.0], [320.0, 240.0])]
        with pytest.raises(EstimationError):
            gm.recover_pose(e, gm.CorrespondenceSet(pairs), cam)


class TestTriangulateTwoView:
    def test_noiseless_points_exact_up_to_scale(self):
        scene = sphere_sfm(seed=5)
        e, mask = gm.estimate_essential(scene.cset, scene.camera)
        r, t = gm.recover_pose(e, scene.cset, scene.camera, mask)
        cloud = gm.triangulate_two_view(r, t, scene.cset, scene.camera, mask)
        assert cloud.scale_status == "up-to-scale"
        assert len(cloud) == len(scene.true_points)
        scale = np.linalg.norm(scene.t)  # truth known only here
        err = np.linalg.norm(cloud.points * scale - scene.true_points, axis=1)
        assert err.max() < 1e-6
        assert cloud.per_point_error.max() < 1e-6  # px

    def test_metric_pose_reproduces_metric_points(self):
        scene = sphere_sfm(seed=8)
        cloud = gm.triangulate_two_view(scene.r, scene.t, scene.cset, scene.camera)
        err = np.linalg.norm(cloud.points - scene.true_points, axis=1)
        assert err.max() < 1e-9

    def test_linear_method_agrees(self):
        scene = sphere_sfm(seed=9)
        mid = gm.triangulate_two_view(scene.r, scene.t, scene.cset, scene.camera)
        lin = gm.triangulate_two_view(scene.r, scene.t, scene.cset, scene.camera,
                                      method="linear")
        np.testing.assert_allclose(lin.points, mid.points, atol=1e-8)

    def test_unknown_method_rejected(self):
        scene = sphere_sfm()
        with pytest.raises(ConfigError):
            gm.triangulate_two_view(scene.r, scene.t, scene.cset, scene.camera,
                                    method="dlt")

    def test_behind_camera_pairs_dropped(self):
        cam = sc.default_camera()
        # second pair's apparent motion implies negative depth under (I, +x)
        pairs = [tracked_pair([320.0, 240.0], [340.0, 240.0]),
                 tracked_pair([100.0, 240.0], [80.0, 240.0])]
        cloud = gm.triangulate_two_view(np.eye(3), np.array([1.0, 0.0, 0.0]),
                                        gm.CorrespondenceSet(pairs), cam)
        assert len(cloud) == 1


# ---------------------------------------------------------------------------
# Scale registration
# ---------------------------------------------------------------------------

def sl_reference(ids=None):
    cam = sc.default_camera()
    rig = sc.default_rig(n_spots=16)
    scene = sc.sl_scene(sc.Plane(), cam, rig)
    cloud = gm.triangulate_sl(scene.spots, cam, rig)
    return cloud


class TestRegisterScale:
    def test_average_sl_pair(self):
        a = gm.PointCloud(np.array([[0.0, 0, 10], [2, 0, 10], [4, 0, 10]]),
                          scale_status="metric", source="SL", ids=[1, 2, 3])
        b = gm.PointCloud(np.array([[2.0, 0, 10], [6, 0, 10], [9, 9, 9]]),
                          scale_status="metric", source="SL", ids=[2, 3, 4])
        avg = gm.average_sl_pair(a, b)
        np.testing.assert_array_equal(avg.ids, [2, 3])
        np.testing.assert_allclose(avg.points, [[2, 0, 10], [5, 0, 10]])

    def test_average_requires_metric_and_ids(self):
        a = gm.PointCloud(np.zeros((2, 3)), scale_status="metric", source="SL",
                          ids=[1, 2])
        free = gm.PointCloud(np.zeros((2, 3)), source="SfM", ids=[1, 2])
        with pytest.raises(DataError):
            gm.average_sl_pair(a, free)
        no_ids = gm.PointCloud(np.zeros((2, 3)), scale_status="metric", source="SL")
        with pytest.raises(DataError):
            gm.average_sl_pair(a, no_ids)
        disjoint = gm.PointCloud(np.zeros((2, 3)), scale_status="metric",
                                 source="SL", ids=[7, 8])
        with pytest.raises(DataError):
            gm.average_sl_pair(a, disjoint)

    def test_exact_ratio_recovered(self):
        ref = sl_reference()
        shrunk = gm.PointCloud(ref.points / 2.5, source="SfM")
        metric, s = gm.register_scale(shrunk, (ref, ref))
        assert abs(s - 2.5) < 1e-9
        np.testing.assert_allclose(metric.points, ref.points, atol=1e-8)
        assert metric.scale_status == "metric"

    def test_accepts_single_reference_cloud(self):
        ref = sl_reference()
        shrunk = gm.PointCloud(ref.points / 4.0, source="SfM")
        _, s = gm.register_scale(shrunk, ref)
        assert abs(s - 4.0) < 1e-9

    def test_scale_equivariance(self):
        ref = sl_reference()
        cloud = gm.PointCloud(ref.points / 2.0, source="SfM")
        _, s1 = gm.register_scale(cloud, ref)
        half = gm.PointCloud(cloud.points / 3.0, source="SfM")
        _, s2 = gm.register_scale(half, ref)
        assert abs(s2 - 3.0 * s1) < 1e-9 * s2

    def test_distant_reference_fails_cleanly(self):
        ref = sl_reference()
        far = gm.PointCloud(ref.points + [500.0, 0.0, 0.0], scale_status="metric",
                            source="SL", ids=ref.ids)
        cloud = gm.PointCloud(ref.points / 2.0, source="SfM")
        with pytest.raises(EstimationError):
            gm.register_scale(cloud, far, gate_mm=0.5)

    def test_empty_inputs_rejected(self):
        ref = sl_reference()
        empty = gm.PointCloud(np.zeros((0, 3)), source="SfM")
        with pytest.raises(InsufficientDataError):
            gm.register_scale(empty, ref)


# ---------------------------------------------------------------------------
# Fused pipeline
# ---------------------------------------------------------------------------

def run_pipeline(seed, noise_px):
    ref = sc.reference_scene()
    sl = sc.sl_scene(ref.surface, ref.camera, ref.rig)
    sl_cloud = gm.triangulate_sl(sl.spots, ref.camera, ref.rig)
    scene = sc.sfm_scene(ref.surface, ref.camera, ref.r, ref.t_mm,
                         points=sl.true_points, seed=seed, noise_px=noise_px)
    cfg = gm.RansacConfig(seed=seed, sampson_threshold=5e-3 if noise_px else 1e-3)
    e, mask = gm.estimate_essential(scene.cset, ref.camera, cfg)
    r, t = gm.recover_pose(e, scene.cset, ref.camera, mask)
    cloud = gm.triangulate_two_view(r, t, scene.cset, ref.camera, mask)
    metric, s = gm.register_scale(cloud, (sl_cloud, sl_cloud))
    rms = float(np.sqrt(np.mean(ref.surface.height(metric.points) ** 2)))
    return rms, s, np.linalg.norm(ref.t_mm)


class TestFusedPipeline:
    def test_noiseless_metric_surface(self):
        rms, s, true_scale = run_pipeline(seed=0, noise_px=0.0)
        assert rms < 1e-4  # mm
        assert abs(s - true_scale) < 1e-6 * true_scale

    def test_noisy_surface_stays_submillimeter(self):
        rms = [run_pipeline(seed, noise_px=0.2)[0] for seed in range(5)]
        assert float(np.median(rms)) < 0.2  # mm
