"""Synthetic geometry scenes with exact ground truth.

Builds the raw material the reconstruction pipeline consumes: a camera, a
spot-projecting probe rig, analytic surfaces (plane, sphere cap), spot
observations, and two-view feature correspondences with optional pixel
noise and planted outliers.  Everything is a pure function of its seed,
so scenes regenerate bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DEFAULT_WAVELENGTHS_NM, SpotSet
from .errors import ConfigError, DataError
from .geometry import (CorrespondencePair, CorrespondenceSet, PinholeCamera, ProbeRig,
                       _project_essential, rotation_y, sampson_distance)


def default_camera() -> PinholeCamera:
    return PinholeCamera(fx=800.0, fy=800.0, cx=320.0, cy=240.0, width=640, height=480)


def default_rig(n_spots: int = 16, spread_deg: float = 7.0,
                baseline_mm: float = 5.0, angle_deg: float = 10.0) -> ProbeRig:
    """Probe rig whose spot fan covers the working volume.

    Rays form a near-square grid of directions around the probe axis;
    wavelengths cycle through the standard band grid so each spot carries
    a distinct encoding where possible.
    """
    if n_spots < 1:
        raise ConfigError(f"need at least one spot, got {n_spots}")
    cols = int(np.ceil(np.sqrt(n_spots)))
    rows = int(np.ceil(n_spots / cols))
    ax = np.linspace(-spread_deg, spread_deg, cols) if cols > 1 else np.zeros(1)
    ay = np.linspace(-spread_deg * 0.75, spread_deg * 0.75, rows) if rows > 1 else np.zeros(1)
    rays, wavelengths = {}, {}
    sid = 0
    for j in range(rows):
        for i in range(cols):
            if sid >= n_spots:
                break
            d = np.array([np.tan(np.deg2rad(ax[i])), np.tan(np.deg2rad(ay[j])), 1.0])
            rays[sid] = d / np.linalg.norm(d)
            wavelengths[sid] = float(DEFAULT_WAVELENGTHS_NM[sid % len(DEFAULT_WAVELENGTHS_NM)])
            sid += 1
    return ProbeRig(baseline_mm=baseline_mm, angle_deg=angle_deg,
                    rays=rays, wavelengths_nm=wavelengths)


# ---------------------------------------------------------------------------
# Analytic surfaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Plane:
    """Plane through ``point`` with unit ``normal`` (camera frame, mm)."""

    point: tuple = (0.0, 0.0, 30.0)
    normal: tuple = (0.0, 0.0, -1.0)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameters t (NaN when parallel or behind the origin)."""
        o = np.atleast_2d(origins)
        d = np.atleast_2d(dirs)
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        p0 = np.asarray(self.point, dtype=np.float64)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - o) @ n) / denom
        t = np.where((np.abs(denom) < 1e-12) | (t <= 0), np.nan, t)
        return t

    def height(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of points from the surface (mm)."""
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return (np.atleast_2d(points) - np.asarray(self.point)) @ n


@dataclass(frozen=True)
class Sphere:
    """Front surface of a sphere (the cap facing the camera)."""

    center: tuple = (0.0, 0.0, 40.0)
    radius: float = 12.0

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        o = np.atleast_2d(origins) - np.asarray(self.center, dtype=np.float64)
        d = np.atleast_2d(dirs)
        b = np.sum(o * d, axis=1)
        c = np.sum(o * o, axis=1) - self.radius ** 2
        disc = b * b - c
        with np.errstate(invalid="ignore"):
            t = -b - np.sqrt(disc)
        t = np.where((disc < 0) | (t <= 0), np.nan, t)
        return t

    def height(self, points: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(np.atleast_2d(points) - np.asarray(self.center), axis=1)
        return r - self.radius


def surface_points_from_pixels(surface, cam: PinholeCamera, uv: np.ndarray) -> np.ndarray:
    """Back-project pixels onto the surface; NaN rows where rays miss."""
    d = cam.ray(uv)
    o = np.zeros_like(d)
    t = surface.intersect(o, d)
    return t[:, None] * d


def sample_surface_points(surface, cam: PinholeCamera, n: int, seed: int = 0,
                          margin_px: float = 40.0) -> np.ndarray:
    """n surface points visible from the camera, uniform over the image."""
    rng = np.random.default_rng(seed)
    pts = []
    guard = 0
    while len(pts) < n:
        guard += 1
        if guard > 200 * n:
            raise DataError("surface rarely visible from the camera; sampling gave up")
        uv = rng.uniform([margin_px, margin_px],
                         [cam.width - margin_px, cam.height - margin_px], size=(1, 2))
        p = surface_points_from_pixels(surface, cam, uv)[0]
        if np.all(np.isfinite(p)):
            pts.append(p)
    return np.array(pts)


# ---------------------------------------------------------------------------
# Structured-light observations
# ---------------------------------------------------------------------------

@dataclass
class SlScene:
    spots: SpotSet
    true_points: np.ndarray  # (N, 3) camera frame, aligned with spots
    rig: ProbeRig
    camera: PinholeCamera


def sl_scene(surface, cam: PinholeCamera, rig: ProbeRig,
             noise_px: float = 0.0, seed: int = 0) -> SlScene:
    """Project every rig spot onto the surface and observe it in the camera.

    Spots whose ray misses the surface or whose image falls outside the
    frame are omitted.  Optional Gaussian pixel noise perturbs (u, v).
    """
    rng = np.random.default_rng(seed)
    ids, us, vs, wls, pts = [], [], [], [], []
    origin = rig.origin()
    for sid in sorted(rig.rays):
        d = rig.ray_in_camera(sid)
        t = surface.intersect(origin[None], d[None])[0]
        if not np.isfinite(t):
            continue
        p = origin + t * d
        uv = cam.project(p[None])[0]
        if noise_px > 0:
            uv = uv + rng.normal(0.0, noise_px, size=2)
        if not cam.contains(uv[None])[0]:
            continue
        ids.append(sid)
        us.append(float(uv[0]))
        vs.append(float(uv[1]))
        wls.append(rig.wavelengths_nm.get(sid, 0.0))
        pts.append(p)
    spots = SpotSet(ids=np.array(ids, dtype=np.int64),
                    uv=np.stack([us, vs], axis=1) if us else np.zeros((0, 2)),
                    wavelengths_nm=np.array(wls))
    return SlScene(spots, np.array(pts).reshape(-1, 3), rig, cam)


# ---------------------------------------------------------------------------
# Two-view correspondences
# ---------------------------------------------------------------------------

def cross_matrix(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """E with the same normalization estimate_essential produces."""
    return _project_essential(cross_matrix(t) @ np.asarray(r, dtype=np.float64))


def pose_from_camera_motion(r_cam: np.ndarray, center_mm: np.ndarray):
    """(R, t) of frame B given camera B's rotation and center in frame A.

    ``x_b = R x_a + t`` with R = r_cam^T and t = -r_cam^T center.
    """
    r_cam = np.asarray(r_cam, dtype=np.float64)
    c = np.asarray(center_mm, dtype=np.float64).reshape(3)
    return r_cam.T, -r_cam.T @ c


def default_motion(angle_deg: float = 5.0, center_mm=(2.0, 0.0, 0.4)):
    return pose_from_camera_motion(rotation_y(angle_deg), np.asarray(center_mm))


@dataclass
class SfmScene:
    cset: CorrespondenceSet
    r: np.ndarray
    t: np.ndarray  # metric translation, mm
    t_unit: np.ndarray
    e_true: np.ndarray
    true_points: np.ndarray  # (N, 3) frame A, inlier rows only
    inlier_labels: np.ndarray  # bool per pair
    camera: PinholeCamera


def sfm_scene(surface, cam: PinholeCamera, r: np.ndarray, t_mm: np.ndarray,
              n_points: int = 40, seed: int = 0, noise_px: float = 0.0,
              outlier_fraction: float = 0.0, points: np.ndarray | None = None) -> SfmScene:
    """Feature correspondences between frame A (identity) and frame B (R, t).

    Points default to random surface samples visible in both frames.
    Outliers replace the frame-B observation with a uniform pixel whose
    Sampson distance against the true essential matrix is large, so the
    planted labels are unambiguous.
    """
    if not 0.0 <= outlier_fraction < 1.0:
        raise ConfigError(f"outlier fraction must be in [0, 1), got {outlier_fraction}")
    rng = np.random.default_rng(seed)
    r = np.asarray(r, dtype=np.float64)
    t_mm = np.asarray(t_mm, dtype=np.float64).reshape(3)
    e_true = essential_from_pose(r, t_mm)

    if points is None:
        pts = []
        guard = 0
        while len(pts) < n_points:
            guard += 1
            if guard > 500 * n_points:
                raise DataError("could not sample enough points visible in both frames")
            p = sample_surface_points(surface, cam, 1, seed=int(rng.integers(2**31)))[0]
            q = r @ p + t_mm
            if q[2] <= 0 or not cam.contains(cam.project(q[None])) [0]:
                continue
            pts.append(p)
        pts = np.array(pts)
    else:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)

    uv_a = cam.project(pts)
    uv_b = cam.project(pts @ r.T + t_mm)
    if noise_px > 0:
        uv_a = uv_a + rng.normal(0.0, noise_px, uv_a.shape)
        uv_b = uv_b + rng.normal(0.0, noise_px, uv_b.shape)

    n = len(pts)
    labels = np.ones(n, dtype=bool)
    n_out = int(round(outlier_fraction * n))
    if n_out:
        out_idx = rng.choice(n, size=n_out, replace=False)
        for i in out_idx:
            xa = cam.normalized(uv_a[i][None])
            for _ in range(1000):
                cand = rng.uniform([0, 0], [cam.width - 1, cam.height - 1])
                d = sampson_distance(e_true, xa, cam.normalized(cand[None]))[0]
                if d > 5e-3:  # safely past the default RANSAC gate
                    uv_b[i] = cand
                    labels[i] = False
                    break
            else:
                raise DataError("failed to plant an unambiguous outlier")

    pairs = [CorrespondencePair(uv_a[i].copy(), uv_b[i].copy(),
                                flow_len_px=float(np.linalg.norm(uv_b[i] - uv_a[i])))
             for i in range(n)]
    return SfmScene(CorrespondenceSet(pairs), r, t_mm,
                    t_mm / np.linalg.norm(t_mm), e_true, pts[labels], labels, cam)


@dataclass
class ReferenceScene:
    camera: PinholeCamera
    surface: Sphere
    rig: ProbeRig
    r: np.ndarray
    t_mm: np.ndarray


def reference_scene() -> ReferenceScene:
    """Benchmark scene for the fused SL + SfM pipeline.

    A sphere cap at ~32 mm with a wide 49-spot fan and a 10 degree / 8 mm
    camera motion: enough angular spread and parallax that a 0.2 px
    correspondence noise stays comfortably inside the pose estimator's
    stable regime (narrow fans make translation direction degenerate with
    rotation).
    """
    cam = default_camera()
    sphere = Sphere(center=(0.0, 0.0, 32.0), radius=12.0)
    rig = default_rig(n_spots=49, spread_deg=14.0)
    r, t = default_motion(10.0, (8.0, 2.0, 1.5))
    return ReferenceScene(cam, sphere, rig, r, t)


def textured_frames(shift_px=(3.0, 0.0), size=(120, 160), seed: int = 0,
                    smooth: float = 3.0):
    """Smooth random texture and its exact subpixel translation.

    Frame B equals frame A shifted by ``shift_px`` (u, v); both are cut
    from one oversized texture so the shift introduces no boundary
    invention.  Returns (frame_a, frame_b).
    """
    from scipy.ndimage import gaussian_filter, map_coordinates
    h, w = size
    du, dv = shift_px
    pad = int(np.ceil(max(abs(du), abs(dv)))) + 4
    rng = np.random.default_rng(seed)
    big = gaussian_filter(rng.standard_normal((h + 2 * pad, w + 2 * pad)), smooth)
    big = (big - big.min()) / (big.max() - big.min()) * 255.0
    ys, xs = np.mgrid[0:h, 0:w]
    frame_a = big[pad:pad + h, pad:pad + w].copy()
    coords = np.stack([ys.ravel() + pad - dv, xs.ravel() + pad - du])
    frame_b = map_coordinates(big, coords, order=3).reshape(h, w)
    return frame_a, frame_b
