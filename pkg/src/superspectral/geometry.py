"""Surface reconstruction geometry.

Two reconstruction paths share this module:

* structured light: wavelength-tagged spots projected by a probe with a
  known baseline and tilt are triangulated against their camera
  observations, giving a sparse but metric cloud;
* two-view structure from motion: feature correspondences between two
  frames give an essential matrix, a relative pose, and an up-to-scale
  cloud.

``register_scale`` reconciles the two by fitting the single scale factor
that best maps the SfM cloud onto the averaged structured-light
reference.

Conventions: camera A is the world frame (origin, identity rotation); a
recovered pose (R, t) maps A-frame coordinates to B-frame via
``x_b = R x_a + t``; the essential matrix satisfies ``x_b^T E x_a = 0``
on normalized image coordinates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, maximum_filter
from scipy.spatial import cKDTree

from .dataset import SpotSet
from .errors import (ConfigError, DataError, EstimationError, InsufficientDataError,
                     ShapeError)


# ---------------------------------------------------------------------------
# Cameras and rigs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PinholeCamera:
    """Intrinsics of an undistorted pinhole camera (pixel units)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image")

    def project(self, points: np.ndarray) -> np.ndarray:
        """(N, 3) camera-frame points -> (N, 2) pixel coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"points must be (N, 3), got {pts.shape}")
        z = pts[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pts[:, 0] / z + self.cx
            v = self.fy * pts[:, 1] / z + self.cy
        return np.stack([u, v], axis=1)

    def ray(self, uv: np.ndarray) -> np.ndarray:
        """(N, 2) pixels -> (N, 3) unit rays through the optical center."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        d = np.stack([(uv[:, 0] - self.cx) / self.fx,
                      (uv[:, 1] - self.cy) / self.fy,
                      np.ones(len(uv))], axis=1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def normalized(self, uv: np.ndarray) -> np.ndarray:
        """Pixels -> normalized image coordinates (x, y) at z = 1."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        return np.stack([(uv[:, 0] - self.cx) / self.fx,
                         (uv[:, 1] - self.cy) / self.fy], axis=1)

    def contains(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        return ((uv[:, 0] >= 0) & (uv[:, 0] <= self.width - 1)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= self.height - 1))


def save_camera(path, cam: PinholeCamera) -> None:
    doc = {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
           "width": cam.width, "height": cam.height}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_camera(path) -> PinholeCamera:
    try:
        doc = json.loads(Path(path).read_text())
        return PinholeCamera(float(doc["fx"]), float(doc["fy"]), float(doc["cx"]),
                             float(doc["cy"]), int(doc["width"]), int(doc["height"]))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot read camera file {path}: {exc}") from exc


def rotation_y(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class ProbeRig:
    """Structured-light projector mounted beside the camera.

    The probe sits ``baseline_mm`` along camera +x and is tilted by
    ``angle_deg`` about y back toward the camera axis, so the projected
    fan crosses the field of view at working distance.  ``rays`` maps
    spot id to a unit direction in the probe frame; ``wavelengths_nm``
    optionally tags each spot with its encoding wavelength.
    """

    baseline_mm: float = 5.0
    angle_deg: float = 10.0
    rays: dict = field(default_factory=dict)
    wavelengths_nm: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.baseline_mm <= 0:
            raise ConfigError(f"baseline must be positive, got {self.baseline_mm}")
        fixed = {}
        for sid, ray in self.rays.items():
            r = np.asarray(ray, dtype=np.float64).reshape(3)
            n = np.linalg.norm(r)
            if not np.isfinite(n) or n < 1e-12:
                raise DataError(f"spot {sid}: projection ray must be a nonzero vector")
            fixed[int(sid)] = r / n
        self.rays = fixed

    def origin(self) -> np.ndarray:
        return np.array([self.baseline_mm, 0.0, 0.0])

    def rotation(self) -> np.ndarray:
        # tilt toward -x so the fan converges with the camera axis
        return rotation_y(-self.angle_deg)

    def ray_in_camera(self, spot_id: int) -> np.ndarray:
        if spot_id not in self.rays:
            raise DataError(f"rig has no calibrated ray for spot {spot_id}")
        return self.rotation() @ self.rays[spot_id]


def save_rig(path, rig: ProbeRig) -> None:
    doc = {
        "baseline_mm": rig.baseline_mm,
        "angle_deg": rig.angle_deg,
        "rays": {str(k): [float(x) for x in v] for k, v in sorted(rig.rays.items())},
        "wavelengths_nm": {str(k): float(v) for k, v in sorted(rig.wavelengths_nm.items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_rig(path) -> ProbeRig:
    try:
        doc = json.loads(Path(path).read_text())
        return ProbeRig(
            baseline_mm=float(doc["baseline_mm"]),
            angle_deg=float(doc["angle_deg"]),
            rays={int(k): v for k, v in doc["rays"].items()},
            wavelengths_nm={int(k): float(v) for k, v in doc.get("wavelengths_nm", {}).items()},
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot read rig file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

SCALE_STATUSES = ("up-to-scale", "metric")


@dataclass
class PointCloud:
    """3D points with provenance; coordinates are mm once metric."""

    points: np.ndarray
    scale_status: str = "up-to-scale"
    source: str = "SfM"
    ids: np.ndarray | None = None  # spot ids for SL clouds
    values: np.ndarray | None = None  # optional per-point overlay (N,) or (N, C)
    # per-point quality: reprojection error (px) for SfM, ray gap (mm) for SL
    per_point_error: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise DataError("point cloud contains non-finite coordinates")
        if self.scale_status not in SCALE_STATUSES:
            raise ConfigError(f"scale_status must be one of {SCALE_STATUSES}")
        if self.source not in ("SL", "SfM"):
            raise ConfigError(f"source must be 'SL' or 'SfM', got {self.source!r}")
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
            if len(self.ids) != len(self.points):
                raise ShapeError("ids must match point count")
        if self.values is not None:
            self.values = np.asarray(self.values, dtype=np.float64)
            if self.values.shape[0] != len(self.points):
                raise ShapeError("values must match point count")
        if self.per_point_error is not None:
            self.per_point_error = np.asarray(self.per_point_error, dtype=np.float64).reshape(-1)
            if len(self.per_point_error) != len(self.points):
                raise ShapeError("per_point_error must match point count")

    def __len__(self):
        return len(self.points)


def save_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY; cloud metadata rides along as comments.

    Scalar per-point values become a float ``value`` property; 3-channel
    values are written as uchar red/green/blue (clipped to [0, 255]).
    """
    lines = ["ply", "format ascii 1.0",
             f"comment scale_status {cloud.scale_status}",
             f"comment source {cloud.source}",
             f"element vertex {len(cloud)}"]
    lines += ["property double x", "property double y", "property double z"]
    mode = "none"
    if cloud.values is not None:
        if cloud.values.ndim == 1:
            mode = "scalar"
            lines.append("property double value")
        elif cloud.values.ndim == 2 and cloud.values.shape[1] == 3:
            mode = "rgb"
            lines += ["property uchar red", "property uchar green", "property uchar blue"]
        else:
            raise ShapeError(f"cannot export values of shape {cloud.values.shape}")
    lines.append("end_header")
    for i, p in enumerate(cloud.points):
        row = f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
        if mode == "scalar":
            row += f" {float(cloud.values[i])!r}"
        elif mode == "rgb":
            r, g, b = np.clip(np.nan_to_num(cloud.values[i]), 0, 255).astype(int)
            row += f" {r} {g} {b}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path) -> PointCloud:
    try:
        text = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not text or text[0].strip() != "ply":
        raise DataError(f"{path} is not a PLY file")
    n, props, status, source = 0, [], "up-to-scale", "SfM"
    it = iter(text[1:])
    for line in it:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "comment" and len(parts) >= 3:
            if parts[1] == "scale_status":
                status = parts[2]
            elif parts[1] == "source":
                source = parts[2]
        elif parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[2])
        elif parts[0] == "end_header":
            break
    body = [line.split() for line in it][:n]
    if len(body) != n:
        raise DataError(f"{path}: header promises {n} vertices, found {len(body)}")
    data = np.array([[float(x) for x in row] for row in body]) if n else np.zeros((0, len(props)))
    if props[:3] != ["x", "y", "z"]:
        raise DataError(f"{path}: expected x,y,z leading properties, got {props[:3]}")
    values = None
    if "value" in props:
        values = data[:, props.index("value")]
    elif "red" in props:
        values = data[:, [props.index("red"), props.index("green"), props.index("blue")]]
    return PointCloud(data[:, :3], scale_status=status, source=source, values=values)


# ---------------------------------------------------------------------------
# Structured-light triangulation
# ---------------------------------------------------------------------------

def _closest_ray_points(o1, d1, o2, d2):
    """Parameters (t1, t2, denom) of the common perpendicular's feet."""
    r = o2 - o1
    b = float(d1 @ d2)
    denom = 1.0 - b * b
    d = float(d1 @ r)
    e = float(d2 @ r)
    return d, e, b, denom


@dataclass
class SlDiagnostics:
    dropped: list = field(default_factory=list)  # (spot_id, reason)


def triangulate_sl(spots: SpotSet, cam: PinholeCamera, rig: ProbeRig,
                   max_skew_mm: float = 0.5, min_angle_deg: float = 0.5,
                   diagnostics: SlDiagnostics | None = None) -> PointCloud:
    """Metric spot positions from camera pixels and calibrated probe rays.

    Each point is the midpoint of the shortest segment between the camera
    back-projection and the probe ray.  Spots are dropped (with a reason)
    when the rays are near-parallel, the perpendicular gap exceeds
    ``max_skew_mm``, the pixel leaves the frustum, or depth is negative.
    """
    pts, ids, kept_err = [], [], []
    min_cross = np.sin(np.deg2rad(min_angle_deg))
    for sid, (u, v) in zip(spots.ids, spots.uv):
        sid = int(sid)
        if not cam.contains(np.array([[u, v]]))[0]:
            if diagnostics is not None:
                diagnostics.dropped.append((sid, "frustum"))
            continue
        if sid not in rig.rays:
            if diagnostics is not None:
                diagnostics.dropped.append((sid, "uncalibrated"))
            continue
        d1 = cam.ray(np.array([[u, v]]))[0]
        o2, d2 = rig.origin(), rig.ray_in_camera(sid)
        if np.linalg.norm(np.cross(d1, d2)) < min_cross:
            if diagnostics is not None:
                diagnostics.dropped.append((sid, "parallel"))
            continue
        d, e, b, denom = _closest_ray_points(np.zeros(3), d1, o2, d2)
        t1 = (d - b * e) / denom
        t2 = (b * d - e) / denom
        p1 = t1 * d1
        p2 = o2 + t2 * d2
        if t1 <= 0 or t2 <= 0:
            if diagnostics is not None:
                diagnostics.dropped.append((sid, "behind"))
            continue
        skew = np.linalg.norm(p1 - p2)
        if skew > max_skew_mm:
            if diagnostics is not None:
                diagnostics.dropped.append((sid, "skew"))
            continue
        pts.append(0.5 * (p1 + p2))
        ids.append(sid)
        kept_err.append(skew)
    return PointCloud(np.array(pts).reshape(-1, 3), scale_status="metric", source="SL",
                      ids=np.array(ids, dtype=np.int64),
                      per_point_error=np.array(kept_err))


# ---------------------------------------------------------------------------
# Feature detection and tracking
# ---------------------------------------------------------------------------

def _as_gray(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 3:
        f = f.mean(axis=0) if f.shape[0] in (1, 3) else f.mean(axis=2)
    if f.ndim != 2:
        raise ShapeError(f"frame must be 2D grayscale or 3-channel, got shape {f.shape}")
    return f


def _sample(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear samples at (u, v) pixel positions; (N,) values."""
    coords = np.stack([uv[:, 1], uv[:, 0]])  # row, col
    return map_coordinates(img, coords, order=1, mode="nearest")


def _patch_grid(radius: int):
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return dx.ravel(), dy.ravel()


def _descriptors(img: np.ndarray, uv: np.ndarray, radius: int = 3) -> np.ndarray:
    """Mean-free, L2-normalized patches sampled bilinearly around each point."""
    dx, dy = _patch_grid(radius)
    pts = uv[:, None, :] + np.stack([dx, dy], axis=1)[None]
    flat = pts.reshape(-1, 2)
    vals = _sample(img, flat).reshape(len(uv), -1)
    vals = vals - vals.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(vals, axis=1, keepdims=True)
    return vals / np.where(norm < 1e-12, 1.0, norm)


def detect_corners(frame: np.ndarray, max_corners: int = 200, quality: float = 0.02,
                   min_distance: int = 5, border: int = 8):
    """Min-eigenvalue corner detector with patch descriptors.

    Returns (keypoints (N, 2) float, descriptors (N, D)).  A constant
    frame has no corner response anywhere and yields zero keypoints.
    """
    img = _as_gray(frame)
    gy, gx = np.gradient(img)
    sxx = gaussian_filter(gx * gx, 1.5)
    syy = gaussian_filter(gy * gy, 1.5)
    sxy = gaussian_filter(gx * gy, 1.5)
    tr = 0.5 * (sxx + syy)
    det = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy ** 2, 0.0))
    response = tr - det  # smaller eigenvalue of the structure tensor
    peak = float(response.max(initial=0.0))
    if peak <= 1e-12:
        return np.zeros((0, 2)), np.zeros((0, (2 * 3 + 1) ** 2))
    local_max = response == maximum_filter(response, size=2 * min_distance + 1)
    mask = local_max & (response >= quality * peak)
    mask[:border] = mask[-border:] = False
    mask[:, :border] = mask[:, -border:] = False
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        return np.zeros((0, 2)), np.zeros((0, (2 * 3 + 1) ** 2))
    order = np.argsort(response[vs, us])[::-1][:max_corners]
    kp = np.stack([us[order], vs[order]], axis=1).astype(np.float64)
    return kp, _descriptors(img, kp)


def _pyramid(img: np.ndarray, levels: int):
    pyr = [img]
    for _ in range(levels - 1):
        sm = gaussian_filter(pyr[-1], 1.0)
        pyr.append(sm[::2, ::2])
    return pyr


def lk_flow(frame_a: np.ndarray, frame_b: np.ndarray, points: np.ndarray,
            window: int = 7, levels: int = 3, iterations: int = 12,
            min_eig: float = 1e-4):
    """Pyramidal Lucas-Kanade: track ``points`` from frame A into frame B.

    Returns (tracked (N, 2), ok mask).  A point is lost when its window
    leaves the image or the local structure tensor is near-singular.
    """
    a = _as_gray(frame_a)
    b = _as_gray(frame_b)
    if a.shape != b.shape:
        raise ShapeError(f"frames differ in shape: {a.shape} vs {b.shape}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    levels = max(1, min(levels, int(np.log2(max(1, min(a.shape) / (2 * window + 1)))) + 1))
    pyr_a, pyr_b = _pyramid(a, levels), _pyramid(b, levels)
    r = window // 2
    dx, dy = _patch_grid(r)
    offsets = np.stack([dx, dy], axis=1)

    flow = np.zeros_like(points)
    ok = np.ones(len(points), dtype=bool)
    for lvl in range(levels - 1, -1, -1):
        ia, ib = pyr_a[lvl], pyr_b[lvl]
        gy, gx = np.gradient(ia)
        scale = 2.0 ** lvl
        base = points / scale
        flow = flow * (2.0 if lvl < levels - 1 else 1.0 / scale)
        h, w = ia.shape
        for i in range(len(points)):
            if not ok[i]:
                continue
            p = base[i]
            if not (r <= p[0] < w - r - 1 and r <= p[1] < h - r - 1):
                ok[i] = False
                continue
            win = p[None] + offsets
            ax = _sample(gx, win)
            ay = _sample(gy, win)
            av = _sample(ia, win)
            g = np.array([[ax @ ax, ax @ ay], [ax @ ay, ay @ ay]])
            eigs = np.linalg.eigvalsh(g)
            if eigs[0] < min_eig * len(ax):
                ok[i] = False
                continue
            g_inv = np.linalg.inv(g)
            d = flow[i].copy()
            for _ in range(iterations):
                q = p + d
                if not (0 <= q[0] < w - 1 and 0 <= q[1] < h - 1):
                    ok[i] = False
                    break
                bv = _sample(ib, q[None] + offsets)
                err = bv - av
                step = g_inv @ np.array([ax @ err, ay @ err])
                d -= step
                if np.hypot(*step) < 1e-4:
                    break
            flow[i] = d
        flow[~ok] = 0.0
    tracked = points + flow * 1.0  # flow is at level-0 scale after the loop
    return tracked, ok


@dataclass
class CorrespondencePair:
    p: np.ndarray  # pixel in frame A
    q: np.ndarray  # pixel in frame B
    descriptor_dist: float = 0.0
    flow_len_px: float = 0.0
    sym_residual_px: float = 0.0
    accepted: bool = True
    reject_reason: str | None = None


@dataclass
class CorrespondenceSet:
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def accepted_pairs(self) -> list:
        return [p for p in self.pairs if p.accepted]

    def points(self, which: str = "accepted"):
        """(N, 2) arrays (pts_a, pts_b) for 'accepted' or 'all' pairs."""
        pairs = self.accepted_pairs() if which == "accepted" else self.pairs
        if not pairs:
            return np.zeros((0, 2)), np.zeros((0, 2))
        return (np.array([p.p for p in pairs], dtype=np.float64),
                np.array([p.q for p in pairs], dtype=np.float64))

    @property
    def insufficient(self) -> bool:
        return len(self.accepted_pairs()) < 8


def save_correspondences(path, cset: CorrespondenceSet, which: str = "accepted") -> None:
    pts_a, pts_b = cset.points(which)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["uA", "vA", "uB", "vB"])
        for (ua, va), (ub, vb) in zip(pts_a, pts_b):
            writer.writerow([repr(float(ua)), repr(float(va)),
                             repr(float(ub)), repr(float(vb))])


def load_correspondences(path) -> CorrespondenceSet:
    try:
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["uA", "vA", "uB", "vB"]:
                raise DataError(f"{path}: expected header uA,vA,uB,vB, got {header}")
            pairs = []
            for row in reader:
                if not row:
                    continue
                ua, va, ub, vb = (float(x) for x in row)
                p, q = np.array([ua, va]), np.array([ub, vb])
                pairs.append(CorrespondencePair(p, q, flow_len_px=float(np.linalg.norm(q - p))))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: malformed row: {exc}") from exc
    return CorrespondenceSet(pairs)


def track_features(frame_a: np.ndarray, frame_b: np.ndarray, detector=None,
                   window: int = 7, levels: int = 3) -> CorrespondenceSet:
    """Detect in A, LK-track into B, and track back for symmetry diagnostics.

    Points lost by either tracking direction stay in the set as rejected
    pairs (reason "lost").  Descriptor distance compares the patch at the
    detection with the patch at its tracked position.
    """
    detector = detector or detect_corners
    kp, desc = detector(frame_a)
    if len(kp) == 0:
        return CorrespondenceSet([])
    fwd, ok_f = lk_flow(frame_a, frame_b, kp, window=window, levels=levels)
    back, ok_b = lk_flow(frame_b, frame_a, fwd, window=window, levels=levels)
    img_b = _as_gray(frame_b)
    desc_b = _descriptors(img_b, fwd)
    pairs = []
    for i in range(len(kp)):
        lost = not (ok_f[i] and ok_b[i])
        flow_len = float(np.linalg.norm(fwd[i] - kp[i]))
        sym = float(np.linalg.norm(back[i] - kp[i]))
        ddist = float(np.linalg.norm(desc[i] - desc_b[i]))
        pairs.append(CorrespondencePair(
            kp[i].copy(), fwd[i].copy(), descriptor_dist=ddist, flow_len_px=flow_len,
            sym_residual_px=sym, accepted=not lost,
            reject_reason="lost" if lost else None))
    return CorrespondenceSet(pairs)


@dataclass(frozen=True)
class FilterThresholds:
    """Acceptance gates for tracked pairs; infinities disable a gate."""

    max_descriptor_dist: float = 0.6
    max_flow_px: float = 80.0
    max_sym_residual_px: float = 1.0
    max_median_deviation_px: float = 8.0
    neighborhood_px: float = 40.0


def filter_correspondences(cset: CorrespondenceSet,
                           thresholds: FilterThresholds = FilterThresholds()
                           ) -> CorrespondenceSet:
    """Re-flag every pair against the threshold set.

    The smoothness gate compares each flow against the median flow of all
    raw pairs within ``neighborhood_px`` (computed over the full set, not
    the accepted subset, so tightening one gate never loosens another).
    Pairs already lost by tracking stay rejected.
    """
    if not cset.pairs:
        return CorrespondenceSet([])
    pts_a = np.array([p.p for p in cset.pairs])
    flows = np.array([p.q - p.p for p in cset.pairs])
    tree = cKDTree(pts_a)
    neighbor_lists = tree.query_ball_point(pts_a, thresholds.neighborhood_px)
    out = []
    for i, pair in enumerate(cset.pairs):
        if pair.reject_reason == "lost":
            out.append(replace(pair))
            continue
        median_flow = np.median(flows[neighbor_lists[i]], axis=0)
        deviation = float(np.linalg.norm(flows[i] - median_flow))
        reason = None
        if pair.descriptor_dist > thresholds.max_descriptor_dist:
            reason = "descriptor"
        elif pair.flow_len_px > thresholds.max_flow_px:
            reason = "flow"
        elif pair.sym_residual_px > thresholds.max_sym_residual_px:
            reason = "symmetric"
        elif deviation > thresholds.max_median_deviation_px:
            reason = "smoothness"
        out.append(replace(pair, accepted=reason is None, reject_reason=reason))
    return CorrespondenceSet(out)


# ---------------------------------------------------------------------------
# Essential matrix and pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    sampson_threshold: float = 1e-3  # in normalized image coordinates
    min_inliers: int = 8
    seed: int = 0


def _hartley(x: np.ndarray):
    """Center and scale points to mean radius sqrt(2); returns (x', T)."""
    c = x.mean(axis=0)
    d = np.sqrt(np.mean(np.sum((x - c) ** 2, axis=1)))
    s = np.sqrt(2.0) / max(d, 1e-15)
    t = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (x - c) * s, t


def _eight_point(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Least-squares essential matrix from >= 8 normalized pairs.

    Camera normalization alone leaves clustered point sets badly scaled
    for the direct linear solve, so both sides are Hartley-conditioned
    and the result unwarped before projection onto the essential manifold.
    """
    na, ta = _hartley(xa)
    nb, tb = _hartley(xb)
    ha = np.hstack([na, np.ones((len(na), 1))])
    hb = np.hstack([nb, np.ones((len(nb), 1))])
    a = (hb[:, :, None] * ha[:, None, :]).reshape(len(na), 9)
    _, _, vt = np.linalg.svd(a)
    e = tb.T @ vt[-1].reshape(3, 3) @ ta
    return _project_essential(e)


def _project_essential(e: np.ndarray) -> np.ndarray:
    """Nearest matrix with singular values (s, s, 0), deterministically signed."""
    u, s, vt = np.linalg.svd(e)
    sigma = 0.5 * (s[0] + s[1])
    e = (u * np.array([sigma, sigma, 0.0])) @ vt
    e = e / np.linalg.norm(e)
    flat = np.abs(e).ravel()
    if e.ravel()[int(np.argmax(flat))] < 0:
        e = -e
    return e


def sampson_distance(e: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """First-order geometric epipolar distance per normalized pair."""
    ha = np.hstack([xa, np.ones((len(xa), 1))])
    hb = np.hstack([xb, np.ones((len(xb), 1))])
    ea = ha @ e.T  # rows: E @ xa
    eb = hb @ e  # rows: E^T @ xb
    num = np.abs(np.sum(hb * ea, axis=1))
    den = np.sqrt(ea[:, 0] ** 2 + ea[:, 1] ** 2 + eb[:, 0] ** 2 + eb[:, 1] ** 2)
    return num / np.where(den < 1e-15, 1e-15, den)


def estimate_essential(cset: CorrespondenceSet, cam: PinholeCamera,
                       ransac: RansacConfig = RansacConfig()):
    """Seeded RANSAC over 8-point minimal samples, refined on the consensus.

    Models are ranked by truncated quadratic loss (sum of min(d^2, tau^2))
    rather than raw inlier count: a model that fits the true inliers
    essentially exactly then beats one that holds them near the gate while
    capturing a stray outlier, even though both gate the same count.  The
    winner is refit on its inliers, keeping the refit only when it does
    not worsen that score.  Returns (E, inlier_mask) with the mask aligned
    to ``cset.pairs`` (never true for pairs the filters rejected).
    """
    pts_a, pts_b = cset.points("accepted")
    if len(pts_a) < 8:
        raise InsufficientDataError(
            f"essential estimation needs >= 8 accepted pairs, have {len(pts_a)}")
    xa = cam.normalized(pts_a)
    xb = cam.normalized(pts_b)
    tau = ransac.sampson_threshold
    tau_sq = tau * tau

    def score_of(model):
        d = sampson_distance(model, xa, xb)
        return float(np.sum(np.minimum(d * d, tau_sq))), d

    rng = np.random.default_rng(ransac.seed)
    best_e, best_score, best_d = None, np.inf, None
    for _ in range(ransac.iterations):
        idx = rng.choice(len(xa), size=8, replace=False)
        try:
            e = _eight_point(xa[idx], xb[idx])
        except np.linalg.LinAlgError:
            continue
        score, d = score_of(e)
        if score < best_score:
            best_e, best_score, best_d = e, score, d
    if best_e is None or int((best_d < tau).sum()) < ransac.min_inliers:
        count = 0 if best_d is None else int((best_d < tau).sum())
        raise EstimationError(
            f"no essential model reached {ransac.min_inliers} inliers (best {count})")

    for _ in range(4):  # refit on the consensus until the score stops improving
        inl = best_d < tau
        if int(inl.sum()) < 8:
            break
        try:
            refined = _eight_point(xa[inl], xb[inl])
        except np.linalg.LinAlgError:
            break
        score, d = score_of(refined)
        if score >= best_score:
            break
        best_e, best_score, best_d = refined, score, d

    final_inl = best_d < tau
    if int(final_inl.sum()) < ransac.min_inliers:
        raise EstimationError(
            f"consensus collapsed below {ransac.min_inliers} inliers during refinement")
    mask = np.zeros(len(cset.pairs), dtype=bool)
    accepted_idx = [i for i, p in enumerate(cset.pairs) if p.accepted]
    mask[np.array(accepted_idx, dtype=int)[final_inl]] = True
    return best_e, mask


def _pose_candidates(e: np.ndarray):
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1, r2 = u @ w @ vt, u @ w.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def _triangulate_pairs(r: np.ndarray, t: np.ndarray, xa: np.ndarray, xb: np.ndarray,
                       method: str = "midpoint"):
    """Points in frame A plus per-pair validity for pose (R, t).

    Returns (points (N, 3), depth_a, depth_b, parallel mask).
    """
    n = len(xa)
    da = np.hstack([xa, np.ones((n, 1))])
    da = da / np.linalg.norm(da, axis=1, keepdims=True)
    db_b = np.hstack([xb, np.ones((n, 1))])
    db = (db_b / np.linalg.norm(db_b, axis=1, keepdims=True)) @ r  # rotated into frame A
    c_b = -r.T @ t  # camera-B center in frame A
    if method == "midpoint":
        b = np.sum(da * db, axis=1)
        denom = 1.0 - b * b
        parallel = denom < 1e-12
        safe = np.where(parallel, 1.0, denom)
        d = da @ c_b
        e = db @ c_b
        t1 = (d - b * e) / safe
        t2 = (b * d - e) / safe
        pts = 0.5 * (t1[:, None] * da + c_b[None] + t2[:, None] * db)
    elif method == "linear":
        pts = np.zeros((n, 3))
        parallel = np.zeros(n, dtype=bool)
        p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
        p2 = np.hstack([r, t[:, None]])
        for i in range(n):
            a = np.stack([
                xa[i, 0] * p1[2] - p1[0],
                xa[i, 1] * p1[2] - p1[1],
                xb[i, 0] * p2[2] - p2[0],
                xb[i, 1] * p2[2] - p2[1],
            ])
            _, s, vt = np.linalg.svd(a)
            x = vt[-1]
            if abs(x[3]) < 1e-12:
                parallel[i] = True
                continue
            pts[i] = x[:3] / x[3]
    else:
        raise ConfigError(f"triangulation method must be 'midpoint' or 'linear', got {method!r}")
    depth_a = pts[:, 2]
    depth_b = (pts @ r.T + t)[:, 2]
    return pts, depth_a, depth_b, parallel


def recover_pose(e: np.ndarray, cset: CorrespondenceSet, cam: PinholeCamera,
                 inlier_mask: np.ndarray | None = None):
    """Chirality-disambiguated (R, t) with det(R) = +1 and unit t.

    Of the four factorizations of E, returns the one placing strictly the
    most triangulated pairs in front of both cameras; a tie is reported
    as an ambiguity instead of guessed away.
    """
    e = np.asarray(e, dtype=np.float64)
    if np.linalg.norm(e) < 1e-12:
        raise EstimationError("essential matrix is numerically zero (no epipolar geometry)")
    if inlier_mask is not None:
        pairs = [p for p, m in zip(cset.pairs, inlier_mask) if m]
    else:
        pairs = cset.accepted_pairs()
    if not pairs:
        raise InsufficientDataError("pose recovery needs at least one inlier pair")
    pts_a = np.array([p.p for p in pairs])
    pts_b = np.array([p.q for p in pairs])
    xa, xb = cam.normalized(pts_a), cam.normalized(pts_b)
    counts = []
    for r, t in _pose_candidates(e):
        _, za, zb, parallel = _triangulate_pairs(r, t, xa, xb)
        counts.append(int(np.sum((za > 0) & (zb > 0) & ~parallel)))
    order = np.argsort(counts)[::-1]
    if counts[order[0]] == 0:
        raise EstimationError("no pose candidate places any point in front of both cameras")
    if len(counts) > 1 and counts[order[0]] == counts[order[1]]:
        raise EstimationError(
            f"chirality ambiguity: two pose candidates tie at {counts[order[0]]} points")
    r, t = _pose_candidates(e)[order[0]]
    return r, t / np.linalg.norm(t)


def triangulate_two_view(r: np.ndarray, t: np.ndarray, cset: CorrespondenceSet,
                         cam: PinholeCamera, inlier_mask: np.ndarray | None = None,
                         method: str = "midpoint") -> PointCloud:
    """Up-to-scale cloud in frame A; behind-camera or degenerate pairs drop."""
    if inlier_mask is not None:
        pairs = [p for p, m in zip(cset.pairs, inlier_mask) if m]
    else:
        pairs = cset.accepted_pairs()
    if not pairs:
        return PointCloud(np.zeros((0, 3)), scale_status="up-to-scale", source="SfM",
                          per_point_error=np.zeros(0))
    pts_a = np.array([p.p for p in pairs])
    pts_b = np.array([p.q for p in pairs])
    xa, xb = cam.normalized(pts_a), cam.normalized(pts_b)
    pts, za, zb, parallel = _triangulate_pairs(np.asarray(r, float), np.asarray(t, float),
                                               xa, xb, method)
    keep = (za > 0) & (zb > 0) & ~parallel
    pts = pts[keep]
    proj_a = cam.project(pts)
    proj_b = cam.project(pts @ np.asarray(r).T + np.asarray(t))
    err = np.maximum(np.linalg.norm(proj_a - pts_a[keep], axis=1),
                     np.linalg.norm(proj_b - pts_b[keep], axis=1))
    return PointCloud(pts, scale_status="up-to-scale", source="SfM", per_point_error=err)


# ---------------------------------------------------------------------------
# Scale registration
# ---------------------------------------------------------------------------

def average_sl_pair(cloud_a: PointCloud, cloud_b: PointCloud) -> PointCloud:
    """Per-spot-id average of two metric structured-light clouds."""
    if cloud_a.scale_status != "metric" or cloud_b.scale_status != "metric":
        raise DataError("structured-light clouds must be metric before averaging")
    if cloud_a.ids is None or cloud_b.ids is None:
        raise DataError("structured-light clouds need spot ids for averaging")
    ids_a = {int(i): k for k, i in enumerate(cloud_a.ids)}
    ids_b = {int(i): k for k, i in enumerate(cloud_b.ids)}
    common = sorted(set(ids_a) & set(ids_b))
    if not common:
        raise DataError("structured-light clouds share no spot ids")
    pts = np.array([0.5 * (cloud_a.points[ids_a[i]] + cloud_b.points[ids_b[i]])
                    for i in common])
    return PointCloud(pts, scale_status="metric", source="SL",
                      ids=np.array(common, dtype=np.int64))


def register_scale(sfm: PointCloud, sl_pair, gate_mm: float = 2.0,
                   max_iterations: int = 50):
    """Metric scale for an SfM cloud from a structured-light reference.

    The reference is the per-id average of the SL pair.  Starting from the
    RMS-radius ratio, the scale is refined by alternating nearest-neighbor
    association (within ``gate_mm``) with the closed-form least-squares
    scale over the gated pairs until it stops moving.
    """
    if isinstance(sl_pair, PointCloud):
        ref = sl_pair
    else:
        ref = average_sl_pair(sl_pair[0], sl_pair[1])
    if len(sfm) == 0 or len(ref) == 0:
        raise InsufficientDataError("scale registration needs nonempty clouds")
    p = sfm.points
    q = ref.points
    # median radius ratio: robust to the occasional shallow-ray point that
    # triangulated far out and would wreck a mean-square estimate
    med_p = float(np.median(np.linalg.norm(p, axis=1)))
    med_q = float(np.median(np.linalg.norm(q, axis=1)))
    if med_p < 1e-15:
        raise EstimationError("SfM cloud collapses to the origin; scale undefined")
    s = med_q / med_p
    tree = cKDTree(q)
    for _ in range(max_iterations):
        dist, nn = tree.query(p * s)
        gated = dist <= gate_mm
        if not gated.any():
            raise EstimationError(
                f"no SfM point lands within {gate_mm} mm of the reference at scale {s:.4g}")
        pg, qg = p[gated], q[nn[gated]]
        denom = float(np.sum(pg * pg))
        if denom < 1e-30:
            raise EstimationError("gated SfM points collapse to the origin")
        s_new = float(np.sum(pg * qg)) / denom
        if s_new <= 0:
            raise EstimationError(f"scale registration produced s = {s_new:.4g} <= 0")
        if abs(s_new - s) <= 1e-14 * max(1.0, abs(s)):
            s = s_new
            break
        s = s_new
    metric = PointCloud(sfm.points * s, scale_status="metric", source="SfM",
                        values=sfm.values, per_point_error=sfm.per_point_error)
    return metric, float(s)
