"""Derived imaging products from dense spectral stacks.

Narrow-band imaging picks the bands nearest two requested wavelengths
and composes them into a false-color image.  Oxygen saturation unmixes
per-pixel absorbance into oxy- and deoxyhemoglobin contributions under a
modified Beer-Lambert model with a free scattering offset.  Draping
samples any per-pixel map at the projections of a 3D point cloud so the
values can ride along in PLY exports.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import SpectralStack
from .errors import ConfigError, DataError, ShapeError
from .geometry import PinholeCamera, PointCloud

DEFAULT_NARROW_BANDS_NM = (415.0, 540.0)


# ---------------------------------------------------------------------------
# Extinction coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtinctionTable:
    """Molar extinction spectra of oxy- and deoxyhemoglobin.

    Values are user-supplied physiology data (none are baked in); the
    table must bracket any wavelength it is resampled onto, since
    extinction spectra are too structured to extrapolate.
    """

    wavelengths_nm: np.ndarray
    eps_hbo2: np.ndarray
    eps_hb: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64).reshape(-1)
        e1 = np.asarray(self.eps_hbo2, dtype=np.float64).reshape(-1)
        e2 = np.asarray(self.eps_hb, dtype=np.float64).reshape(-1)
        if not (len(wl) == len(e1) == len(e2)):
            raise DataError(f"column lengths differ: {len(wl)}, {len(e1)}, {len(e2)}")
        if len(wl) < 2:
            raise DataError("extinction table needs at least two wavelengths")
        order = np.argsort(wl)
        wl, e1, e2 = wl[order], e1[order], e2[order]
        if np.any(np.diff(wl) <= 0):
            raise DataError("extinction table has duplicate wavelengths")
        if not (np.all(np.isfinite(e1)) and np.all(np.isfinite(e2))):
            raise DataError("extinction coefficients must be finite")
        if np.any(e1 <= 0) or np.any(e2 <= 0):
            raise DataError("extinction coefficients must be positive")
        object.__setattr__(self, "wavelengths_nm", wl)
        object.__setattr__(self, "eps_hbo2", e1)
        object.__setattr__(self, "eps_hb", e2)

    def covers(self, wavelengths_nm) -> bool:
        wl = np.asarray(wavelengths_nm, dtype=np.float64)
        return bool(wl.min() >= self.wavelengths_nm[0]
                    and wl.max() <= self.wavelengths_nm[-1])

    def resample(self, wavelengths_nm):
        """(eps_hbo2, eps_hb) linearly interpolated onto the given grid."""
        wl = np.asarray(wavelengths_nm, dtype=np.float64).reshape(-1)
        if not self.covers(wl):
            raise DataError(
                f"extinction table spans {self.wavelengths_nm[0]:g}-"
                f"{self.wavelengths_nm[-1]:g} nm and cannot cover "
                f"{wl.min():g}-{wl.max():g} nm")
        return (np.interp(wl, self.wavelengths_nm, self.eps_hbo2),
                np.interp(wl, self.wavelengths_nm, self.eps_hb))


def save_extinction(path, table: ExtinctionTable) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wavelength_nm", "eps_hbo2", "eps_hb"])
        for wl, e1, e2 in zip(table.wavelengths_nm, table.eps_hbo2, table.eps_hb):
            writer.writerow([repr(float(wl)), repr(float(e1)), repr(float(e2))])


def load_extinction(path) -> ExtinctionTable:
    try:
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["wavelength_nm", "eps_hbo2", "eps_hb"]:
                raise DataError(
                    f"{path}: expected header wavelength_nm,eps_hbo2,eps_hb, got {header}")
            rows = [[float(x) for x in row] for row in reader if row]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: malformed row: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: extinction table is empty")
    data = np.array(rows)
    return ExtinctionTable(data[:, 0], data[:, 1], data[:, 2])


# ---------------------------------------------------------------------------
# Narrow-band imaging
# ---------------------------------------------------------------------------

@dataclass
class NarrowBandImage:
    """False-color composite plus the bands that actually supplied it."""

    image: np.ndarray  # (h, w) for one request, (h, w, 3) for two
    band_indices: list
    band_wavelengths_nm: list
    requested_nm: list


def narrow_band(msi: SpectralStack,
                requested_nm=DEFAULT_NARROW_BANDS_NM) -> NarrowBandImage:
    """Nearest-band selection with a two-band false-color composite.

    Each requested wavelength maps to the nearest stack band; a request
    that is not on the band grid is substituted with a warning.  With two
    requests the shorter-wavelength band drives green and blue and the
    longer drives red (the usual narrow-band display convention); a
    single request returns that band's data unmodified.
    """
    requests = [float(r) for r in np.atleast_1d(np.asarray(requested_nm, dtype=np.float64))]
    if not requests:
        raise ConfigError("narrow_band needs at least one wavelength request")
    if len(requests) > 2:
        raise ConfigError(f"false color uses at most two bands, got {len(requests)} requests")
    indices, actuals = [], []
    for req in requests:
        idx = msi.band_near(req)
        actual = float(msi.wavelengths_nm[idx])
        if abs(actual - req) > 1e-9:
            warnings.warn(f"no {req:g} nm band on the stack grid; "
                          f"substituting nearest band at {actual:g} nm")
        indices.append(idx)
        actuals.append(actual)
    if len(indices) == 1:
        image = msi.band(indices[0]).astype(np.float64)
    else:
        pair = sorted(zip(actuals, indices))
        short = msi.band(pair[0][1]).astype(np.float64)
        long_ = msi.band(pair[1][1]).astype(np.float64)
        image = np.stack([long_, short, short], axis=-1)
    return NarrowBandImage(image, indices, actuals, requests)


# ---------------------------------------------------------------------------
# Oxygen saturation
# ---------------------------------------------------------------------------

@dataclass
class Sao2Result:
    """Per-pixel saturation with its validity mask and fit quality."""

    sao2: np.ndarray  # (h, w), NaN where undefined
    defined: np.ndarray  # (h, w) bool
    residual_rms: np.ndarray  # (h, w) absorbance-fit RMS, NaN where undefined
    coefficients: np.ndarray  # (3, h, w): HbO2, Hb, offset

    def summary(self) -> dict:
        if not self.defined.any():
            return {"defined_fraction": 0.0, "mean": None, "min": None, "max": None}
        vals = self.sao2[self.defined]
        return {"defined_fraction": float(self.defined.mean()),
                "mean": float(vals.mean()),
                "min": float(vals.min()),
                "max": float(vals.max())}


def oxygen_saturation(msi: SpectralStack, ext: ExtinctionTable,
                      i0=255.0, blood_min: float = 1e-9) -> Sao2Result:
    """Unmix per-pixel absorbance into hemoglobin fractions.

    Absorbance A = -log(I / i0) is fit per pixel as
    c1 * eps_HbO2 + c2 * eps_Hb + c3 with c1, c2 >= 0 and c3 free (the
    offset absorbs scattering loss); SaO2 = c1 / (c1 + c2).  Pixels with
    any nonpositive intensity, or with c1 + c2 below ``blood_min`` (no
    blood signal), are flagged undefined rather than forced to a value.

    The constrained fit is exact: of the four sign patterns (each of
    c1, c2 zero or free), the feasible solve with the smallest residual
    is the nonnegative least-squares optimum.
    """
    i0 = np.asarray(i0, dtype=np.float64)
    if i0.ndim == 0:
        i0 = np.full(msi.bands, float(i0))
    if i0.shape != (msi.bands,):
        raise ShapeError(f"i0 must be scalar or ({msi.bands},), got {i0.shape}")
    if np.any(i0 <= 0):
        raise ConfigError("reference illumination i0 must be positive")
    e1, e2 = ext.resample(msi.wavelengths_nm)

    bands, h, w = msi.bands, msi.height, msi.width
    intensity = msi.values.astype(np.float64).reshape(bands, -1)
    valid = np.all(intensity > 0, axis=0)
    n = intensity.shape[1]

    absorb = np.zeros((bands, n))
    with np.errstate(divide="ignore", invalid="ignore"):
        absorb[:, valid] = -np.log(intensity[:, valid] / i0[:, None])

    m = np.stack([e1, e2, np.ones(bands)], axis=1)  # (bands, 3)
    cases = ((0, 1, 2), (1, 2), (0, 2), (2,))  # active columns per sign pattern
    big = np.inf
    best_res = np.full(n, big)
    best_coef = np.zeros((3, n))
    for cols in cases:
        sub = m[:, cols]
        coef_sub, *_ = np.linalg.lstsq(sub, absorb, rcond=None)
        fit = sub @ coef_sub
        res = np.sum((fit - absorb) ** 2, axis=0)
        coef = np.zeros((3, n))
        coef[list(cols)] = coef_sub
        feasible = (coef[0] >= -1e-12) & (coef[1] >= -1e-12)
        res = np.where(feasible, res, big)
        better = res < best_res
        best_res = np.where(better, res, best_res)
        best_coef[:, better] = coef[:, better]

    c1 = np.maximum(best_coef[0], 0.0)
    c2 = np.maximum(best_coef[1], 0.0)
    total = c1 + c2
    defined = valid & (total >= blood_min)
    sao2 = np.full(n, np.nan)
    sao2[defined] = c1[defined] / total[defined]
    rms = np.full(n, np.nan)
    rms[valid] = np.sqrt(best_res[valid] / bands)
    best_coef[:, ~valid] = np.nan
    return Sao2Result(sao2.reshape(h, w), defined.reshape(h, w),
                      rms.reshape(h, w), best_coef.reshape(3, h, w))


# ---------------------------------------------------------------------------
# Draping maps onto clouds
# ---------------------------------------------------------------------------

def drape_overlay(cloud: PointCloud, image: np.ndarray,
                  cam: PinholeCamera) -> PointCloud:
    """Attach per-point values sampled from a camera-aligned map.

    Each 3D point (camera frame) projects into the image and samples it
    bilinearly; points behind the camera or projecting outside the frame
    carry NaN.  NaNs already in the map (e.g. undefined SaO2 pixels)
    propagate into any sample that touches them.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
        squeeze = True
    elif img.ndim == 3:
        squeeze = False
    else:
        raise ShapeError(f"map must be (h, w) or (h, w, c), got {img.shape}")
    if img.shape[:2] != (cam.height, cam.width):
        raise ShapeError(f"map shape {img.shape[:2]} does not match camera "
                         f"{cam.height}x{cam.width}")

    n, channels = len(cloud), img.shape[2]
    values = np.full((n, channels), np.nan)
    if n:
        uv = cam.project(cloud.points)
        ok = (cloud.points[:, 2] > 0) & np.all(np.isfinite(uv), axis=1)
        ok &= cam.contains(uv)
        if ok.any():
            u, v = uv[ok, 0], uv[ok, 1]
            u0 = np.clip(np.floor(u).astype(int), 0, cam.width - 2)
            v0 = np.clip(np.floor(v).astype(int), 0, cam.height - 2)
            fu = (u - u0)[:, None]
            fv = (v - v0)[:, None]
            values[ok] = ((1 - fv) * ((1 - fu) * img[v0, u0] + fu * img[v0, u0 + 1])
                          + fv * ((1 - fu) * img[v0 + 1, u0] + fu * img[v0 + 1, u0 + 1]))
    out = values[:, 0] if squeeze else values
    return PointCloud(cloud.points.copy(), scale_status=cloud.scale_status,
                      source=cloud.source, ids=cloud.ids, values=out,
                      per_point_error=cloud.per_point_error)
