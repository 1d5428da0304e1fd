"""Spectral stacks, camera responses, sampling spots and synthetic scenes.

A :class:`SpectralStack` is a dense multispectral cube ``(bands, h, w)`` in
float32, band-sequential, values in ``[0, 255]``, with strictly increasing
band wavelengths.  An RGB view of a stack is produced by a 3-row camera
response matrix; sparse spectral samples live at spot locations described
by a :class:`SpotSet`, from which Gaussian density maps are derived.

The synthetic generator produces stacks whose RGB projection is ambiguous
on purpose: every stack carries a smooth spectral component lying in the
null space of the camera response, so sparse spectral samples contain
information that no RGB-only model can recover.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

#: 24 bands, 460 nm to 690 nm in 10 nm steps.
DEFAULT_WAVELENGTHS_NM = tuple(float(w) for w in range(460, 700, 10))

DENSITY_SIGMA_PX = 2.0
SPARSE_THRESHOLD = 0.05


def _format_float(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# SpectralStack
# ---------------------------------------------------------------------------

@dataclass
class SpectralStack:
    """Dense multispectral cube, band-sequential (bands, height, width)."""

    values: np.ndarray
    wavelengths_nm: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.wavelengths_nm = np.ascontiguousarray(self.wavelengths_nm, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"stack must be (bands, h, w), got shape {self.values.shape}")
        if self.wavelengths_nm.ndim != 1 or len(self.wavelengths_nm) != self.values.shape[0]:
            raise DataError(
                f"wavelength count {self.wavelengths_nm.shape} does not match {self.values.shape[0]} bands"
            )
        if len(self.wavelengths_nm) > 1 and not np.all(np.diff(self.wavelengths_nm) > 0):
            raise DataError("band wavelengths must be strictly increasing")
        lo, hi = float(self.values.min()), float(self.values.max())
        if lo < 0.0 or hi > 255.0:
            raise DataError(f"stack values must lie in [0, 255], got range [{lo}, {hi}]")

    @classmethod
    def from_array(cls, values, wavelengths_nm, clip: bool = False) -> "SpectralStack":
        """Build a stack, optionally clipping values into [0, 255] first."""
        values = np.asarray(values, dtype=np.float32)
        if clip:
            values = np.clip(values, 0.0, 255.0)
        return cls(values, np.asarray(wavelengths_nm, dtype=np.float64))

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def band(self, index: int) -> np.ndarray:
        return self.values[index]

    def band_near(self, wavelength_nm: float) -> int:
        """Index of the band whose wavelength is closest to the request."""
        return int(np.argmin(np.abs(self.wavelengths_nm - wavelength_nm)))

    def pixel_spectra(self) -> np.ndarray:
        """Reshape to (h*w, bands): one spectral vector per pixel."""
        return np.ascontiguousarray(self.values.reshape(self.bands, -1).T)


def save_stack(path, stack: SpectralStack) -> None:
    """Write the JSON header and the sibling raw payload next to it."""
    path = Path(path)
    raw_name = path.stem + ".raw"
    header = {
        "width": stack.width,
        "height": stack.height,
        "channels": stack.bands,
        "wavelengths_nm": [float(w) for w in stack.wavelengths_nm],
        "dtype": "f32le",
        "order": "band-sequential",
        "payload": raw_name,
    }
    path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    data = stack.values.astype("<f4")
    (path.parent / raw_name).write_bytes(data.tobytes())


def load_stack(path) -> SpectralStack:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read stack header {path}: {exc}") from exc
    for key in ("width", "height", "channels", "wavelengths_nm", "dtype", "order", "payload"):
        if key not in header:
            raise DataError(f"stack header {path} missing field {key!r}")
    if header["dtype"] != "f32le":
        raise DataError(f"unsupported stack dtype {header['dtype']!r}, expected 'f32le'")
    if header["order"] != "band-sequential":
        raise DataError(f"unsupported stack order {header['order']!r}, expected 'band-sequential'")
    w, h, c = int(header["width"]), int(header["height"]), int(header["channels"])
    wavelengths = np.asarray(header["wavelengths_nm"], dtype=np.float64)
    if len(wavelengths) != c:
        raise DataError(f"stack header {path}: {len(wavelengths)} wavelengths for {c} channels")
    raw_path = path.parent / header["payload"]
    try:
        blob = raw_path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read stack payload {raw_path}: {exc}") from exc
    expected = w * h * c * 4
    if len(blob) != expected:
        raise DataError(f"stack payload {raw_path}: {len(blob)} bytes, expected {expected}")
    values = np.frombuffer(blob, dtype="<f4").reshape(c, h, w)
    return SpectralStack(values, wavelengths)


# ---------------------------------------------------------------------------
# Camera response
# ---------------------------------------------------------------------------

@dataclass
class CameraResponse:
    """RGB response matrix (3, bands); each row integrates to one."""

    matrix: np.ndarray
    wavelengths_nm: np.ndarray

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        self.wavelengths_nm = np.ascontiguousarray(self.wavelengths_nm, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != 3:
            raise DataError(f"response matrix must be (3, bands), got {self.matrix.shape}")
        if self.matrix.shape[1] != len(self.wavelengths_nm):
            raise DataError("response matrix width does not match wavelength count")
        sums = self.matrix.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise DataError(f"response rows must each sum to 1, got sums {sums}")

    @property
    def bands(self) -> int:
        return self.matrix.shape[1]


def default_response(wavelengths_nm=DEFAULT_WAVELENGTHS_NM) -> CameraResponse:
    """Gaussian R/G/B sensitivities centered at 620, 540 and 470 nm."""
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    centers = (620.0, 540.0, 470.0)
    widths = (45.0, 40.0, 35.0)
    rows = []
    for c, s in zip(centers, widths):
        row = np.exp(-0.5 * ((wl - c) / s) ** 2)
        rows.append(row / row.sum())
    return CameraResponse(np.stack(rows), wl)


def save_response(path, response: CameraResponse) -> None:
    path = Path(path)
    lines = [",".join(_format_float(w) for w in response.wavelengths_nm)]
    for row in response.matrix:
        lines.append(",".join(_format_float(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def load_response(path) -> CameraResponse:
    path = Path(path)
    try:
        rows = [line for line in path.read_text().splitlines() if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read response file {path}: {exc}") from exc
    if len(rows) != 4:
        raise DataError(f"response file {path} must have a wavelength row plus 3 channel rows")
    try:
        parsed = [np.array([float(v) for v in row.split(",")], dtype=np.float64) for row in rows]
    except ValueError as exc:
        raise DataError(f"response file {path}: non-numeric entry: {exc}") from exc
    wl = parsed[0]
    matrix = np.stack(parsed[1:])
    if matrix.shape[1] != len(wl):
        raise DataError(f"response file {path}: ragged rows")
    return CameraResponse(matrix, wl)


def synthesize_rgb(stack: SpectralStack, response: CameraResponse) -> np.ndarray:
    """Project a stack through the camera response: rgb = response * stack.

    Returns (3, h, w) float32 in response row order (conventionally R, G, B).
    The response wavelengths must match the stack's band grid exactly;
    resampling is the caller's job.
    """
    if response.bands != stack.bands or not np.allclose(response.wavelengths_nm, stack.wavelengths_nm):
        raise DataError("camera response is sampled on a different band grid than the stack")
    rgb = np.tensordot(response.matrix, stack.values.astype(np.float64), axes=(1, 0))
    return rgb.astype(np.float32)


def response_centroids_nm(response: CameraResponse) -> np.ndarray:
    """Effective center wavelength of each response row (rows sum to one)."""
    return response.matrix @ response.wavelengths_nm


def rgb_view(stack: SpectralStack, response: CameraResponse) -> SpectralStack:
    """The camera's view of a stack, as a 3-band stack.

    Bands are ordered by the response rows' centroid wavelengths so the
    result is a valid (strictly increasing) spectral stack: blue, green,
    red for a conventional camera.  This is the canonical network input.
    """
    rgb = synthesize_rgb(stack, response)
    centers = response_centroids_nm(response)
    order = np.argsort(centers)
    centers = centers[order]
    if not np.all(np.diff(centers) > 0):
        raise DataError("camera response rows do not have distinct centroid wavelengths")
    return SpectralStack(np.ascontiguousarray(rgb[order]), centers)


# ---------------------------------------------------------------------------
# Spots and density maps
# ---------------------------------------------------------------------------

@dataclass
class SpotSet:
    """Sparse sampling locations in image coordinates (u = column, v = row)."""

    ids: np.ndarray
    uv: np.ndarray
    wavelengths_nm: np.ndarray

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        self.uv = np.ascontiguousarray(self.uv, dtype=np.float64)
        self.wavelengths_nm = np.ascontiguousarray(self.wavelengths_nm, dtype=np.float64)
        n = len(self.ids)
        if self.uv.shape != (n, 2) or len(self.wavelengths_nm) != n:
            raise DataError(
                f"spot set fields disagree: {n} ids, uv {self.uv.shape}, "
                f"{len(self.wavelengths_nm)} wavelengths"
            )
        if len(np.unique(self.ids)) != n:
            raise DataError("spot ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)


def save_spots(path, spots: SpotSet) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "u", "v", "wavelength_nm"])
        for i in range(len(spots)):
            writer.writerow([int(spots.ids[i]), _format_float(spots.uv[i, 0]),
                             _format_float(spots.uv[i, 1]), _format_float(spots.wavelengths_nm[i])])


def load_spots(path) -> SpotSet:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [row for row in reader if row]
    except OSError as exc:
        raise DataError(f"cannot read spot file {path}: {exc}") from exc
    if header != ["id", "u", "v", "wavelength_nm"]:
        raise DataError(f"spot file {path} has header {header}, expected id,u,v,wavelength_nm")
    ids, uv, wl = [], [], []
    for row in rows:
        if len(row) != 4:
            raise DataError(f"spot file {path}: row {row} does not have 4 fields")
        try:
            ids.append(int(row[0]))
            uv.append((float(row[1]), float(row[2])))
            wl.append(float(row[3]))
        except ValueError as exc:
            raise DataError(f"spot file {path}: bad value in row {row}: {exc}") from exc
    return SpotSet(np.array(ids, dtype=np.int64),
                   np.array(uv, dtype=np.float64).reshape(-1, 2),
                   np.array(wl, dtype=np.float64))


def make_density_map(shape_hw: tuple, uv: np.ndarray, sigma: float = DENSITY_SIGMA_PX) -> np.ndarray:
    """Gaussian influence of the nearest spot at every pixel.

    Each spot contributes exp(-d^2 / (2 sigma^2)); overlapping spots are
    combined with max, so the value is exactly 1 at a spot center and
    decays with distance to the closest spot.  Returns (h, w) float32.
    """
    if sigma <= 0:
        raise DataError(f"density sigma must be positive, got {sigma}")
    h, w = shape_hw
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    if len(uv) == 0:
        return np.zeros((h, w), dtype=np.float32)
    cols = np.arange(w, dtype=np.float64)[None, None, :]
    rows = np.arange(h, dtype=np.float64)[None, :, None]
    du = cols - uv[:, 0][:, None, None]
    dv = rows - uv[:, 1][:, None, None]
    d2 = du * du + dv * dv
    density = np.exp(-d2 / (2.0 * sigma * sigma)).max(axis=0)
    return density.astype(np.float32)


def make_sparse_stack(stack: SpectralStack, density_hsi: np.ndarray,
                      threshold: float = SPARSE_THRESHOLD) -> np.ndarray:
    """Spectral samples weighted by spot density, zeroed below threshold.

    Returns (bands, h, w) float32: density * stack where the density map
    reaches at least ``threshold``, exactly zero elsewhere.
    """
    density_hsi = np.asarray(density_hsi, dtype=np.float32)
    if density_hsi.shape != (stack.height, stack.width):
        raise DataError(f"density map {density_hsi.shape} does not match stack {stack.height}x{stack.width}")
    mask = density_hsi >= threshold
    sparse = stack.values * density_hsi[None, :, :]
    sparse[:, ~mask] = 0.0
    return sparse.astype(np.float32)


@dataclass
class Sample:
    """All per-stack model inputs derived from one truth stack."""

    stack: SpectralStack
    spots: SpotSet
    rgb: np.ndarray
    density_hsi: np.ndarray
    density_rgb: np.ndarray
    sparse: np.ndarray


def prepare_sample(stack: SpectralStack, spots: SpotSet, response: CameraResponse,
                   sigma: float = DENSITY_SIGMA_PX, threshold: float = SPARSE_THRESHOLD) -> Sample:
    """Derive the RGB view, the density pair and the sparse stack."""
    density_hsi = make_density_map((stack.height, stack.width), spots.uv, sigma)
    density_rgb = (1.0 - density_hsi).astype(np.float32)
    return Sample(
        stack=stack,
        spots=spots,
        rgb=synthesize_rgb(stack, response),
        density_hsi=density_hsi,
        density_rgb=density_rgb,
        sparse=make_sparse_stack(stack, density_hsi, threshold),
    )


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Augment:
    """Composable geometric augmentation: flips first, then CCW turns."""

    flip_h: bool = False
    flip_v: bool = False
    quarter_turns: int = 0


def apply_augment(stack: SpectralStack, aug: Augment) -> SpectralStack:
    vals = stack.values
    if aug.flip_h:
        vals = vals[:, :, ::-1]
    if aug.flip_v:
        vals = vals[:, ::-1, :]
    k = aug.quarter_turns % 4
    if k:
        vals = np.rot90(vals, k, axes=(1, 2))
    return SpectralStack(np.ascontiguousarray(vals), stack.wavelengths_nm)


def apply_augment_points(uv: np.ndarray, shape_hw: tuple, aug: Augment) -> np.ndarray:
    """Transform (u, v) coordinates the same way apply_augment moves pixels."""
    h, w = shape_hw
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2).copy()
    if aug.flip_h:
        uv[:, 0] = (w - 1) - uv[:, 0]
    if aug.flip_v:
        uv[:, 1] = (h - 1) - uv[:, 1]
    for _ in range(aug.quarter_turns % 4):
        u, v = uv[:, 0].copy(), uv[:, 1].copy()
        uv[:, 0] = v
        uv[:, 1] = (w - 1) - u
        h, w = w, h
    return uv


def crop_stack(stack: SpectralStack, top: int, left: int, height: int, width: int) -> SpectralStack:
    if top < 0 or left < 0 or top + height > stack.height or left + width > stack.width:
        raise DataError(
            f"crop ({top},{left})+{height}x{width} exceeds stack {stack.height}x{stack.width}"
        )
    vals = stack.values[:, top : top + height, left : left + width]
    return SpectralStack(np.ascontiguousarray(vals), stack.wavelengths_nm)


def crop_points(uv: np.ndarray, top: int, left: int, height: int, width: int):
    """Shift points into crop coordinates; returns (uv_cropped, keep_mask)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    shifted = uv - np.array([left, top], dtype=np.float64)
    keep = ((shifted[:, 0] >= 0) & (shifted[:, 0] <= width - 1)
            & (shifted[:, 1] >= 0) & (shifted[:, 1] <= height - 1))
    return shifted[keep], keep


def random_augment(rng: np.random.Generator) -> Augment:
    return Augment(flip_h=bool(rng.integers(2)), flip_v=bool(rng.integers(2)),
                   quarter_turns=int(rng.integers(4)))


# ---------------------------------------------------------------------------
# Fold splitting
# ---------------------------------------------------------------------------

def split_folds(n: int, k: int, seed: int = 0) -> list:
    """Shuffle `n` indices into `k` folds whose sizes differ by at most one."""
    if not 2 <= k <= n:
        raise DataError(f"fold count must satisfy 2 <= k <= n, got k={k} n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(fold) for fold in np.array_split(perm, k)]


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class StackDataset:
    """Stacks with their sampling spots and the shared camera response."""

    stacks: list
    spot_sets: list
    response: CameraResponse

    def __post_init__(self):
        if len(self.stacks) != len(self.spot_sets):
            raise DataError(f"{len(self.stacks)} stacks but {len(self.spot_sets)} spot sets")

    def __len__(self) -> int:
        return len(self.stacks)

    def subset(self, indices) -> "StackDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return StackDataset([self.stacks[i] for i in indices],
                            [self.spot_sets[i] for i in indices], self.response)


@dataclass
class SyntheticConfig:
    """Knobs for the synthetic stack generator."""

    width: int = 16
    height: int = 16
    n_stacks: int = 60
    wavelengths_nm: tuple = DEFAULT_WAVELENGTHS_NM
    species: str = "PB"
    endmembers_min: int = 3
    endmembers_max: int = 5
    spot_count: int = 12
    spot_sigma: float = DENSITY_SIGMA_PX
    ambiguity_min: float = 6.0
    ambiguity_max: float = 14.0
    seed: int = 0

    def __post_init__(self):
        for name in ("width", "height", "n_stacks", "spot_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 1 <= self.endmembers_min <= self.endmembers_max:
            raise ConfigError(f"endmember range [{self.endmembers_min}, "
                              f"{self.endmembers_max}] is invalid")
        if self.spot_sigma <= 0:
            raise ConfigError(f"spot_sigma must be positive, got {self.spot_sigma}")
        if not 0 <= self.ambiguity_min <= self.ambiguity_max:
            raise ConfigError(f"ambiguity range [{self.ambiguity_min}, "
                              f"{self.ambiguity_max}] is invalid")
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        if wl.ndim != 1 or len(wl) < 2 or not np.all(np.diff(wl) > 0):
            raise ConfigError("wavelengths_nm must be >= 2 strictly increasing values")


@dataclass
class SyntheticDataset(StackDataset):
    config: SyntheticConfig = None


def species_shift_nm(species: str) -> float:
    """Deterministic spectral shift for a species label, within +-30 nm."""
    return float(zlib.crc32(species.encode("utf-8")) % 61) - 30.0


def _resize_bilinear(field: np.ndarray, h: int, w: int) -> np.ndarray:
    ch, cw = field.shape
    rows = np.linspace(0.0, ch - 1.0, h)
    cols = np.linspace(0.0, cw - 1.0, w)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, ch - 1)
    c1 = np.minimum(c0 + 1, cw - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = field[np.ix_(r0, c0)] * (1 - fc) + field[np.ix_(r0, c1)] * fc
    bot = field[np.ix_(r1, c0)] * (1 - fc) + field[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def _smooth_field(rng: np.random.Generator, h: int, w: int, coarse: int = 5) -> np.ndarray:
    return _resize_bilinear(rng.normal(size=(coarse, coarse)), h, w)


def gaussian_spectrum(wavelengths_nm, center_nm, width_nm, amplitude, base) -> np.ndarray:
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    return base + amplitude * np.exp(-0.5 * ((wl - center_nm) / width_nm) ** 2)


def _nullspace_component(response: CameraResponse, rng: np.random.Generator) -> np.ndarray:
    """A smooth spectral curve invisible to the RGB camera.

    Projects a random smooth curve onto the null space of the response
    matrix, then normalizes to unit peak.  Adding any multiple of it to a
    pixel spectrum leaves the RGB projection unchanged.
    """
    wl = response.wavelengths_nm
    span = wl[-1] - wl[0]
    t = (wl - wl[0]) / span
    curve = np.zeros_like(wl)
    for harmonic in range(2, 7):
        curve += rng.normal() * np.sin(np.pi * harmonic * t) / harmonic
    r = response.matrix
    coeff = np.linalg.solve(r @ r.T, r @ curve)
    residual = curve - r.T @ coeff
    peak = np.max(np.abs(residual))
    if peak < 1e-12:
        return np.zeros_like(wl)
    return residual / peak


def generate_stack(config: SyntheticConfig, response: CameraResponse,
                   rng: np.random.Generator) -> tuple:
    """One synthetic (stack, spots) pair.

    Pixel spectra are smooth mixtures of Gaussian endmember spectra with
    spatially smooth abundances, plus a camera-invisible spectral residual
    modulated by a smooth field.  Values stay inside [0, 255] by
    construction margins; a final clip guards the tails.
    """
    h, w = config.height, config.width
    wl = np.asarray(config.wavelengths_nm, dtype=np.float64)
    shift = species_shift_nm(config.species)

    n_end = int(rng.integers(config.endmembers_min, config.endmembers_max + 1))
    spectra = []
    for _ in range(n_end):
        center = rng.uniform(wl[0] + 20.0, wl[-1] - 20.0) + shift
        width = rng.uniform(35.0, 70.0)
        amp = rng.uniform(80.0, 160.0)
        base = rng.uniform(20.0, 50.0)
        spectra.append(gaussian_spectrum(wl, center, width, amp, base))
    spectra = np.stack(spectra)  # (n_end, bands)

    fields = np.stack([_smooth_field(rng, h, w) for _ in range(n_end)])  # (n_end, h, w)
    fields = np.exp(2.0 * fields)
    abundance = fields / fields.sum(axis=0, keepdims=True)
    cube = np.tensordot(spectra.T, abundance, axes=(1, 0))  # (bands, h, w)

    residual = _nullspace_component(response, rng)
    amplitude = rng.uniform(config.ambiguity_min, config.ambiguity_max)
    modulation = 0.5 * (1.0 + np.tanh(_smooth_field(rng, h, w)))
    cube = cube + amplitude * residual[:, None, None] * modulation[None, :, :]

    stack = SpectralStack.from_array(cube, wl, clip=True)

    n_spots = min(config.spot_count, h * w)
    margin = 1 if min(h, w) > 4 else 0
    grid_r = np.arange(margin, h - margin)
    grid_c = np.arange(margin, w - margin)
    cells = np.array([(c, r) for r in grid_r for c in grid_c], dtype=np.float64)
    pick = rng.choice(len(cells), size=min(n_spots, len(cells)), replace=False)
    uv = cells[pick]
    spot_wl = wl[np.arange(len(uv)) % len(wl)]
    spots = SpotSet(np.arange(len(uv)), uv, spot_wl)
    return stack, spots


def generate_synthetic_dataset(config: SyntheticConfig,
                               response: CameraResponse | None = None) -> SyntheticDataset:
    if response is None:
        response = default_response(config.wavelengths_nm)
    rng = np.random.default_rng(config.seed)
    stacks, spot_sets = [], []
    for _ in range(config.n_stacks):
        stack, spots = generate_stack(config, response, rng)
        stacks.append(stack)
        spot_sets.append(spots)
    return SyntheticDataset(stacks, spot_sets, response, config)


def save_dataset(directory, dataset: SyntheticDataset) -> None:
    """Write stacks, spot files and the shared response under a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_response(directory / "response.csv", dataset.response)
    for i, (stack, spots) in enumerate(zip(dataset.stacks, dataset.spot_sets)):
        save_stack(directory / f"stack_{i:04d}.json", stack)
        save_spots(directory / f"spots_{i:04d}.csv", spots)


def load_dataset(directory) -> StackDataset:
    """Read back a dataset directory written by save_dataset."""
    directory = Path(directory)
    response = load_response(directory / "response.csv")
    stacks, spot_sets = [], []
    for stack_path in sorted(directory.glob("stack_*.json")):
        index = stack_path.stem.split("_")[1]
        stacks.append(load_stack(stack_path))
        spot_sets.append(load_spots(directory / f"spots_{index}.csv"))
    if not stacks:
        raise DataError(f"no stacks found under {directory}")
    return StackDataset(stacks, spot_sets, response)
