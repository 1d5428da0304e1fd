"""Spectral recovery networks.

Model 1 maps each RGB pixel, treated as a 3-sample spectrum, to a dense
spectrum through four transposed convolutions (spectral upscaling) plus a
residual high-frequency-extraction block.  Model 2 wraps the same core and
adds a spatial merge stage: the sparse measured stack is concatenated with
the density-weighted recovered stack and a single 2D convolution produces
an additive correction.

Networks are stored as :class:`NetworkParams`, an ordered, named, freezable
list of tensors, serialized as a JSON manifest plus a raw float32 payload.
All forward passes here run in float32 and operate on values normalized to
[0, 1]; the public ``*_predict`` helpers handle the [0, 255] convention of
stacks at the boundary.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .dataset import DEFAULT_WAVELENGTHS_NM, SpectralStack
from .errors import ConfigError, DataError, ShapeError

MODEL1_PREFIX = "model1core/"
MERGE_PREFIX = "merge/"

_RELU = tc.LayerSpec("relu")
_ADD = tc.LayerSpec("residual-add")
_CAT = tc.LayerSpec("concat")
_PROD = tc.LayerSpec("elementwise-product")


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------

def plan_upscale_layers(spectral_in: int, spectral_out: int, hidden: int,
                        kernel: int = 3) -> tuple:
    """Choose four tconv1d layers mapping length spectral_in -> spectral_out.

    Uses as many stride-2 doublings as needed (at most 3, the rest stride 1)
    and absorbs the leftover length arithmetic into explicit output crops.
    """
    if spectral_in < 2:
        raise ConfigError(f"spectral_in must be >= 2, got {spectral_in}")
    if spectral_out < spectral_in:
        raise ConfigError(f"spectral_out {spectral_out} < spectral_in {spectral_in} is not an upscale")
    doublings = 0
    while spectral_in * 2**doublings < spectral_out:
        doublings += 1
        if doublings > 3:
            raise ConfigError(
                f"cannot reach {spectral_out} bands from {spectral_in} with four layers "
                f"(max {spectral_in * 8})"
            )
    strides = [2] * doublings + [1] * (4 - doublings)
    channels = [1] + [hidden] * 3 + [1]
    layers = []
    length = spectral_in
    for i, stride in enumerate(strides):
        target = min(spectral_out, stride * length)
        raw = stride * (length - 1) + kernel
        crop_total = raw - target
        if crop_total < 0:
            raise ConfigError(f"layer {i}: target length {target} exceeds raw output {raw}")
        crop = (crop_total // 2, crop_total - crop_total // 2)
        layers.append(tc.LayerSpec("tconv1d", kernel, stride, channels[i], channels[i + 1],
                                   0, crop=crop))
        length = target
    if length != spectral_out:
        raise ConfigError(f"planned upscale reaches length {length}, wanted {spectral_out}")
    return tuple(layers)


def plan_hfe_layers(spectral_out: int, hidden: int, kernel: int = 3) -> tuple:
    """Residual detail block: two length-preserving conv1d layers."""
    pad = (kernel - 1) // 2
    if 2 * pad != kernel - 1:
        raise ConfigError(f"hfe kernel must be odd, got {kernel}")
    return (
        tc.LayerSpec("conv1d", kernel, 1, 1, hidden, pad),
        tc.LayerSpec("conv1d", kernel, 1, hidden, 1, pad),
    )


@dataclass(frozen=True)
class ArchConfig:
    """Static architecture description shared by both models."""

    spectral_in: int = 3
    spectral_out: int = 24
    hidden_features: int = 32
    upscale_layers: tuple = ()
    hfe_layers: tuple = ()
    merge_kernel: int = 5
    merge_density: str = "hsi"
    wavelengths_nm: tuple = DEFAULT_WAVELENGTHS_NM


def default_arch(spectral_in: int = 3, spectral_out: int = 24, hidden_features: int = 32,
                 merge_kernel: int = 5, merge_density: str = "hsi",
                 wavelengths_nm=None) -> ArchConfig:
    if wavelengths_nm is None:
        if spectral_out == len(DEFAULT_WAVELENGTHS_NM):
            wavelengths_nm = DEFAULT_WAVELENGTHS_NM
        else:
            wavelengths_nm = tuple(float(460 + 10 * i) for i in range(spectral_out))
    cfg = ArchConfig(
        spectral_in=spectral_in,
        spectral_out=spectral_out,
        hidden_features=hidden_features,
        upscale_layers=plan_upscale_layers(spectral_in, spectral_out, hidden_features),
        hfe_layers=plan_hfe_layers(spectral_out, hidden_features),
        merge_kernel=merge_kernel,
        merge_density=merge_density,
        wavelengths_nm=tuple(float(w) for w in wavelengths_nm),
    )
    validate_arch(cfg)
    return cfg


def validate_arch(cfg: ArchConfig) -> None:
    if len(cfg.upscale_layers) != 4:
        raise ConfigError(f"upscale stage must have exactly 4 layers, got {len(cfg.upscale_layers)}")
    if any(spec.kind != "tconv1d" for spec in cfg.upscale_layers):
        raise ConfigError("every upscale layer must be a tconv1d")
    length = cfg.spectral_in
    channels = 1
    for i, spec in enumerate(cfg.upscale_layers):
        if spec.in_channels != channels:
            raise ConfigError(f"upscale layer {i} expects {spec.in_channels} channels, chain has {channels}")
        length = spec.out_length(length)
        channels = spec.out_channels
    if length != cfg.spectral_out or channels != 1:
        raise ConfigError(
            f"upscale stage maps {cfg.spectral_in} -> length {length} x {channels} channels, "
            f"wanted {cfg.spectral_out} x 1"
        )
    channels = 1
    for i, spec in enumerate(cfg.hfe_layers):
        if spec.kind != "conv1d":
            raise ConfigError("hfe layers must be conv1d")
        if spec.in_channels != channels:
            raise ConfigError(f"hfe layer {i} expects {spec.in_channels} channels, chain has {channels}")
        if spec.out_length(cfg.spectral_out) != cfg.spectral_out:
            raise ConfigError(f"hfe layer {i} does not preserve spectral length {cfg.spectral_out}")
        channels = spec.out_channels
    if channels != 1:
        raise ConfigError("hfe block must end with a single channel")
    if cfg.merge_kernel < 1 or cfg.merge_kernel % 2 == 0:
        raise ConfigError(f"merge kernel must be odd and positive, got {cfg.merge_kernel}")
    if cfg.merge_density not in ("hsi", "rgb"):
        raise ConfigError(f"merge_density must be 'hsi' or 'rgb', got {cfg.merge_density!r}")
    if len(cfg.wavelengths_nm) != cfg.spectral_out:
        raise ConfigError(
            f"{len(cfg.wavelengths_nm)} output wavelengths for {cfg.spectral_out} bands"
        )


def _merge_spec(cfg: ArchConfig) -> tc.LayerSpec:
    k = cfg.merge_kernel
    c = cfg.spectral_out
    return tc.LayerSpec("conv2d", k, 1, 2 * c, c, (k - 1) // 2)


def _layer_to_dict(spec: tc.LayerSpec) -> dict:
    return {
        "kind": spec.kind,
        "kernel_size": spec.kernel_size,
        "stride": spec.stride,
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "padding": spec.padding,
        "has_bias": spec.has_bias,
        "crop": list(spec.crop),
    }


def _layer_from_dict(d: dict) -> tc.LayerSpec:
    return tc.LayerSpec(d["kind"], d["kernel_size"], d["stride"], d["in_channels"],
                        d["out_channels"], d["padding"], d["has_bias"], tuple(d["crop"]))


def arch_to_dict(cfg: ArchConfig) -> dict:
    return {
        "spectral_in": cfg.spectral_in,
        "spectral_out": cfg.spectral_out,
        "hidden_features": cfg.hidden_features,
        "upscale_layers": [_layer_to_dict(s) for s in cfg.upscale_layers],
        "hfe_layers": [_layer_to_dict(s) for s in cfg.hfe_layers],
        "merge_kernel": cfg.merge_kernel,
        "merge_density": cfg.merge_density,
        "wavelengths_nm": [float(w) for w in cfg.wavelengths_nm],
    }


def arch_from_dict(d: dict) -> ArchConfig:
    try:
        cfg = ArchConfig(
            spectral_in=int(d["spectral_in"]),
            spectral_out=int(d["spectral_out"]),
            hidden_features=int(d["hidden_features"]),
            upscale_layers=tuple(_layer_from_dict(s) for s in d["upscale_layers"]),
            hfe_layers=tuple(_layer_from_dict(s) for s in d["hfe_layers"]),
            merge_kernel=int(d["merge_kernel"]),
            merge_density=str(d["merge_density"]),
            wavelengths_nm=tuple(float(w) for w in d["wavelengths_nm"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed architecture config: {exc}") from exc
    validate_arch(cfg)
    return cfg


def arch_digest(cfg: ArchConfig) -> str:
    canonical = json.dumps(arch_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class ParamEntry:
    name: str
    tensor: np.ndarray
    frozen: bool = False


@dataclass
class NetworkParams:
    """Ordered named tensors plus the architecture they belong to."""

    arch_id: str
    config: ArchConfig
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if self.arch_id not in ("model1", "model2"):
            raise ConfigError(f"arch_id must be 'model1' or 'model2', got {self.arch_id!r}")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DataError("parameter names must be unique")

    def values(self) -> dict:
        return {e.name: e.tensor for e in self.entries}

    def frozen_names(self) -> frozenset:
        return frozenset(e.name for e in self.entries if e.frozen)

    def names(self) -> list:
        return [e.name for e in self.entries]

    def with_values(self, values: dict) -> "NetworkParams":
        """Same structure and flags, tensors replaced by name."""
        entries = []
        for e in self.entries:
            if e.name not in values:
                raise DataError(f"missing tensor for {e.name!r}")
            t = np.ascontiguousarray(values[e.name], dtype=np.float32)
            if t.shape != e.tensor.shape:
                raise ShapeError(f"{e.name}: shape {t.shape} != {e.tensor.shape}")
            entries.append(ParamEntry(e.name, t, e.frozen))
        return NetworkParams(self.arch_id, self.config, entries)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch_id, self.config,
                             [ParamEntry(e.name, e.tensor.copy(), e.frozen) for e in self.entries])

    def tensor(self, name: str) -> np.ndarray:
        for e in self.entries:
            if e.name == name:
                return e.tensor
        raise DataError(f"no parameter named {name!r}")


def _he_init(rng: np.random.Generator, spec: tc.LayerSpec) -> np.ndarray:
    shape = spec.weight_shape()
    if spec.kind == "tconv1d":
        fan_in = spec.in_channels * spec.kernel_size
    elif spec.kind == "conv1d":
        fan_in = spec.in_channels * spec.kernel_size
    else:
        fan_in = spec.in_channels * spec.kernel_size**2
    std = np.sqrt(2.0 / fan_in)
    return (rng.normal(0.0, std, size=shape)).astype(np.float32)


def _core_entries(cfg: ArchConfig, rng: np.random.Generator) -> list:
    entries = []
    for i, spec in enumerate(cfg.upscale_layers):
        entries.append(ParamEntry(f"{MODEL1_PREFIX}up{i}/w", _he_init(rng, spec)))
        entries.append(ParamEntry(f"{MODEL1_PREFIX}up{i}/b",
                                  np.zeros(spec.out_channels, dtype=np.float32)))
    for j, spec in enumerate(cfg.hfe_layers):
        entries.append(ParamEntry(f"{MODEL1_PREFIX}hfe{j}/w", _he_init(rng, spec)))
        entries.append(ParamEntry(f"{MODEL1_PREFIX}hfe{j}/b",
                                  np.zeros(spec.out_channels, dtype=np.float32)))
    return entries


def build_model1(cfg: ArchConfig, seed: int = 0) -> NetworkParams:
    """Fresh Model-1 parameters: He-scaled weights, zero biases."""
    validate_arch(cfg)
    rng = np.random.default_rng(seed)
    return NetworkParams("model1", cfg, _core_entries(cfg, rng))


def _merge_entries(cfg: ArchConfig) -> list:
    spec = _merge_spec(cfg)
    # Zero start: the correction vanishes, so a fresh Model 2 reproduces its
    # Model-1 core exactly until the merge stage learns something.
    return [
        ParamEntry(f"{MERGE_PREFIX}conv/w", np.zeros(spec.weight_shape(), dtype=np.float32)),
        ParamEntry(f"{MERGE_PREFIX}conv/b", np.zeros(spec.out_channels, dtype=np.float32)),
    ]


def build_model2(cfg: ArchConfig, seed: int = 0) -> NetworkParams:
    validate_arch(cfg)
    rng = np.random.default_rng(seed)
    return NetworkParams("model2", cfg, _core_entries(cfg, rng) + _merge_entries(cfg))


def init_model2_from_model1(model1: NetworkParams) -> NetworkParams:
    """Model-2 parameters sharing the trained Model-1 core bit-exactly."""
    if model1.arch_id != "model1":
        raise ConfigError(f"expected model1 params, got {model1.arch_id!r}")
    core = [ParamEntry(e.name, e.tensor.copy(), False) for e in model1.entries]
    return NetworkParams("model2", model1.config, core + _merge_entries(model1.config))


def set_frozen(params: NetworkParams, name_prefix: str, frozen: bool) -> NetworkParams:
    """Mark every entry whose name starts with the prefix."""
    matched = False
    entries = []
    for e in params.entries:
        if e.name.startswith(name_prefix):
            entries.append(ParamEntry(e.name, e.tensor, frozen))
            matched = True
        else:
            entries.append(ParamEntry(e.name, e.tensor, e.frozen))
    if not matched:
        prefixes = sorted({e.name.split("/")[0] + "/" for e in params.entries})
        raise ConfigError(f"prefix {name_prefix!r} matches no parameter; valid prefixes: {prefixes}")
    return NetworkParams(params.arch_id, params.config, entries)


# ---------------------------------------------------------------------------
# Forward / backward graphs (normalized [0,1] values)
# ---------------------------------------------------------------------------

@dataclass
class CoreTrace:
    """Caches from one core forward pass, consumed once by core_backward."""

    up: list
    hfe: list
    add_cache: tc.FwdCache


def core_forward(cfg: ArchConfig, values: dict, x01: np.ndarray):
    """Model-1 core on pixel spectra: (batch, 1, spectral_in) -> (batch, 1, spectral_out)."""
    t = np.asarray(x01, dtype=np.float32)
    if t.ndim != 3 or t.shape[1] != 1 or t.shape[2] != cfg.spectral_in:
        raise ShapeError(f"core input must be (batch, 1, {cfg.spectral_in}), got {t.shape}")
    up_caches = []
    last = len(cfg.upscale_layers) - 1
    for i, spec in enumerate(cfg.upscale_layers):
        t, c = tc.forward(spec, t, (values[f"{MODEL1_PREFIX}up{i}/w"], values[f"{MODEL1_PREFIX}up{i}/b"]))
        rc = None
        if i < last:
            t, rc = tc.forward(_RELU, t)
        up_caches.append((spec, c, rc))
    shortcut = t
    h = t
    hfe_caches = []
    last_h = len(cfg.hfe_layers) - 1
    for j, spec in enumerate(cfg.hfe_layers):
        h, c = tc.forward(spec, h, (values[f"{MODEL1_PREFIX}hfe{j}/w"], values[f"{MODEL1_PREFIX}hfe{j}/b"]))
        rc = None
        if j < last_h:
            h, rc = tc.forward(_RELU, h)
        hfe_caches.append((spec, c, rc))
    y, add_cache = tc.forward(_ADD, (h, shortcut))
    return y, CoreTrace(up_caches, hfe_caches, add_cache)


def core_backward(cfg: ArchConfig, grad_out: np.ndarray, trace: CoreTrace) -> dict:
    """Parameter gradients of the core; input gradients are discarded."""
    (g_h, g_shortcut), _ = tc.backward(_ADD, grad_out, trace.add_cache)
    grads = {}
    g = g_h
    for j in range(len(trace.hfe) - 1, -1, -1):
        spec, c, rc = trace.hfe[j]
        if rc is not None:
            g, _ = tc.backward(_RELU, g, rc)
        g, (dw, db) = tc.backward(spec, g, c)
        grads[f"{MODEL1_PREFIX}hfe{j}/w"] = dw
        grads[f"{MODEL1_PREFIX}hfe{j}/b"] = db
    g = g + g_shortcut
    for i in range(len(trace.up) - 1, -1, -1):
        spec, c, rc = trace.up[i]
        if rc is not None:
            g, _ = tc.backward(_RELU, g, rc)
        g, (dw, db) = tc.backward(spec, g, c)
        grads[f"{MODEL1_PREFIX}up{i}/w"] = dw
        grads[f"{MODEL1_PREFIX}up{i}/b"] = db
    return grads


def _image_to_pixels(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1).reshape(b * h * w, 1, c))


def _pixels_to_image(y: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    c = y.shape[2]
    return np.ascontiguousarray(y.reshape(b, h, w, c).transpose(0, 3, 1, 2))


@dataclass
class Model2Trace:
    core: CoreTrace
    prod_cache: tc.FwdCache
    cat_cache: tc.FwdCache
    merge_cache: tc.FwdCache
    add_cache: tc.FwdCache
    merge_layer: tc.LayerSpec
    image_shape: tuple


def model2_forward(cfg: ArchConfig, values: dict, rgb01: np.ndarray,
                   density_hsi: np.ndarray, sparse01: np.ndarray):
    """Full Model 2 on image batches.

    rgb01: (batch, spectral_in, h, w); density_hsi: (batch, h, w);
    sparse01: (batch, spectral_out, h, w).  All values normalized to [0,1].
    Returns the corrected stack (batch, spectral_out, h, w) and a trace.
    """
    rgb01 = np.asarray(rgb01, dtype=np.float32)
    density_hsi = np.asarray(density_hsi, dtype=np.float32)
    sparse01 = np.asarray(sparse01, dtype=np.float32)
    if rgb01.ndim != 4 or rgb01.shape[1] != cfg.spectral_in:
        raise ShapeError(f"rgb batch must be (b, {cfg.spectral_in}, h, w), got {rgb01.shape}")
    b, _, h, w = rgb01.shape
    if density_hsi.shape != (b, h, w):
        raise ShapeError(f"density batch {density_hsi.shape} != {(b, h, w)}")
    if sparse01.shape != (b, cfg.spectral_out, h, w):
        raise ShapeError(f"sparse batch {sparse01.shape} != {(b, cfg.spectral_out, h, w)}")

    px01, core_trace = core_forward(cfg, values, _image_to_pixels(rgb01))
    recovered = _pixels_to_image(px01, b, h, w)
    dmap = density_hsi[:, None] if cfg.merge_density == "hsi" else (1.0 - density_hsi)[:, None]
    prod, prod_cache = tc.forward(_PROD, (recovered, dmap.astype(np.float32)))
    cat, cat_cache = tc.forward(_CAT, (sparse01, prod))
    merge_layer = _merge_spec(cfg)
    corr, merge_cache = tc.forward(merge_layer, cat,
                                   (values[f"{MERGE_PREFIX}conv/w"], values[f"{MERGE_PREFIX}conv/b"]))
    out, add_cache = tc.forward(_ADD, (recovered, corr))
    return out, Model2Trace(core_trace, prod_cache, cat_cache, merge_cache, add_cache,
                            merge_layer, (b, h, w))


def model2_backward(cfg: ArchConfig, grad_out: np.ndarray, trace: Model2Trace) -> dict:
    b, h, w = trace.image_shape
    (g_rec, g_corr), _ = tc.backward(_ADD, grad_out, trace.add_cache)
    g_cat, (dw_m, db_m) = tc.backward(trace.merge_layer, g_corr, trace.merge_cache)
    (_, g_prod), _ = tc.backward(_CAT, g_cat, trace.cat_cache)
    (g_rec2, _), _ = tc.backward(_PROD, g_prod, trace.prod_cache)
    g_rec_total = g_rec + g_rec2
    g_pixels = _image_to_pixels(g_rec_total)
    grads = core_backward(cfg, g_pixels, trace.core)
    grads[f"{MERGE_PREFIX}conv/w"] = dw_m
    grads[f"{MERGE_PREFIX}conv/b"] = db_m
    return grads


# ---------------------------------------------------------------------------
# Public prediction
# ---------------------------------------------------------------------------

def _check_rgb_stack(cfg: ArchConfig, rgb: SpectralStack):
    if rgb.bands != cfg.spectral_in:
        raise ShapeError(f"expected a {cfg.spectral_in}-band input stack, got {rgb.bands} bands")


def model1_predict(params: NetworkParams, rgb: SpectralStack) -> SpectralStack:
    """Recover a dense stack from a 3-band stack, pixel by pixel."""
    if params.arch_id != "model1":
        raise ConfigError(f"model1_predict needs model1 params, got {params.arch_id!r}")
    cfg = params.config
    _check_rgb_stack(cfg, rgb)
    px = rgb.pixel_spectra()[:, None, :] / np.float32(255.0)
    y01, _ = core_forward(cfg, params.values(), px)
    cube = _pixels_to_image(y01, 1, rgb.height, rgb.width)[0] * 255.0
    return SpectralStack.from_array(cube, cfg.wavelengths_nm, clip=True)


def model2_predict(params: NetworkParams, rgb: SpectralStack, density_hsi: np.ndarray,
                   sparse: SpectralStack) -> SpectralStack:
    """Recover a dense stack and correct it with sparse spectral samples."""
    if params.arch_id != "model2":
        raise ConfigError(f"model2_predict needs model2 params, got {params.arch_id!r}")
    cfg = params.config
    _check_rgb_stack(cfg, rgb)
    density_hsi = np.asarray(density_hsi, dtype=np.float32)
    if density_hsi.shape != (rgb.height, rgb.width):
        raise ShapeError(f"density map {density_hsi.shape} != image {(rgb.height, rgb.width)}")
    if sparse.bands != cfg.spectral_out or (sparse.height, sparse.width) != (rgb.height, rgb.width):
        raise ShapeError(
            f"sparse stack {sparse.values.shape} incompatible with "
            f"{(cfg.spectral_out, rgb.height, rgb.width)}"
        )
    scale = np.float32(255.0)
    out01, _ = model2_forward(
        cfg, params.values(),
        rgb.values[None] / scale,
        density_hsi[None],
        sparse.values[None] / scale,
    )
    return SpectralStack.from_array(out01[0] * 255.0, cfg.wavelengths_nm, clip=True)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_params(path, params: NetworkParams) -> None:
    """JSON manifest next to a raw little-endian float32 payload."""
    path = Path(path)
    raw_name = path.stem + ".raw"
    manifest = {
        "arch_id": params.arch_id,
        "config": arch_to_dict(params.config),
        "config_digest": arch_digest(params.config),
        "entries": [
            {"name": e.name, "shape": list(e.tensor.shape), "frozen": bool(e.frozen)}
            for e in params.entries
        ],
        "payload": raw_name,
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    blob = b"".join(np.ascontiguousarray(e.tensor, dtype="<f4").tobytes() for e in params.entries)
    (path.parent / raw_name).write_bytes(blob)


def load_params(path, expect: ArchConfig | None = None) -> NetworkParams:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read parameter manifest {path}: {exc}") from exc
    for key in ("arch_id", "config", "config_digest", "entries", "payload"):
        if key not in manifest:
            raise DataError(f"parameter manifest {path} missing field {key!r}")
    cfg = arch_from_dict(manifest["config"])
    digest = arch_digest(cfg)
    if digest != manifest["config_digest"]:
        raise DataError(f"config digest mismatch in {path}: manifest was edited or corrupted")
    if expect is not None and arch_digest(expect) != digest:
        raise DataError(f"parameter file {path} was trained for a different architecture")
    raw_path = path.parent / manifest["payload"]
    try:
        blob = raw_path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read parameter payload {raw_path}: {exc}") from exc
    expected = sum(int(np.prod(e["shape"])) for e in manifest["entries"]) * 4
    if len(blob) != expected:
        raise DataError(f"parameter payload {raw_path}: {len(blob)} bytes, expected {expected}")
    entries = []
    offset = 0
    for e in manifest["entries"]:
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape))
        tensor = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += count * 4
        entries.append(ParamEntry(str(e["name"]), tensor, bool(e["frozen"])))
    params = NetworkParams(str(manifest["arch_id"]), cfg, entries)
    _validate_entry_shapes(params)
    return params


def _expected_entry_shapes(arch_id: str, cfg: ArchConfig) -> dict:
    shapes = {}
    for i, spec in enumerate(cfg.upscale_layers):
        shapes[f"{MODEL1_PREFIX}up{i}/w"] = spec.weight_shape()
        shapes[f"{MODEL1_PREFIX}up{i}/b"] = (spec.out_channels,)
    for j, spec in enumerate(cfg.hfe_layers):
        shapes[f"{MODEL1_PREFIX}hfe{j}/w"] = spec.weight_shape()
        shapes[f"{MODEL1_PREFIX}hfe{j}/b"] = (spec.out_channels,)
    if arch_id == "model2":
        spec = _merge_spec(cfg)
        shapes[f"{MERGE_PREFIX}conv/w"] = spec.weight_shape()
        shapes[f"{MERGE_PREFIX}conv/b"] = (spec.out_channels,)
    return shapes


def _validate_entry_shapes(params: NetworkParams) -> None:
    expected = _expected_entry_shapes(params.arch_id, params.config)
    got = {e.name: e.tensor.shape for e in params.entries}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(n for n in got if n in expected and got[n] != expected[n])
        raise DataError(
            f"parameter set inconsistent with architecture: missing {missing}, "
            f"unexpected {extra}, wrong shapes {wrong}"
        )


def params_equal(a: NetworkParams, b: NetworkParams) -> bool:
    """Bit-exact equality of structure, flags and tensors."""
    if a.arch_id != b.arch_id or arch_digest(a.config) != arch_digest(b.config):
        return False
    if len(a.entries) != len(b.entries):
        return False
    for ea, eb in zip(a.entries, b.entries):
        if ea.name != eb.name or ea.frozen != eb.frozen:
            return False
        if ea.tensor.shape != eb.tensor.shape or ea.tensor.tobytes() != eb.tensor.tobytes():
            return False
    return True
