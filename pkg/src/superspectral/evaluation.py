"""Quality metrics and evaluation harnesses.

Two PSNR conventions are supported and reported side by side:

* ``paper``: ``20 * log10(255 / MSE)`` — the formula as printed in the
  source this pipeline mirrors, with MSE (not RMSE) in the denominator;
* ``standard``: ``10 * log10(255**2 / MSE)`` — the conventional definition.

They coincide exactly at MSE = 1 and diverge by ``10 * log10(MSE)``
elsewhere.  A perfect prediction (MSE = 0) maps to the ``+inf`` sentinel in
both modes.

The harnesses cover per-stack reports with per-pixel PSNR maps and
saturation masking, a k-fold cross-validation driver training both models
per fold, and a transfer table trained on each source and tested on each
target.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import SpectralStack, StackDataset, prepare_sample, rgb_view, split_folds
from .errors import ConfigError, DataError, NumericalError, SuperspectralError
from .models import default_arch, model1_predict, model2_predict

PSNR_MODES = ("paper", "standard")
PEAK = 255.0
SATURATION_THRESHOLD = 250.0


def mse_between(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"cannot compare shapes {pred.shape} and {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def psnr_value(mse: float, mode: str = "paper") -> float:
    """PSNR in dB for a given mean squared error; +inf when mse == 0."""
    if mode not in PSNR_MODES:
        raise ConfigError(f"psnr mode must be one of {PSNR_MODES}, got {mode!r}")
    if mse < 0:
        raise DataError(f"mean squared error cannot be negative, got {mse}")
    if mse == 0.0:
        return float("inf")
    if mode == "paper":
        return float(20.0 * np.log10(PEAK / mse))
    return float(10.0 * np.log10(PEAK**2 / mse))


def psnr(pred: SpectralStack, gt: SpectralStack, mode: str = "paper") -> float:
    """Whole-stack PSNR over every band and pixel."""
    if pred.values.shape != gt.values.shape:
        raise DataError(f"stack shapes differ: {pred.values.shape} vs {gt.values.shape}")
    if not np.allclose(pred.wavelengths_nm, gt.wavelengths_nm):
        raise DataError("stacks are sampled on different band grids")
    return psnr_value(mse_between(pred.values, gt.values), mode)


def psnr_map(pred: SpectralStack, gt: SpectralStack, mode: str = "paper",
             saturation_threshold: float = SATURATION_THRESHOLD):
    """Per-pixel PSNR over the spectral axis, plus a saturation mask.

    A pixel is flagged saturated when any ground-truth band reaches the
    threshold; flagged pixels still receive a PSNR value but are meant to
    be excluded from summaries (see :func:`map_summary`).
    """
    if pred.values.shape != gt.values.shape:
        raise DataError(f"stack shapes differ: {pred.values.shape} vs {gt.values.shape}")
    diff = pred.values.astype(np.float64) - gt.values.astype(np.float64)
    per_pixel_mse = np.mean(diff * diff, axis=0)
    with np.errstate(divide="ignore"):
        if mode == "paper":
            pmap = 20.0 * np.log10(PEAK / per_pixel_mse)
        elif mode == "standard":
            pmap = 10.0 * np.log10(PEAK**2 / per_pixel_mse)
        else:
            raise ConfigError(f"psnr mode must be one of {PSNR_MODES}, got {mode!r}")
    pmap = np.where(per_pixel_mse == 0.0, np.inf, pmap)
    saturated = np.any(gt.values >= saturation_threshold, axis=0)
    return pmap, saturated


def map_summary(pmap: np.ndarray, saturated: np.ndarray) -> dict:
    """Min/mean of a PSNR map over unsaturated pixels.

    When every pixel is saturated the summary is undefined: the statistics
    are reported as None rather than 0.
    """
    keep = ~np.asarray(saturated, dtype=bool)
    excluded = int(np.count_nonzero(~keep))
    if not keep.any():
        return {"min": None, "mean": None, "excluded_pixels": excluded, "defined": False}
    vals = np.asarray(pmap, dtype=np.float64)[keep]
    return {
        "min": float(np.min(vals)),
        "mean": float(np.mean(vals)),
        "excluded_pixels": excluded,
        "defined": True,
    }


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Aggregated prediction quality for a list of stacks."""

    psnr_mode: str
    per_stack_psnr: list
    per_band_psnr: list
    mean_psnr: float
    psnr_maps: list
    saturation_masks: list
    map_summaries: list
    saturation_mask_applied: bool
    saturation_threshold: float | None


def evaluate_stacks(preds, gts, mode: str = "paper", with_maps: bool = False,
                    saturation_threshold: float = SATURATION_THRESHOLD) -> EvalReport:
    """Score predictions against ground truth stacks.

    Per-band PSNR pools every pixel of every stack for that band.  PSNR
    maps (and their saturation masks) are only materialized on request.
    """
    if len(preds) != len(gts) or len(preds) == 0:
        raise DataError(f"need equal nonempty prediction/truth lists, got {len(preds)}/{len(gts)}")
    per_stack = [psnr(p, g, mode) for p, g in zip(preds, gts)]

    bands = gts[0].bands
    band_sq = np.zeros(bands, dtype=np.float64)
    band_count = 0
    for p, g in zip(preds, gts):
        if g.bands != bands:
            raise DataError("stacks disagree on band count")
        diff = p.values.astype(np.float64) - g.values.astype(np.float64)
        band_sq += np.sum(diff * diff, axis=(1, 2))
        band_count += g.height * g.width
    per_band = [psnr_value(band_sq[b] / band_count, mode) for b in range(bands)]

    maps, masks, summaries = [], [], []
    if with_maps:
        for p, g in zip(preds, gts):
            pmap, sat = psnr_map(p, g, mode, saturation_threshold)
            maps.append(pmap)
            masks.append(sat)
            summaries.append(map_summary(pmap, sat))
    return EvalReport(
        psnr_mode=mode,
        per_stack_psnr=[float(v) for v in per_stack],
        per_band_psnr=per_band,
        mean_psnr=float(np.mean(per_stack)),
        psnr_maps=maps,
        saturation_masks=masks,
        map_summaries=summaries,
        saturation_mask_applied=with_maps,
        saturation_threshold=saturation_threshold if with_maps else None,
    )


def _write_plane(path: Path, values: np.ndarray) -> None:
    """Single-channel image in the stack file layout (header + raw)."""
    values = np.asarray(values, dtype="<f4")[None]
    header = {
        "width": values.shape[2],
        "height": values.shape[1],
        "channels": 1,
        "wavelengths_nm": [0.0],
        "dtype": "f32le",
        "order": "band-sequential",
        "payload": path.stem + ".raw",
    }
    path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    (path.parent / (path.stem + ".raw")).write_bytes(values.tobytes())


def read_plane(path) -> np.ndarray:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        blob = (path.parent / header["payload"]).read_bytes()
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read map file {path}: {exc}") from exc
    h, w = int(header["height"]), int(header["width"])
    if len(blob) != h * w * 4:
        raise DataError(f"map payload {path}: {len(blob)} bytes, expected {h * w * 4}")
    return np.frombuffer(blob, dtype="<f4").reshape(h, w).astype(np.float64)


def _json_safe(x):
    """Map +-inf to JSON-safe string sentinels, recursively."""
    if isinstance(x, float):
        if np.isposinf(x):
            return "inf"
        if np.isneginf(x):
            return "-inf"
        return x
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def _json_restore(x):
    if x == "inf":
        return float("inf")
    if x == "-inf":
        return float("-inf")
    if isinstance(x, dict):
        return {k: _json_restore(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_restore(v) for v in x]
    return x


def save_report(path, report: EvalReport) -> None:
    """Report JSON next to one map/mask file pair per stack (if present)."""
    path = Path(path)
    map_files = []
    for i, (pmap, mask) in enumerate(zip(report.psnr_maps, report.saturation_masks)):
        map_name = f"{path.stem}_map_{i:04d}.json"
        mask_name = f"{path.stem}_mask_{i:04d}.json"
        _write_plane(path.parent / map_name, pmap)
        _write_plane(path.parent / mask_name, mask.astype(np.float64))
        map_files.append({"map": map_name, "mask": mask_name})
    doc = {
        "psnr_mode": report.psnr_mode,
        "per_stack_psnr": _json_safe(report.per_stack_psnr),
        "per_band_psnr": _json_safe(report.per_band_psnr),
        "mean_psnr": _json_safe(report.mean_psnr),
        "map_summaries": _json_safe(report.map_summaries),
        "saturation_mask_applied": report.saturation_mask_applied,
        "saturation_threshold": report.saturation_threshold,
        "map_files": map_files,
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_report(path) -> EvalReport:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    maps, masks = [], []
    for entry in doc.get("map_files", []):
        maps.append(read_plane(path.parent / entry["map"]))
        masks.append(read_plane(path.parent / entry["mask"]) > 0.5)
    return EvalReport(
        psnr_mode=doc["psnr_mode"],
        per_stack_psnr=_json_restore(doc["per_stack_psnr"]),
        per_band_psnr=_json_restore(doc["per_band_psnr"]),
        mean_psnr=_json_restore(doc["mean_psnr"]),
        psnr_maps=maps,
        saturation_masks=masks,
        map_summaries=_json_restore(doc["map_summaries"]),
        saturation_mask_applied=bool(doc["saturation_mask_applied"]),
        saturation_threshold=doc["saturation_threshold"],
    )


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold_index: int
    test_indices: list
    model1_report: EvalReport | None
    model2_report: EvalReport | None
    failed: bool = False
    error: str | None = None


@dataclass
class CrossValResult:
    folds: list
    aggregate_model1: float
    aggregate_model2: float
    psnr_mode: str


def predict_dataset(model1_params, model2_params, dataset: StackDataset, indices=None):
    """Paired predictions for the indexed stacks; returns (preds1, preds2, gts)."""
    if indices is None:
        indices = range(len(dataset.stacks))
    preds1, preds2, gts = [], [], []
    for i in indices:
        stack = dataset.stacks[i]
        spots = dataset.spot_sets[i]
        view = rgb_view(stack, dataset.response)
        sample = prepare_sample(stack, spots, dataset.response)
        sparse = SpectralStack(sample.sparse, stack.wavelengths_nm)
        preds1.append(model1_predict(model1_params, view))
        preds2.append(model2_predict(model2_params, view, sample.density_hsi, sparse))
        gts.append(stack)
    return preds1, preds2, gts


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def run_loocv(dataset: StackDataset, k: int, cfg, arch=None) -> CrossValResult:
    """k-fold cross-validation training both models per fold.

    Every stack lands in exactly one test fold.  A fold whose training or
    evaluation raises is marked failed and excluded from the aggregates
    (with a warning); aggregation weighs successful folds equally.
    """
    from .training import train_model1, train_model2  # deferred: training imports metrics

    if k < 2:
        raise ConfigError(f"fold count must be >= 2, got {k}")
    folds = split_folds(len(dataset.stacks), k, seed=cfg.seed)
    results = []
    for fi, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(dataset.stacks)), test_idx)
        fold_cfg = replace(cfg, seed=_fold_seed(cfg.seed, fi))
        try:
            r1 = train_model1(dataset.subset(train_idx), fold_cfg, arch=arch)
            r2 = train_model2(dataset.subset(train_idx), r1.params, fold_cfg)
            preds1, preds2, gts = predict_dataset(r1.params, r2.params, dataset, test_idx)
            rep1 = evaluate_stacks(preds1, gts, cfg.psnr_mode)
            rep2 = evaluate_stacks(preds2, gts, cfg.psnr_mode)
            results.append(FoldResult(fi, [int(i) for i in test_idx], rep1, rep2))
        except SuperspectralError as exc:
            warnings.warn(f"fold {fi} failed and is excluded from aggregates: {exc}")
            results.append(FoldResult(fi, [int(i) for i in test_idx], None, None,
                                      failed=True, error=str(exc)))
    good = [r for r in results if not r.failed]
    if not good:
        raise NumericalError("every cross-validation fold failed")
    agg1 = float(np.mean([r.model1_report.mean_psnr for r in good]))
    agg2 = float(np.mean([r.model2_report.mean_psnr for r in good]))
    return CrossValResult(results, agg1, agg2, cfg.psnr_mode)


# ---------------------------------------------------------------------------
# Transfer table
# ---------------------------------------------------------------------------

@dataclass
class TransferResult:
    sources: list
    targets: list
    table: dict  # table[src][tgt] = {"model1": psnr, "model2": psnr}
    psnr_mode: str


def transfer_matrix(named_datasets: dict, cfg, k: int = 5, arch=None) -> TransferResult:
    """Train on each source, evaluate on each target.

    Diagonal cells use k-fold cross-validation inside the source; off
    diagonals train on the full source and test on the full target.  An
    empty source skips its row with a warning.
    """
    from .training import train_model1, train_model2  # deferred: training imports metrics

    if len(named_datasets) < 2:
        raise ConfigError("transfer table needs at least two named datasets")
    names = list(named_datasets)
    table = {}
    for si, src in enumerate(names):
        src_ds = named_datasets[src]
        if len(src_ds.stacks) == 0:
            warnings.warn(f"source {src!r} is empty; row skipped")
            continue
        src_cfg = replace(cfg, seed=_fold_seed(cfg.seed, 1000 + si))
        r1 = train_model1(src_ds, src_cfg, arch=arch)
        r2 = train_model2(src_ds, r1.params, src_cfg)
        row = {}
        for tgt in names:
            tgt_ds = named_datasets[tgt]
            if tgt == src:
                cv = run_loocv(src_ds, k, cfg, arch=arch)
                row[tgt] = {"model1": cv.aggregate_model1, "model2": cv.aggregate_model2}
            elif len(tgt_ds.stacks) == 0:
                warnings.warn(f"target {tgt!r} is empty; cell skipped")
                row[tgt] = None
            else:
                preds1, preds2, gts = predict_dataset(r1.params, r2.params, tgt_ds)
                row[tgt] = {
                    "model1": evaluate_stacks(preds1, gts, cfg.psnr_mode).mean_psnr,
                    "model2": evaluate_stacks(preds2, gts, cfg.psnr_mode).mean_psnr,
                }
        table[src] = row
    return TransferResult(sources=list(table), targets=names, table=table, psnr_mode=cfg.psnr_mode)
