"""Training loops for the spectral recovery networks.

Model 1 trains on individual pixel spectra (RGB triple in, dense spectrum
out) drawn from every stack in the dataset.  Model 2 starts from a trained
Model 1 and follows a two-stage protocol: stage A freezes the shared core
and fits only the merge stage, stage B then fine-tunes everything.  Both
loops use Adam, mean-squared-error loss, best-checkpoint tracking and
plateau-based early stopping, and are deterministic for a fixed seed.

Losses are logged on the [0, 255] value scale even though the networks run
on [0, 1] internally; the scale factor is exact (255^2) because MSE is
quadratic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .dataset import StackDataset, prepare_sample, rgb_view
from .errors import ConfigError, DataError, NonFiniteGradientError
from .evaluation import psnr_value
from .models import (MERGE_PREFIX, MODEL1_PREFIX, NetworkParams, _merge_spec, arch_digest,
                     build_model1, core_backward, core_forward, default_arch,
                     init_model2_from_model1, model2_backward, model2_forward, set_frozen)

RAW_SCALE = 255.0 ** 2  # MSE on [0,255] data = MSE on [0,1] data times this


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings shared by all training entry points."""

    lr: float = 2e-3
    lr_decay: float = 1.0  # lr shrinks to lr * lr_decay by the last epoch
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 200
    plateau_patience: int = 20
    seed: int = 0
    psnr_mode: str = "paper"
    val_fraction: float = 0.0
    stack_batch_size: int = 4
    max_train_pixels: int = 0  # 0 = use every pixel

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.stack_batch_size < 1:
            raise ConfigError(f"stack_batch_size must be >= 1, got {self.stack_batch_size}")
        if self.psnr_mode not in ("paper", "standard"):
            raise ConfigError(f"psnr_mode must be 'paper' or 'standard', got {self.psnr_mode!r}")


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Geometric interpolation from lr (epoch 1) to lr * lr_decay (last epoch)."""
    if cfg.lr_decay == 1.0 or cfg.max_epochs == 1:
        return cfg.lr
    return cfg.lr * cfg.lr_decay ** ((epoch - 1) / (cfg.max_epochs - 1))


@dataclass
class LogRow:
    epoch: int
    split: str
    loss: float
    psnr: float


def write_training_log(path, rows) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "psnr"])
        for r in rows:
            writer.writerow([r.epoch, r.split, repr(float(r.loss)), repr(float(r.psnr))])


@dataclass
class TrainResult:
    params: NetworkParams
    log: list
    final_loss: float
    stopped_epoch: int
    diverged: bool = False


@dataclass
class Model2TrainResult:
    params: NetworkParams
    log: list
    stage_a_loss: float
    stage_b_loss: float
    diverged: bool = False


def _pixel_pairs(dataset: StackDataset):
    xs, ys = [], []
    for stack in dataset.stacks:
        view = rgb_view(stack, dataset.response)
        xs.append(view.pixel_spectra())
        ys.append(stack.pixel_spectra())
    x = np.concatenate(xs)[:, None, :].astype(np.float32) / np.float32(255.0)
    y = np.concatenate(ys)[:, None, :].astype(np.float32) / np.float32(255.0)
    return x, y


def _eval_core_loss(arch, values, x, y, batch: int = 8192) -> float:
    total = 0.0
    for start in range(0, len(x), batch):
        out, _ = core_forward(arch, values, x[start : start + batch])
        diff = out.astype(np.float64) - y[start : start + batch].astype(np.float64)
        total += float(np.sum(diff * diff))
    return total / (len(x) * y.shape[1] * y.shape[2])


def train_model1(dataset: StackDataset, cfg: TrainConfig, arch=None,
                 init: NetworkParams | None = None) -> TrainResult:
    """Fit Model 1 to per-pixel (RGB, spectrum) pairs from the dataset.

    Keeps the best parameters seen (watched on the validation split when
    ``val_fraction`` > 0, on the training loss otherwise) and stops after
    ``plateau_patience`` epochs without improvement.  A non-finite gradient
    aborts training and returns the last good checkpoint.
    """
    if len(dataset.stacks) == 0:
        raise DataError("cannot train on an empty dataset")
    if init is not None:
        if init.arch_id != "model1":
            raise ConfigError(f"init params are {init.arch_id!r}, expected model1")
        if arch is not None and arch_digest(arch) != arch_digest(init.config):
            raise ConfigError("init params disagree with the requested architecture")
        arch = init.config
    if arch is None:
        first = dataset.stacks[0]
        arch = default_arch(spectral_out=first.bands,
                            wavelengths_nm=tuple(float(w) for w in first.wavelengths_nm))
    params = init if init is not None else build_model1(arch, seed=cfg.seed)

    rng = np.random.default_rng(cfg.seed)
    x, y = _pixel_pairs(dataset)
    if x.shape[2] != arch.spectral_in or y.shape[2] != arch.spectral_out:
        raise DataError(
            f"dataset provides {x.shape[2]} -> {y.shape[2]} band pairs, architecture wants "
            f"{arch.spectral_in} -> {arch.spectral_out}"
        )
    order = rng.permutation(len(x))
    if cfg.max_train_pixels and len(order) > cfg.max_train_pixels:
        order = order[: cfg.max_train_pixels]
    x, y = x[order], y[order]

    n_val = int(round(cfg.val_fraction * len(x)))
    if n_val:
        x_val, y_val = x[:n_val], y[:n_val]
        x, y = x[n_val:], y[n_val:]
    if len(x) == 0:
        raise DataError("validation split consumed every training pixel")

    values = params.values()
    state = tc.init_adam(values, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    frozen = params.frozen_names()
    best_loss = np.inf
    best_values = {k: v.copy() for k, v in values.items()}
    bad_epochs = 0
    log, diverged = [], False
    epoch = 0

    for epoch in range(1, cfg.max_epochs + 1):
        state.lr = _epoch_lr(cfg, epoch)
        perm = rng.permutation(len(x))
        sq_sum = 0.0
        count = 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            out, trace = core_forward(arch, values, x[idx])
            loss, g = tc.l2_loss(out, y[idx])
            grads = core_backward(arch, g, trace)
            try:
                values, state = tc.adam_step(values, grads, state, frozen)
            except NonFiniteGradientError:
                diverged = True
                break
            sq_sum += loss * out.size
            count += out.size
        if diverged:
            break
        train_loss = sq_sum / count * RAW_SCALE
        log.append(LogRow(epoch, "train", train_loss, psnr_value(train_loss, cfg.psnr_mode)))
        if n_val:
            val_loss = _eval_core_loss(arch, values, x_val, y_val) * RAW_SCALE
            log.append(LogRow(epoch, "val", val_loss, psnr_value(val_loss, cfg.psnr_mode)))
            watched = val_loss
        else:
            watched = train_loss
        if not np.isfinite(watched):
            diverged = True
            break
        if watched < best_loss:
            best_loss = watched
            best_values = {k: v.copy() for k, v in values.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.plateau_patience:
                break

    if not np.isfinite(best_loss):
        raise NonFiniteGradientError("training diverged before producing a finite loss")
    return TrainResult(params.with_values(best_values), log, float(best_loss), epoch, diverged)


# ---------------------------------------------------------------------------
# Model 2: two-stage protocol
# ---------------------------------------------------------------------------

def _stack_tensors(dataset: StackDataset, arch):
    """Batch every sample's model inputs; all stacks must share one shape."""
    rgbs, dens, sparses, targets = [], [], [], []
    shape = None
    for stack, spots in zip(dataset.stacks, dataset.spot_sets):
        if shape is None:
            shape = (stack.height, stack.width)
        elif (stack.height, stack.width) != shape:
            raise DataError(
                f"stacks must share one spatial shape for batched training; "
                f"saw {shape} and {(stack.height, stack.width)}"
            )
        sample = prepare_sample(stack, spots, dataset.response)
        view = rgb_view(stack, dataset.response)
        rgbs.append(view.values / np.float32(255.0))
        dens.append(sample.density_hsi)
        sparses.append(sample.sparse / np.float32(255.0))
        targets.append(stack.values / np.float32(255.0))
    return (np.stack(rgbs), np.stack(dens).astype(np.float32),
            np.stack(sparses), np.stack(targets))


def _full_model2_loss(arch, values, rgb, den, sparse, target, batch: int) -> float:
    total = 0.0
    for start in range(0, len(rgb), batch):
        sl = slice(start, start + batch)
        out, _ = model2_forward(arch, values, rgb[sl], den[sl], sparse[sl])
        diff = out.astype(np.float64) - target[sl].astype(np.float64)
        total += float(np.sum(diff * diff))
    return total / target.size


def train_model2(dataset: StackDataset, init: NetworkParams, cfg: TrainConfig,
                 stage_b: bool = True) -> Model2TrainResult:
    """Two-stage Model-2 training from a trained Model 1.

    Stage A freezes every shared tensor and fits the merge stage alone;
    because the core is frozen, its per-sample outputs are computed once
    and reused.  Stage B fine-tunes all parameters, keeping the best
    whole-set loss, whose starting value is the stage-A result: the final
    loss can therefore only improve on stage A or tie it.  ``stage_b=False``
    stops after stage A, returning the merge-only fit.
    """
    if init.arch_id != "model1":
        raise ConfigError(f"train_model2 needs trained model1 params, got {init.arch_id!r}")
    if len(dataset.stacks) == 0:
        raise DataError("cannot train on an empty dataset")
    arch = init.config
    params = set_frozen(init_model2_from_model1(init), MODEL1_PREFIX, True)
    values = params.values()
    merge_spec = _merge_spec(arch)
    rng_a, rng_b = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2)]

    rgb, den, sparse, target = _stack_tensors(dataset, arch)
    n = len(rgb)
    log, diverged = [], False

    # stage A: core is frozen, so recovered stacks and the merge input are static
    px, _ = core_forward(arch, values, rgb.transpose(0, 2, 3, 1).reshape(-1, 1, arch.spectral_in))
    b, h, w = rgb.shape[0], rgb.shape[2], rgb.shape[3]
    recovered = np.ascontiguousarray(
        px.reshape(b, h, w, arch.spectral_out).transpose(0, 3, 1, 2))
    dmap = den if arch.merge_density == "hsi" else 1.0 - den
    merge_in = np.concatenate([sparse, recovered * dmap[:, None]], axis=1)

    merge_values = {k: values[k] for k in values if k.startswith(MERGE_PREFIX)}
    state = tc.init_adam(merge_values, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    best_a = np.inf
    best_merge = {k: v.copy() for k, v in merge_values.items()}
    bad = 0
    for epoch in range(1, cfg.max_epochs + 1):
        state.lr = _epoch_lr(cfg, epoch)
        perm = rng_a.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, cfg.stack_batch_size):
            idx = perm[start : start + cfg.stack_batch_size]
            corr, cache = tc.forward(merge_spec, merge_in[idx],
                                     (merge_values[f"{MERGE_PREFIX}conv/w"],
                                      merge_values[f"{MERGE_PREFIX}conv/b"]))
            out = recovered[idx] + corr
            loss, g = tc.l2_loss(out, target[idx])
            _, (dw, db) = tc.backward(merge_spec, g, cache)
            grads = {f"{MERGE_PREFIX}conv/w": dw, f"{MERGE_PREFIX}conv/b": db}
            try:
                merge_values, state = tc.adam_step(merge_values, grads, state)
            except NonFiniteGradientError:
                diverged = True
                break
            sq_sum += loss * out.size
        if diverged:
            break
        train_loss = sq_sum / target.size * RAW_SCALE
        log.append(LogRow(epoch, "stageA/train", train_loss, psnr_value(train_loss, cfg.psnr_mode)))
        if train_loss < best_a:
            best_a, bad = train_loss, 0
            best_merge = {k: v.copy() for k, v in merge_values.items()}
        else:
            bad += 1
            if bad >= cfg.plateau_patience:
                break
    values.update(best_merge)

    # stage B: unfreeze everything; the pre-update whole-set loss is both the
    # stage-A final figure and the incumbent best checkpoint
    params = set_frozen(params.with_values(values), MODEL1_PREFIX, False)
    values = params.values()
    stage_a_loss = _full_model2_loss(arch, values, rgb, den, sparse, target,
                                     cfg.stack_batch_size) * RAW_SCALE
    log.append(LogRow(0, "stageB/eval", stage_a_loss, psnr_value(stage_a_loss, cfg.psnr_mode)))
    best_b = stage_a_loss
    best_values = {k: v.copy() for k, v in values.items()}
    state = tc.init_adam(values, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    bad = 0
    if not diverged and stage_b:
        for epoch in range(1, cfg.max_epochs + 1):
            state.lr = _epoch_lr(cfg, epoch)
            perm = rng_b.permutation(n)
            sq_sum = 0.0
            for start in range(0, n, cfg.stack_batch_size):
                idx = perm[start : start + cfg.stack_batch_size]
                out, trace = model2_forward(arch, values, rgb[idx], den[idx], sparse[idx])
                loss, g = tc.l2_loss(out, target[idx])
                grads = model2_backward(arch, g, trace)
                try:
                    values, state = tc.adam_step(values, grads, state)
                except NonFiniteGradientError:
                    diverged = True
                    break
                sq_sum += loss * out.size
            if diverged:
                break
            train_loss = sq_sum / target.size * RAW_SCALE
            log.append(LogRow(epoch, "stageB/train", train_loss,
                              psnr_value(train_loss, cfg.psnr_mode)))
            full_loss = _full_model2_loss(arch, values, rgb, den, sparse, target,
                                          cfg.stack_batch_size) * RAW_SCALE
            log.append(LogRow(epoch, "stageB/eval", full_loss,
                              psnr_value(full_loss, cfg.psnr_mode)))
            if not np.isfinite(full_loss):
                diverged = True
                break
            if full_loss < best_b:
                best_b, bad = full_loss, 0
                best_values = {k: v.copy() for k, v in values.items()}
            else:
                bad += 1
                if bad >= cfg.plateau_patience:
                    break

    final = params.with_values(best_values)
    return Model2TrainResult(final, log, float(stage_a_loss), float(best_b), diverged)
