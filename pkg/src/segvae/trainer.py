"""Training loop with polynomial LR decay and early stopping; checkpoint I/O."""

from __future__ import annotations

import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import PatchPlan, augment_flip, augment_scale, patch_grid, rng_stream, sample_channels, sample_patch
from .data import extract, region_encode
from .errors import ArgumentError, ConfigError, CorruptionError, DivergenceError, FormatError, IOFailure
from .losses import LossWeights, ScheduleParams, combined_loss, lr_schedule

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,lr,train_loss,val_loss,l2,kl,dice_wt,dice_tc,dice_et"


@dataclass
class TrainConfig:
    epochs: int = 50
    samples_per_epoch: int = 2101
    patience: int = 2
    p_pos: float = 0.7
    seed: int = 0
    alpha0: float = 1e-4
    lr_exponent: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    mirror: bool = False
    # cap on validation patches per case; None uses the whole patch grid
    val_patches_per_case: int | None = None

    def __post_init__(self):
        if self.patience < 1 or self.samples_per_epoch < 1 or self.epochs < 1:
            raise ConfigError("patience, samples_per_epoch and epochs must be >= 1")
        if not 0 <= self.p_pos <= 1:
            raise ConfigError(f"p_pos must be in [0, 1], got {self.p_pos}")

    @property
    def schedule(self):
        return ScheduleParams(self.alpha0, self.epochs, self.lr_exponent)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    terms: dict
    wall_time: float

    def log_line(self):
        t = self.terms
        vals = [self.lr, self.train_loss, self.val_loss, t["l2"], t["kl"], t["dice_wt"], t["dice_tc"], t["dice_et"]]
        return f"{self.epoch}," + ",".join(repr(float(v)) for v in vals)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def lr(self):
        return [r.lr for r in self.epochs]

    @property
    def val_loss(self):
        return [r.val_loss for r in self.epochs]

    def log_text(self):
        return LOG_HEADER + "\n" + "".join(r.log_line() + "\n" for r in self.epochs)


class EarlyStopping:
    """Stop once the monitored value has not decreased for ``patience`` consecutive epochs."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch, value):
        """Record ``value``; returns ``(improved, should_stop)``."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


def validation_loss(model, cases, plan, cfg: TrainConfig):
    """Mean combined loss over a fixed, seed-determined patch set."""
    losses = []
    for case in cases:
        offsets = plan.offsets
        if cfg.val_patches_per_case is not None and cfg.val_patches_per_case < len(offsets):
            pick = rng_stream(cfg.seed, "val-pick", case.case_id).choice(
                len(offsets), cfg.val_patches_per_case, replace=False
            )
            offsets = [offsets[i] for i in sorted(pick)]
        for k, off in enumerate(offsets):
            x = sample_channels(case, off, plan.patch_shape, cfg.mirror)
            regions = region_encode(extract(case.labels, off, plan.patch_shape)).as_array()
            out = M.forward(model, x, "train", rng_stream(cfg.seed, "val", case.case_id, k))
            total, _, _ = combined_loss(out, x, regions, cfg.weights)
            losses.append(total)
    model._tape = None
    return float(np.mean(losses))


def train(model, train_cases, val_cases, cfg: TrainConfig, log_file=None):
    """Fit ``model`` in place; returns ``(model, history)`` with the best-validation weights loaded."""
    if not train_cases or not val_cases:
        raise ArgumentError("train needs at least one training and one validation case")
    patch = model.config.patch
    plan = patch_grid(train_cases[0].shape, patch)
    for case in list(train_cases) + list(val_cases):
        if case.shape != plan.volume_shape:
            raise ArgumentError(f"case {case.case_id} grid {case.shape} != {plan.volume_shape}")
        if case.labels is None:
            raise ArgumentError(f"case {case.case_id} has no labels")
    schedule = cfg.schedule
    history = TrainHistory()
    stopper = EarlyStopping(cfg.patience)
    best_params = M.clone_params(model)
    if log_file is not None:
        log_file.write(LOG_HEADER + "\n")

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, schedule)
        totals = []
        term_sums = {}
        for i in range(cfg.samples_per_epoch):
            rng = rng_stream(cfg.seed, "train", epoch, i)
            case = train_cases[int(rng.integers(len(train_cases)))]
            sample = sample_patch(case, plan, rng, cfg.p_pos, cfg.mirror)
            sample = augment_scale(augment_flip(sample, rng), rng)
            out = M.forward(model, sample.channels, "train", rng)
            total, terms, grads = combined_loss(out, sample.channels, sample.regions, cfg.weights)
            if not np.isfinite(total):
                raise DivergenceError(epoch, i, total)
            G = M.backward(model, grads["seg_probs"], grads["recon"], grads["mu"], grads["logvar"])
            M.adam_update(model, G, lr)
            totals.append(total)
            for k, v in terms.items():
                term_sums[k] = term_sums.get(k, 0.0) + v
        model._tape = None
        val = validation_loss(model, val_cases, plan, cfg)
        if not np.isfinite(val):
            raise DivergenceError(epoch, "validation", val)
        n = len(totals)
        record = EpochRecord(
            epoch, lr, float(np.mean(totals)), val,
            {k: v / n for k, v in term_sums.items()}, time.perf_counter() - t0,
        )
        history.epochs.append(record)
        if log_file is not None:
            log_file.write(record.log_line() + "\n")
            log_file.flush()
        log.info("epoch %d lr %.3g train %.5f val %.5f (%.1fs)", epoch, lr, record.train_loss, val, record.wall_time)
        improved, stop = stopper.update(epoch, val)
        if improved:
            best_params = M.clone_params(model)
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    M.load_params(model, best_params)
    return model, history


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SEGVAE01"
VERSION = 1


def checkpoint_bytes(model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def model_from_bytes(raw: bytes):
    if raw[:8] != MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:8]!r}")
    if len(raw) < 16:
        raise CorruptionError("checkpoint truncated in header")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", raw, 12)
    pos = 16
    if pos + n > len(raw):
        raise CorruptionError("checkpoint truncated in config block")
    try:
        config = M.ModelConfig.from_text(raw[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CorruptionError(f"unreadable config block: {exc}") from exc
    pos += n
    model = M.Model(config)
    expected = model.param_shapes()
    seen = set()

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CorruptionError("checkpoint truncated")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    while pos < len(raw):
        (ln,) = take("<I")
        if pos + ln > len(raw):
            raise CorruptionError("checkpoint truncated in parameter name")
        name = raw[pos : pos + ln].decode("utf-8", errors="replace")
        pos += ln
        (ndim,) = take("<I")
        dims = take(f"<{ndim}I") if ndim else ()
        if name not in expected or tuple(dims) != expected[name]:
            raise CorruptionError(f"parameter {name} with shape {dims} does not match the config")
        count = int(np.prod(dims))
        if pos + 4 * count > len(raw):
            raise CorruptionError(f"checkpoint truncated in parameter {name}")
        model.params[name].data[...] = np.frombuffer(raw, "<f4", count, pos).reshape(dims)
        pos += 4 * count
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CorruptionError(f"checkpoint lacks {len(missing)} parameters, e.g. {sorted(missing)[0]}")
    return model


def save_checkpoint(model, path):
    try:
        with open(path, "wb") as fh:
            fh.write(checkpoint_bytes(model))
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return model_from_bytes(raw)


def load_ensemble(paths):
    models = [load_checkpoint(p) for p in paths]
    first = models[0].config
    for p, m in zip(paths, models):
        if m.config != first:
            raise ConfigError(f"checkpoint {p} has a different model config than {paths[0]}")
    return models
