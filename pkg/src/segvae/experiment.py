"""Desk-scale end-to-end experiment on synthetic phantoms.

Generates phantom cases on disk, trains two separately seeded small models,
predicts held-out cases with the flip-TTA ensemble and writes a metrics
report. Each module of the package is exercised at least once.
"""

from __future__ import annotations

import logging
import multiprocessing
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import metrics, registration, trainer, volume_io
from .data import (
    RegionMasks, average_tumor_template, load_case, make_phantom, patch_grid, region_decode, rng_stream,
    select_crop, write_case,
)
from .errors import ArgumentError, ConfigError, IOFailure
from .inference import Thresholds, sliding_window_predict
from .model import ModelConfig, build_model

log = logging.getLogger(__name__)


@dataclass
class ExperimentSpec:
    n_train: int = 40
    n_val: int = 10
    n_test: int = 10
    shape: tuple = (64, 64, 64)
    crop: tuple = (56, 56, 56)
    patch: tuple = (32, 32, 32)
    base_filters: int = 8
    model_seeds: tuple = (1, 2)
    phantom_seed: int = 2019
    samples_per_epoch: int = 200
    epochs: int = 50
    patience: int = 2
    alpha0: float = 1e-4
    val_patches_per_case: int = 4
    tta: bool = True
    min_dice_wt: float = 0.7
    min_dice_tc: float = 0.6
    simmap: bool = True

    def __post_init__(self):
        self.shape = _triple(self.shape)
        self.crop = _triple(self.crop)
        self.patch = _triple(self.patch)
        self.model_seeds = tuple(int(s) for s in self.model_seeds)

    def validate(self):
        if self.n_val < 1:
            raise ArgumentError("experiment needs at least one validation case")
        if self.n_train < 1 or self.n_test < 1:
            raise ArgumentError("experiment needs at least one training and one test case")
        if len(self.model_seeds) != 2 or self.model_seeds[0] == self.model_seeds[1]:
            raise ArgumentError(f"need two distinct model seeds, got {self.model_seeds}")
        if any(c > s for c, s in zip(self.crop, self.shape)) or any(p > c for p, c in zip(self.patch, self.crop)):
            raise ArgumentError("need patch <= crop <= shape on every axis")
        if min(self.shape) < 32:
            raise ArgumentError(f"phantom shape {self.shape} is below the 32^3 minimum")
        return self

    @classmethod
    def from_text(cls, text):
        """Parse ``key=value`` lines (``#`` comments); unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in known:
                raise ConfigError(f"unknown experiment key {key!r}")
            kwargs[key] = _parse_like(getattr(defaults, key), raw, key)
        return cls(**kwargs)


def _triple(v):
    v = tuple(int(i) for i in (v if isinstance(v, (tuple, list)) else (v,)))
    return v * 3 if len(v) == 1 else v


def _parse_like(default, raw, key):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace("x", ",").split(","))
        if isinstance(default, float):
            return float(raw)
        return int(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


@dataclass
class ExperimentResult:
    report: metrics.AggregateReport
    histories: list
    checks: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    out_dir: str = ""

    @property
    def passed(self):
        return all(self.checks.values())

    def summary(self):
        """Deterministic run summary; wall time is kept out so reruns compare equal."""
        lines = []
        for key in ("dice_wt", "dice_tc", "dice_et"):
            lines.append(f"mean_{key}={self.report.mean[key]:.4f}")
        for i, h in enumerate(self.histories):
            lines.append(f"model{i}_epochs={len(h.epochs)} best_epoch={h.best_epoch} stopped_early={h.stopped_early}")
        for name, ok in self.checks.items():
            lines.append(f"check {name}: {'PASS' if ok else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _crop(case, offset, shape):
    sl = tuple(slice(o, o + s) for o, s in zip(offset, shape))
    case.image = np.ascontiguousarray(case.image[(slice(None),) + sl])
    case.origin_mm = tuple(o + k * s for o, k, s in zip(case.origin_mm, offset, case.spacing_mm))
    return sl


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _train_member(job, cases=None):
    """Train ensemble member ``k``; returns ``(history, checkpoint_path)``."""
    data_dir, ids, offset, spec, k, out_dir = job
    if cases is None:
        cases = [load_case(os.path.join(data_dir, cid)) for cid in ids[: spec.n_train + spec.n_val]]
        for c in cases:
            sl = _crop(c, offset, spec.crop)
            c.labels = np.ascontiguousarray(c.labels[sl])
    train_cases = cases[: spec.n_train]
    val_cases = cases[spec.n_train : spec.n_train + spec.n_val]
    seed = spec.model_seeds[k]
    mcfg = ModelConfig(in_channels=4, base_filters=spec.base_filters, patch=spec.patch)
    cfg = trainer.TrainConfig(
        epochs=spec.epochs, samples_per_epoch=spec.samples_per_epoch, patience=spec.patience,
        seed=seed, alpha0=spec.alpha0, val_patches_per_case=spec.val_patches_per_case,
    )
    model = build_model(mcfg, seed)
    log_path = os.path.join(out_dir, f"train_model{k}.log")
    try:
        with open(log_path, "w", encoding="utf-8") as fh:
            _, history = trainer.train(model, train_cases, val_cases, cfg, fh)
    except OSError as exc:
        raise IOFailure(f"cannot write {log_path}: {exc}") from exc
    ckpt = os.path.join(out_dir, f"model{k}.ckpt")
    trainer.save_checkpoint(model, ckpt)
    return history, ckpt


def run_experiment(spec: ExperimentSpec | None = None, out_dir="experiment_out", workers=1) -> ExperimentResult:
    """Run the whole pipeline; artifacts land in ``out_dir``.

    ``workers > 1`` trains the two ensemble members in parallel processes;
    every artifact is identical to the sequential run.
    """
    spec = (spec or ExperimentSpec()).validate()
    t_start = time.perf_counter()
    data_dir = os.path.join(out_dir, "data")
    pred_dir = os.path.join(out_dir, "pred")
    for d in (data_dir, pred_dir):
        try:
            os.makedirs(d, exist_ok=True)
        except OSError as exc:
            raise IOFailure(f"cannot create {d}: {exc}") from exc

    # phantoms go through the NIfTI writer and reader like real data would
    n_total = spec.n_train + spec.n_val + spec.n_test
    ids = [f"case{i:03d}" for i in range(n_total)]
    for i, cid in enumerate(ids):
        vols, labels = make_phantom(rng_stream(spec.phantom_seed, "phantom", i), spec.shape)
        write_case(data_dir, cid, vols, labels)
    cases = [load_case(os.path.join(data_dir, cid)) for cid in ids]
    train_cases = cases[: spec.n_train]
    val_cases = cases[spec.n_train : spec.n_train + spec.n_val]
    test_cases = cases[spec.n_train + spec.n_val :]
    truth = {c.case_id: c.regions() for c in test_cases}

    # one crop window for all cases, placed by the training tumor template
    template = average_tumor_template([c.labels > 0 for c in train_cases])
    offset = select_crop(template, spec.crop)
    crop_sl = None
    for c in cases:
        crop_sl = _crop(c, offset, spec.crop)
        c.labels = np.ascontiguousarray(c.labels[crop_sl])
    log.info("crop offset %s", offset)

    jobs = [(data_dir, ids, offset, spec, k, out_dir) for k in range(len(spec.model_seeds))]
    if workers > 1:
        # the ensemble members are independent, so training them side by side
        # changes wall time only; each worker reloads its cases from disk
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(workers, len(jobs))) as pool:
            trained = pool.map(_train_member, jobs)
    else:
        trained = [_train_member(job, cases) for job in jobs]
    histories = [h for h, _ in trained]
    ckpts = [c for _, c in trained]
    models = trainer.load_ensemble(ckpts)

    thresholds = Thresholds()
    plan = patch_grid(spec.crop, spec.patch)
    rows, pairs = [], []
    for c in test_cases:
        pred = sliding_window_predict(models, c.image, plan, spec.tta, thresholds)
        full = []
        for name in ("wt", "tc", "et"):
            m = np.zeros(spec.shape, dtype=bool)
            m[crop_sl] = getattr(pred.masks, name)
            full.append(m)
        masks = RegionMasks(*full)
        volume_io.save(region_decode(masks), os.path.join(pred_dir, f"{c.case_id}.nii"))
        rows.append(metrics.case_metrics(c.case_id, masks, truth[c.case_id], c.spacing_mm))
        pairs.append((masks.wt, truth[c.case_id].wt))
    report = metrics.aggregate(rows)
    _write_text(os.path.join(out_dir, "metrics.csv"), metrics.metrics_csv(report))
    emap = metrics.error_map(pairs)
    volume_io.save(volume_io.Volume(emap.astype(np.float32), (1.0, 1.0, 1.0)), os.path.join(out_dir, "error_map_wt.nii"))
    _write_text(os.path.join(out_dir, "error_map_wt.txt"), metrics.ERROR_MAP_NOTE + "\n")

    if spec.simmap:
        # similarity channel smoke: first test t1 against the first training t1 as template
        t1 = volume_io.load(os.path.join(data_dir, test_cases[0].case_id, "t1.nii"))
        tmpl = volume_io.load(os.path.join(data_dir, train_cases[0].case_id, "t1.nii"))
        sim = registration.similarity_map(t1, tmpl)
        volume_io.save(sim.normalized, os.path.join(out_dir, "simmap.nii"))

    result = ExperimentResult(report, histories, out_dir=out_dir)
    result.checks["mean_dice_wt>=%g" % spec.min_dice_wt] = report.mean["dice_wt"] >= spec.min_dice_wt
    result.checks["mean_dice_tc>=%g" % spec.min_dice_tc] = report.mean["dice_tc"] >= spec.min_dice_tc
    result.checks["early_stopping_honored"] = all(
        len(h.epochs) <= h.best_epoch + spec.patience + 1 for h in histories
    )
    result.runtime_s = time.perf_counter() - t_start
    _write_text(os.path.join(out_dir, "summary.txt"), result.summary())
    _write_text(os.path.join(out_dir, "timing.txt"), f"runtime_s={result.runtime_s:.1f} workers={workers}\n")
    return result
