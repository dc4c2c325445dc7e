"""Command-line entry point: ``segvae <command> [options]``.

Exit codes: 0 ok, 1 experiment finished below its acceptance thresholds,
2 usage/config/data error, 3 I/O error, 4 training divergence, 5 memory
budget exceeded, 6 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import __version__, data, gradcheck, metrics, registration, trainer, volume_io
from .errors import ArgumentError, ConfigError, IOFailure, SegVaeError
from .experiment import ExperimentSpec, run_experiment
from .inference import Thresholds, default_budget, sliding_window_predict
from .losses import LossWeights
from .model import ModelConfig, build_model

log = logging.getLogger("segvae")

MIN_PHANTOM_SIDE = 32


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    """Flat ``key=value`` configuration for training and inference.

    Every key has a default; unknown keys are rejected. ``val_fraction`` is
    the share of cases (by sorted case id, taken from the end) held out for
    early stopping.
    """

    # model
    in_channels: int = 4
    base_filters: int = 32
    filter_ratio: int = 2
    levels: int = 4
    patch: tuple = (80, 80, 80)
    latent_dim: int = 128
    groupnorm_groups: int = 8
    leaky_slope: float = 0.01
    vae_channels: int = 16
    gn_eps: float = 1e-5
    # training
    epochs: int = 50
    samples_per_epoch: int = 2101
    patience: int = 2
    p_pos: float = 0.7
    seed: int = 0
    alpha0: float = 1e-4
    lr_exponent: float = 0.9
    mirror: bool = False
    val_patches_per_case: int = 0
    val_fraction: float = 0.2
    # loss
    w_l2: float = 0.1
    w_kl: float = 0.1
    w_dice_wt: float = 0.33
    w_dice_tc: float = 0.33
    w_dice_et: float = 0.33
    smooth_s: float = 100.0
    kl_divisor: float = 0.0
    # inference
    threshold_wt: float = 0.55
    threshold_tc: float = 0.5
    threshold_et: float = 0.4
    budget_bytes: int = 0

    @classmethod
    def from_text(cls, text):
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep:
                raise ConfigError(f"config line {n}: expected key=value, got {line!r}")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(getattr(defaults, key), raw, key)
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise IOFailure(f"cannot read config {path}: {exc}") from exc

    def model_config(self):
        return ModelConfig(
            self.in_channels, self.base_filters, self.filter_ratio, self.levels, self.patch,
            self.latent_dim, self.groupnorm_groups, self.leaky_slope, self.vae_channels, self.gn_eps,
        ).validate()

    def loss_weights(self):
        return LossWeights(
            self.w_l2, self.w_kl, self.w_dice_wt, self.w_dice_tc, self.w_dice_et, self.smooth_s,
            self.kl_divisor or None,
        )

    def train_config(self):
        return trainer.TrainConfig(
            epochs=self.epochs, samples_per_epoch=self.samples_per_epoch, patience=self.patience,
            p_pos=self.p_pos, seed=self.seed, alpha0=self.alpha0, lr_exponent=self.lr_exponent,
            weights=self.loss_weights(), mirror=self.mirror,
            val_patches_per_case=self.val_patches_per_case or None,
        )

    def thresholds(self):
        return Thresholds(self.threshold_wt, self.threshold_tc, self.threshold_et)


def _parse_value(default, raw, key):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            vals = tuple(int(p) for p in raw.replace("x", ",").split(","))
            return vals * 3 if len(vals) == 1 else vals
        if isinstance(default, float):
            return float(raw)
        return int(raw)
    except ValueError:
        raise ConfigError(f"bad value for config key {key!r}: {raw!r}") from None


def _shape_arg(text):
    try:
        vals = tuple(int(p) for p in text.replace("x", ",").split(","))
    except ValueError:
        raise ArgumentError(f"bad shape {text!r}") from None
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise ArgumentError(f"shape needs 1 or 3 values, got {text!r}")
    return vals


def resolve_workers(flag):
    """``--workers`` wins over ``SEGVAE_WORKERS``; default 1 (reference mode)."""
    raw = flag if flag is not None else os.environ.get("SEGVAE_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ArgumentError(f"workers must be an integer, got {raw!r}") from None
    if n < 1:
        raise ArgumentError(f"workers must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------- commands

def cmd_phantom(args, out):
    shape = _shape_arg(args.shape)
    if min(shape) < MIN_PHANTOM_SIDE:
        raise ArgumentError(f"phantom shape {shape} is below the {MIN_PHANTOM_SIDE}^3 minimum")
    if args.count < 1:
        raise ArgumentError("count must be >= 1")
    for i in range(args.count):
        vols, labels = data.make_phantom(data.rng_stream(args.seed, "phantom", i), shape)
        data.write_case(args.out, f"case{i:03d}", vols, labels)
    print(f"wrote {args.count} cases to {args.out}", file=out)
    return 0


def _load_cases(directory, with_labels=True):
    ids = data.list_cases(directory)
    return [data.load_case(os.path.join(directory, cid), with_labels) for cid in ids]


def cmd_train(args, out):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    mcfg = cfg.model_config()
    tcfg = cfg.train_config()
    cases = _load_cases(args.data)
    if len(cases) < 2:
        raise ArgumentError(f"training needs at least 2 cases, found {len(cases)} in {args.data}")
    if not 0 < cfg.val_fraction < 1:
        raise ConfigError("val_fraction must lie in (0, 1)")
    n_val = min(len(cases) - 1, max(1, int(round(cfg.val_fraction * len(cases)))))
    train_cases, val_cases = cases[:-n_val], cases[-n_val:]
    if cases[0].image.shape[0] != mcfg.in_channels:
        raise ConfigError(f"cases have {cases[0].image.shape[0]} channels, config says in_channels={mcfg.in_channels}")
    model = build_model(mcfg, cfg.seed)
    log_path = args.log or args.out + ".log"
    try:
        with open(log_path, "w", encoding="utf-8") as fh:
            model, history = trainer.train(model, train_cases, val_cases, tcfg, fh)
    except OSError as exc:
        raise IOFailure(f"cannot write log {log_path}: {exc}") from exc
    trainer.save_checkpoint(model, args.out)
    h = history
    print(
        f"epochs={len(h.epochs)} best_epoch={h.best_epoch} best_val_loss={min(h.val_loss)!r} "
        f"stopped_early={h.stopped_early}",
        file=out,
    )
    print(f"checkpoint={args.out}", file=out)
    return 0


def _parse_thresholds(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise ArgumentError(f"--thresholds needs wt,tc,et, got {text!r}")
    try:
        return Thresholds(*(float(p) for p in parts))
    except ValueError:
        raise ArgumentError(f"bad thresholds {text!r}") from None


def cmd_infer(args, out):
    paths = [p for p in args.models.split(",") if p]
    if not paths:
        raise ArgumentError("--models needs at least one checkpoint")
    models = trainer.load_ensemble(paths)
    case = data.load_case(args.input, with_labels=False)
    thresholds = _parse_thresholds(args.thresholds) if args.thresholds else Thresholds()
    plan = data.patch_grid(case.shape, models[0].config.patch)
    budget = args.budget if args.budget is not None else default_budget(models, case.image.shape)
    pred = sliding_window_predict(models, case.image, plan, args.tta, thresholds, budget,
                                  case.spacing_mm, case.origin_mm)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {args.out}: {exc}") from exc
    volume_io.save(pred.labels, os.path.join(args.out, "seg.nii"))
    if args.probs:
        for name in ("wt", "tc", "et"):
            v = volume_io.Volume(getattr(pred.probs, name).astype(np.float32), case.spacing_mm, case.origin_mm)
            volume_io.save(v, os.path.join(args.out, f"prob_{name}.nii"))
    print(f"models={len(models)} tta={'on' if args.tta else 'off'}", file=out)
    print(f"estimates_per_patch={pred.estimates_per_patch}", file=out)
    print(f"thresholds={thresholds.as_text()}", file=out)
    print(f"budget_bytes={budget}", file=out)
    print(f"peak_live_bytes={pred.memory.peak_live_bytes}", file=out)
    return 0


def _pred_path(pred_dir, cid):
    for p in (os.path.join(pred_dir, f"{cid}.nii"), os.path.join(pred_dir, f"{cid}.nii.gz"),
              os.path.join(pred_dir, cid, "seg.nii")):
        if os.path.exists(p):
            return p
    return None


def _pred_ids(pred_dir):
    try:
        names = os.listdir(pred_dir)
    except OSError as exc:
        raise IOFailure(f"cannot list {pred_dir}: {exc}") from exc
    ids = set()
    for n in names:
        if n.endswith(".nii.gz"):
            ids.add(n[: -len(".nii.gz")])
        elif n.endswith(".nii"):
            ids.add(n[: -len(".nii")])
        elif os.path.exists(os.path.join(pred_dir, n, "seg.nii")):
            ids.add(n)
    return ids


def cmd_eval(args, out):
    truth_ids = set(data.list_cases(args.truth))
    pred_ids = _pred_ids(args.pred)
    if truth_ids != pred_ids:
        only_truth = sorted(truth_ids - pred_ids)
        only_pred = sorted(pred_ids - truth_ids)
        raise ArgumentError(f"case id mismatch: missing predictions {only_truth}, unexpected predictions {only_pred}")
    if not truth_ids:
        raise ArgumentError(f"no cases found in {args.truth}")
    rows = []
    for cid in sorted(truth_ids):
        truth = volume_io.load(os.path.join(args.truth, cid, "seg.nii"), labels=True)
        pred = volume_io.load(_pred_path(args.pred, cid), labels=True)
        rows.append(metrics.case_metrics(cid, data.region_encode(pred.data), data.region_encode(truth.data),
                                         truth.spacing_mm))
    report = metrics.aggregate(rows)
    text = metrics.metrics_csv(report)
    try:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {args.out}: {exc}") from exc
    print(f"cases={len(rows)} mean_dice_et={report.mean['dice_et']!r} mean_dice_wt={report.mean['dice_wt']!r} "
          f"mean_dice_tc={report.mean['dice_tc']!r}", file=out)
    return 0


def cmd_simmap(args, out):
    t1 = volume_io.load(args.t1)
    template = volume_io.load(args.template)
    sim = registration.similarity_map(t1, template, args.radius)
    result = sim.normalized if args.normalize == "minmax" else registration.normalize_map(sim.raw, "zscore")
    volume_io.save(result, args.out)
    t = sim.registration.transform
    meta = {
        "radius_mm": args.radius,
        "normalization": args.normalize,
        "registration_correlation": sim.registration.correlation,
        "translation_mm": list(t.translation_mm),
        "rotation_rad": list(t.rotation_rad),
        "scale": list(t.scale),
    }
    meta_path = args.out + ".json"
    try:
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IOFailure(f"cannot write {meta_path}: {exc}") from exc
    print(f"radius_mm={args.radius!r}", file=out)
    print(f"registration_correlation={sim.registration.correlation!r}", file=out)
    return 0


def cmd_gradcheck(args, out):
    report = gradcheck.gradcheck_suite(args.seed)
    out.write(report.text())
    return 0 if report.passed else 6


def cmd_experiment(args, out):
    spec = ExperimentSpec()
    if args.spec:
        try:
            with open(args.spec, encoding="utf-8") as fh:
                spec = ExperimentSpec.from_text(fh.read())
        except OSError as exc:
            raise IOFailure(f"cannot read spec {args.spec}: {exc}") from exc
    result = run_experiment(spec, args.out, workers=args.workers)
    out.write(result.summary())
    print(f"runtime_s={result.runtime_s:.1f}", file=sys.stderr)
    return 0 if result.passed else 1


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="segvae", description="Tumor segmentation with a VAE-regularized 3D network.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--workers", default=None,
                   help="worker count (default: $SEGVAE_WORKERS or 1); 1 is the deterministic reference mode")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write synthetic phantom cases")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--shape", default="64")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict one case with a checkpoint ensemble")
    s.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    s.add_argument("--in", dest="input", required=True, help="case directory")
    s.add_argument("--out", required=True)
    s.add_argument("--tta", action="store_true", help="average the 8 axis-flip variants")
    s.add_argument("--thresholds", help="wt,tc,et (default 0.55,0.5,0.4)")
    s.add_argument("--budget", type=int, help="memory budget in bytes")
    s.add_argument("--probs", action="store_true", help="also write probability maps")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("simmap", help="template similarity map")
    s.add_argument("--t1", required=True)
    s.add_argument("--template", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--radius", type=float, default=7.0)
    s.add_argument("--normalize", choices=("minmax", "zscore"), default="minmax")
    s.set_defaults(func=cmd_simmap)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("experiment", help="desk-scale end-to-end phantom experiment")
    s.add_argument("--spec")
    s.add_argument("--out", default="experiment_out")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args.workers = resolve_workers(args.workers)
        return args.func(args, out)
    except SegVaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
