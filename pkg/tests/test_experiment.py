import os

import numpy as np
import pytest

from segvae.cli import main
from segvae.errors import ArgumentError, ConfigError
from segvae.experiment import ExperimentSpec, run_experiment
from segvae.metrics import parse_metrics_csv
from segvae import volume_io

TINY = dict(n_train=3, n_val=2, n_test=2, shape=(40, 40, 40), crop=(32, 32, 32), samples_per_epoch=3, epochs=2,
            val_patches_per_case=1)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    return run_experiment(ExperimentSpec(**TINY), str(out)), out


def test_artifacts(tiny_run):
    result, out = tiny_run
    for name in ("metrics.csv", "model0.ckpt", "model1.ckpt", "train_model0.log", "train_model1.log",
                 "error_map_wt.nii", "error_map_wt.txt", "simmap.nii", "summary.txt", "timing.txt"):
        assert os.path.exists(out / name), name
    assert sorted(os.listdir(out / "pred")) == ["case005.nii", "case006.nii"]
    pred = volume_io.load(str(out / "pred" / "case005.nii"), labels=True)
    assert pred.shape == (40, 40, 40)
    emap = volume_io.load(str(out / "error_map_wt.nii")).data
    assert emap.min() >= 0 and emap.max() <= 1
    assert len(result.histories) == 2
    assert set(result.checks) == {"mean_dice_wt>=0.7", "mean_dice_tc>=0.6", "early_stopping_honored"}
    assert result.checks["early_stopping_honored"]
    assert "check early_stopping_honored: PASS" in (out / "summary.txt").read_text()


def test_metrics_csv_recomputes(tiny_run):
    _, out = tiny_run
    rows, aggs = parse_metrics_csv((out / "metrics.csv").read_text())
    assert list(rows) == ["case005", "case006"]
    for col, mean in aggs["mean"].items():
        vals = [r[col] for r in rows.values() if r[col] is not None]
        if vals:
            assert abs(mean - np.mean(vals)) <= 1e-9
            assert abs(aggs["median"][col] - np.median(vals)) <= 1e-9


def test_rerun_is_bitwise_identical(tiny_run, tmp_path):
    _, out = tiny_run
    spec = ExperimentSpec(**dict(TINY, simmap=False))
    run_experiment(spec, str(tmp_path))
    for name in ("metrics.csv", "model0.ckpt", "model1.ckpt", "train_model0.log", "error_map_wt.nii", "summary.txt"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_spec_validation():
    with pytest.raises(ArgumentError):
        ExperimentSpec(n_val=0).validate()
    with pytest.raises(ArgumentError):
        ExperimentSpec(model_seeds=(1, 1)).validate()
    with pytest.raises(ArgumentError):
        ExperimentSpec(patch=(64, 64, 64), crop=(56, 56, 56)).validate()
    with pytest.raises(ArgumentError):
        run_experiment(ExperimentSpec(n_val=0), "unused")
    ExperimentSpec().validate()


def test_spec_from_text():
    spec = ExperimentSpec.from_text("n_train = 5\nshape = 48\ntta = false\nalpha0 = 3e-4  # faster\n")
    assert spec.n_train == 5 and spec.shape == (48, 48, 48) and not spec.tta and spec.alpha0 == 3e-4
    with pytest.raises(ConfigError):
        ExperimentSpec.from_text("n_epochs = 3\n")
    with pytest.raises(ConfigError):
        ExperimentSpec.from_text("tta = maybe\n")


def test_cli_experiment_exit_codes(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("n_val = 0\n")
    assert main(["experiment", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 2
    spec.write_text("\n".join(f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}"
                              for k, v in TINY.items()) + "\nsimmap = false\n")
    # two epochs of three samples cannot reach the Dice thresholds: the run completes and exits 1
    assert main(["experiment", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 1


def test_parallel_members_match_sequential(tiny_run, tmp_path):
    _, out = tiny_run
    run_experiment(ExperimentSpec(**dict(TINY, simmap=False)), str(tmp_path), workers=2)
    for name in ("metrics.csv", "model0.ckpt", "model1.ckpt", "train_model1.log"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name
