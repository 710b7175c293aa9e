import csv

import numpy as np
import pytest

from hsicl.dataset import make_synthetic_cube, sample_patches
from hsicl.exceptions import CheckpointError, ConfigError
from hsicl.harness import AXES, SweepSpec, collect_runs, export_embeddings, report, run_sweep
from hsicl.training import RunConfig, run_experiment

BASE = dict(dataset="synthetic", task="single", seeds=(0,), pretrain_epochs=2, epochs=3)


def base(**kw):
    return RunConfig.from_dict({**BASE, **kw})


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_axis_values_are_checked():
    with pytest.raises(ConfigError):
        SweepSpec("depth", base())
    with pytest.raises(ConfigError):
        SweepSpec("temperature", base(), (0.2,))
    assert SweepSpec("hidden", base()).values == (32, 64)
    assert AXES["reduction"][1] == (1.0, 0.5, 0.4, 0.2)


def test_temperature_sweep_outputs(tmp_path):
    summary = run_sweep(SweepSpec("temperature", base(seeds=(0, 1))), tmp_path)
    means = [r for r in summary if r["seed"] == "mean"]
    assert [r["value"] for r in means] == [0.01, 0.05, 0.1, 0.5, 1.0]
    for r in means:
        accs = [s["accuracy"] for s in summary if s["value"] == r["value"] and s["seed"] != "mean"]
        assert r["accuracy"] == np.mean(accs)
    assert len(read(tmp_path / "results.csv")) == 10
    assert len(read(tmp_path / "sweep.csv")) == 15
    assert (tmp_path / "sweep.svg").read_text().lstrip().startswith("<?xml")
    digests = {tuple(r["split_digests"].values()) for r in collect_runs(tmp_path)}
    assert len(digests) == 2  # one per seed, constant across temperatures


def test_reduction_sweep_holds_test_split(tmp_path):
    run_sweep(SweepSpec("reduction", base()), tmp_path)
    runs = collect_runs(tmp_path)
    assert len({r["split_digests"]["cls_test"] for r in runs}) == 1
    assert len({r["split_digests"]["cls_train"] for r in runs}) == 4
    # pretraining does not depend on the reduction, so one encoder is shared
    assert len(list((tmp_path / "encoders").iterdir())) == 1


def test_sweep_is_reproducible_and_parallel_safe(tmp_path):
    spec = SweepSpec("hidden", base())
    run_sweep(spec, tmp_path / "a")
    run_sweep(spec, tmp_path / "b", jobs=2)
    assert (tmp_path / "a/sweep.csv").read_text() == (tmp_path / "b/sweep.csv").read_text()


def test_failed_point_keeps_partial_results(tmp_path):
    spec = SweepSpec("hidden", base(checkpoint=str(tmp_path / "enc")))
    run_experiment(base(stage="pretrain", hidden_size=32), tmp_path / "p")
    (tmp_path / "enc").symlink_to(next((tmp_path / "p/encoders").iterdir()))
    with pytest.raises(CheckpointError):
        run_sweep(spec, tmp_path / "s")
    rows = read(tmp_path / "s/results.csv")
    assert [r["h"] for r in rows] == ["32"]


def test_report_reproduces_results_exactly(tmp_path):
    run_experiment(base(seeds=(0, 1)), tmp_path)
    run_experiment(base(stage="baseline", scheme="joint"), tmp_path)
    assert report(tmp_path).read_text() == (tmp_path / "results.csv").read_text()
    run_sweep(SweepSpec("hidden", base()), tmp_path / "sw")
    assert report(tmp_path / "sw").read_text() == (tmp_path / "sw/results.csv").read_text()


@pytest.fixture(scope="module")
def models(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    run_experiment(base(mode="cl-tune"), out)
    run_experiment(base(mode="cl-freeze"), out)
    return out


class TestExport:
    def test_shape_and_determinism(self, models, tmp_path):
        patches = sample_patches(make_synthetic_cube(), 3, "single")
        ckpt = models / "runs/finetune-cl-tune-seed0/model"
        a = export_embeddings(ckpt, patches, tmp_path / "a.csv")
        b = export_embeddings(ckpt, patches, tmp_path / "b.csv")
        rows = read(a)
        assert len(rows) == len(patches) and len(rows[0]) == 3 + 3 * 3 * 32
        assert a.read_text() == b.read_text()

    def test_freeze_and_tune_differ(self, models, tmp_path):
        patches = sample_patches(make_synthetic_cube(), 3, "single")
        t = export_embeddings(models / "runs/finetune-cl-tune-seed0/model", patches, tmp_path / "t.csv")
        f = export_embeddings(models / "runs/finetune-cl-freeze-seed0/model", patches, tmp_path / "f.csv")
        assert t.read_text() != f.read_text()

    def test_mismatched_patches(self, models, tmp_path):
        patches = sample_patches(make_synthetic_cube(bands=5), 3, "single")
        with pytest.raises(CheckpointError):
            export_embeddings(models / "runs/finetune-cl-tune-seed0/model", patches, tmp_path / "x.csv")
        with pytest.raises(CheckpointError):
            export_embeddings(tmp_path, patches, tmp_path / "x.csv")


def test_lambda_axis_sets_joint_weight():
    spec = SweepSpec("lambda", base(stage="baseline", scheme="joint"))
    assert [c.joint_lambda for c in spec.configs()] == [0.1, 0.5]
    assert all(c.scheme == "joint" for c in spec.configs())
