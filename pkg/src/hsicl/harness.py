"""Sweeps over one axis, embedding export and report regeneration."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .dataset import REDUCTIONS, BandStats, PatchSet, normalize
from .exceptions import CheckpointError, ConfigError
from .sscl import encode_array
from .training import RESULT_COLUMNS, RunConfig, RunMetrics, append_results, format_row, load_patches, run_experiment

logger = logging.getLogger(__name__)

AXES = {
    "reduction": ("reduction", REDUCTIONS),
    "hidden": ("hidden_size", (32, 64)),
    "temperature": ("temperature", (0.01, 0.05, 0.1, 0.5, 1.0)),
    # only meaningful with stage="baseline", scheme="joint"
    "lambda": ("joint_lambda", (0.1, 0.5)),
}


@dataclass
class SweepSpec:
    axis: str
    base: RunConfig
    values: tuple = field(default=())

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {tuple(AXES)}, got {self.axis!r}")
        allowed = AXES[self.axis][1]
        self.values = tuple(self.values) or allowed
        bad = [v for v in self.values if v not in allowed]
        if bad:
            raise ConfigError(f"{self.axis} values {bad} are outside the allowed set {allowed}")

    @property
    def field_name(self) -> str:
        return AXES[self.axis][0]

    def configs(self) -> list[RunConfig]:
        return [self.base.replace(**{self.field_name: v}) for v in self.values]


def _point_dir(out_dir: Path, spec: SweepSpec, value) -> Path:
    return out_dir / "points" / f"{spec.axis}={value}"


def _run_point(args):
    config, point_dir, cache_dir, index = args
    return run_experiment(config, point_dir, cache_dir=cache_dir, order=(index,))


def run_sweep(spec: SweepSpec, out_dir, jobs: int = 1) -> list[dict]:
    """Run every axis value with all other settings fixed.

    Writes ``results.csv`` (one row per value and seed), ``sweep.csv`` (the
    same plus one mean row per value) and ``sweep.svg``. Pretrained encoders
    are shared through ``out_dir/encoders`` when the axis does not affect
    pretraining. If a point fails, finished points are still written and the
    first error is re-raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = out_dir / "encoders"
    tasks = [(cfg, _point_dir(out_dir, spec, v), cache, i) for i, (v, cfg) in enumerate(zip(spec.values, spec.configs()))]

    done: dict[int, RunMetrics] = {}
    errors: list[tuple[int, BaseException]] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_point, t) for t in tasks]
            for i, fut in enumerate(futures):
                try:
                    done[i] = fut.result()
                except Exception as exc:  # noqa: BLE001 - re-raised below
                    errors.append((i, exc))
    else:
        # shared patches: sampling is identical across points unless the
        # axis changes it, which none of the allowed axes do
        patches = load_patches(spec.base)
        for i, t in enumerate(tasks):
            try:
                done[i] = run_experiment(t[0], t[1], cache_dir=t[2], order=(t[3],), patches=patches)
            except Exception as exc:  # noqa: BLE001
                errors.append((i, exc))
                break

    rows, summary = [], []
    for i, value in enumerate(spec.values):
        if i not in done:
            continue
        m = done[i]
        rows.extend(m.rows)
        for row in m.rows:
            summary.append({"axis": spec.axis, "value": value, "seed": row["seed"], "accuracy": row["accuracy"]})
        summary.append({"axis": spec.axis, "value": value, "seed": "mean", "accuracy": m.mean})
    results = out_dir / "results.csv"
    if results.exists():
        results.unlink()
    append_results(results, rows)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["axis", "value", "seed", "accuracy"], lineterminator="\n")
        writer.writeheader()
        for r in summary:
            writer.writerow({**r, "accuracy": "" if r["accuracy"] is None else repr(float(r["accuracy"]))})
    means = [(r["value"], r["accuracy"]) for r in summary if r["seed"] == "mean" and r["accuracy"] is not None]
    if means:
        plot_sweep(spec.axis, means, out_dir / "sweep.svg")
    if errors:
        raise errors[0][1]
    return summary


def plot_sweep(axis: str, means, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = [float(v) for v, _ in means]
    y = [float(a) for _, a in means]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(x, y, marker="o")
    if axis == "temperature":
        ax.set_xscale("log")
    ax.set_xlabel(axis)
    ax.set_ylabel("mean accuracy (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def _stats_of(manifest: dict) -> BandStats | None:
    s = manifest.get("band_stats")
    if not s:
        return None
    return BandStats(np.asarray(s["mean"], dtype=np.float64), np.asarray(s["std"], dtype=np.float64))


def export_embeddings(checkpoint, patches: PatchSet, out_path, normalized: bool = False) -> Path:
    """Write one CSV row per patch: id, labels and the flattened encoding.

    ``checkpoint`` is any checkpoint directory holding ``encoder.*`` tensors
    (a pretrained encoder or a fine-tuned model). Raw patches are normalised
    with the band statistics stored in the checkpoint unless ``normalized``.
    """
    params, manifest = nn.load_checkpoint(checkpoint)
    enc = nn.subset(params, "encoder")
    if not enc:
        raise CheckpointError(f"{checkpoint} holds no encoder tensors")
    bands = enc["encoder.layer1.weight"].shape[1]
    if bands != patches.bands:
        raise CheckpointError(f"{checkpoint} expects {bands} bands, patches have {patches.bands}")
    if "patch_size" in manifest and manifest["patch_size"] != patches.patch_size:
        raise CheckpointError(f"{checkpoint} was trained on {manifest['patch_size']}-pixel patches")
    if not normalized:
        stats = _stats_of(manifest)
        if stats is not None:
            patches = normalize(patches, stats)
    Z = encode_array(enc, patches.pixels)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patch_id", "labels", "label"] + [f"h{j}" for j in range(Z.shape[1])])
        for i, z in enumerate(Z):
            single = int(patches.labels_single[i])
            writer.writerow(
                [i, ";".join(str(c) for c in sorted(patches.labels_multi[i])), single if single > 0 else ""]
                + [format(float(v), ".9g") for v in z]
            )
    return out_path


def collect_runs(out_dir) -> list[dict]:
    runs = [json.loads(p.read_text()) for p in Path(out_dir).rglob("run.json")]
    return sorted(runs, key=lambda r: tuple(r["order"]))


def report(out_dir, path=None) -> Path:
    """Rebuild the results table from the ``run.json`` files under ``out_dir``."""
    runs = collect_runs(out_dir)
    path = Path(path) if path else Path(out_dir) / "report.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in runs:
            writer.writerow(format_row(r["row"]))
    return path


def summarize(out_dir) -> list[dict]:
    """Mean accuracy per configuration (every column but seed and wall time)."""
    groups: dict[tuple, list] = {}
    for r in collect_runs(out_dir):
        row = r["row"]
        key = tuple(row[c] for c in RESULT_COLUMNS if c not in ("seed", "accuracy", "wall_time"))
        groups.setdefault(key, []).append(row["accuracy"])
    names = [c for c in RESULT_COLUMNS if c not in ("seed", "accuracy", "wall_time")]
    out = []
    for key, accs in groups.items():
        vals = [a for a in accs if a is not None]
        out.append({**dict(zip(names, key)), "seeds": len(accs), "mean": float(np.mean(vals)) if vals else None})
    return out
