"""Scene ingestion, non-overlapping patch sampling, normalisation and splits."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, DatasetError
from .rng import Rng

REDUCTIONS = (1.0, 0.5, 0.4, 0.2)
TASKS = ("multi", "single")

# name -> (height, width, bands, classes) of the public scenes
KNOWN_SCENES = {
    "paviau": (610, 340, 103, 9),
    "salinas": (512, 217, 204, 16),
    "houston2013": (349, 1905, 144, 15),
    "houston2018": (210, 954, 48, 7),
}


@dataclass(frozen=True)
class HsiCube:
    reflectance: np.ndarray
    gt: np.ndarray
    n_classes: int
    source: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.reflectance.ndim != 3:
            raise DatasetError(f"reflectance must be height x width x bands, got shape {self.reflectance.shape}")
        if self.gt.ndim != 2:
            raise DatasetError(f"ground truth must be 2-d, got shape {self.gt.shape}")
        if self.gt.shape != self.reflectance.shape[:2]:
            raise DatasetError(
                f"extent mismatch: ground truth {self.gt.shape} vs reflectance {self.reflectance.shape[:2]}"
            )
        if self.gt.size and (self.gt.min() < 0 or self.gt.max() > self.n_classes):
            raise DatasetError(f"ground-truth values must lie in [0, {self.n_classes}]")

    @property
    def height(self) -> int:
        return self.reflectance.shape[0]

    @property
    def width(self) -> int:
        return self.reflectance.shape[1]

    @property
    def bands(self) -> int:
        return self.reflectance.shape[2]


def read_npy(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"file not found: {path}")
    try:
        return np.load(path, allow_pickle=False)
    except (ValueError, OSError, EOFError) as exc:
        raise DatasetError(f"{path}: not a readable NPY array ({exc})") from exc


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_cube(data_path, gt_path, n_classes: int | None = None) -> HsiCube:
    """Load a reflectance cube and its label raster from two NPY files.

    ``n_classes`` defaults to the largest label present.
    """
    data = read_npy(data_path)
    gt = read_npy(gt_path)
    if gt.dtype.kind not in "iu":
        if gt.dtype.kind == "f" and np.all(np.mod(gt, 1) == 0):
            gt = gt.astype(np.int64)
        else:
            raise DatasetError(f"{gt_path}: ground truth must hold integer labels, got {gt.dtype}")
    gt = gt.astype(np.int64)
    if n_classes is None:
        n_classes = int(gt.max()) if gt.size else 0
    source = {
        "data": str(data_path),
        "gt": str(gt_path),
        "data_sha256": file_sha256(data_path),
        "gt_sha256": file_sha256(gt_path),
    }
    return HsiCube(np.asarray(data, dtype=np.float32), gt, int(n_classes), source)


def make_synthetic_cube(
    height: int = 30,
    width: int = 30,
    bands: int = 8,
    n_classes: int = 3,
    noise: float = 0.05,
    n_regions: int = 9,
    background_fraction: float = 0.0,
    seed: int = 0,
) -> HsiCube:
    """Voronoi-region scene with one well separated spectrum per class.

    Class ``c`` has a random prototype spectrum; pixels add Gaussian noise of
    scale ``noise``. Region ``r`` takes class ``1 + r % n_classes`` unless it
    is drawn as background.
    """
    rng = Rng(seed)
    centres = rng.uniform(0, 1, (n_regions, 2)) * [height, width]
    rows, cols = np.mgrid[0:height, 0:width]
    d = (rows[..., None] - centres[:, 0]) ** 2 + (cols[..., None] - centres[:, 1]) ** 2
    region = d.argmin(axis=-1)
    region_class = 1 + np.arange(n_regions) % n_classes
    is_bg = rng.random(n_regions) < background_fraction
    region_class[is_bg] = 0
    gt = region_class[region].astype(np.int64)
    prototypes = rng.uniform(0.0, 1.0, (n_classes + 1, bands))
    prototypes[0] = 0.5
    cube = prototypes[gt] + rng.normal(0.0, noise, (height, width, bands))
    return HsiCube(cube.astype(np.float32), gt, n_classes, {"synthetic_seed": seed})


@dataclass
class PatchSet:
    """Patches cut from one scene, in raster order of their origins."""

    pixels: np.ndarray
    origins: np.ndarray
    labels_multi: list[frozenset]
    labels_single: np.ndarray
    is_mixed: np.ndarray
    patch_size: int
    n_classes: int
    task: str
    stride: int | None = None
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.patch_size

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def bands(self) -> int:
        return self.pixels.shape[-1]

    def subset(self, indices) -> "PatchSet":
        idx = np.asarray(indices, dtype=np.int64)
        return PatchSet(
            self.pixels[idx],
            self.origins[idx],
            [self.labels_multi[i] for i in idx],
            self.labels_single[idx],
            self.is_mixed[idx],
            self.patch_size,
            self.n_classes,
            self.task,
            self.stride,
            dict(self.source),
        )

    def with_pixels(self, pixels: np.ndarray) -> "PatchSet":
        out = self.subset(np.arange(len(self)))
        out.pixels = pixels
        return out

    def multi_hot(self) -> np.ndarray:
        """``n x C`` indicator matrix; column ``c - 1`` stands for class ``c``."""
        return stack_labels(self.labels_multi, self.n_classes)

    def targets(self, task: str | None = None) -> np.ndarray:
        task = task or self.task
        if task == "multi":
            return self.multi_hot()
        if np.any(self.labels_single <= 0):
            raise DatasetError("some patches carry no single label (background centre)")
        return self.labels_single.copy()

    def census(self) -> dict:
        mixed = int(self.is_mixed.sum())
        return {"total": len(self), "mixed": mixed, "uniform": len(self) - mixed}


def sample_patches(cube: HsiCube, patch_size: int, task: str) -> PatchSet:
    """Tile the scene with non-overlapping ``p x p`` windows (stride ``p``).

    Trailing rows/columns that do not fill a window are dropped. ``multi``
    keeps windows containing at least one labelled pixel and annotates the set
    of classes present; ``single`` keeps windows whose centre pixel is
    labelled and annotates that class. A window is mixed when it holds two or
    more distinct ground-truth values, background included.
    """
    p = int(patch_size)
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    if p < 1:
        raise ConfigError(f"patch size must be positive, got {p}")
    if task == "single" and p % 2 == 0:
        raise ConfigError(f"single-label sampling needs an odd patch size, got {p}")
    if p > cube.height or p > cube.width:
        raise DatasetError(f"patch size {p} exceeds scene extent {cube.height}x{cube.width}")

    nh, nw = cube.height // p, cube.width // p
    gt = cube.gt[: nh * p, : nw * p].reshape(nh, p, nw, p).transpose(0, 2, 1, 3).reshape(nh * nw, p, p)
    flat = gt.reshape(len(gt), -1)
    mixed = flat.min(axis=1) != flat.max(axis=1)
    centre = gt[:, p // 2, p // 2]
    if task == "multi":
        keep = np.flatnonzero(flat.max(axis=1) > 0)
    else:
        keep = np.flatnonzero(centre > 0)

    refl = cube.reflectance[: nh * p, : nw * p]
    tiles = refl.reshape(nh, p, nw, p, cube.bands).transpose(0, 2, 1, 3, 4).reshape(nh * nw, p, p, cube.bands)
    origins = np.stack([keep // nw * p, keep % nw * p], axis=1).astype(np.int64)
    labels_multi = [frozenset(int(c) for c in np.unique(flat[i]) if c > 0) for i in keep]
    source = dict(cube.source)
    return PatchSet(
        np.ascontiguousarray(tiles[keep], dtype=np.float32),
        origins,
        labels_multi,
        centre[keep].astype(np.int64),
        mixed[keep],
        p,
        cube.n_classes,
        task,
        p,
        source,
    )


@dataclass(frozen=True)
class BandStats:
    mean: np.ndarray
    std: np.ndarray


def compute_band_stats(patches: PatchSet, indices) -> BandStats:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("band statistics need at least one patch")
    px = patches.pixels[idx].reshape(-1, patches.bands).astype(np.float64)
    mean = px.mean(axis=0)
    std = px.std(axis=0)
    std[std < 1e-8] = 1.0
    return BandStats(mean, std)


def normalize(patches: PatchSet, stats: BandStats) -> PatchSet:
    z = (patches.pixels.astype(np.float64) - stats.mean) / stats.std
    return patches.with_pixels(z.astype(np.float32))


def dedup_batch(batch):
    """Drop bitwise-duplicate patches, keeping first occurrences in order.

    Accepts a stacked array (returns an array) or a sequence of arrays
    (returns a list).
    """
    keep = dedup_index(batch)
    if isinstance(batch, np.ndarray):
        return batch[keep]
    return [batch[i] for i in keep]


def dedup_index(batch) -> np.ndarray:
    seen = set()
    keep = []
    for i, x in enumerate(batch):
        arr = np.ascontiguousarray(x)
        key = (arr.shape, arr.dtype.str, arr.tobytes())
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)


@dataclass(frozen=True)
class SplitPlan:
    pretrain_train: np.ndarray
    pretrain_val: np.ndarray
    cls_train: np.ndarray
    cls_val: np.ndarray
    cls_test: np.ndarray
    reduction_fraction: float = 1.0

    def digest(self, which: str = "cls_test") -> str:
        arr = np.ascontiguousarray(getattr(self, which), dtype=np.int64)
        return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def make_splits(n: int, seed: int, reduction: float = 1.0) -> SplitPlan:
    """Seeded 80/10/10 classifier split plus an independent 90/10 pretrain split.

    Reduction keeps the leading fraction of the (already shuffled) training
    and validation lists, so smaller fractions are nested in larger ones and
    the test list never changes.
    """
    if n < 10:
        raise ValueError(f"need at least 10 patches to split, got {n}")
    if float(reduction) not in REDUCTIONS:
        raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {reduction}")
    rng = Rng(seed)
    perm = rng.spawn("classifier-split").permutation(n)
    n_test = int(round(0.1 * n))
    n_val = int(round(0.1 * n))
    test = perm[:n_test]
    val = perm[n_test: n_test + n_val]
    train = perm[n_test + n_val:]
    if reduction != 1.0:
        train = train[: max(1, int(round(reduction * len(train))))]
        val = val[: max(1, int(round(reduction * len(val))))]
    pre = rng.spawn("pretrain-split").permutation(n)
    n_pre_val = int(round(0.1 * n))
    return SplitPlan(
        pretrain_train=pre[n_pre_val:],
        pretrain_val=pre[:n_pre_val],
        cls_train=train,
        cls_val=val,
        cls_test=test,
        reduction_fraction=float(reduction),
    )


def _labels_str(labels) -> str:
    return ";".join(str(c) for c in sorted(labels))


def save_patchset(patches: PatchSet, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "patches.npy", patches.pixels, allow_pickle=False)
    with open(path / "labels_multi.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "labels"])
        for i, labels in enumerate(patches.labels_multi):
            w.writerow([i, _labels_str(labels)])
    with open(path / "labels_single.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "label"])
        for i, c in enumerate(patches.labels_single):
            w.writerow([i, int(c) if c > 0 else ""])
    with open(path / "origins.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "row", "col", "mixed"])
        for i, ((r, c), m) in enumerate(zip(patches.origins, patches.is_mixed)):
            w.writerow([i, int(r), int(c), int(m)])
    manifest = {
        "patch_size": patches.patch_size,
        "stride": patches.stride,
        "n_classes": patches.n_classes,
        "task": patches.task,
        "bands": patches.bands,
        "count": len(patches),
        "census": patches.census(),
        "source": patches.source,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _read_rows(path: Path) -> list[dict]:
    if not path.is_file():
        raise DatasetError(f"patch set is missing {path.name}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_patchset(path) -> PatchSet:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise DatasetError(f"no manifest.json in {path}")
    manifest = json.loads(mf.read_text())
    pixels = read_npy(path / "patches.npy").astype(np.float32)
    multi = _read_rows(path / "labels_multi.csv")
    single = _read_rows(path / "labels_single.csv")
    origins = _read_rows(path / "origins.csv")
    if not (len(multi) == len(single) == len(origins) == len(pixels)):
        raise DatasetError(f"{path}: row counts disagree with patches.npy")
    labels_multi = [frozenset(int(c) for c in r["labels"].split(";") if c) for r in multi]
    labels_single = np.array([int(r["label"]) if r["label"] else 0 for r in single], dtype=np.int64)
    orig = np.array([[int(r["row"]), int(r["col"])] for r in origins], dtype=np.int64).reshape(-1, 2)
    mixed = np.array([bool(int(r.get("mixed") or 0)) for r in origins], dtype=bool)
    return PatchSet(
        pixels,
        orig,
        labels_multi,
        labels_single,
        mixed,
        int(manifest["patch_size"]),
        int(manifest["n_classes"]),
        manifest["task"],
        int(manifest.get("stride", manifest["patch_size"])),
        manifest.get("source", {}),
    )


def candidate_count(height: int, width: int, patch_size: int) -> int:
    return (height // patch_size) * (width // patch_size)


def stack_labels(sets: Sequence[frozenset], n_classes: int) -> np.ndarray:
    y = np.zeros((len(sets), n_classes), dtype=np.float32)
    for i, labels in enumerate(sets):
        for c in labels:
            y[i, c - 1] = 1.0
    return y
