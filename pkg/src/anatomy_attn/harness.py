"""Synthetic lesion/anatomy data, ROC-AUC, and the experiment drivers:
attention-level / pooling / mask-size / image-size ablations and the
cutout robustness sweep."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .attention import AnatomyMasks
from .model import ModelConfig, ToyModel, predict, train
from .seg import SegBatch, apply_cutout, sample_cutout_windows
from .tensor import Tensor

CLASS_NAMES = ("lung_lesion", "heart_lesion", "outside_lesion")


# -- metric -------------------------------------------------------------------


def auc(scores, labels) -> float:
    """Percent area under the ROC curve via the Mann-Whitney statistic:
    (#concordant + 0.5 * #ties) / (P * N) * 100."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("auc expects matching 1-D scores and labels")
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks handle ties
    u = ranks[labels == 1].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg) * 100.0)


# -- metrics table ------------------------------------------------------------


class MetricsTable:
    """Rows of (condition, class_name, auc_percent) plus mean rows."""

    HEADER = ["condition", "class_name", "auc_percent"]

    def __init__(self):
        self.rows = []

    def add(self, condition: str, class_name: str, auc_percent: float) -> None:
        if not 0.0 <= auc_percent <= 100.0:
            raise ValueError(f"auc_percent {auc_percent} outside [0,100]")
        self.rows.append((condition, class_name, float(auc_percent)))

    def add_mean(self, condition: str) -> float:
        vals = [a for c, n, a in self.rows
                if c == condition and n != "mean"]
        mean = float(np.mean(vals))
        self.add(condition, "mean", mean)
        return mean

    def value(self, condition: str, class_name: str = "mean") -> float:
        for c, n, a in self.rows:
            if c == condition and n == class_name:
                return a
        raise KeyError((condition, class_name))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.HEADER)
            for condition, class_name, val in self.rows:
                writer.writerow([condition, class_name, f"{val:.6f}"])


# -- synthetic classification data -------------------------------------------


@dataclass
class SyntheticSpec:
    """Desk-scale stand-in dataset: per-sample jittered lung/heart regions
    and identical-looking lesion blobs whose class is defined purely by
    where they sit (inside lung, inside heart, outside anatomy)."""

    image_size: int = 32
    n_train: int = 480
    n_val: int = 64
    n_test: int = 128
    noise: float = 0.25
    anatomy_contrast: float = 0.02
    lesion_amplitude: float = 1.0
    lesion_radius: int = 2
    mask_jitter: int = 1
    seed: int = 0


def _ellipse(h: int, w: int, ci, cj, ri, rj) -> np.ndarray:
    ii, jj = np.mgrid[0:h, 0:w]
    return (((ii - ci) / ri) ** 2 + ((jj - cj) / rj) ** 2 <= 1.0)


def _sample_anatomy(size: int, rng: np.random.Generator):
    """Two lung ellipses plus a heart ellipse carved out of the lung.

    The whole complex is translated by a shared uniform wrap-around shift
    per sample, so a pixel's absolute position says nothing about which
    region it falls in; only the masks reveal that."""
    s = size / 32.0
    jit = lambda a: rng.uniform(-a, a) * s
    lung = (_ellipse(size, size, size * 0.45 + jit(2), size * 0.28 + jit(2),
                     size * 0.30 * rng.uniform(0.8, 1.2),
                     size * 0.16 * rng.uniform(0.8, 1.2))
            | _ellipse(size, size, size * 0.45 + jit(2), size * 0.72 + jit(2),
                       size * 0.30 * rng.uniform(0.8, 1.2),
                       size * 0.16 * rng.uniform(0.8, 1.2)))
    heart = _ellipse(size, size, size * 0.62 + jit(2), size * 0.52 + jit(2),
                     size * 0.18 * rng.uniform(0.8, 1.2),
                     size * 0.14 * rng.uniform(0.8, 1.2))
    lung &= ~heart
    di, dj = rng.integers(0, size, size=2)
    roll = lambda m: np.roll(m, (di, dj), axis=(0, 1))
    return (roll(lung).astype(np.float64), roll(heart).astype(np.float64))


def _jitter_mask(mask: np.ndarray, amount: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Shift plus boundary erosion/dilation, emulating semi-supervised
    segmentation imperfection."""
    if amount <= 0:
        return mask.copy()
    out = np.roll(mask, (rng.integers(-amount, amount + 1),
                         rng.integers(-amount, amount + 1)), axis=(0, 1))
    op = rng.integers(3)
    if op == 1:
        out = ndimage.binary_dilation(out > 0, iterations=amount)
    elif op == 2:
        out = ndimage.binary_erosion(out > 0, iterations=amount)
    return out.astype(np.float64)


def _place_lesion(region: np.ndarray, radius: int,
                  rng: np.random.Generator) -> np.ndarray | None:
    """Disk of `radius` fully contained in `region`, or None if it cannot
    fit."""
    h, w = region.shape
    footprint = _ellipse(2 * radius + 1, 2 * radius + 1,
                         radius, radius, radius + 0.5, radius + 0.5)
    allowed = ndimage.binary_erosion(region > 0, structure=footprint)
    centers = np.argwhere(allowed)
    if len(centers) == 0:
        return None
    ci, cj = centers[rng.integers(len(centers))]
    lesion = np.zeros((h, w))
    disk = _ellipse(h, w, ci, cj, radius + 0.5, radius + 0.5)
    lesion[disk] = 1.0
    return lesion


def gen_synthetic(spec: SyntheticSpec) -> dict:
    """Deterministic dataset of (image, true masks, noisy masks, labels).

    Labels follow the three archetypes in CLASS_NAMES; each lesion is
    present independently with probability 0.5 and is contained in its
    archetype region by construction.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val + spec.n_test
    size = spec.image_size
    images = np.zeros((n, 1, size, size))
    lung_t = np.zeros((n, 1, size, size))
    heart_t = np.zeros((n, 1, size, size))
    lung_n = np.zeros((n, 1, size, size))
    heart_n = np.zeros((n, 1, size, size))
    labels = np.zeros((n, 3))
    lesions = np.zeros((n, 3, size, size))

    for s in range(n):
        lung, heart = _sample_anatomy(size, rng)
        outside = 1.0 - np.maximum(lung, heart)
        img = rng.normal(0.0, spec.noise, size=(size, size))
        img += spec.anatomy_contrast * (lung - heart)
        for k, region in enumerate((lung, heart, outside)):
            if rng.random() < 0.5:
                blob = _place_lesion(region, spec.lesion_radius, rng)
                if blob is None:
                    continue
                labels[s, k] = 1.0
                lesions[s, k] = blob
                img += spec.lesion_amplitude * blob
        images[s, 0] = img
        lung_t[s, 0], heart_t[s, 0] = lung, heart
        ln = _jitter_mask(lung, spec.mask_jitter, rng)
        hn = _jitter_mask(heart, spec.mask_jitter, rng)
        ln *= 1.0 - hn  # binarization keeps the masks disjoint
        lung_n[s, 0], heart_n[s, 0] = ln, hn

    splits = {}
    bounds = {"train": (0, spec.n_train),
              "val": (spec.n_train, spec.n_train + spec.n_val),
              "test": (spec.n_train + spec.n_val, n)}
    for name, (lo, hi) in bounds.items():
        splits.update({
            f"{name}_images": images[lo:hi],
            f"{name}_lung_true": lung_t[lo:hi],
            f"{name}_heart_true": heart_t[lo:hi],
            f"{name}_lung": lung_n[lo:hi],
            f"{name}_heart": heart_n[lo:hi],
            f"{name}_labels": labels[lo:hi],
            f"{name}_lesions": lesions[lo:hi],
        })
    return splits


# -- synthetic segmentation data (for the cycle-consistency trainer) ----------


def gen_seg_batches(size: int = 16, n_annotated: int = 8,
                    n_unannotated: int = 8, seed: int = 0,
                    noise: float = 0.1):
    """Endless stream of SegBatch pairs on a toy anatomy distribution where
    images are a deterministic shading of the masks plus noise."""
    rng = np.random.default_rng(seed)

    def make(n):
        cxr = np.zeros((n, 1, size, size))
        masks = np.zeros((n, 3, size, size))
        for s in range(n):
            lung, heart = _sample_anatomy(size, rng)
            bg = 1.0 - np.maximum(lung, heart)
            masks[s] = np.stack([bg, lung, heart])
            cxr[s, 0] = (0.2 * bg + 0.8 * lung + 0.5 * heart
                         + rng.normal(0.0, noise, size=(size, size)))
        return cxr, masks

    while True:
        cxr_l, masks_l = make(n_annotated)
        cxr_u, _ = make(n_unannotated)
        yield SegBatch(Tensor(cxr_l), Tensor(masks_l), Tensor(cxr_u))


# -- sweep machinery ----------------------------------------------------------

ABLATION_AXES = {
    "attention_level": ("L0", "L1", "L2", "L3"),
    "pooling": ("pwap", "gem", "average", "max"),
    "mask_size": (8, 12, 16),
    "image_size": (24, 32, 48),
}

DEFAULT_TRAIN = {"epochs": 12, "lr": 3e-3, "batch": 16}


def _sweep_threads() -> int:
    try:
        return max(1, int(os.environ.get("ANATOMY_ATTN_THREADS", "1")))
    except ValueError:
        return 1


def _test_aucs(model: ToyModel, data: dict) -> list:
    probs = predict(model, data["test_images"], data["test_lung"],
                    data["test_heart"])
    return [auc(probs[:, k], data["test_labels"][:, k])
            for k in range(len(CLASS_NAMES))]


def train_condition(config: ModelConfig, spec: SyntheticSpec, seed: int,
                    train_kwargs: dict | None = None):
    """Train one model on the spec's dataset; returns (model, data)."""
    kwargs = dict(DEFAULT_TRAIN)
    if train_kwargs:
        kwargs.update(train_kwargs)
    data = gen_synthetic(dc_replace(spec, image_size=config.image_size))
    data = {**data,
            "val_lung": data["val_lung"], "val_heart": data["val_heart"]}
    model = ToyModel(config, seed=seed)
    model, _ = train(model, data, kwargs["epochs"], kwargs["lr"],
                     kwargs["batch"], seed)
    return model, data


def ablation_sweep(axis: str, base_config: ModelConfig, spec: SyntheticSpec,
                   seeds, train_kwargs: dict | None = None) -> MetricsTable:
    """Train one model per axis value per seed; report per-class and mean
    test AUC, median over seeds."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}")
    values = ABLATION_AXES[axis]

    def run_cell(cell):
        value, seed = cell
        cfg = dc_replace(base_config, **{axis: value})
        if axis == "attention_level" and value == "L0":
            cfg = dc_replace(cfg, fusion="none")
        model, data = train_condition(cfg, spec, seed, train_kwargs)
        return value, seed, _test_aucs(model, data)

    cells = [(v, s) for v in values for s in seeds]
    threads = _sweep_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]

    table = MetricsTable()
    for value in values:
        per_seed = np.array([r[2] for r in results if r[0] == value])
        med = np.median(per_seed, axis=0)
        condition = f"{axis}={value}"
        for k, name in enumerate(CLASS_NAMES):
            table.add(condition, name, med[k])
        table.add_mean(condition)
    return table


def evaluate_with_cutout(model: ToyModel, data: dict, window: int,
                         trials: int, base_seed: int,
                         shared_windows: dict | None = None) -> float:
    """Mean test AUC over `trials` independent cutout corruptions of the
    noisy masks. `shared_windows[(window, trial)]`, when supplied, pins the
    window locations so competing models see identical corruption."""
    masks = AnatomyMasks(Tensor(data["test_lung"]), Tensor(data["test_heart"]))
    vals = []
    for t in range(trials):
        if window == 0:
            cut = masks
        else:
            if shared_windows is not None:
                key = (window, t)
                if key not in shared_windows:
                    shared_windows[key] = sample_cutout_windows(
                        masks, window, base_seed + 1000 * window + t)
                wins = shared_windows[key]
            else:
                wins = sample_cutout_windows(
                    masks, window, base_seed + 1000 * window + t)
            cut = apply_cutout(masks, wins, window)
        probs = predict(model, data["test_images"], cut.lung.data,
                        cut.heart.data)
        vals.append(np.mean([auc(probs[:, k], data["test_labels"][:, k])
                             for k in range(len(CLASS_NAMES))]))
        if window == 0:
            break  # reference row: no randomness, one evaluation
    return float(np.mean(vals))


def robustness_sweep(models: dict, data: dict, windows, trials: int = 3,
                     base_seed: int = 0) -> MetricsTable:
    """Frozen-model AUC vs cutout window size, averaged over trials.

    The same window locations are applied across all models; the window=0
    rows are the uncorrupted reference.
    """
    table = MetricsTable()
    shared = {}
    for name, model in models.items():
        for window in windows:
            val = evaluate_with_cutout(model, data, window, trials,
                                       base_seed, shared_windows=shared)
            table.add(f"{name}_window={window}", "mean", val)
    for name in models:
        w0 = table.value(f"{name}_window=0")
        wmax = table.value(f"{name}_window={max(windows)}")
        table.add(f"{name}_degradation", "mean",
                  min(100.0, max(0.0, w0 - wmax)))
    return table


def robustness_experiment(spec: SyntheticSpec, seeds, windows,
                          trials: int = 3,
                          base_config: ModelConfig | None = None,
                          train_kwargs: dict | None = None) -> MetricsTable:
    """Train attention and hard-mask models per seed, sweep cutout windows,
    and report the median AUC over seeds per (model, window)."""
    if base_config is None:
        base_config = ModelConfig(image_size=spec.image_size)
    per_seed_tables = []
    for seed in seeds:
        aaa_model, data = train_condition(
            dc_replace(base_config, fusion="aaa"), spec, seed, train_kwargs)
        hard_model, _ = train_condition(
            dc_replace(base_config, fusion="hardmask"), spec, seed,
            train_kwargs)
        per_seed_tables.append(robustness_sweep(
            {"aaa": aaa_model, "hardmask": hard_model}, data, windows,
            trials=trials, base_seed=seed))

    table = MetricsTable()
    for condition, class_name, _ in per_seed_tables[0].rows:
        med = float(np.median([t.value(condition, class_name)
                               for t in per_seed_tables]))
        table.add(condition, class_name, med)
    return table
