"""Detection/localisation metrics and the desk-scale benchmark runner."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .datasets import LabeledImageSet, SplitSpec, apply_split
from .inference import detection_scores, localization_map
from .models import BackboneConfig
from .trainer import TrainConfig, config_hash, run_em, train_dsvdd_baseline

log = logging.getLogger(__name__)

METHODS = ("igd", "dsvdd", "dsvdd_rec")
BENCHMARK_FRACTIONS = (0.2, 0.6, 1.0)
BENCHMARK_CONTAMINATION = (0.01, 0.05, 0.10)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve, ties counted as one half.

    Trapezoidal integration over every distinct threshold, carried out on
    integer counts so it equals the Mann-Whitney statistic exactly.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both normal and anomalous samples")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y == 1)[ends].astype(np.int64)
    fp = np.cumsum(y == 0)[ends].astype(np.int64)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * n_pos * n_neg)


def minmax_normalize(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi <= lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def accuracy_at_threshold(scores, labels, threshold: float = 0.5, normalize: bool = True) -> float:
    """Fraction classified correctly when ``score >= threshold`` means anomalous.

    Raw scores are min-max normalised over the given set first unless
    ``normalize`` is False.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if len(scores) == 0:
        raise ValueError("accuracy needs at least one score")
    if normalize:
        scores = minmax_normalize(scores)
    pred = (scores >= threshold).astype(np.int64)
    return float((pred == labels).mean())


def pixel_auc(heatmaps, masks, labels=None) -> float:
    """Mean per-image pixel-level AUC over anomalous images.

    Images whose mask is all zero or all one are skipped (a warning is logged).
    ``labels`` restricts evaluation to label-1 images when given.
    """
    heatmaps = [np.asarray(h, dtype=np.float64) for h in heatmaps]
    masks = [np.asarray(m) for m in masks]
    if len(heatmaps) != len(masks):
        raise ValueError("heatmaps and masks must align")
    aucs, skipped = [], 0
    for i, (h, m) in enumerate(zip(heatmaps, masks)):
        if labels is not None and int(labels[i]) != 1:
            continue
        if h.shape != m.shape:
            raise ValueError(f"heatmap {h.shape} and mask {m.shape} differ in shape")
        m = (m.reshape(-1) > 0).astype(np.int64)
        if m.min() == m.max():
            skipped += 1
            continue
        aucs.append(roc_auc(h.reshape(-1), m))
    if skipped:
        log.warning("pixel_auc: skipped %d image(s) whose mask has a single class", skipped)
    if not aucs:
        raise ValueError("no image with a mixed mask to evaluate")
    return float(np.mean(aucs))


def top_fraction_iou(heat, mask, fraction: float = 0.05) -> float:
    """IoU between the top ``fraction`` of heatmap pixels and a binary mask."""
    heat = np.asarray(heat, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask).reshape(-1) > 0
    k = max(1, int(round(fraction * heat.size)))
    top = np.zeros(heat.size, dtype=bool)
    top[np.argsort(-heat, kind="mergesort")[:k]] = True
    inter = np.logical_and(top, mask).sum()
    union = np.logical_or(top, mask).sum()
    return float(inter / union) if union else 0.0


# -- benchmark ----------------------------------------------------------------


@dataclass
class BenchmarkReport:
    dataset: str
    split: dict
    method: str
    per_class_auc: dict
    mean_auc: float
    accuracy: float
    pixel_auc: float | None
    config_hash: str
    wall_clock: float

    def __post_init__(self):
        if self.per_class_auc:
            self.mean_auc = float(np.mean(list(self.per_class_auc.values())))

    def row(self) -> dict:
        return {
            "dataset": self.dataset,
            "method": self.method,
            "train_fraction": self.split.get("train_fraction"),
            "contamination_rate": self.split.get("contamination_rate"),
            "seed": self.split.get("seed"),
            "mean_auc": self.mean_auc,
            "accuracy": self.accuracy,
            "pixel_auc": self.pixel_auc,
            "per_class_auc": json.dumps(self.per_class_auc, sort_keys=True),
            "config_hash": self.config_hash,
        }


@dataclass
class BenchmarkConfig:
    dataset: str = "synthetic"
    classes: tuple = ()
    methods: tuple = ("igd",)
    fractions: tuple = (1.0,)
    contamination: tuple = (0.0,)
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    local_train: TrainConfig | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    local_backbone: BackboneConfig | None = None
    use_local: bool = False
    pixel_metrics: bool = False
    threshold: float = 0.5
    stride: tuple | None = None

    def grid(self):
        """(fraction, contamination) cells: the fraction sweep at zero contamination
        followed by the contamination sweep at full training size."""
        cells = [(f, 0.0) for f in self.fractions]
        cells += [(1.0, c) for c in self.contamination if c > 0]
        seen, out = set(), []
        for cell in cells:
            if cell not in seen:
                seen.add(cell)
                out.append(cell)
        return out


def method_config(base: TrainConfig, method: str) -> TrainConfig:
    if method == "igd":
        return replace(base, baseline="none")
    if method in ("dsvdd", "dsvdd_rec"):
        return replace(base, baseline=method)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def fit_method(train, method: str, cfg: BenchmarkConfig):
    """Train the global (and optionally local) model for one method; returns ``(global, local)``."""
    tcfg = method_config(cfg.train, method)
    trainer = run_em if method == "igd" else train_dsvdd_baseline
    g = trainer(train, tcfg, cfg.backbone)
    g = g[0] if isinstance(g, tuple) else g
    local = None
    if cfg.use_local and method == "igd":
        lcfg = method_config(cfg.local_train or replace(cfg.train, model_scope="local"), method)
        local = run_em(train, lcfg, cfg.local_backbone or cfg.backbone)[0]
    return g, local


def evaluate_models(test: LabeledImageSet, global_bundle, local_bundle, cfg: BenchmarkConfig):
    """Scores, AUC, accuracy and (optionally) pixel AUC on one test set."""
    x = torch.from_numpy(test.chw())
    breakdowns = detection_scores(x, global_bundle, local_bundle, stride=cfg.stride,
                                  use_local=local_bundle is not None)
    scores = np.array([b.s_total for b in breakdowns])
    auc = roc_auc(scores, test.labels)
    acc = accuracy_at_threshold(scores, test.labels, cfg.threshold)
    pix = None
    if cfg.pixel_metrics and test.masks is not None and global_bundle.network.decoder is not None:
        idx = [i for i in range(len(test)) if test.labels[i] == 1 and 0 < test.masks[i].mean() < 1]
        if idx:
            heats = [localization_map(x[i], global_bundle, local_bundle) for i in idx]
            pix = pixel_auc(heats, [test.masks[i] for i in idx])
    return scores, auc, acc, pix


def run_cell(data: LabeledImageSet, cfg: BenchmarkConfig, method: str, fraction: float,
             contamination: float) -> BenchmarkReport:
    """One (method, fraction, contamination) cell over all requested normal classes."""
    t0 = time.perf_counter()
    classes = list(cfg.classes) or sorted(set(data.classes))
    per_class, accs, pixs = {}, [], []
    for cls in classes:
        spec = SplitSpec(cls, fraction, contamination, cfg.seed)
        train, test = apply_split(data, spec)
        g, l = fit_method(train, method, cfg)
        _, auc, acc, pix = evaluate_models(test, g, l, cfg)
        per_class[str(cls)] = auc
        accs.append(acc)
        if pix is not None:
            pixs.append(pix)
    split = {"train_fraction": fraction, "contamination_rate": contamination, "seed": cfg.seed}
    return BenchmarkReport(
        dataset=cfg.dataset, split=split, method=method, per_class_auc=per_class,
        mean_auc=float(np.mean(list(per_class.values()))), accuracy=float(np.mean(accs)),
        pixel_auc=float(np.mean(pixs)) if pixs else None,
        config_hash=cell_hash(cfg, method, fraction, contamination),
        wall_clock=time.perf_counter() - t0,
    )


def cell_hash(cfg: BenchmarkConfig, method: str, fraction: float, contamination: float) -> str:
    d = asdict(cfg)
    return config_hash(d, method, fraction, contamination)


def run_benchmark(data: LabeledImageSet, cfg: BenchmarkConfig, out_dir=None, cache: bool = True):
    """Run every method over the fraction/contamination grid.

    With ``out_dir`` each finished cell is cached as JSON under ``cells/``
    (keyed by its config hash) and reused on re-runs; the combined CSV and a
    text summary are written at the end. Returns the list of reports.
    """
    reports = []
    cell_dir = Path(out_dir) / "cells" if out_dir is not None else None
    for method in cfg.methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        for fraction, contamination in cfg.grid():
            h = cell_hash(cfg, method, fraction, contamination)
            cached = cell_dir / f"{h}.json" if cell_dir is not None else None
            if cache and cached is not None and cached.exists():
                reports.append(BenchmarkReport(**json.loads(cached.read_text(encoding="utf-8"))))
                continue
            log.info("benchmark cell method=%s fraction=%s contamination=%s", method, fraction, contamination)
            rep = run_cell(data, cfg, method, fraction, contamination)
            reports.append(rep)
            if cached is not None:
                cached.parent.mkdir(parents=True, exist_ok=True)
                cached.write_text(json.dumps(asdict(rep), sort_keys=True), encoding="utf-8")
    if out_dir is not None:
        write_report_files(out_dir, reports, cfg)
    return reports


REPORT_COLUMNS = ("dataset", "method", "train_fraction", "contamination_rate", "seed", "mean_auc",
                  "accuracy", "pixel_auc", "per_class_auc", "config_hash")


def write_report_files(out_dir, reports, cfg: BenchmarkConfig | None = None, stem: str = "benchmark",
                       name_hash: str | None = None) -> tuple:
    """CSV (one row per report) plus a text summary; names embed hash and seed.

    ``name_hash`` defaults to a digest of the reports' own config hashes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if cfg is not None else (reports[0].split.get("seed") if reports else 0)
    h = name_hash or config_hash([r.config_hash for r in reports])
    csv_path = out_dir / f"{stem}_{h}_seed{seed}.csv"
    txt_path = out_dir / f"{stem}_{h}_seed{seed}.txt"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    lines = [f"{'method':<10} {'fraction':>8} {'contam':>7} {'meanAUC':>8} {'acc':>6} {'pixAUC':>7}"]
    for r in reports:
        pix = f"{r.pixel_auc:.4f}" if r.pixel_auc is not None else "-"
        lines.append(f"{r.method:<10} {r.split['train_fraction']:>8.2f} {r.split['contamination_rate']:>7.2f} "
                     f"{r.mean_auc:>8.4f} {r.accuracy:>6.3f} {pix:>7}")
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return csv_path, txt_path
