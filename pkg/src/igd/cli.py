"""Command line entry point: ``igd train | eval | benchmark | heatmap``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 checkpoint incompatible with the configuration (override with ``--force``).
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import datasets as ds
from .config import ConfigError, ExperimentConfig, load_config, parse_assignments
from .evaluation import (BenchmarkConfig, BenchmarkReport, accuracy_at_threshold, pixel_auc, roc_auc,
                         run_benchmark, write_report_files)
from .inference import (detection_scores, localization_map, save_heatmap_float, save_heatmap_png,
                        write_scores_csv)
from .trainer import load_checkpoint, run_em, train_dsvdd_baseline, write_loss_csv

log = logging.getLogger("igd")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_INCOMPATIBLE = 0, 1, 2, 3


class IncompatibleCheckpoint(RuntimeError):
    pass


def load_dataset(cfg: ExperimentConfig) -> ds.LabeledImageSet:
    d = cfg.dataset
    res = tuple(d.resolution)
    if d.kind == "synthetic":
        return ds.synthetic_blobs(n_normal=d.n_normal, n_stripes=d.n_anomalous, n_corrupt=d.n_anomalous,
                                  resolution=res, seed=cfg.seed)
    if d.kind == "mnist":
        return ds.load_mnist_subset(resolution=res)
    try:
        return ds.load_image_folder(d.path, resolution=res)
    except FileNotFoundError as exc:
        raise ConfigError("dataset.path", str(exc)) from None


def split_dataset(cfg: ExperimentConfig, data=None):
    data = load_dataset(cfg) if data is None else data
    spec = ds.SplitSpec(cfg.dataset.normal_class, cfg.dataset.train_fraction,
                        cfg.dataset.contamination_rate, cfg.seed)
    try:
        return ds.apply_split(data, spec)
    except ValueError as exc:
        raise ConfigError("dataset.normal_class", str(exc)) from None


def _setup_logging(run_dir: Path, name: str, verbose: bool):
    handler = logging.FileHandler(run_dir / "logs" / f"{name}.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers = [handler]
    if verbose:
        root.addHandler(logging.StreamHandler(sys.stderr))
    root.setLevel(logging.INFO)


def _resolve(args) -> ExperimentConfig:
    overrides = parse_assignments(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    return load_config(args.config, overrides)


def _snapshot(cfg: ExperimentConfig, run_dir: Path):
    (run_dir / "config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")


# -- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve(args)
    run_dir = cfg.run_dir()
    _setup_logging(run_dir, "train", args.verbose)
    _snapshot(cfg, run_dir)
    train, test = split_dataset(cfg)
    ds.write_manifest(run_dir / "logs" / "split_manifest.csv", train, test)
    ckpt_dir = run_dir / "checkpoints"
    h = cfg.hash()
    gcfg = cfg.train_config("global")
    if gcfg.baseline != "none":
        bundle = train_dsvdd_baseline(train, gcfg, cfg.backbone("global"), ckpt_dir, h)
        write_loss_csv(run_dir / "logs" / "loss_global.csv", bundle.state.loss_history)
        print(f"trained {gcfg.baseline} baseline -> {ckpt_dir}")
        return EXIT_OK
    scopes = ("global", "local") if not args.global_only else ("global",)
    for scope in scopes:
        t0 = time.perf_counter()
        tcfg = cfg.train_config(scope)
        log.info("training %s model for %d epochs", scope, tcfg.epochs)
        _, state = run_em(train, tcfg, cfg.backbone(scope), ckpt_dir, h,
                          progress=lambda r, s=scope: log.info("%s epoch %d total=%.6f", s, r["epoch"], r["total"]))
        write_loss_csv(run_dir / "logs" / f"loss_{scope}.csv", state.loss_history)
        log.info("%s model done in %.1fs", scope, time.perf_counter() - t0)
    print(f"checkpoints written to {ckpt_dir}")
    return EXIT_OK


def _load_bundle(path: Path, cfg: ExperimentConfig, force: bool):
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    bundle = load_checkpoint(path)
    if bundle.config_hash != cfg.hash():
        msg = f"{path}: checkpoint config hash {bundle.config_hash!r} != config hash {cfg.hash()!r}"
        if not force:
            raise IncompatibleCheckpoint(msg + " (use --force to override)")
        log.warning("%s; continuing because of --force", msg)
    return bundle


def _models(args, cfg: ExperimentConfig, run_dir: Path):
    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else run_dir / "checkpoints"
    g_path = Path(args.global_checkpoint) if args.global_checkpoint else ckpt_dir / "global.igdw"
    if not g_path.exists() and not args.global_checkpoint:
        baseline = cfg.train_global.baseline
        if baseline != "none":
            g_path = ckpt_dir / f"global_{baseline}.igdw"
    g = _load_bundle(g_path, cfg, args.force)
    local = None
    if cfg.eval.use_local and g.kind == "igd":
        l_path = Path(args.local_checkpoint) if args.local_checkpoint else ckpt_dir / "local.igdw"
        local = _load_bundle(l_path, cfg, args.force)
    return g, local


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    run_dir = cfg.run_dir()
    _setup_logging(run_dir, "eval", args.verbose)
    g, local = _models(args, cfg, run_dir)
    _, test = split_dataset(cfg)
    t0 = time.perf_counter()
    x = torch.from_numpy(test.chw())
    stride = tuple(cfg.eval.stride) if cfg.eval.stride else None
    breakdowns = detection_scores(x, g, local, stride=stride, use_local=local is not None)
    scores = np.array([b.s_total for b in breakdowns])
    stem = f"{cfg.hash()}_seed{cfg.seed}"
    reports = run_dir / "reports"
    write_scores_csv(reports / f"scores_{stem}.csv", test.ids, test.labels, breakdowns)

    auc = acc = pix = None
    has_both = 0 < test.labels.sum() < len(test.labels)
    if has_both and "auc" in cfg.eval.metrics:
        auc = roc_auc(scores, test.labels)
    if "accuracy" in cfg.eval.metrics:
        acc = accuracy_at_threshold(scores, test.labels, cfg.eval.threshold)
    anomalous = np.flatnonzero(test.labels == 1)
    heats = {}
    if g.network.decoder is not None and (args.emit_heatmaps or "pixel_auc" in cfg.eval.metrics):
        for i in anomalous:
            heats[i] = localization_map(x[i], g, local, smooth=cfg.eval.smooth)
    if args.emit_heatmaps:
        for i, heat in heats.items():
            name = test.ids[i].replace("/", "__")
            save_heatmap_png(run_dir / "heatmaps" / f"{name}.png", heat)
            save_heatmap_float(run_dir / "heatmaps" / f"{name}.igdh", heat)
    if "pixel_auc" in cfg.eval.metrics and test.masks is not None:
        idx = [i for i in heats if 0 < test.masks[i].mean() < 1]
        if idx:
            pix = pixel_auc([heats[i] for i in idx], [test.masks[i] for i in idx])

    split = {"train_fraction": cfg.dataset.train_fraction, "contamination_rate": cfg.dataset.contamination_rate,
             "seed": cfg.seed}
    report = BenchmarkReport(dataset=cfg.dataset.kind, split=split, method=g.kind,
                             per_class_auc={cfg.dataset.normal_class: auc} if auc is not None else {},
                             mean_auc=auc if auc is not None else float("nan"),
                             accuracy=acc if acc is not None else float("nan"), pixel_auc=pix,
                             config_hash=cfg.hash(), wall_clock=time.perf_counter() - t0)
    csv_path, _ = write_report_files(reports, [report], stem="eval", name_hash=cfg.hash())
    normal_mean = scores[test.labels == 0].mean() if (test.labels == 0).any() else float("nan")
    anomal_mean = scores[test.labels == 1].mean() if (test.labels == 1).any() else float("nan")
    print(f"auc={auc} accuracy={acc} pixel_auc={pix} mean_score_normal={normal_mean:.6f} "
          f"mean_score_anomalous={anomal_mean:.6f} report={csv_path}")
    return EXIT_OK


def benchmark_config(cfg: ExperimentConfig) -> BenchmarkConfig:
    b = cfg.benchmark
    return BenchmarkConfig(
        dataset=cfg.dataset.kind,
        classes=tuple(b.classes) or (cfg.dataset.normal_class,),
        methods=tuple(b.methods),
        fractions=tuple(float(f) for f in b.fractions),
        contamination=tuple(float(c) for c in b.contamination),
        seed=cfg.seed,
        train=cfg.train_config("global"),
        local_train=cfg.train_config("local"),
        backbone=cfg.backbone("global"),
        local_backbone=cfg.backbone("local"),
        use_local=cfg.eval.use_local,
        pixel_metrics="pixel_auc" in cfg.eval.metrics,
        threshold=cfg.eval.threshold,
        stride=tuple(cfg.eval.stride) if cfg.eval.stride else None,
    )


def cmd_benchmark(args) -> int:
    cfg = _resolve(args)
    run_dir = cfg.run_dir()
    _setup_logging(run_dir, "benchmark", args.verbose)
    _snapshot(cfg, run_dir)
    bcfg = benchmark_config(cfg)
    reports = run_benchmark(load_dataset(cfg), bcfg, out_dir=run_dir / "reports", cache=not args.no_cache)
    for r in reports:
        print(f"{r.method:<10} fraction={r.split['train_fraction']:.2f} "
              f"contamination={r.split['contamination_rate']:.2f} mean_auc={r.mean_auc:.4f}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    cfg = _resolve(args)
    run_dir = cfg.run_dir()
    _setup_logging(run_dir, "heatmap", args.verbose)
    g, local = _models(args, cfg, run_dir)
    out_dir = Path(args.out) if args.out else run_dir / "heatmaps"
    from PIL import Image

    mode = "L" if g.backbone.channels == 1 else "RGB"
    for p in args.images:
        p = Path(p)
        img = Image.open(p).convert(mode).resize(tuple(reversed(g.backbone.input_resolution)), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        heat = localization_map(torch.from_numpy(arr), g, local, smooth=args.smooth or cfg.eval.smooth)
        save_heatmap_png(out_dir / f"{p.stem}.png", heat)
        save_heatmap_float(out_dir / f"{p.stem}.igdh", heat)
        print(f"{p} -> {out_dir / p.stem}.{{png,igdh}}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", "-c", help="YAML experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.global.epochs=5 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--verbose", "-v", action="store_true")


def _checkpoint_args(p):
    p.add_argument("--checkpoint-dir", help="defaults to <run dir>/checkpoints")
    p.add_argument("--global-checkpoint")
    p.add_argument("--local-checkpoint")
    p.add_argument("--force", action="store_true", help="accept checkpoints whose config hash differs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="igd", description="Interpolated Gaussian descriptor anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the global and local models")
    _common(p)
    p.add_argument("--global-only", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score the test split and write reports")
    _common(p)
    _checkpoint_args(p)
    p.add_argument("--emit-heatmaps", action="store_true",
                   help="write a PNG and a float heatmap per anomalous test image")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark", help="fraction/contamination sweep over methods")
    _common(p)
    p.add_argument("--no-cache", action="store_true", help="recompute cells even if cached")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("heatmap", help="localisation heatmaps for image files")
    _common(p)
    _checkpoint_args(p)
    p.add_argument("images", nargs="+")
    p.add_argument("--out", help="output directory (defaults to <run dir>/heatmaps)")
    p.add_argument("--smooth", type=int, default=0, help="box blur width, 0 disables")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompatibleCheckpoint as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.exception("command failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
