"""Experiment configuration: YAML file, environment overrides, hashing, output layout.

Precedence is CLI ``--set`` > ``IGD_<SECTION>_<KEY>`` environment variables >
config file > defaults. Environment variable names are the dotted key path in
upper case with dots replaced by underscores, e.g. ``IGD_TRAIN_GLOBAL_EPOCHS``
or ``IGD_DATASET_PATH``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .models import BackboneConfig
from .trainer import TrainConfig

DATASET_KINDS = ("folder", "synthetic", "mnist")
RUN_SUBDIRS = ("checkpoints", "reports", "heatmaps", "logs")
ENV_PREFIX = "IGD_"


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending dotted key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    path: str | None = None
    resolution: list = field(default_factory=lambda: [32, 32])
    normal_class: str = "blob"
    train_fraction: float = 1.0
    contamination_rate: float = 0.0
    # synthetic generator sizes
    n_normal: int = 250
    n_anomalous: int = 100


@dataclass
class EvalSection:
    metrics: list = field(default_factory=lambda: ["auc", "accuracy", "pixel_auc"])
    stride: list | None = None
    threshold: float = 0.5
    use_local: bool = True
    smooth: int = 0


@dataclass
class BenchmarkSection:
    methods: list = field(default_factory=lambda: ["igd", "dsvdd", "dsvdd_rec"])
    fractions: list = field(default_factory=lambda: [0.2, 0.6, 1.0])
    contamination: list = field(default_factory=lambda: [0.01, 0.05, 0.10])
    classes: list = field(default_factory=list)


def _default_tree() -> dict:
    local_train = TrainConfig(model_scope="local").to_dict()
    return {
        "dataset": asdict(DatasetSection()),
        "model": {"global": BackboneConfig().to_dict(), "local": BackboneConfig().to_dict()},
        "train": {"global": TrainConfig().to_dict(), "local": local_train},
        "eval": asdict(EvalSection()),
        "benchmark": asdict(BenchmarkSection()),
        "output_dir": "out",
        "seed": 0,
    }


def _leaf_paths(tree: dict, prefix=()):
    for k, v in tree.items():
        if isinstance(v, dict):
            yield from _leaf_paths(v, prefix + (k,))
        else:
            yield prefix + (k,)


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        name = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(name, "unknown key")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(name, "expected a mapping")
            out[k] = _merge(out[k], v, name + ".")
        else:
            out[k] = v
    return out


def _set_path(tree: dict, path, value) -> None:
    node = tree
    for k in path[:-1]:
        node = node[k]
    node[path[-1]] = value


def _parse_scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def env_overrides(environ=None) -> dict:
    """``{dotted.path: value}`` for every ``IGD_*`` variable naming a known key."""
    environ = os.environ if environ is None else environ
    known = {"_".join(p).upper(): p for p in _leaf_paths(_default_tree())}
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):]
        if key in known:
            out[".".join(known[key])] = _parse_scalar(raw)
    return out


def parse_assignments(items) -> dict:
    """``["train.global.epochs=3", ...]`` -> ``{"train.global.epochs": 3}``."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = _parse_scalar(raw)
    return out


def _apply_dotted(tree: dict, overrides: dict) -> dict:
    tree = copy.deepcopy(tree)
    known = set(_leaf_paths(_default_tree()))
    for key, value in overrides.items():
        path = tuple(key.split("."))
        if path not in known:
            raise ConfigError(key, "unknown key")
        _set_path(tree, path, value)
    return tree


@dataclass
class ExperimentConfig:
    dataset: DatasetSection
    model_global: BackboneConfig
    model_local: BackboneConfig
    train_global: TrainConfig
    train_local: TrainConfig
    eval: EvalSection
    benchmark: BenchmarkSection
    output_dir: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, tree: dict) -> "ExperimentConfig":
        """Validate a (possibly partial) tree against the defaults."""
        full = _merge(_default_tree(), tree or {})
        d = full["dataset"]
        try:
            ds = DatasetSection(**d)
        except TypeError as exc:
            raise ConfigError("dataset", str(exc)) from None
        if ds.kind not in DATASET_KINDS:
            raise ConfigError("dataset.kind", f"must be one of {DATASET_KINDS}, got {ds.kind!r}")
        if ds.kind == "folder":
            if not ds.path:
                raise ConfigError("dataset.path", "required for folder datasets")
            if not Path(ds.path).is_dir():
                raise ConfigError("dataset.path", f"directory not found: {ds.path}")
        if not (isinstance(ds.resolution, (list, tuple)) and len(ds.resolution) == 2):
            raise ConfigError("dataset.resolution", "expected [H, W]")
        ds.resolution = [int(v) for v in ds.resolution]
        ds.normal_class = str(ds.normal_class)
        for name in ("train_fraction", "contamination_rate"):
            setattr(ds, name, float(getattr(ds, name)))
        if not 0.0 < ds.train_fraction <= 1.0:
            raise ConfigError("dataset.train_fraction", "must lie in (0, 1]")
        if not 0.0 <= ds.contamination_rate < 1.0:
            raise ConfigError("dataset.contamination_rate", "must lie in [0, 1)")

        built = {}
        for section, scope, ctor in (("model", "global", BackboneConfig), ("model", "local", BackboneConfig),
                                     ("train", "global", TrainConfig), ("train", "local", TrainConfig)):
            try:
                built[f"{section}_{scope}"] = ctor(**full[section][scope])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}.{scope}", str(exc)) from None
        if built["train_global"].model_scope != "global":
            raise ConfigError("train.global.model_scope", "must be 'global'")
        if built["train_local"].model_scope != "local":
            raise ConfigError("train.local.model_scope", "must be 'local'")
        try:
            ev = EvalSection(**full["eval"])
            bench = BenchmarkSection(**full["benchmark"])
        except TypeError as exc:
            raise ConfigError("eval", str(exc)) from None
        if not isinstance(full["seed"], int) or isinstance(full["seed"], bool):
            raise ConfigError("seed", "must be an integer")
        return cls(dataset=ds, eval=ev, benchmark=bench, output_dir=str(full["output_dir"]),
                   seed=full["seed"], **built)

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "model": {"global": self.model_global.to_dict(), "local": self.model_local.to_dict()},
            "train": {"global": self.train_global.to_dict(), "local": self.train_local.to_dict()},
            "eval": asdict(self.eval),
            "benchmark": asdict(self.benchmark),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        """Stable under key order; excludes ``output_dir`` and ``seed`` (both are path levels)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def train_config(self, scope: str) -> TrainConfig:
        """Per-scope TrainConfig with the experiment seed applied."""
        base = self.train_global if scope == "global" else self.train_local
        return replace(base, seed=self.seed)

    def backbone(self, scope: str) -> BackboneConfig:
        return self.model_global if scope == "global" else self.model_local

    def run_dir(self, create: bool = True) -> Path:
        root = Path(self.output_dir) / self.hash() / str(self.seed)
        if create:
            for sub in RUN_SUBDIRS:
                (root / sub).mkdir(parents=True, exist_ok=True)
        return root


def load_config(path=None, overrides=None, environ=None) -> ExperimentConfig:
    """Resolve defaults <- file <- environment <- ``overrides`` (dotted keys)."""
    tree = _default_tree()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {path}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"not valid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top level must be a mapping")
        tree = _merge(tree, loaded)
    tree = _apply_dotted(tree, env_overrides(environ))
    tree = _apply_dotted(tree, overrides or {})
    return ExperimentConfig.from_dict(tree)
