"""Run configuration: a strict YAML key-value tree.

Unknown keys anywhere in the tree are rejected so a typoed
hyperparameter can never silently fall back to a default. The schema:

    task: classification | segmentation
    seed: <int>
    network:
      dim: 2 | 3                (default 3)
      n_input: <int>            nominal input point count
      num_classes: <int>
      layers:                   conv stack, ordered
        - {k, d, n_out, c_out, c_delta?, with_global?, sampler?}
      deconv_layers:            segmentation only
        - {k, d, mirror, c_out, c_delta?, with_global?}
      fc_head: [<int>, ...]
      dropout: <float>          (default 0.5)
    optimizer:
      lr: <float>               (default 0.01)
      batch_size: <int>         (default 16)
      epochs: <int>
    augmentation:
      enabled: <bool>           (default true)
      resample_target: <int>    (default network.n_input)
    paths:
      dataset: <manifest path>
      checkpoint_dir: <dir>
      metrics_out: <file>
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .network import ConvLayerSpec, DeconvSpec, NetworkSpec


def _require_mapping(node, where: str) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(node).__name__}")
    return node


def _check_keys(node: dict, allowed: set, where: str) -> None:
    unknown = set(node) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _get(node: dict, key: str, kind, where: str, default=None, required=False):
    if key not in node:
        if required:
            raise ConfigError(f"missing required key '{key}' in {where}")
        return default
    value = node[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and (not isinstance(value, kind) or isinstance(value, bool)
                             and kind is not bool):
        raise ConfigError(f"{where}.{key} must be {kind.__name__}, "
                          f"got {type(value).__name__}")
    return value


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    batch_size: int = 16
    epochs: int = 30


@dataclass
class AugmentationConfig:
    enabled: bool = True
    resample_target: int = 256


@dataclass
class PathsConfig:
    dataset: str = ""
    checkpoint_dir: str = ""
    metrics_out: str = ""


@dataclass
class RunConfig:
    task: str
    seed: int
    network: NetworkSpec
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        if self.optimizer.lr <= 0:
            raise ConfigError("optimizer.lr must be positive")
        if self.optimizer.batch_size < 1:
            raise ConfigError("optimizer.batch_size must be >= 1")
        if self.optimizer.epochs < 1:
            raise ConfigError("optimizer.epochs must be >= 1")
        if self.augmentation.resample_target < 8:
            raise ConfigError("augmentation.resample_target must be >= 8")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        self.network.validate()
        return self

    def to_dict(self) -> dict:
        net = self.network
        layers = [{"k": s.k, "d": s.d, "n_out": s.n_out, "c_out": s.c_out,
                   "c_delta": s.c_delta, "with_global": s.with_global,
                   "sampler": s.sampler} for s in net.layers]
        deconv = [{"k": s.k, "d": s.d, "mirror": s.mirror, "c_out": s.c_out,
                   "c_delta": s.c_delta, "with_global": s.with_global}
                  for s in net.deconv_layers]
        return {
            "task": self.task,
            "seed": self.seed,
            "network": {
                "dim": net.dim, "n_input": net.n_input,
                "num_classes": net.num_classes, "layers": layers,
                "deconv_layers": deconv, "fc_head": list(net.fc_head),
                "dropout": net.dropout,
            },
            "optimizer": {"lr": self.optimizer.lr,
                          "batch_size": self.optimizer.batch_size,
                          "epochs": self.optimizer.epochs},
            "augmentation": {"enabled": self.augmentation.enabled,
                             "resample_target": self.augmentation.resample_target},
            "paths": {"dataset": self.paths.dataset,
                      "checkpoint_dir": self.paths.checkpoint_dir,
                      "metrics_out": self.paths.metrics_out},
        }

    def digest(self) -> str:
        """Stable short hash of the full configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _parse_layer(node, index: int) -> ConvLayerSpec:
    where = f"network.layers[{index}]"
    node = _require_mapping(node, where)
    _check_keys(node, {"k", "d", "n_out", "c_out", "c_delta", "with_global",
                       "sampler"}, where)
    return ConvLayerSpec(
        k=_get(node, "k", int, where, required=True),
        d=_get(node, "d", int, where, default=1),
        n_out=_get(node, "n_out", int, where, required=True),
        c_out=_get(node, "c_out", int, where, required=True),
        c_delta=_get(node, "c_delta", int, where),
        with_global=_get(node, "with_global", bool, where, default=False),
        sampler=_get(node, "sampler", str, where, default="random"),
    )


def _parse_deconv(node, index: int) -> DeconvSpec:
    where = f"network.deconv_layers[{index}]"
    node = _require_mapping(node, where)
    _check_keys(node, {"k", "d", "mirror", "c_out", "c_delta", "with_global"}, where)
    return DeconvSpec(
        k=_get(node, "k", int, where, required=True),
        d=_get(node, "d", int, where, default=1),
        mirror=_get(node, "mirror", int, where, required=True),
        c_out=_get(node, "c_out", int, where, required=True),
        c_delta=_get(node, "c_delta", int, where),
        with_global=_get(node, "with_global", bool, where, default=False),
    )


def parse_config(tree: dict) -> RunConfig:
    """Build and validate a RunConfig from a parsed YAML tree."""
    tree = _require_mapping(tree, "config")
    _check_keys(tree, {"task", "seed", "network", "optimizer", "augmentation",
                       "paths"}, "config")
    task = _get(tree, "task", str, "config", required=True)
    seed = _get(tree, "seed", int, "config", required=True)

    net_node = _require_mapping(tree.get("network"), "network")
    _check_keys(net_node, {"dim", "n_input", "num_classes", "layers",
                           "deconv_layers", "fc_head", "dropout"}, "network")
    layers_node = net_node.get("layers")
    if not isinstance(layers_node, list) or not layers_node:
        raise ConfigError("network.layers must be a non-empty list")
    layers = [_parse_layer(n, i) for i, n in enumerate(layers_node)]
    deconv_node = net_node.get("deconv_layers", [])
    if not isinstance(deconv_node, list):
        raise ConfigError("network.deconv_layers must be a list")
    deconv = [_parse_deconv(n, i) for i, n in enumerate(deconv_node)]
    fc_head = net_node.get("fc_head", [])
    if not isinstance(fc_head, list) or not all(
            isinstance(w, int) and not isinstance(w, bool) for w in fc_head):
        raise ConfigError("network.fc_head must be a list of integers")

    network = NetworkSpec(
        task=task,
        layers=layers,
        deconv_layers=deconv,
        fc_head=fc_head,
        dropout=_get(net_node, "dropout", float, "network", default=0.5),
        num_classes=_get(net_node, "num_classes", int, "network", required=True),
        n_input=_get(net_node, "n_input", int, "network", required=True),
        dim=_get(net_node, "dim", int, "network", default=3),
    )

    opt_node = _require_mapping(tree.get("optimizer", {}), "optimizer")
    _check_keys(opt_node, {"lr", "batch_size", "epochs"}, "optimizer")
    optimizer = OptimizerConfig(
        lr=_get(opt_node, "lr", float, "optimizer", default=0.01),
        batch_size=_get(opt_node, "batch_size", int, "optimizer", default=16),
        epochs=_get(opt_node, "epochs", int, "optimizer", default=30),
    )

    aug_node = _require_mapping(tree.get("augmentation", {}), "augmentation")
    _check_keys(aug_node, {"enabled", "resample_target"}, "augmentation")
    augmentation = AugmentationConfig(
        enabled=_get(aug_node, "enabled", bool, "augmentation", default=True),
        resample_target=_get(aug_node, "resample_target", int, "augmentation",
                             default=network.n_input),
    )

    paths_node = _require_mapping(tree.get("paths", {}), "paths")
    _check_keys(paths_node, {"dataset", "checkpoint_dir", "metrics_out"}, "paths")
    paths = PathsConfig(
        dataset=_get(paths_node, "dataset", str, "paths", default=""),
        checkpoint_dir=_get(paths_node, "checkpoint_dir", str, "paths", default=""),
        metrics_out=_get(paths_node, "metrics_out", str, "paths", default=""),
    )

    return RunConfig(task=task, seed=seed, network=network, optimizer=optimizer,
                     augmentation=augmentation, paths=paths).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    return parse_config(tree)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
