"""Experiment configuration files.

A config is a JSON document validated against ``config_schema.json``.
Defaults are filled in by :func:`resolve`, and the resolved document is
what gets stored in a run's manifest, so a manifest can be fed back to
``run`` to reproduce the same metrics.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import nn
from .data import DatasetConfig, PartitionConfig, cifar_files
from .fedsim import FedConfig
from .metagrad import BatchPlan, HyperParams

DEFAULTS = {
    "name": "experiment",
    "dataset": {
        "path": None, "n_features": 20, "classes": 10, "cluster_spread": 0.6, "samples": 50000, "seed": 0,
        "partition": {"samples_per_client": 1000, "train_fraction": 0.8, "dirichlet_alpha": 0.01,
                      "allow_replacement": True},
    },
    "model": {"kind": "mlp", "hidden": [80, 60]},
    "federation": {"eval_nu": None, "batch_size": 40, "hessian_batch_size": None, "stochastic_eval": False},
    "engine": {"mode": "exact", "delta": 1e-3, "hessian_mode": "hvp"},
    "theory": {"enabled": False, "probe_count": 3, "nu_sweep": [1, 2, 3, 4], "radius": 0.5, "big_O_const": 1.0,
               "max_clients": 8},
    "output": {"directory": "runs/experiment", "record_wall_time": False},
}

PRESETS = ("fig1", "fig2", "fig3", "fig4", "fig1_paper", "fig2_paper", "fig3_paper", "fig4_paper")


class ConfigError(ValueError):
    pass


def schema() -> dict:
    return json.loads(resources.files("gmetafl").joinpath("config_schema.json").read_text())


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return Path(str(resources.files("gmetafl").joinpath("presets", f"{name}.json")))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(schema()).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


def resolve(doc: dict) -> dict:
    """Validate ``doc`` and fill defaults; returns a new dict."""
    validate(doc)
    out = _merge(DEFAULTS, doc)
    fed = out["federation"]
    if fed["eval_nu"] is None:
        fed["eval_nu"] = fed["nu"]
    if fed["hessian_batch_size"] is None:
        fed["hessian_batch_size"] = fed["batch_size"]
    if "scenarios" not in out:
        out["scenarios"] = [{"label": f"{out['engine']['mode']}-nu{fed['nu']}",
                             "engine": out["engine"]["mode"], "nu": fed["nu"]}]
    for sc in out["scenarios"]:
        ev = sc.get("eval_nu", fed["eval_nu"])
        sc["eval_nu"] = [ev] if isinstance(ev, int) else list(ev)
        sc.setdefault("batch_size", fed["batch_size"])
        sc.setdefault("delta", out["engine"]["delta"])
        if sc["engine"] != "fo" and sc["nu"] < 1:
            raise ConfigError(f"scenarios/{sc['label']}: nu=0 requires the fo engine")
    labels = [sc["label"] for sc in out["scenarios"]]
    if len(set(labels)) != len(labels):
        raise ConfigError("scenarios: labels must be unique")
    ds = out["dataset"]
    if ds["kind"] != "synthetic":
        root = ds["path"] or os.environ.get("CIFAR_DATA_ROOT")
        if not root:
            raise ConfigError("dataset/path: not set and CIFAR_DATA_ROOT is not defined")
        for name in cifar_files("C10" if ds["kind"] == "cifar10" else "C100"):
            if not (Path(root) / name).is_file():
                raise ConfigError(f"dataset/path: CIFAR file not found: {Path(root) / name}")
        ds["path"] = str(root)
    part = ds["partition"]
    if ds["kind"] == "synthetic" and fed["n_clients"] * part["samples_per_client"] > ds["samples"]:
        raise ConfigError(
            f"dataset/samples: {ds['samples']} rows cannot serve {fed['n_clients']} clients x "
            f"{part['samples_per_client']} samples"
        )
    return out


def load(path) -> dict:
    """Load a config, a run manifest, or a preset name; returns the resolved dict."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        p = preset_path(str(path))
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
    if isinstance(doc, dict) and "config" in doc and "code_version" in doc:
        doc = doc["config"]
    return resolve(doc)


@dataclass
class Scenario:
    label: str
    fed: FedConfig
    eval_nus: list[int]


def dataset_config(cfg: dict, seed: int) -> DatasetConfig:
    ds = cfg["dataset"]
    part = ds["partition"]
    return DatasetConfig(
        kind=ds["kind"], path=ds["path"], n_features=ds["n_features"], classes=ds["classes"],
        cluster_spread=ds["cluster_spread"], samples=ds["samples"], data_seed=ds["seed"],
        partition=PartitionConfig(cfg["federation"]["n_clients"], part["samples_per_client"],
                                  part["train_fraction"], part["dirichlet_alpha"], seed,
                                  part["allow_replacement"]),
    )


def model_spec(cfg: dict, n_features: int, classes: int) -> nn.ModelSpec:
    m = cfg["model"]
    if m["kind"] == "quadratic":
        A = np.asarray(m["A"], dtype=np.float64)
        return nn.QuadraticSpec(A, np.asarray(m.get("b", np.zeros(len(A)))), classes=classes)
    return nn.MLPSpec(n_features, tuple(m["hidden"]), classes)


def scenarios(cfg: dict, seed: int, workers: int = 1) -> list[Scenario]:
    fed = cfg["federation"]
    out = []
    for sc in cfg["scenarios"]:
        plan = BatchPlan.uniform(sc["nu"], sc["batch_size"],
                                 fed["hessian_batch_size"] if sc["batch_size"] == fed["batch_size"]
                                 else sc["batch_size"])
        hp = HyperParams(fed["alpha"], fed["beta"], sc["nu"], fed["tau"], sc["delta"], plan)
        eval_nus = sc["eval_nu"]
        fc = FedConfig(
            n_clients=fed["n_clients"], participation=fed["participation"], rounds=fed["rounds"], hp=hp,
            engine=sc["engine"], eval_nu=eval_nus[0], seed=seed, init_seed=seed,
            hessian_mode=cfg["engine"]["hessian_mode"], stochastic_eval=fed["stochastic_eval"],
            eval_batch=sc["batch_size"], workers=workers, extra_eval_nus=tuple(eval_nus[1:]),
        )
        out.append(Scenario(sc["label"], fc, eval_nus))
    return out
