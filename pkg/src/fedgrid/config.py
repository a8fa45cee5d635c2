"""JSON experiment configuration with line-aware diagnostics."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .env import AttackScenario, EnvConfig, build_scenario_pool
from .errors import ConfigError, FedGridError
from .federation import FedSchedule, TrainConfig
from .grid import NetworkModel, default_network
from .sac import SacHyper

SECTIONS = ("network", "env", "train", "output")
TRAIN_KEYS = {"episodes", "mode", "start_step", "interval", "clip_switch_fraction",
              "clip_switch_decentralized", "hyper", "seeds", "n_train", "n_test", "pool_seed"}
OUTPUT_KEYS = {"dir", "plots", "trace_buses"}


@dataclass
class ExperimentConfig:
    network: NetworkModel = field(default_factory=default_network)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: Path = Path("runs")
    plots: bool = True
    trace_buses: tuple[int, ...] = (0, 3, 6)
    n_train: int = 7
    n_test: int = 200
    seeds: tuple[int, ...] = (0, 1, 2)
    pool_seed: int = 0
    source: dict[str, Any] = field(default_factory=dict)

    def pools(self, n_test: int | None = None) -> tuple[list[AttackScenario], list[AttackScenario]]:
        """Disjoint train and held-out pools from independent child streams of ``pool_seed``."""
        train_ss, test_ss = np.random.SeedSequence(self.pool_seed).spawn(2)
        train = build_scenario_pool(self.network, self.env, self.n_train, np.random.default_rng(train_ss))
        n = self.n_test if n_test is None else n_test
        if n == 0:
            return train, []
        test = build_scenario_pool(self.network, self.env, n, np.random.default_rng(test_ss), exclude=train)
        return train, test

    def for_seed(self, seed: int, mode: str | None = None) -> TrainConfig:
        sch = self.train.schedule
        schedule = FedSchedule(sch.start_step, sch.interval, mode or sch.mode)
        return dataclasses.replace(self.train, schedule=schedule, seed=seed)

    def echo(self) -> dict[str, Any]:
        """Canonical JSON-able view, used in checkpoints and for shape checks."""
        return {
            "network": self.network.to_dict(),
            "env": {k: _plain(v) for k, v in dataclasses.asdict(self.env).items()},
            "hyper": {k: _plain(v) for k, v in dataclasses.asdict(self.train.hyper).items()},
        }


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    if hasattr(v, "value"):
        return v.value
    return v


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _fail(text: str, path: str, key: str, msg: str) -> ConfigError:
    line = _line_of(text, key.split(".")[-1])
    where = f"{path}:{line}" if line else path
    return ConfigError(f"{where}: field '{key}': {msg}")


def _check_keys(text, path, section, got, allowed):
    for k in got:
        if k not in allowed:
            raise _fail(text, path, f"{section}.{k}", "unknown field")


def _build(text, path, key, factory, kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError, FedGridError) as exc:
        named = [k for k in kwargs if re.search(r"\b%s\b" % re.escape(k), str(exc))]
        field_name = f"{key}.{named[0]}" if named else key
        raise _fail(text, path, field_name, str(exc)) from exc


def parse_config(text: str, path: str = "<config>", base_dir: Path | None = None) -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1: top level must be an object")
    _check_keys(text, path, "<top>", doc, SECTIONS)
    base_dir = base_dir or Path(".")

    net_spec = doc.get("network", "default")
    if net_spec == "default":
        network = default_network()
    elif isinstance(net_spec, str):
        net_path = base_dir / net_spec
        if not net_path.is_file():
            raise _fail(text, path, "network", f"file not found: {net_path}")
        network = _build(text, path, "network", NetworkModel.from_dict, {"d": json.loads(net_path.read_text())})
    elif isinstance(net_spec, dict):
        try:
            network = NetworkModel.from_dict(net_spec)
        except (KeyError, TypeError, ValueError, FedGridError) as exc:
            raise _fail(text, path, "network", f"invalid network: {exc}") from exc
    else:
        raise _fail(text, path, "network", "expected \"default\", a file name or an object")

    env_kw = doc.get("env", {})
    valid_env = {f.name for f in dataclasses.fields(EnvConfig)}
    _check_keys(text, path, "env", env_kw, valid_env)
    env = _build(text, path, "env", EnvConfig, env_kw)

    tr = dict(doc.get("train", {}))
    _check_keys(text, path, "train", tr, TRAIN_KEYS)
    hyper_kw = tr.pop("hyper", {})
    _check_keys(text, path, "hyper", hyper_kw, {f.name for f in dataclasses.fields(SacHyper)})
    hyper = _build(text, path, "hyper", SacHyper, hyper_kw)
    sched_kw = {k: tr.pop(k) for k in ("start_step", "interval", "mode") if k in tr}
    schedule = _build(text, path, "train", FedSchedule, sched_kw)
    extra = {k: tr.pop(k) for k in ("seeds", "n_train", "n_test", "pool_seed") if k in tr}
    train = _build(text, path, "train", TrainConfig, dict(tr, schedule=schedule, hyper=hyper))

    seeds = tuple(extra.get("seeds", (0, 1, 2)))
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise _fail(text, path, "train.seeds", "need a non-empty list of non-negative integers")
    for k in ("n_train", "n_test"):
        if k in extra and (not isinstance(extra[k], int) or extra[k] < 1):
            raise _fail(text, path, f"train.{k}", "must be a positive integer")

    out = doc.get("output", {})
    _check_keys(text, path, "output", out, OUTPUT_KEYS)
    trace_buses = tuple(out.get("trace_buses", (0, 3, 6)))
    if any(not 0 <= b < network.n_buses for b in trace_buses):
        raise _fail(text, path, "output.trace_buses", f"bus index outside 0..{network.n_buses - 1}")

    return ExperimentConfig(
        network=network, env=env, train=train,
        output_dir=base_dir / out.get("dir", "runs"),
        plots=bool(out.get("plots", True)),
        trace_buses=trace_buses,
        n_train=extra.get("n_train", 7), n_test=extra.get("n_test", 200),
        seeds=seeds, pool_seed=int(extra.get("pool_seed", 0)),
        source=doc,
    )


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a config file; ``None`` gives the built-in defaults."""
    if path is None:
        return parse_config("{}")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    return parse_config(path.read_text(encoding="utf-8"), str(path), path.parent)
