"""Experiment configuration: a strict YAML tree.

Every key is checked against a schema before any computation starts.
Unknown keys, wrong types and missing required keys raise
:class:`ConfigError` with the file, line and dotted key path.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .errors import ConfigError
from .trainer import TrainConfig

OUTPUT_ENV = "CPPO_OUTPUT_DIR"


@dataclass
class CertifyConfig:
    samples: int = 10000
    seed: int = 0
    safety_factor: float = 1.1
    iss: bool = True
    iss_trajectories: int = 25
    iss_horizon: float = 4.0
    residual_csv: bool = True


@dataclass
class PerturbConfig:
    kind: str = "constant_push"
    magnitudes: Optional[list] = None      # default: four values up to 0.8 d_bar
    direction: Optional[list] = None
    frequency: float = 1.0
    onset: float = 0.0
    duration: float = math.inf
    trajectories: int = 25
    horizon: float = 4.0
    seed: int = 0
    csv_trajectories: Optional[int] = None   # default: every trajectory


@dataclass
class AblateConfig:
    eval_episodes: int = 100
    eval_samples: int = 2000
    eval_seed: int = 4242
    magnitudes: Optional[list] = None
    kind: str = "constant_push"


@dataclass
class ExperimentConfig:
    system_name: str
    system_params: dict
    train: TrainConfig
    certify: CertifyConfig
    perturb: PerturbConfig
    ablate: AblateConfig
    output_dir: str = "out"
    seed: int = 0
    source: str = "<config>"


# -- schema ---------------------------------------------------------------

_NUM = (int, float)
_TRAIN_TYPES = {
    "iterations": int, "seed": int, "n_envs": int, "horizon": int, "epochs": int,
    "minibatches": int, "lr": _NUM, "gamma": _NUM, "gae_lambda": _NUM, "clip_ratio": _NUM,
    "entropy_coef": _NUM, "value_coef": _NUM, "max_grad_norm": (int, float, type(None)),
    "lr_schedule": str, "desired_kl": _NUM, "value_clip": (int, float, type(None)),
    "alpha": _NUM, "epsilon": _NUM, "w_contr": _NUM, "w_pd": _NUM, "m_min": _NUM,
    "m_max": _NUM, "policy_hidden": list, "value_hidden": list, "metric_hidden": list,
    "policy_budgets": (list, type(None)), "value_budgets": (list, type(None)),
    "metric_budgets": list, "policy_activation": str, "kp": _NUM, "kd": _NUM,
    "action_clip": _NUM, "init_std": _NUM, "decimation": int, "dt": _NUM,
    "contraction_stride": int, "uniform_samples": int, "contraction_trains_policy": bool,
    "metric": str, "circle": _NUM, "control_cost": _NUM, "fail_reward": _NUM,
    "max_episode_ticks": int, "reset_fraction": _NUM, "disturbance": dict,
    "log_wallclock": bool,
}
_DIST_TYPES = {"kind": str, "magnitude": _NUM, "direction": list, "onset": _NUM,
               "duration": _NUM, "frequency": _NUM}
_CERT_TYPES = {"samples": int, "seed": int, "safety_factor": _NUM, "iss": bool,
               "iss_trajectories": int, "iss_horizon": _NUM, "residual_csv": bool}
_PERTURB_TYPES = {"kind": str, "magnitudes": list, "direction": list, "frequency": _NUM,
                  "onset": _NUM, "duration": _NUM, "trajectories": int, "horizon": _NUM,
                  "seed": int, "csv_trajectories": (int, type(None))}
_ABLATE_TYPES = {"eval_episodes": int, "eval_samples": int, "eval_seed": int,
                 "magnitudes": list, "kind": str}
_SYSTEM_TYPES = {"name": str, "params": dict, "observation": str}
_TOP_TYPES = {"system": dict, "train": dict, "certify": dict, "perturb": dict,
              "ablate": dict, "output_dir": str, "seed": int}


# -- YAML with line numbers -------------------------------------------------


def _construct(node, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for knode, vnode in node.value:
            if not isinstance(knode, yaml.ScalarNode):
                raise ConfigError(f"line {knode.start_mark.line + 1}: keys must be scalars")
            key = knode.value
            sub = f"{path}.{key}" if path else key
            if key in out:
                raise ConfigError(f"line {knode.start_mark.line + 1}: duplicate key '{sub}'")
            out[key] = _construct(vnode, sub, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_construct(v, f"{path}[{i}]", lines) for i, v in enumerate(node.value)]
    return _scalar(node)


def _scalar(node):
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


def parse_yaml(text, source="<config>"):
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from None
    lines = {}
    if root is None:
        return {}, lines
    data = _construct(root, "", lines)
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return data, lines


def _check(section, types, path, lines, source):
    for key, val in section.items():
        sub = f"{path}.{key}" if path else key
        where = f"{source}:{lines.get(sub, '?')}"
        if key not in types:
            raise ConfigError(f"{where}: unknown key '{sub}'")
        expected = types[key]
        if isinstance(val, bool) and expected is not bool and not (
                isinstance(expected, tuple) and bool in expected):
            raise ConfigError(f"{where}: key '{sub}' must not be a boolean")
        if not isinstance(val, expected):
            names = expected.__name__ if isinstance(expected, type) else "/".join(
                t.__name__ for t in expected)
            raise ConfigError(f"{where}: key '{sub}' should be {names}, got {type(val).__name__}")


def _build(cls, values, path, lines, source):
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}:{lines.get(path, '?')}: [{path}] {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{source}: [{path}] {exc}") from None


def load_config_text(text, source="<config>", env=None):
    data, lines = parse_yaml(text, source)
    _check(data, _TOP_TYPES, "", lines, source)
    if "system" not in data:
        raise ConfigError(f"{source}: missing required key 'system.name'")
    sysd = data["system"]
    _check(sysd, _SYSTEM_TYPES, "system", lines, source)
    if "name" not in sysd:
        raise ConfigError(f"{source}:{lines.get('system', '?')}: missing required key 'system.name'")
    params = dict(sysd.get("params", {}))
    if "observation" in sysd:
        params["observation"] = sysd["observation"]
    seed = data.get("seed", 0)
    tr = dict(data.get("train", {}))
    _check(tr, _TRAIN_TYPES, "train", lines, source)
    if "disturbance" in tr:
        _check(tr["disturbance"], _DIST_TYPES, "train.disturbance", lines, source)
    tr.setdefault("seed", seed)
    for k in ("policy_hidden", "value_hidden", "metric_hidden", "policy_budgets",
              "value_budgets", "metric_budgets"):
        if tr.get(k) is not None:
            tr[k] = tuple(tr[k])
    train = _build(TrainConfig, dict(tr, system=sysd["name"], system_params=params), "train",
                   lines, source)
    sections = {}
    for name, cls, types in (("certify", CertifyConfig, _CERT_TYPES),
                             ("perturb", PerturbConfig, _PERTURB_TYPES),
                             ("ablate", AblateConfig, _ABLATE_TYPES)):
        sec = data.get(name, {})
        _check(sec, types, name, lines, source)
        sections[name] = _build(cls, sec, name, lines, source)
    env = os.environ if env is None else env
    out_dir = env.get(OUTPUT_ENV) or data.get("output_dir", "out")
    cfg = ExperimentConfig(sysd["name"], params, train, sections["certify"],
                           sections["perturb"], sections["ablate"], out_dir, seed, source)
    # fail early on bad system parameters
    from .dynamics import make_system
    make_system(cfg.system_name, **cfg.system_params)
    return cfg


def load_config(path, env=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return load_config_text(text, str(path), env)


def train_config_with(cfg, **overrides):
    return dataclasses.replace(cfg, **overrides)
