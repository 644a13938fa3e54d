"""Experiment configuration files (JSON, strict keys)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError
from .models import model_from_dict
from .perturb import PerturbationConfig
from .sampler import IecConfig
from .schedule import make_beta_schedule, select_timesteps

DEFAULT_LAMBDAS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
ABLATION_AXES = ("lambda", "K", "policy", "cache_N", "bits", "sigma", "T")

_SECTIONS = {
    "schedule": {"kind", "T_train", "beta_start", "beta_end", "T_sample"},
    "model": None,  # validated by the model constructor
    "perturbation": {"kind", "sigma", "bits", "interval_N", "seed"},
    "iec": {"lambda", "K", "tau", "policy", "fraction", "steps", "inner_timestep"},
    "run": {"n_trajectories", "base_seed", "out_dir", "workers", "n_reference"},
    "norms": {"lambdas"},
    "ablate": set(ABLATION_AXES),
}
_MODEL_KEYS = {
    "mixture": {"kind", "weights", "means", "covariances"},
    "linear": {"kind", "mu", "sigma"},
}


def parse_policy(value) -> dict:
    """Accept ``"all"``, ``"none"``, ``"first_last:1/20"`` or an ``iec``-style dict."""
    if isinstance(value, dict):
        unknown = set(value) - {"policy", "fraction", "steps"}
        if unknown:
            raise ConfigError(f"unknown policy keys {sorted(unknown)}")
        return dict(value)
    if not isinstance(value, str):
        raise ConfigError(f"cannot parse policy {value!r}")
    name, _, arg = value.partition(":")
    name = name.strip()
    if name in ("all", "none"):
        return {"policy": name}
    if name == "first_last":
        try:
            return {"policy": name, "fraction": float(Fraction(arg.strip()))}
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad first_last fraction in {value!r}") from exc
    raise ConfigError(f"unknown policy {value!r}")


@dataclass
class ExperimentConfig:
    schedule: dict = field(default_factory=lambda: {
        "kind": "linear", "T_train": 1000, "beta_start": 1e-4, "beta_end": 0.02})
    T_sample: int = 100
    model: dict = field(default_factory=lambda: {"kind": "mixture"})
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    iec: IecConfig = field(default_factory=IecConfig)
    n_trajectories: int = 100
    base_seed: int = 0
    out_dir: str = "runs"
    workers: int = 1
    n_reference: int = 100_000
    lambdas: tuple = DEFAULT_LAMBDAS
    ablate: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.n_trajectories) != self.n_trajectories or self.n_trajectories < 1:
            raise ConfigError("n_trajectories must be a positive integer")
        if int(self.workers) != self.workers or self.workers < 1:
            raise ConfigError("workers must be a positive integer")
        if not 0 <= int(self.base_seed) < 2**64:
            raise ConfigError("base_seed must be an unsigned 64-bit integer")
        try:
            self.build_model()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid model or schedule: {exc}") from exc

    def build_schedule(self):
        s = self.schedule
        base = make_beta_schedule(s.get("kind", "linear"), s.get("T_train", 1000),
                                  s.get("beta_start", 1e-4), s.get("beta_end", 0.02))
        return select_timesteps(base, self.T_sample)

    def build_model(self, schedule=None):
        return model_from_dict(self.model, schedule or self.build_schedule())

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_trajectories)]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "schedule": {**self.schedule, "T_sample": self.T_sample},
            "model": self.build_model().to_dict(),
            "perturbation": self.perturbation.to_dict(),
            "iec": self.iec.to_dict(),
            "run": {"n_trajectories": self.n_trajectories, "base_seed": self.base_seed,
                    "out_dir": self.out_dir, "workers": self.workers,
                    "n_reference": self.n_reference},
            "norms": {"lambdas": list(self.lambdas)},
            "ablate": self.ablate,
        }


def iec_from_dict(d: dict) -> IecConfig:
    d = dict(d)
    if "lambda" in d:
        d["lam"] = d.pop("lambda")
    if "steps" in d:
        d["steps"] = tuple(d["steps"])
    return IecConfig(**d)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    for name, allowed in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        if allowed is not None and set(section) - allowed:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(set(section) - allowed)}")
    model = dict(raw.get("model", {}))
    kind = model.get("kind", "mixture")
    if kind not in _MODEL_KEYS:
        raise ConfigError(f"unknown model kind {kind!r}")
    if set(model) - _MODEL_KEYS[kind]:
        raise ConfigError(f"unknown keys in 'model': {sorted(set(model) - _MODEL_KEYS[kind])}")
    model["kind"] = kind

    sched = dict(raw.get("schedule", {}))
    T_sample = sched.pop("T_sample", 100)
    run = raw.get("run", {})
    ablate = raw.get("ablate", {})
    if "policy" in ablate:
        for v in ablate["policy"]:
            parse_policy(v)
    iec_raw = dict(raw.get("iec", {}))
    if isinstance(iec_raw.get("policy"), str) and ":" in iec_raw["policy"]:
        iec_raw.update(parse_policy(iec_raw["policy"]))
    try:
        return ExperimentConfig(
            schedule={"kind": "linear", "T_train": 1000, "beta_start": 1e-4,
                      "beta_end": 0.02, **sched},
            T_sample=T_sample,
            model=model,
            perturbation=PerturbationConfig(**raw.get("perturbation", {})),
            iec=iec_from_dict(iec_raw),
            n_trajectories=run.get("n_trajectories", 100),
            base_seed=run.get("base_seed", 0),
            out_dir=run.get("out_dir", "runs"),
            workers=run.get("workers", 1),
            n_reference=run.get("n_reference", 100_000),
            lambdas=tuple(raw.get("norms", {}).get("lambdas", DEFAULT_LAMBDAS)),
            ablate=ablate,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)
