"""Run configuration: INI files with sections, resolved to typed objects.

Noise is always given as the per-coordinate std ``sigma``; the diffusion
time of the corruption is ``tau = sigma**2``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .data import FAMILY_DEFAULTS, DatasetSpec
from .diffusion import DiffusionSchedule, SolverConfig
from .errors import ConfigError
from .trainers import TrainConfig

SECTIONS = ("data", "model", "schedule", "solver", "train", "eval")


@dataclass
class EvalConfig:
    n_samples: int = 4096
    n_steps: int = 64
    probes: tuple = (0.5, 1.0, 2.0)
    seed: int = 0


@dataclass
class RunConfig:
    dataset: DatasetSpec
    train: TrainConfig
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    sync: bool = False
    sfbd_rounds: int = 5

    def to_dict(self):
        train = asdict(self.train)
        train["hidden_widths"] = list(self.train.hidden_widths)
        # output location is not part of the experiment's identity
        train.pop("out_dir")
        return {
            "dataset": asdict(self.dataset),
            "train": train,
            "evaluation": asdict(self.evaluation),
            "sync": self.sync,
            "sfbd_rounds": self.sfbd_rounds,
        }

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _floats(text):
    return [float(v) for v in text.replace(" ", "").split(",") if v]


def _points(text):
    """``"-1,-0.5; 1,0.5"`` -> ``[[-1.0, -0.5], [1.0, 0.5]]``."""
    return [_floats(chunk) for chunk in text.split(";") if chunk.strip()]


def _optional(parse):
    def wrapped(text):
        return None if text.strip().lower() in ("", "none", "auto") else parse(text)

    return wrapped


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_FAMILY_PARSERS = {
    "mean": float,
    "std": float,
    "means": _points,
    "stds": _floats,
    "weights": _floats,
    "noise": float,
    "scale": float,
    "radius": float,
    "width": float,
}

_KEYS = {
    "data": {"family": str, "n_clean": int, "n_noisy": int, "sigma": float, "seed": int, "dim": int,
             "n_truth": int, **_FAMILY_PARSERS},
    "model": {"hidden_widths": lambda s: tuple(int(v) for v in _floats(s)), "activation": str,
              "time_embedding_dim": int, "ema_decay": float},
    "schedule": {"T": float, "time_law": str, "t_min": float, "t_hi": _optional(float), "weighting": str},
    "solver": {"n_steps": int, "scheme": str, "step_spacing": str, "rho": float},
    "train": {"gamma": _optional(float), "m": int, "replace_batch": _optional(int), "total_updates": int,
              "pretrain_steps": int, "batch_size": int, "learning_rate": float, "alpha": _optional(float),
              "selection": str, "seed": int, "eval_every": int, "finetune_steps": int, "plateau_window": int,
              "plateau_tol": float, "watchdog_factor": float, "watchdog_floor": float, "n_watch": int,
              "checkpoint_every": int, "sync": _bool, "sfbd_rounds": int},
    "eval": {"n_samples": int, "n_steps": int, "probes": lambda s: tuple(_floats(s)), "seed": int},
}


def read_ini(path) -> dict:
    """Parse and type-check an INI file into ``{section: {key: value}}``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    out = {}
    for section in parser.sections():
        if section not in _KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        out[section] = {}
        for key, text in parser.items(section):
            if key not in _KEYS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                out[section][key] = _KEYS[section][key](text)
            except ValueError as err:
                raise ConfigError(f"{path}: bad value for [{section}] {key}: {err}") from err
    return out


def build_config(sections: dict | None = None, seed=None, sigma=None, gamma=None, m=None, sync=None) -> RunConfig:
    """Typed run configuration from parsed sections plus command-line overrides.

    ``seed`` overrides both the data and the training seed.
    """
    sections = {k: dict(v) for k, v in (sections or {}).items()}
    data = sections.get("data", {})
    family = data.pop("family", "gaussian-mixture")
    family_keys = set(FAMILY_DEFAULTS.get(family, {}))
    params = {k: data.pop(k) for k in list(data) if k in family_keys}
    stray = set(data) & set(_FAMILY_PARSERS)
    if stray:
        raise ConfigError(f"parameters {sorted(stray)} do not apply to family {family!r}")
    if sigma is not None:
        data["sigma"] = sigma
    if seed is not None:
        data["seed"] = seed
    dataset = DatasetSpec(family=family, params=params, **data)
    if dataset.sigma <= 0:
        raise ConfigError("training needs sigma > 0")

    schedule = DiffusionSchedule(tau=dataset.tau, **sections.get("schedule", {}))
    solver = SolverConfig(**{"n_steps": 32, "scheme": "euler-maruyama-sde", **sections.get("solver", {})})
    train = dict(sections.get("train", {}))
    run_sync = train.pop("sync", False)
    rounds = train.pop("sfbd_rounds", 5)
    train.update(sections.get("model", {}))
    if seed is not None:
        train["seed"] = seed
    if gamma is not None:
        train["gamma"] = gamma
        train["replace_batch"] = None
    if m is not None:
        train["m"] = m
    train_cfg = TrainConfig(schedule=schedule, solver=solver, **train)
    evaluation = EvalConfig(**sections.get("eval", {}))
    return RunConfig(dataset, train_cfg, evaluation, run_sync if sync is None else sync, rounds)


def load_config(path=None, **overrides) -> RunConfig:
    """Configuration from an INI file or from a run's ``manifest.json``.

    A manifest is checked against its recorded hash before overrides apply.
    """
    if path is None:
        return build_config({}, **overrides)
    if Path(path).suffix == ".json":
        try:
            man = json.loads(Path(path).read_text())
        except (OSError, ValueError) as err:
            raise ConfigError(f"cannot read manifest {path}: {err}") from err
        verify_manifest(man)
        return build_config(manifest_sections(man), **overrides)
    return build_config(read_ini(path), **overrides)


def with_output_dir(cfg: RunConfig, out_dir) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, out_dir=str(out_dir)))


def manifest(cfg: RunConfig, outputs: dict) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seeds": {"data": cfg.dataset.seed, "train": cfg.train.seed, "eval": cfg.evaluation.seed},
        "tool_version": __version__,
        "outputs": {k: str(v) for k, v in outputs.items()},
    }


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def manifest_sections(man: dict) -> dict:
    """Parsed-INI style sections equivalent to the configuration in a manifest."""
    try:
        c = man["config"]
        train = c["train"]
        model_keys = ("hidden_widths", "activation", "time_embedding_dim", "ema_decay")
        sections = {
            "data": {**{k: v for k, v in c["dataset"].items() if k != "params"}, **c["dataset"]["params"]},
            "train": {k: v for k, v in train.items() if k not in ("schedule", "solver", *model_keys)},
            "model": {k: train[k] for k in model_keys},
            "schedule": {k: v for k, v in train["schedule"].items() if k != "tau"},
            "solver": dict(train["solver"]),
            "eval": {**c["evaluation"], "probes": tuple(c["evaluation"]["probes"])},
        }
        sections["model"]["hidden_widths"] = tuple(sections["model"]["hidden_widths"])
        sections["train"]["sync"] = c["sync"]
        sections["train"]["sfbd_rounds"] = c["sfbd_rounds"]
    except (KeyError, TypeError) as err:
        raise ConfigError(f"manifest is missing configuration field {err}") from err
    return sections


def verify_manifest(man: dict) -> RunConfig:
    """Rebuild the configuration recorded in a manifest and check its hash."""
    cfg = build_config(manifest_sections(man))
    if cfg.config_hash() != man.get("config_hash"):
        raise ConfigError("manifest hash does not match its recorded configuration")
    return cfg
