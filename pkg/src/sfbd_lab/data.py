"""Synthetic datasets and their on-disk layout.

A dataset directory holds ``data/clean.npy`` and ``data/noisy.npy`` for the
trainers, and ``eval/originals.npy`` (the clean draws behind each noisy
point) plus ``eval/truth.npy`` (a fresh held-out sample) for evaluation only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

FAMILIES = ("gaussian", "gaussian-mixture", "two-moons", "ring")

FAMILY_DEFAULTS = {
    "gaussian": {"mean": 0.0, "std": 1.0},
    "gaussian-mixture": {
        "means": [[-1.0, -0.5], [1.0, 0.5]],
        "stds": [0.25, 0.25],
        "weights": [0.5, 0.5],
    },
    "two-moons": {"noise": 0.1, "scale": 1.0},
    "ring": {"radius": 1.0, "width": 0.1},
}


@dataclass(frozen=True)
class DatasetSpec:
    family: str = "gaussian-mixture"
    params: dict = field(default_factory=dict)
    n_clean: int = 50
    n_noisy: int = 5000
    sigma: float = 0.45
    seed: int = 0
    dim: int = 2
    n_truth: int = 4096

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown dataset family {self.family!r}; choose from {', '.join(FAMILIES)}")
        if self.n_clean < 0 or self.n_noisy < 0 or self.n_truth < 0:
            raise ConfigError("sample counts must be non-negative")
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        unknown = set(self.params) - set(FAMILY_DEFAULTS[self.family])
        if unknown:
            raise ConfigError(f"unknown parameters for {self.family}: {sorted(unknown)}")
        if self.family in ("two-moons", "ring") and self.dim != 2:
            raise ConfigError(f"{self.family} is two-dimensional")

    @property
    def tau(self):
        return self.sigma**2

    def resolved_params(self):
        return {**FAMILY_DEFAULTS[self.family], **self.params}


@dataclass
class SynthData:
    clean: np.ndarray
    noisy: np.ndarray
    originals: np.ndarray
    truth: np.ndarray


def draw_family(family, params, n, dim, rng):
    """``n`` draws from a named family (see ``FAMILY_DEFAULTS`` for parameters)."""
    if family == "gaussian":
        mean = np.broadcast_to(np.asarray(params["mean"], dtype=np.float64), (dim,))
        std = np.broadcast_to(np.asarray(params["std"], dtype=np.float64), (dim,))
        return mean + std * rng.standard_normal((n, dim))
    if family == "gaussian-mixture":
        means = np.asarray(params["means"], dtype=np.float64).reshape(-1, dim)
        stds = np.broadcast_to(np.asarray(params["stds"], dtype=np.float64), (means.shape[0],))
        weights = np.asarray(params["weights"], dtype=np.float64)
        if weights.shape != (means.shape[0],) or np.any(weights < 0):
            raise ConfigError("mixture weights must be nonnegative, one per component")
        comp = rng.choice(means.shape[0], size=n, p=weights / weights.sum())
        return means[comp] + stds[comp, None] * rng.standard_normal((n, dim))
    if family == "two-moons":
        upper = rng.random(n) < 0.5
        angle = math.pi * rng.random(n)
        x = np.where(upper, np.cos(angle), 1.0 - np.cos(angle))
        y = np.where(upper, np.sin(angle), 0.5 - np.sin(angle))
        pts = np.stack([x - 0.5, y - 0.25], axis=1) * params["scale"]
        return pts + params["noise"] * rng.standard_normal((n, 2))
    if family == "ring":
        angle = 2 * math.pi * rng.random(n)
        r = params["radius"] + params["width"] * rng.standard_normal(n)
        return np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    raise ConfigError(f"unknown dataset family {family!r}")


def synth_dataset(spec: DatasetSpec) -> SynthData:
    """Clean set, noisy set (one corruption per underlying draw) and held-out truth.

    The first ``n_clean`` draws are released clean; the next ``n_noisy`` only
    as ``x + sigma z``. The truth sample comes from an independent stream.
    """
    main, noise, held_out = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))
    params = spec.resolved_params()
    draws = draw_family(spec.family, params, spec.n_clean + spec.n_noisy, spec.dim, main)
    clean, originals = draws[: spec.n_clean], draws[spec.n_clean :]
    noisy = originals + spec.sigma * noise.standard_normal(originals.shape) if spec.sigma > 0 else originals.copy()
    truth = draw_family(spec.family, params, spec.n_truth, spec.dim, held_out)
    return SynthData(clean, noisy, originals, truth)


def dataset_paths(root):
    root = Path(root)
    return {
        "clean": root / "data" / "clean.npy",
        "noisy": root / "data" / "noisy.npy",
        "originals": root / "eval" / "originals.npy",
        "truth": root / "eval" / "truth.npy",
    }


def write_dataset(data: SynthData, root):
    paths = dataset_paths(root)
    for key, path in paths.items():
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, getattr(data, key))
    return paths
