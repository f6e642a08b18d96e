"""Monte-Carlo bias/variance/noise decomposition on a 1-D regression toy.

The toy uses a fixed training design (``n_train`` evenly spaced inputs) with
fresh Gaussian noise per sampled dataset, so "in-training" test points are
well defined: they are the design inputs paired with the very targets the
model was fitted to.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .rng import TOY, stream


@dataclass(frozen=True)
class ToySpec:
    truth: tuple = (1.0, 2.0)  # polynomial coefficients, constant term first
    noise_sigma: float = 0.5
    n_train: int = 10
    x_low: float = -1.0
    x_high: float = 1.0
    model: str = "poly"  # "poly" (least squares) or "oracle" (returns the truth)
    degree: int = 1

    def __post_init__(self):
        object.__setattr__(self, "truth", tuple(float(c) for c in self.truth))
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.model not in ("poly", "oracle"):
            raise ValueError(f"model must be 'poly' or 'oracle', got {self.model!r}")
        if self.model == "poly" and not 0 <= self.degree < self.n_train:
            raise ValueError(f"degree {self.degree} needs at least {self.degree + 1} training points")
        if self.n_train < 1 or not self.x_low < self.x_high:
            raise ValueError("need n_train >= 1 and x_low < x_high")

    def f(self, x: np.ndarray) -> np.ndarray:
        return np.polynomial.polynomial.polyval(x, self.truth)

    def design(self) -> np.ndarray:
        return np.linspace(self.x_low, self.x_high, self.n_train)

    @classmethod
    def load(cls, path) -> "ToySpec":
        d = json.loads(Path(path).read_text())
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"{path}: unknown toy keys {sorted(unknown)}")
        return cls(**d)


def _hat(toy: ToySpec, x_eval: np.ndarray) -> np.ndarray:
    """Matrix mapping training targets to least-squares predictions at ``x_eval``."""
    vander = np.vander(toy.design(), toy.degree + 1, increasing=True)
    pinv = np.linalg.pinv(vander)
    return np.vander(x_eval, toy.degree + 1, increasing=True) @ pinv


def bias_variance_estimate(toy: ToySpec, n_datasets: int, n_test_points: int, seed: int = 0) -> dict:
    """Estimate mse, squared bias, variance and noise at held-out and training inputs."""
    if n_datasets < 2 or n_test_points < 1:
        raise ValueError("need n_datasets >= 2 and n_test_points >= 1")
    rng = stream(seed, 0, TOY)
    sigma = toy.noise_sigma
    x_test = rng.uniform(toy.x_low, toy.x_high, size=n_test_points)
    x_train = toy.design()
    f_test, f_train = toy.f(x_test), toy.f(x_train)

    eps_train = rng.normal(0.0, sigma, size=(n_datasets, toy.n_train)) if sigma > 0 else np.zeros((n_datasets, toy.n_train))
    eps_test = rng.normal(0.0, sigma, size=(n_datasets, n_test_points)) if sigma > 0 else np.zeros((n_datasets, n_test_points))
    y_train = f_train + eps_train
    y_test = f_test + eps_test

    if toy.model == "oracle":
        pred_test = np.broadcast_to(f_test, y_test.shape)
        pred_train = np.broadcast_to(f_train, y_train.shape)
    else:
        pred_test = y_train @ _hat(toy, x_test).T
        pred_train = y_train @ _hat(toy, x_train).T

    def decompose(pred, truth, target):
        loss = (pred - target) ** 2
        mean_pred = pred.mean(axis=0)
        bias_sq = (mean_pred - truth) ** 2
        variance = pred.var(axis=0)
        noise = ((target - truth) ** 2).mean(axis=0)
        # per-dataset residual of the identity loss = (pred-f)^2 + eps^2 + cross term
        resid = (loss - (pred - truth) ** 2 - (target - truth) ** 2).mean(axis=1)
        return {
            "mse": float(loss.mean()),
            "bias_sq": float(bias_sq.mean()),
            "variance": float(variance.mean()),
            "noise_var": float(noise.mean()),
            "gap_se": float(resid.std(ddof=1) / math.sqrt(len(resid))),
        }

    held = decompose(pred_test, f_test, y_test)
    held["total"] = held["bias_sq"] + held["variance"] + held["noise_var"]
    held["decomposition_gap"] = held["mse"] - held["total"]
    inside = decompose(pred_train, f_train, y_train)
    inside["total"] = inside["bias_sq"] + inside["variance"] + inside["noise_var"]
    inside["decomposition_gap"] = inside["mse"] - inside["total"]
    out = dict(held)
    out["sigma_sq"] = sigma**2
    out["in_training"] = inside
    out["n_datasets"] = n_datasets
    out["n_test_points"] = n_test_points
    out["toy"] = asdict(toy)
    return out
