"""Turning trajectory returns-to-go into guidance conditions.

Three schemes map each trajectory's average RTG ``g`` to a normalized condition:

* global: min-max over the whole dataset;
* ppn: division by a learned maximum-return estimate ``R(omega)``;
* npn: min-max over trajectories whose preference lies within ``eps`` (L2).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datastore import Dataset
from .errors import ConfigError, InputError
from .metrics import non_dominated_mask
from .netcore import MLP, Checkpoint, make_adamw, seeded, state_to_numpy

SCHEMES = ("global", "ppn", "npn")


# ------------------------------------------------------------------ global

def global_extrema(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(g, dtype=np.float64)
    return g.min(axis=0), g.max(axis=0)


def minmax(g: np.ndarray, lo: np.ndarray, hi: np.ndarray, degenerate: float) -> np.ndarray:
    """``(g - lo) / (hi - lo)`` componentwise; zero-width components map to ``degenerate``."""
    g, lo, hi = (np.asarray(a, dtype=np.float64) for a in (g, lo, hi))
    width = hi - lo
    flat = width == 0
    out = (g - lo) / np.where(flat, 1.0, width)
    return np.where(flat, degenerate, out)


def normalize_global(dataset: Dataset) -> Dataset:
    g = dataset.traj_rtgs
    lo, hi = global_extrema(g)
    if np.any(hi == lo):
        warnings.warn("a return component is constant over the dataset; it normalizes to 0",
                      stacklevel=2)
    out = minmax(g, lo[None], hi[None], 0.0)
    return dataset.with_conditions(out, {"kind": "global", "g_min": lo.tolist(), "g_max": hi.tolist()})


# ---------------------------------------------------------------- npn

def neighborhood_extrema(omegas: np.ndarray, g: np.ndarray, eps: float,
                         chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Per-trajectory min and max of ``g`` over ``{j : ||omega_j - omega_i||_2 <= eps}``."""
    omegas = np.asarray(omegas, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    n = len(g)
    lo = np.empty_like(g)
    hi = np.empty_like(g)
    for s in range(0, n, chunk):
        d = np.linalg.norm(omegas[s:s + chunk, None, :] - omegas[None, :, :], axis=-1)
        inside = d <= eps
        # every trajectory is its own neighbour, even when eps is tiny
        inside[np.arange(len(inside)), np.arange(s, s + len(inside))] = True
        for k in range(g.shape[1]):
            col = g[None, :, k]
            lo[s:s + chunk, k] = np.where(inside, col, np.inf).min(axis=1)
            hi[s:s + chunk, k] = np.where(inside, col, -np.inf).max(axis=1)
    return lo, hi


def normalize_npn(dataset: Dataset, eps: float) -> Dataset:
    if not eps > 0:
        raise InputError(f"neighbourhood radius must be positive, got {eps}")
    g = dataset.traj_rtgs
    lo, hi = neighborhood_extrema(dataset.omegas, g, eps)
    n_flat = int((hi == lo).any(axis=1).sum())
    if n_flat:
        warnings.warn(f"{n_flat} trajectories have a flat neighbourhood component; mapped to 0.5",
                      stacklevel=2)
    out = minmax(g, lo, hi, 0.5)
    return dataset.with_conditions(out, {"kind": "npn", "epsilon": float(eps), "n_flat": n_flat})


# --------------------------------------------------------- return predictor

class ReturnPredictor(nn.Module):
    """3-layer MLP from a preference to an estimate of the best achievable return.

    With ``positive=True`` the head is a softplus, so estimates stay strictly
    positive and can be used as divisors. Targets are rescaled per component by
    ``scale`` (and shifted by ``offset`` for the unconstrained head).
    """

    def __init__(self, n_obj: int = 2, hidden: int = 64, positive: bool = True):
        super().__init__()
        self.n_obj = n_obj
        self.hidden = hidden
        self.positive = positive
        self.net = MLP((n_obj, hidden, hidden, n_obj))
        self.register_buffer("offset", torch.zeros(n_obj, dtype=torch.float64))
        self.register_buffer("scale", torch.ones(n_obj, dtype=torch.float64))

    def forward(self, omega: torch.Tensor) -> torch.Tensor:
        z = self.net(omega)
        if self.positive:
            z = F.softplus(z)
        return z * self.scale.to(z.dtype) + self.offset.to(z.dtype)

    @torch.no_grad()
    def predict(self, omegas) -> np.ndarray:
        dtype = next(self.parameters()).dtype
        w = torch.as_tensor(np.asarray(omegas, dtype=np.float64).reshape(-1, self.n_obj), dtype=dtype)
        return self(w).double().numpy()

    def config(self) -> dict:
        return {"n_obj": self.n_obj, "hidden": self.hidden, "positive": self.positive}


@dataclass
class PredictorFit:
    model: ReturnPredictor
    losses: list[float]
    n_train: int


def pareto_pairs(omegas: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(omega, target) pairs whose target vector is not strictly dominated by another.

    Ties are kept: identical targets are all non-dominated.
    """
    keep = non_dominated_mask(targets, dedup=False)
    return np.asarray(omegas)[keep], np.asarray(targets)[keep]


def fit_return_predictor(omegas: np.ndarray, targets: np.ndarray, steps: int = 2000,
                         lr: float = 1e-3, hidden: int = 64, positive: bool = True,
                         seed: int = 0) -> PredictorFit:
    """Full-batch squared-error regression of ``targets`` on ``omegas``."""
    omegas = np.asarray(omegas, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(omegas) < 2:
        raise InputError(f"need at least 2 training pairs, got {len(omegas)}")
    with seeded(seed):
        model = ReturnPredictor(targets.shape[1], hidden, positive)
    if positive:
        # non-positive targets (e.g. a zero-speed extreme) are fit from above
        scale = np.maximum(np.abs(targets).max(axis=0), 1e-6)
        offset = np.zeros_like(scale)
    else:
        offset = targets.mean(axis=0)
        scale = np.maximum(targets.std(axis=0), 1e-6)
    model.scale.copy_(torch.from_numpy(scale))
    model.offset.copy_(torch.from_numpy(offset))
    x = torch.as_tensor(omegas, dtype=torch.float32)
    y = torch.as_tensor((targets - offset) / scale, dtype=torch.float32)
    opt = make_adamw(model, lr=lr, weight_decay=0.0)
    losses = []
    for _ in range(steps):
        z = model.net(x)
        if positive:
            z = F.softplus(z)
        loss = F.mse_loss(z, y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    if not np.isfinite(losses[-1]):
        raise ConfigError("return predictor training diverged")
    model.eval()
    return PredictorFit(model, losses, len(omegas))


def train_return_predictor(dataset: Dataset, steps: int = 2000, lr: float = 1e-3,
                           target: str = "traj_rtg", positive: bool = True,
                           seed: int = 0) -> PredictorFit:
    """Fit the maximum-return estimate on the dataset's non-dominated trajectories.

    Args:
        target: ``"traj_rtg"`` (average RTG, the quantity normalized for
            conditioning) or ``"episode_return"`` (total return, used for
            return deviation).
    """
    if len(dataset) == 0:
        raise InputError("cannot fit a return predictor on an empty dataset")
    if target == "traj_rtg":
        g = dataset.traj_rtgs
    elif target == "episode_return":
        g = dataset.episode_returns
    else:
        raise InputError(f"unknown predictor target {target!r}")
    w, y = pareto_pairs(dataset.omegas, g)
    if len(w) < 2:
        raise InputError(f"the non-dominated subset has {len(w)} trajectories; need at least 2")
    return fit_return_predictor(w, y, steps=steps, lr=lr, positive=positive, seed=seed)


def predictor_checkpoint(fit: PredictorFit, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(kind="return_predictor", config=fit.model.config(),
                      params=state_to_numpy(fit.model),
                      meta={"final_loss": fit.losses[-1], "n_train": fit.n_train, **(meta or {})})


def predictor_from_checkpoint(ckpt: Checkpoint) -> ReturnPredictor:
    if ckpt.kind != "return_predictor":
        raise ConfigError(f"expected a return_predictor checkpoint, got {ckpt.kind!r}")
    model = ReturnPredictor(**ckpt.config)
    ckpt.load_into(model)
    return model.eval()


def normalize_ppn(dataset: Dataset, predictor: ReturnPredictor, reference: str | None = None) -> Dataset:
    """Divide each trajectory's average RTG by the predicted maximum at its preference.

    Values above 1 (predictor under-estimates) are kept as they are.
    """
    gmax = predictor.predict(dataset.omegas)
    if np.any(gmax <= 0) or not np.all(np.isfinite(gmax)):
        raise InputError("return predictor produced a non-positive estimate; cannot divide")
    out = dataset.traj_rtgs / gmax
    return dataset.with_conditions(out, {"kind": "ppn", "predictor": reference,
                                         "n_above_one": int((out > 1).any(axis=1).sum())})


# ------------------------------------------------------------------ dispatch

def normalize(dataset: Dataset, kind: str, eps: float = 1e-3, predictor: ReturnPredictor | None = None,
              predictor_ref: str | None = None) -> Dataset:
    if kind == "global":
        return normalize_global(dataset)
    if kind == "npn":
        return normalize_npn(dataset, eps)
    if kind == "ppn":
        if predictor is None:
            raise ConfigError("ppn normalization needs a trained return predictor")
        return normalize_ppn(dataset, predictor, predictor_ref)
    raise ConfigError(f"unknown normalization {kind!r}; expected one of {SCHEMES}")


def mass_near_ones(g: np.ndarray, radius: float = 0.1) -> float:
    """Fraction of conditions within L-infinity distance ``radius`` of the all-ones vector."""
    g = np.asarray(g, dtype=np.float64)
    if len(g) == 0:
        return 0.0
    return float((np.abs(g - 1.0).max(axis=1) <= radius).mean())
