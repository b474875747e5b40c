"""Pareto filtering and front-quality metrics (hypervolume, sparsity, return deviation)."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InputError


def non_dominated_mask(points, dedup: bool = True) -> np.ndarray:
    """Mask of points not strictly dominated, in every objective, by another point.

    Duplicates survive the dominance test; with ``dedup`` only the first copy is kept.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    p = p.reshape(len(p), -1)
    dominated = np.zeros(len(p), dtype=bool)
    for start in range(0, len(p), 512):
        chunk = p[start:start + 512]
        # dominated[i] if some q > p_i in all components
        dominated[start:start + 512] = (p[None, :, :] > chunk[:, None, :]).all(axis=2).any(axis=1)
    keep = ~dominated
    if not dedup:
        return keep
    _, first = np.unique(p, axis=0, return_index=True)
    unique = np.zeros(len(p), dtype=bool)
    unique[first] = True
    return keep & unique


def non_dominated(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.size == 0:
        return p.reshape(0, p.shape[-1] if p.ndim > 1 else 0)
    p = p.reshape(len(p), -1)
    return p[non_dominated_mask(p)]


@dataclass
class ParetoFront:
    points: np.ndarray
    reference_point: np.ndarray
    excluded: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @classmethod
    def from_points(cls, points, reference_point) -> "ParetoFront":
        ref = np.asarray(reference_point, dtype=np.float64)
        front = non_dominated(points)
        ok = (front >= ref).all(axis=1) if len(front) else np.zeros(0, bool)
        return cls(front[ok], ref, front[~ok])


def _valid_for_hv(front, ref):
    front = np.asarray(front, dtype=np.float64).reshape(-1, len(ref))
    ok = (front >= ref).all(axis=1)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} point(s) do not dominate the reference point; excluded",
                      stacklevel=3)
    return front[ok]


def hypervolume_2d(front, reference_point=(0.0, 0.0)) -> float:
    """Exact two-objective hypervolume by a sweep over the first objective (descending)."""
    ref = np.asarray(reference_point, dtype=np.float64)
    if len(ref) != 2:
        raise InputError("hypervolume_2d needs two objectives")
    pts = _valid_for_hv(front, ref)
    if len(pts) == 0:
        return 0.0
    pts = pts[np.lexsort((-pts[:, 1], -pts[:, 0]))]
    area, y_max = 0.0, ref[1]
    for x, y in pts:
        if y > y_max:
            area += (x - ref[0]) * (y - y_max)
            y_max = y
    return float(area)


def hypervolume_mc(front, reference_point, n_samples: int, seed: int = 0,
                   return_stderr: bool = False):
    """Monte-Carlo hypervolume in any dimension.

    Samples uniformly in the box spanned by the reference point and the
    componentwise maximum of the front.
    """
    if n_samples <= 0:
        raise InputError("n_samples must be positive")
    ref = np.asarray(reference_point, dtype=np.float64)
    pts = _valid_for_hv(front, ref)
    if len(pts) == 0:
        return (0.0, 0.0) if return_stderr else 0.0
    upper = pts.max(axis=0)
    volume = float(np.prod(upper - ref))
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 200_000
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        z = ref + rng.random((m, len(ref))) * (upper - ref)
        covered = np.zeros(m, dtype=bool)
        for p in pts:
            covered |= (z <= p).all(axis=1)
        hits += int(covered.sum())
    frac = hits / n_samples
    est = volume * frac
    if return_stderr:
        return est, volume * np.sqrt(frac * (1 - frac) / n_samples)
    return est


def sparsity(front) -> float:
    """Sum over objectives of squared gaps between sorted values, over ``|P| - 1``.

    Fronts with at most one point have sparsity 0.
    """
    p = np.asarray(front, dtype=np.float64)
    if p.ndim != 2 or len(p) <= 1:
        return 0.0
    s = np.sort(p, axis=0)
    return float((np.diff(s, axis=0) ** 2).sum() / (len(p) - 1))


@dataclass
class SolutionSet:
    omegas: np.ndarray
    returns: np.ndarray
    is_ood: np.ndarray | None = None

    def __post_init__(self):
        self.omegas = np.asarray(self.omegas, dtype=np.float64)
        self.returns = np.asarray(self.returns, dtype=np.float64)
        if len(self.omegas) != len(self.returns):
            raise InputError("one return vector per preference is required")
        if self.is_ood is None:
            self.is_ood = np.zeros(len(self.omegas), dtype=bool)

    def __len__(self):
        return len(self.omegas)

    def subset(self, mask) -> "SolutionSet":
        mask = np.asarray(mask, dtype=bool)
        return SolutionSet(self.omegas[mask], self.returns[mask], self.is_ood[mask])


def return_deviation(solutions: SolutionSet, predictor: Callable[[np.ndarray], np.ndarray]) -> float:
    """Mean squared distance between achieved returns and predicted maximum returns.

    Returns nan for an empty solution set.
    """
    if len(solutions) == 0:
        return float("nan")
    pred = np.asarray(predictor(solutions.omegas), dtype=np.float64)
    return float(((solutions.returns - pred) ** 2).sum(axis=1).mean())


@dataclass
class SweepResult:
    solutions: SolutionSet
    hv: float
    sp: float
    rd: float
    front: np.ndarray
    dominated: np.ndarray

    def summary(self) -> dict:
        return {"hv": self.hv, "sp": self.sp, "rd": self.rd, "n_prefs": len(self.solutions),
                "n_front": int(len(self.front)), "n_ood": int(self.solutions.is_ood.sum())}


def score_solutions(solutions: SolutionSet, reference_point=(0.0, 0.0),
                    eval_predictor: Callable | None = None) -> SweepResult:
    """HV and SP on the non-dominated achieved returns, RD on the OOD-flagged subset."""
    mask = non_dominated_mask(solutions.returns)
    front = solutions.returns[mask]
    # duplicates of a front point are not "dominated"
    in_front = np.array([any(np.array_equal(r, f) for f in front) for r in solutions.returns],
                        dtype=bool) if len(front) else np.zeros(len(solutions), bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        hv = hypervolume_2d(front, reference_point) if solutions.returns.shape[1] == 2 else \
            hypervolume_mc(front, reference_point, 1_000_000)
    sp = sparsity(front)
    rd = float("nan")
    if eval_predictor is not None:
        rd = return_deviation(solutions.subset(solutions.is_ood), eval_predictor)
    return SweepResult(solutions, hv, sp, rd, front, ~in_front)


def evaluate_sweep(rollout_fn: Callable[[np.ndarray, int], np.ndarray], n_prefs: int, seed: int,
                   ood_regions=(), eval_predictor: Callable | None = None,
                   reference_point=(0.0, 0.0)) -> SweepResult:
    """Roll out a policy on an even preference grid and score the achieved returns.

    Args:
        rollout_fn: maps (preferences (P, n), seed) to episode returns (P, n).
        n_prefs: number of grid preferences.
        ood_regions: removed first-component intervals from a sliced dataset's manifest.
    """
    from .datastore import ood_mask
    from .momdp import preference_grid

    omegas = preference_grid(n_prefs)
    returns = np.asarray(rollout_fn(omegas, seed), dtype=np.float64)
    sol = SolutionSet(omegas, returns, ood_mask(omegas, ood_regions))
    return score_solutions(sol, reference_point, eval_predictor)


# ------------------------------------------------------------------ reports

def write_report(result: SweepResult, out_dir, config_digest: str, name: str = "eval",
                 dataset_returns: np.ndarray | None = None, extra: dict | None = None) -> dict:
    """CSV of per-preference results, JSON summary and an SVG scatter of the front."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sol = result.solutions
    n = sol.returns.shape[1]
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"omega_{i}" for i in range(n)] + [f"return_{i}" for i in range(n)]
                   + ["is_ood", "dominated"])
        for k in range(len(sol)):
            w.writerow([repr(float(v)) for v in sol.omegas[k]] + [repr(float(v)) for v in sol.returns[k]]
                       + [int(sol.is_ood[k]), int(result.dominated[k])])
    summary = {**result.summary(), "config_digest": config_digest, **(extra or {})}
    summary = {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in summary.items()}
    (out / f"{name}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if n == 2:
        _write_svg(out / f"{name}.svg", result, dataset_returns)
    return summary


def _write_svg(path: Path, result: SweepResult, dataset_returns):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    if dataset_returns is not None and len(dataset_returns):
        ax.scatter(dataset_returns[:, 0], dataset_returns[:, 1], s=4, c="0.75", label="dataset")
    r = result.solutions.returns
    d = result.dominated
    ax.scatter(r[d, 0], r[d, 1], s=10, c="tab:blue", label="dominated")
    ax.scatter(r[~d, 0], r[~d, 1], s=10, c="tab:red", label="non-dominated")
    ax.set_xlabel("speed return")
    ax.set_ylabel("energy return")
    ax.legend(loc="lower left", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
