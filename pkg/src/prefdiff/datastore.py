"""Trajectories, returns-to-go, preference-gap slicing and window batching."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, InputError, MissingArtifact

TRAJ_FORMAT = "prefdiff.trajectories/v1"
MANIFEST_FORMAT = "prefdiff.manifest/v1"


@dataclass(frozen=True, eq=False)
class Trajectory:
    id: int
    omega: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    rtg: np.ndarray | None = None
    traj_rtg: np.ndarray | None = None
    g: np.ndarray | None = None  # normalized condition, set by a normalization scheme
    perturbed: bool = False

    def __post_init__(self):
        t = len(self.states)
        if len(self.actions) != t or len(self.rewards) != t:
            raise ConfigError(
                f"trajectory {self.id}: lengths differ (states {t}, actions {len(self.actions)}, "
                f"rewards {len(self.rewards)})"
            )

    def __len__(self):
        return len(self.states)

    @property
    def episode_return(self) -> np.ndarray:
        return self.rewards.sum(axis=0)


def compute_rtg(traj: Trajectory) -> Trajectory:
    """Fill per-step suffix sums of the vector reward and their per-step mean."""
    rtg = np.cumsum(traj.rewards[::-1], axis=0)[::-1].copy()
    return replace(traj, rtg=rtg, traj_rtg=rtg.mean(axis=0))


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    @property
    def omegas(self) -> np.ndarray:
        return np.array([t.omega for t in self.trajectories]).reshape(len(self), -1)

    @property
    def traj_rtgs(self) -> np.ndarray:
        return np.array([t.traj_rtg for t in self.trajectories])

    @property
    def episode_returns(self) -> np.ndarray:
        return np.array([t.episode_return for t in self.trajectories])

    @property
    def conditions(self) -> np.ndarray:
        if any(t.g is None for t in self.trajectories):
            raise ConfigError("dataset has not been normalized")
        return np.array([t.g for t in self.trajectories])

    @property
    def ids(self) -> list[int]:
        return [t.id for t in self.trajectories]

    def with_conditions(self, g: np.ndarray, normalization: dict) -> "Dataset":
        trajs = [replace(t, g=np.asarray(gi, dtype=np.float64)) for t, gi in zip(self.trajectories, g)]
        return Dataset(trajs, {**self.manifest, "normalization": normalization})

    @property
    def ood_regions(self) -> list[list[float]]:
        return self.manifest.get("slice", {}).get("ood_regions", [])


# ------------------------------------------------------------------ slicing

def _sorted_by_pref(dataset: Dataset) -> list[int]:
    # stable: ties on the first preference component keep insertion order
    return sorted(range(len(dataset)), key=lambda i: (float(dataset[i].omega[0]), i))


def _check_m(m: float) -> None:
    if not 0 <= m < 100:
        raise InputError(f"m must satisfy 0 <= m < 100, got {m}")


def slice_shattered(dataset: Dataset, m: float = 30, n_regions: int = 3) -> Dataset:
    """Remove ``floor(N*m/100)`` trajectories in ``n_regions`` contiguous blocks.

    Block centres sit at equal intervals ``(j+1)*N/(n_regions+1)`` of the order
    sorted by the first preference component. Each block removes
    ``n_lack // n_regions`` trajectories; the last block also takes the
    remainder. Blocks are clipped to the dataset bounds, so with very large
    ``m`` overlapping blocks remove fewer trajectories than requested.
    """
    _check_m(m)
    if n_regions < 1:
        raise InputError("n_regions must be >= 1")
    order = _sorted_by_pref(dataset)
    n = len(order)
    n_lack = int(n * m // 100)
    per = n_lack // n_regions
    removed_pos: set[int] = set()
    blocks = []
    for j in range(n_regions):
        size = per + (n_lack - per * n_regions if j == n_regions - 1 else 0)
        if size == 0:
            continue
        centre = round((j + 1) * n / (n_regions + 1))
        start = min(max(centre - size // 2, 0), n - size)
        block = [p for p in range(start, start + size) if p not in removed_pos]
        removed_pos.update(block)
        if block:
            blocks.append(block)
    regions = [
        [float(dataset[order[b[0]]].omega[0]), float(dataset[order[b[-1]]].omega[0])] for b in blocks
    ]
    keep = sorted(order[p] for p in range(n) if p not in removed_pos)
    removed = sorted(dataset[order[p]].id for p in removed_pos)
    spec = {"kind": "shattered", "m": m, "n_regions": n_regions, "ood_regions": regions,
            "removed_ids": removed}
    return _subset(dataset, keep, spec)


def slice_narrow(dataset: Dataset, m: float = 30) -> Dataset:
    """Remove ``floor(N*m/200)`` trajectories from each end of the preference order."""
    _check_m(m)
    order = _sorted_by_pref(dataset)
    n = len(order)
    k = int(n * m // 200)
    kept_pos = list(range(k, n - k))
    regions = []
    if k > 0:
        lo = float(dataset[order[k]].omega[0])
        hi = float(dataset[order[n - k - 1]].omega[0])
        regions = [[0.0, lo], [hi, 1.0]]
    keep = sorted(order[p] for p in kept_pos)
    removed = sorted(dataset[order[p]].id for p in list(range(k)) + list(range(n - k, n)))
    spec = {"kind": "narrow", "m": m, "ood_regions": regions, "removed_ids": removed}
    return _subset(dataset, keep, spec)


def slice_complete(dataset: Dataset) -> Dataset:
    return _subset(dataset, list(range(len(dataset))), {"kind": "complete", "ood_regions": []})


def apply_slice(dataset: Dataset, kind: str, m: float = 30, n_regions: int = 3) -> Dataset:
    if kind == "complete":
        return slice_complete(dataset)
    if kind == "shattered":
        return slice_shattered(dataset, m, n_regions)
    if kind == "narrow":
        return slice_narrow(dataset, m)
    raise InputError(f"unknown slice kind {kind!r}")


def _subset(dataset: Dataset, keep: list[int], spec: dict) -> Dataset:
    manifest = {**dataset.manifest, "slice": spec, "n_traj": len(keep)}
    return Dataset([dataset[i] for i in keep], manifest)


def ood_mask(omegas: np.ndarray, regions) -> np.ndarray:
    """True where the first preference component falls inside a removed region.

    Narrow regions are half-open towards the kept data: ``[0, lo)`` and ``(hi, 1]``.
    """
    w1 = np.asarray(omegas)[:, 0]
    mask = np.zeros(len(w1), dtype=bool)
    for lo, hi in regions:
        if lo == 0.0:
            mask |= w1 < hi
        elif hi == 1.0:
            mask |= w1 > lo
        else:
            mask |= (w1 >= lo) & (w1 <= hi)
    return mask


# ---------------------------------------------------------------- batching

@dataclass
class SegmentBatch:
    x0: np.ndarray       # (B, H, state_dim), environment units
    omega: np.ndarray    # (B, n)
    g: np.ndarray        # (B, n)
    traj_index: np.ndarray
    start: np.ndarray

    def __len__(self):
        return len(self.x0)


class SegmentSampler:
    """Uniform sampler over (trajectory, start) windows of length ``horizon``.

    Starts range over ``0 .. T - H``; trajectories shorter than the horizon
    contribute a single window padded with their final state.
    """

    def __init__(self, dataset: Dataset, horizon: int):
        if horizon < 2:
            raise InputError("horizon must be >= 2")
        if len(dataset) == 0:
            raise InputError("cannot sample segments from an empty dataset")
        windows, tidx, starts = [], [], []
        for i, traj in enumerate(dataset):
            s = traj.states
            if len(s) < horizon:
                s = np.concatenate([s, np.repeat(s[-1:], horizon - len(s), axis=0)])
            n_start = len(s) - horizon + 1
            idx = np.arange(n_start)[:, None] + np.arange(horizon)[None, :]
            windows.append(s[idx])
            tidx.append(np.full(n_start, i))
            starts.append(np.arange(n_start))
        self.windows = np.concatenate(windows)
        self.traj_index = np.concatenate(tidx)
        self.starts = np.concatenate(starts)
        self.omega = dataset.omegas
        self.g = np.array([t.g if t.g is not None else t.traj_rtg for t in dataset])

    def __len__(self):
        return len(self.windows)

    def sample(self, rng: np.random.Generator, batch_size: int) -> SegmentBatch:
        k = rng.integers(0, len(self.windows), size=batch_size)
        ti = self.traj_index[k]
        return SegmentBatch(self.windows[k], self.omega[ti], self.g[ti], ti, self.starts[k])


def batch_segments(dataset: Dataset, horizon: int, batch_size: int,
                   rng: np.random.Generator) -> Iterator[SegmentBatch]:
    """Endless stream of uniformly sampled window batches."""
    sampler = SegmentSampler(dataset, horizon)
    while True:
        yield sampler.sample(rng, batch_size)


@dataclass
class StateNormalizer:
    """Per-dimension z-scoring with dataset statistics."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, dataset: Dataset) -> "StateNormalizer":
        states = np.concatenate([t.states for t in dataset])
        return cls(states.mean(axis=0), np.maximum(states.std(axis=0), 1e-6))

    def normalize(self, s):
        return (s - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StateNormalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------- I/O

def dataset_paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix == ".jsonl":
        stem = stem.with_suffix("")
    return stem.with_suffix(".jsonl"), stem.with_suffix(".manifest.json")


def save_dataset(dataset: Dataset, stem) -> tuple[Path, Path]:
    """Write ``<stem>.jsonl`` (one trajectory per line) and ``<stem>.manifest.json``."""
    traj_path, man_path = dataset_paths(stem)
    traj_path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for t in dataset:
        rec = {
            "id": int(t.id),
            "omega": t.omega.tolist(),
            "states": t.states.tolist(),
            "actions": t.actions.tolist(),
            "rewards": t.rewards.tolist(),
            "perturbed": bool(t.perturbed),
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    body = "\n".join(lines) + ("\n" if lines else "")
    traj_path.write_text(body)
    manifest = {
        **dataset.manifest,
        "format": MANIFEST_FORMAT,
        "trajectory_format": TRAJ_FORMAT,
        "n_traj": len(dataset),
        "trajectory_sha256": hashlib.sha256(body.encode()).hexdigest(),
    }
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return traj_path, man_path


def load_dataset(stem) -> Dataset:
    traj_path, man_path = dataset_paths(stem)
    for p in (traj_path, man_path):
        if not p.exists():
            raise MissingArtifact(f"dataset file not found: {p}")
    manifest = json.loads(man_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{man_path}: unknown manifest format {manifest.get('format')!r}")
    trajs = []
    for line in traj_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        trajs.append(compute_rtg(Trajectory(
            id=rec["id"],
            omega=np.asarray(rec["omega"], dtype=np.float64),
            states=np.asarray(rec["states"], dtype=np.float64),
            actions=np.asarray(rec["actions"], dtype=np.float64),
            rewards=np.asarray(rec["rewards"], dtype=np.float64),
            perturbed=bool(rec.get("perturbed", False)),
        )))
    return Dataset(trajs, manifest)
