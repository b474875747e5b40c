"""Closed-loop control from sampled state plans.

Every environment step the planner samples a window of future states whose
first row is pinned to the observed state, then reads the action off the
first transition with a learned inverse-dynamics model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn

from .datastore import Dataset, StateNormalizer
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample, make_condition
from .errors import ConfigError, InputError
from .momdp import EPISODE_LEN, STATE_DIM, step_batch
from .netcore import MLP, Checkpoint, make_adamw, seeded, state_to_numpy
from .slider import sliding_sample


# ------------------------------------------------------------ inverse dynamics

class InverseDynamics(nn.Module):
    """3-layer MLP ``(s_t, s_{t+1}) -> a_t`` with a tanh head; inputs are z-scored inside."""

    def __init__(self, state_dim: int = STATE_DIM, action_dim: int = 1, hidden: int = 256):
        super().__init__()
        self.state_dim, self.action_dim, self.hidden = state_dim, action_dim, hidden
        self.net = MLP((2 * state_dim, hidden, hidden, action_dim), layer_norm=True, out_act="tanh")
        self.register_buffer("mean", torch.zeros(2 * state_dim, dtype=torch.float64))
        self.register_buffer("std", torch.ones(2 * state_dim, dtype=torch.float64))

    def forward(self, s: torch.Tensor, s_next: torch.Tensor) -> torch.Tensor:
        z = torch.cat([s, s_next], dim=-1)
        z = (z - self.mean.to(z.dtype)) / self.std.to(z.dtype)
        return self.net(z)

    @torch.no_grad()
    def predict(self, s, s_next) -> np.ndarray:
        dtype = next(self.parameters()).dtype
        s = torch.as_tensor(np.asarray(s, dtype=np.float64).reshape(-1, self.state_dim), dtype=dtype)
        sn = torch.as_tensor(np.asarray(s_next, dtype=np.float64).reshape(-1, self.state_dim), dtype=dtype)
        return self(s, sn).double().numpy()

    def config(self) -> dict:
        return {"state_dim": self.state_dim, "action_dim": self.action_dim, "hidden": self.hidden}


def transitions(dataset: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Aligned ``(s_t, s_{t+1}, a_t)`` triples from every trajectory."""
    s, sn, a = [], [], []
    for traj in dataset:
        s.append(traj.states[:-1])
        sn.append(traj.states[1:])
        a.append(traj.actions[:-1])
    if not s:
        raise InputError("dataset has no transitions")
    return np.concatenate(s), np.concatenate(sn), np.concatenate(a)


@dataclass
class InvDynConfig:
    grad_steps: int = 5000
    batch: int = 256
    lr: float = 1e-3
    hidden: int = 256
    seed: int = 0


@dataclass
class InvDynFit:
    model: InverseDynamics
    losses: list[float]


def train_inverse_dynamics(dataset: Dataset, config: InvDynConfig = InvDynConfig()) -> InvDynFit:
    s, sn, a = transitions(dataset)
    with seeded(config.seed):
        model = InverseDynamics(s.shape[1], a.shape[1], config.hidden)
    z = np.concatenate([s, sn], axis=1)
    model.mean.copy_(torch.from_numpy(z.mean(axis=0)))
    model.std.copy_(torch.from_numpy(np.maximum(z.std(axis=0), 1e-6)))
    S = torch.as_tensor(s, dtype=torch.float32)
    SN = torch.as_tensor(sn, dtype=torch.float32)
    A = torch.as_tensor(a, dtype=torch.float32)
    opt = make_adamw(model, config.lr, 0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.grad_steps, 1))
    gen = torch.Generator().manual_seed(config.seed + 1)
    losses = []
    for _ in range(config.grad_steps):
        idx = torch.randint(0, len(S), (config.batch,), generator=gen)
        loss = ((model(S[idx], SN[idx]) - A[idx]) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
    return InvDynFit(model.eval(), losses)


def invdyn_checkpoint(fit: InvDynFit, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(kind="inverse_dynamics", config=fit.model.config(), params=state_to_numpy(fit.model),
                      meta={"final_loss": float(np.mean(fit.losses[-100:])) if fit.losses else None,
                            **(meta or {})})


def invdyn_from_checkpoint(ckpt: Checkpoint) -> InverseDynamics:
    if ckpt.kind != "inverse_dynamics":
        raise ConfigError(f"expected an inverse_dynamics checkpoint, got {ckpt.kind!r}")
    model = InverseDynamics(**ckpt.config)
    ckpt.load_into(model)
    return model.eval()


# --------------------------------------------------------------- planning

@dataclass
class PlannerConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    use_slider: bool = True
    replan_every: int = 1
    eta_scale: float = 1.0

    def __post_init__(self):
        if self.replan_every < 1:
            raise ConfigError("replan_every must be >= 1")


def preference_seed(seed: int, index: int) -> int:
    """Independent per-preference stream derived from the global seed and the preference index."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def make_generators(seed: int, n: int, indices=None) -> list[torch.Generator]:
    """One generator per preference, keyed by its index in the full sweep."""
    indices = range(n) if indices is None else indices
    return [torch.Generator().manual_seed(preference_seed(seed, int(i))) for i in indices]


class Policy(Protocol):
    def reset(self, omegas: np.ndarray, seed: int, indices=None) -> None: ...
    def act(self, states: np.ndarray, t: int) -> np.ndarray: ...


class Planner:
    """Diffusion planner acting for a batch of preferences in lockstep.

    Args:
        base: conditional noise model.
        invdyn: inverse-dynamics model.
        normalizer: state z-scoring used during training.
        dataset_prefs: training preferences (for the nearest-preference search).
        slider: optional adapter; ignored when ``config.use_slider`` is false.
    """

    def __init__(self, base: nn.Module, invdyn: InverseDynamics, normalizer: StateNormalizer,
                 config: PlannerConfig, dataset_prefs: np.ndarray | None = None,
                 slider: nn.Module | None = None, schedule: NoiseSchedule = NoiseSchedule()):
        self.base = base
        self.invdyn = invdyn
        self.normalizer = normalizer
        self.config = config
        self.dataset_prefs = dataset_prefs
        self.slider = slider
        self.schedule = schedule
        if config.replan_every > base.config.horizon - 1:
            raise ConfigError("replan_every cannot exceed horizon - 1")
        self.omegas = None
        self.gens = None
        self._plan = None
        self._plan_t = 0

    def reset(self, omegas: np.ndarray, seed: int, indices=None) -> None:
        self.omegas = np.atleast_2d(np.asarray(omegas, dtype=np.float64))
        self.gens = make_generators(seed, len(self.omegas), indices)
        self._plan = None

    def sample_plan(self, states: np.ndarray) -> np.ndarray:
        """(P, H, state_dim) plans in environment units with row 0 equal to ``states``."""
        n = self.omegas.shape[1]
        ones = np.ones((len(self.omegas), n))
        cfg = self.config
        if cfg.use_slider and self.slider is not None:
            if self.dataset_prefs is None:
                raise ConfigError("sliding guidance needs the dataset preferences")
            return sliding_sample(self.base, self.slider, self.omegas, self.dataset_prefs, cfg.sampler,
                                  self.gens, self.normalizer, states, ones, cfg.eta_scale, self.schedule)
        cond = make_condition(self.omegas, ones)
        return ddim_sample(self.base, cond, cfg.sampler, self.gens, self.normalizer, states,
                           schedule=self.schedule)

    def act(self, states: np.ndarray, t: int) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64).reshape(len(self.omegas), -1)
        k = self.config.replan_every
        if self._plan is None or t - self._plan_t >= k:
            self._plan = self.sample_plan(states)
            self._plan_t = t
            j = 0
        else:
            j = t - self._plan_t
        plan = self._plan
        if j == 0:
            s, s_next = plan[:, 0], plan[:, 1]
        else:
            # open-loop: later transitions of the same plan
            s, s_next = plan[:, j], plan[:, j + 1]
        return self.invdyn.predict(s, s_next)[:, 0]

    def plan_action(self, state, omega, seed: int = 0) -> float:
        self.reset(omega, seed)
        return float(self.act(np.atleast_2d(state), 0)[0])


class ConstantPolicy:
    """Stub policy taking a fixed action per preference (or a function of it)."""

    def __init__(self, action_fn):
        self.action_fn = action_fn

    def reset(self, omegas, seed, indices=None):
        self.omegas = np.atleast_2d(omegas)

    def act(self, states, t):
        return np.broadcast_to(np.asarray(self.action_fn(self.omegas), dtype=np.float64),
                               (len(self.omegas),)).copy()


# ---------------------------------------------------------------- rollouts

@dataclass
class Trace:
    omegas: np.ndarray
    states: np.ndarray    # (P, T, state_dim), observation before each action
    actions: np.ndarray   # (P, T)
    rewards: np.ndarray   # (P, T, n)
    seed: int

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


def rollout(policy: Policy, omegas, episode_len: int = EPISODE_LEN, seed: int = 0,
            indices=None) -> Trace:
    """Closed-loop episodes from rest for every preference, stepped in lockstep.

    ``indices`` are the preferences' positions in the full sweep (default
    ``0..P-1``); they key the per-preference random streams.
    """
    omegas = np.atleast_2d(np.asarray(omegas, dtype=np.float64))
    p = len(omegas)
    policy.reset(omegas, seed, indices)
    states = np.zeros((p, STATE_DIM))
    all_s = np.zeros((p, episode_len, STATE_DIM))
    all_a = np.zeros((p, episode_len))
    all_r = np.zeros((p, episode_len, omegas.shape[1]))
    for t in range(episode_len):
        a = np.clip(np.asarray(policy.act(states, t), dtype=np.float64).reshape(p), -1.0, 1.0)
        all_s[:, t] = states
        all_a[:, t] = a
        states, r = step_batch(states, a)
        all_r[:, t] = r
    return Trace(omegas, all_s, all_a, all_r, seed)


_WORKER_POLICY = None


def _rollout_chunk(args):
    omegas, episode_len, seed, indices = args
    torch.set_num_threads(1)
    return rollout(_WORKER_POLICY, omegas, episode_len, seed, indices)


def parallel_rollout(policy: Policy, omegas, episode_len: int = EPISODE_LEN, seed: int = 0,
                     workers: int = 1) -> Trace:
    """:func:`rollout` with the preferences split into ``workers`` forked processes.

    Each preference keeps its own seeded stream, so results do not depend on
    which worker ran it (up to floating-point batching effects).
    """
    global _WORKER_POLICY
    omegas = np.atleast_2d(np.asarray(omegas, dtype=np.float64))
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    workers = min(workers, len(omegas))
    if workers <= 1:
        return rollout(policy, omegas, episode_len, seed)
    import multiprocessing as mp

    chunks = np.array_split(np.arange(len(omegas)), workers)
    _WORKER_POLICY = policy
    try:
        with mp.get_context("fork").Pool(workers) as pool:
            parts = pool.map(_rollout_chunk, [(omegas[c], episode_len, seed, c) for c in chunks])
    finally:
        _WORKER_POLICY = None
    return Trace(omegas, np.concatenate([t.states for t in parts]), np.concatenate([t.actions for t in parts]),
                 np.concatenate([t.rewards for t in parts]), seed)


def rollout_fn(policy: Policy, episode_len: int = EPISODE_LEN, workers: int = 1):
    """Adapter for :func:`metrics.evaluate_sweep`: ``(omegas, seed) -> returns``."""
    def fn(omegas, seed):
        return parallel_rollout(policy, omegas, episode_len, seed, workers).returns
    return fn


def write_trace(trace: Trace, path, config_digest: str) -> Path:
    """JSON-lines: a header per preference followed by its per-step records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k in range(len(trace.omegas)):
            fh.write(json.dumps({"omega": trace.omegas[k].tolist(), "seed": trace.seed,
                                 "config_digest": config_digest,
                                 "return": trace.returns[k].tolist()}) + "\n")
            for t in range(trace.states.shape[1]):
                fh.write(json.dumps({"t": t, "state": trace.states[k, t].tolist(),
                                     "action": float(trace.actions[k, t]),
                                     "reward": trace.rewards[k, t].tolist()}) + "\n")
    return path
