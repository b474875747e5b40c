"""Two-objective point-mass environment ("speed vs energy") and scripted behaviour.

A unit mass with velocity ``v`` receives a throttle ``a`` in [-1, 1]::

    v' = 0.9 v + 0.1 a,   x' = x + v',   r = (v', 1 - a^2)

Holding a constant throttle trades speed against energy, so the set of
constant-throttle episode returns traces the true Pareto front.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datastore import Dataset, Trajectory, compute_rtg
from .errors import InputError
from .metrics import non_dominated

STATE_DIM = 2
ACTION_DIM = 1
N_OBJ = 2
DECAY = 0.9
GAIN = 0.1
EPISODE_LEN = 32
EXPERT_NOISE = 0.02
PERTURB_PROB = 0.65
PERTURB_WIDTH = 0.3


@dataclass(frozen=True)
class EnvState:
    position: float = 0.0
    velocity: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.position, self.velocity])


def step_batch(states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised transition for ``states`` of shape (B, 2) and ``actions`` of shape (B,)."""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1)
    if np.any(np.abs(actions) > 1.0) or not np.all(np.isfinite(actions)):
        raise InputError(f"actions must lie in [-1, 1]; got range [{actions.min()}, {actions.max()}]")
    states = np.asarray(states, dtype=np.float64).reshape(-1, STATE_DIM)
    vel = DECAY * states[:, 1] + GAIN * actions
    pos = states[:, 0] + vel
    rewards = np.stack([vel, 1.0 - actions**2], axis=1)
    return np.stack([pos, vel], axis=1), rewards


def env_step(state: EnvState, action: float) -> tuple[EnvState, np.ndarray]:
    nxt, r = step_batch(state.as_array()[None], np.array([action]))
    return EnvState(float(nxt[0, 0]), float(nxt[0, 1])), r[0]


class SpeedEnergyEnv:
    """Stateful wrapper used by closed-loop rollouts (one env per preference)."""

    n_obj = N_OBJ
    state_dim = STATE_DIM

    def __init__(self, episode_len: int = EPISODE_LEN):
        self.episode_len = episode_len
        self.reset()

    def reset(self) -> np.ndarray:
        self.state = EnvState()
        self.t = 0
        return self.state.as_array()

    def step(self, action: float):
        self.state, reward = env_step(self.state, action)
        self.t += 1
        return self.state.as_array(), reward, self.t >= self.episode_len


def expert_action(omega) -> np.ndarray | float:
    """Throttle maximising ``w1 * a + w2 * (1 - a^2)`` at steady state, clamped to [0, 1]."""
    w = np.asarray(omega, dtype=np.float64)
    w1, w2 = w[..., 0], w[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(w2 > 0, np.clip(w1 / (2.0 * np.where(w2 > 0, w2, 1.0)), 0.0, 1.0), 1.0)
    return float(a) if a.ndim == 0 else a


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(v)), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def uniform_simplex(rng: np.random.Generator, size: int, n: int = N_OBJ) -> np.ndarray:
    return rng.dirichlet(np.ones(n), size=size)


def preference_grid(n_prefs: int) -> np.ndarray:
    """Evenly spaced two-objective preferences from (0, 1) to (1, 0)."""
    w1 = np.linspace(0.0, 1.0, n_prefs) if n_prefs > 1 else np.array([0.5])
    return np.stack([w1, 1.0 - w1], axis=1)


def rollout_actions(actions: np.ndarray, start: EnvState | None = None):
    """Open-loop rollout of a fixed action sequence. Returns (states, rewards)."""
    s = (start or EnvState()).as_array()[None]
    states, rewards = [], []
    for a in np.asarray(actions, dtype=np.float64):
        states.append(s[0])
        s, r = step_batch(s, np.array([a]))
        rewards.append(r[0])
    return np.array(states).reshape(-1, STATE_DIM), np.array(rewards).reshape(-1, N_OBJ)


def collect_dataset(quality: str, n_traj: int, episode_len: int = EPISODE_LEN, seed: int = 0,
                    noise: float = EXPERT_NOISE, perturb_prob: float = PERTURB_PROB,
                    perturb_width: float = PERTURB_WIDTH) -> Dataset:
    """Roll out the scripted behaviour policy for ``n_traj`` sampled preferences.

    Expert trajectories act on their own preference with Gaussian throttle noise.
    Amateur trajectories are flagged as perturbed with probability ``perturb_prob``;
    a perturbed trajectory re-draws a jittered preference (uniform, total width
    ``perturb_width``, projected back to the simplex) before every action, while
    still recording the original preference.
    """
    if quality not in ("expert", "amateur"):
        raise InputError(f"quality must be 'expert' or 'amateur', got {quality!r}")
    if n_traj < 0:
        raise InputError("n_traj must be non-negative")
    rng = np.random.default_rng(seed)
    omegas = uniform_simplex(rng, n_traj)
    perturbed = (rng.random(n_traj) < perturb_prob) if quality == "amateur" else np.zeros(n_traj, bool)

    states = np.zeros((n_traj, STATE_DIM))
    all_s = np.zeros((n_traj, episode_len, STATE_DIM))
    all_a = np.zeros((n_traj, episode_len, ACTION_DIM))
    all_r = np.zeros((n_traj, episode_len, N_OBJ))
    for t in range(episode_len):
        acting = omegas
        if perturbed.any():
            jitter = rng.uniform(-perturb_width / 2, perturb_width / 2, size=omegas.shape)
            acting = np.where(perturbed[:, None], project_to_simplex(omegas + jitter), omegas)
        a = expert_action(acting) + noise * rng.standard_normal(n_traj)
        a = np.clip(a, -1.0, 1.0)
        all_s[:, t] = states
        all_a[:, t, 0] = a
        states, r = step_batch(states, a)
        all_r[:, t] = r

    trajs = [
        compute_rtg(Trajectory(id=i, omega=omegas[i], states=all_s[i], actions=all_a[i],
                               rewards=all_r[i], perturbed=bool(perturbed[i])))
        for i in range(n_traj)
    ]
    manifest = {
        "env": {"name": "speed-energy", "episode_len": episode_len, "decay": DECAY, "gain": GAIN},
        "quality": quality,
        "seed": seed,
        "n_traj": n_traj,
        "action_noise": noise,
        "perturb_prob": perturb_prob if quality == "amateur" else 0.0,
        "perturb_width": perturb_width if quality == "amateur" else 0.0,
        "slice": {"kind": "complete"},
    }
    return Dataset(trajs, manifest)


def constant_action_return(a: float, episode_len: int = EPISODE_LEN) -> np.ndarray:
    _, rewards = rollout_actions(np.full(episode_len, a))
    return rewards.sum(axis=0)


def oracle_pareto_front(resolution: int, episode_len: int = EPISODE_LEN) -> np.ndarray:
    """Non-dominated episode returns of every constant throttle on a grid over [0, 1]."""
    if resolution < 2:
        raise InputError("resolution must be at least 2")
    grid = np.linspace(0.0, 1.0, resolution)
    returns = np.array([constant_action_return(a, episode_len) for a in grid])
    return non_dominated(returns)
