"""Conditional diffusion over state windows: schedule, training, DDIM with guidance.

A window ``x0`` holds ``H`` consecutive z-scored states. The condition is the
preference concatenated with the normalized return ``[omega, g]``; dropping it
(``cond_mask = 0``) yields the unconditional model used by classifier-free
guidance.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .datastore import Dataset, SegmentSampler, StateNormalizer
from .errors import ConfigError, SamplingError, TrainingDivergence
from .netcore import (
    EMA,
    Checkpoint,
    DenoiserConfig,
    MLP,
    build_denoiser,
    generator_state,
    make_adamw,
    optimizer_to_numpy,
    seeded,
    state_to_numpy,
)

Generators = torch.Generator | Sequence[torch.Generator] | None


# ------------------------------------------------------------------ schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule with a linear ``beta(t)`` from ``beta_min`` to ``beta_max``.

    ``log alpha(t) = -t^2 (beta_max - beta_min) / 4 - t beta_min / 2`` and
    ``sigma(t) = sqrt(1 - alpha(t)^2)``.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0

    def log_alpha(self, t):
        return -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min

    def alpha(self, t):
        t = _as_float_tensor(t)
        return torch.exp(self.log_alpha(t))

    def sigma(self, t):
        t = _as_float_tensor(t)
        return torch.sqrt(-torch.expm1(2.0 * self.log_alpha(t)))

    def alpha_sigma(self, t):
        return self.alpha(t), self.sigma(t)


def _as_float_tensor(t):
    if isinstance(t, torch.Tensor):
        return t if t.is_floating_point() else t.double()
    return torch.as_tensor(t, dtype=torch.float64)


def _bcast(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    v = v.to(x.dtype)
    return v.reshape(v.shape + (1,) * (x.ndim - v.ndim))


def add_noise(x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule = NoiseSchedule()):
    """Forward marginal ``alpha(t) x0 + sigma(t) noise`` (``t`` scalar or per-sample)."""
    t = _as_float_tensor(t)
    a, s = schedule.alpha_sigma(t)
    return _bcast(a, x0) * x0 + _bcast(s, x0) * noise


def noisy_window(x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule = NoiseSchedule(),
                 fix_first: bool = False) -> torch.Tensor:
    """``add_noise``, optionally keeping the first row (the current state) clean."""
    xt = add_noise(x0, t, noise, schedule)
    if fix_first:
        xt = torch.cat([x0[:, :1], xt[:, 1:]], dim=1)
    return xt


# ------------------------------------------------------------------ training

@dataclass
class DiffusionConfig:
    horizon: int = 4
    grad_steps: int = 50_000
    batch: int = 64
    lr: float = 2e-4
    weight_decay: float = 1e-5
    ema: float = 0.995
    mask_prob: float = 0.2
    next_state_weight: float = 10.0
    embedding_dim: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    arch: str = "auto"
    mlp_hidden: int = 256
    fix_first_state: bool = False
    seed: int = 0
    log_every: int = 1000

    def __post_init__(self):
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob must lie in (0, 1), got {self.mask_prob}")
        if self.next_state_weight < 1:
            raise ConfigError("next_state_weight must be >= 1")
        if self.horizon < 2:
            raise ConfigError("horizon must be >= 2")
        if self.grad_steps < 0 or self.batch < 1:
            raise ConfigError("grad_steps must be >= 0 and batch >= 1")

    def denoiser_config(self, state_dim: int, cond_dim: int) -> DenoiserConfig:
        return DenoiserConfig(state_dim=state_dim, horizon=self.horizon, cond_dim=cond_dim,
                              embedding_dim=self.embedding_dim, n_heads=self.n_heads,
                              n_blocks=self.n_blocks, arch=self.arch, mlp_hidden=self.mlp_hidden)


def loss_weights(horizon: int, state_dim: int, next_state_weight: float, fix_first: bool = False,
                 dtype=torch.float32):
    """Per-element weights: 1 everywhere, ``next_state_weight`` on row 1 (the next state).

    With ``fix_first`` the clean first row carries no noise to predict and gets weight 0.
    """
    w = torch.ones(horizon, state_dim, dtype=dtype)
    w[1] = next_state_weight
    if fix_first:
        w[0] = 0.0
    return w


def diffusion_loss(model: nn.Module, x0: torch.Tensor, cond: torch.Tensor, t: torch.Tensor,
                   noise: torch.Tensor, keep_cond: torch.Tensor, weights: torch.Tensor,
                   schedule: NoiseSchedule = NoiseSchedule(), fix_first: bool = False) -> torch.Tensor:
    """Weighted noise-prediction error for explicit draws of time, noise and condition mask.

    Args:
        keep_cond: (B,) 1 keeps the condition, 0 replaces it by the null token.
        weights: (H, state_dim) element weights.
        fix_first: keep the first row clean in the noisy input.
    """
    xt = noisy_window(x0, t, noise, schedule, fix_first)
    pred = model(xt, t.to(x0.dtype), cond, keep_cond)
    return (weights * (pred - noise) ** 2).mean()


def draw_loss_inputs(x0: torch.Tensor, mask_prob: float, gen: torch.Generator):
    b = x0.shape[0]
    t = torch.rand(b, generator=gen, dtype=x0.dtype)
    noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    keep = (torch.rand(b, generator=gen) >= mask_prob).to(x0.dtype)
    return t, noise, keep


def make_condition(omega, g) -> np.ndarray:
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    if g.shape[0] == 1 and omega.shape[0] > 1:
        g = np.repeat(g, omega.shape[0], axis=0)
    return np.concatenate([omega, g], axis=1)


@dataclass
class TrainResult:
    model: nn.Module          # EMA snapshot, frozen
    raw: nn.Module            # last online parameters
    losses: list[float]
    checkpoint: Checkpoint
    seconds: float = 0.0


def train_diffusion(dataset: Dataset, config: DiffusionConfig, normalizer: StateNormalizer | None = None,
                    schedule: NoiseSchedule = NoiseSchedule(), log: Callable[[str], None] | None = None,
                    meta: dict | None = None) -> TrainResult:
    """AdamW training with EMA on uniformly sampled, z-scored state windows.

    The dataset must carry normalized conditions. Returns the EMA snapshot.
    """
    cond_all = dataset.conditions  # raises if not normalized
    normalizer = normalizer or StateNormalizer.fit(dataset)
    sampler = SegmentSampler(dataset, config.horizon)
    windows = torch.as_tensor(normalizer.normalize(sampler.windows), dtype=torch.float32)
    conds = torch.as_tensor(make_condition(dataset.omegas, cond_all), dtype=torch.float32)
    traj_of_window = torch.as_tensor(sampler.traj_index)
    state_dim, n_obj = windows.shape[-1], dataset.omegas.shape[1]
    dcfg = config.denoiser_config(state_dim, 2 * n_obj)

    with seeded(config.seed):
        model = build_denoiser(dcfg)
    ema = EMA(model, config.ema)
    opt = make_adamw(model, config.lr, config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed + 1)
    weights = loss_weights(config.horizon, state_dim, config.next_state_weight, config.fix_first_state)

    losses: list[float] = []
    start = time.perf_counter()
    model.train()
    for step in range(config.grad_steps):
        idx = torch.randint(0, len(windows), (config.batch,), generator=gen)
        x0 = windows[idx]
        cond = conds[traj_of_window[idx]]
        t, noise, keep = draw_loss_inputs(x0, config.mask_prob, gen)
        loss = diffusion_loss(model, x0, cond, t, noise, keep, weights, schedule, config.fix_first_state)
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite diffusion loss at step {step}: {loss.item()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ema.update(model)
        losses.append(loss.item())
        if log and config.log_every and (step + 1) % config.log_every == 0:
            log(f"step {step + 1}/{config.grad_steps} loss {np.mean(losses[-config.log_every:]):.5f}")
    seconds = time.perf_counter() - start

    ckpt = Checkpoint(
        kind="diffusion",
        config={"denoiser": dcfg.to_dict(), "train": asdict(config),
                "schedule": {"beta_min": schedule.beta_min, "beta_max": schedule.beta_max}},
        params=state_to_numpy(model),
        ema=state_to_numpy(ema.model),
        optimizer=optimizer_to_numpy(opt),
        rng={"torch": generator_state(gen)},
        meta={"state_normalizer": normalizer.to_dict(),
              "normalization": dataset.manifest.get("normalization"),
              "final_loss": float(np.mean(losses[-100:])) if losses else None,
              "n_windows": len(windows), **(meta or {})},
    )
    return TrainResult(ema.model, model, losses, ckpt, seconds)


def denoiser_from_checkpoint(ckpt: Checkpoint, use_ema: bool = True) -> nn.Module:
    if ckpt.kind not in ("diffusion", "slider"):
        raise ConfigError(f"expected a denoiser checkpoint, got {ckpt.kind!r}")
    model = build_denoiser(DenoiserConfig.from_dict(ckpt.config["denoiser"]))
    ckpt.load_into(model, use_ema=use_ema)
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


def schedule_from_checkpoint(ckpt: Checkpoint) -> NoiseSchedule:
    return NoiseSchedule(**ckpt.config.get("schedule", {}))


# ------------------------------------------------------------------ guidance

def cfg_noise(model: nn.Module, x: torch.Tensor, t, cond: torch.Tensor, w: float) -> torch.Tensor:
    """``(1 + w) eps(x, t, cond) - w eps(x, t, null)``, both branches in one forward pass.

    The printed alternative ``w' eps_cond + (1 - w') eps_uncond`` is the same
    map with ``w = w' - 1``.
    """
    b = x.shape[0]
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.ndim == 0:
        t = t.expand(b)
    keep = torch.cat([torch.ones(b, dtype=x.dtype), torch.zeros(b, dtype=x.dtype)])
    out = model(torch.cat([x, x]), torch.cat([t, t]), torch.cat([cond, cond]), keep)
    eps_c, eps_u = out[:b], out[b:]
    return (1.0 + w) * eps_c - w * eps_u


class GuidanceClassifier(nn.Module):
    """Predicts the normalized return of a noisy window; its log-likelihood guides sampling.

    ``log C(x, t, cond) = -||g_hat(x, t, omega) - g||^2 / (2 tau^2)`` where
    ``cond = [omega, g]``.
    """

    def __init__(self, horizon: int, state_dim: int, n_obj: int = 2, hidden: int = 128,
                 tau: float = 0.1):
        super().__init__()
        self.horizon, self.state_dim, self.n_obj, self.hidden, self.tau = horizon, state_dim, n_obj, hidden, tau
        self.net = MLP((horizon * state_dim + 1 + n_obj, hidden, hidden, n_obj))

    def predict(self, x, t, omega):
        t = torch.as_tensor(t, dtype=x.dtype)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        return self.net(torch.cat([x.reshape(x.shape[0], -1), t[:, None], omega], dim=1))

    def forward(self, x, t, cond):
        g_hat = self.predict(x, t, cond[:, :self.n_obj])
        return -((g_hat - cond[:, self.n_obj:]) ** 2).sum(dim=1) / (2 * self.tau ** 2)

    def config(self) -> dict:
        return {"horizon": self.horizon, "state_dim": self.state_dim, "n_obj": self.n_obj,
                "hidden": self.hidden, "tau": self.tau}


def classifier_grad(classifier: Callable, x: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
    """Gradient of the summed per-sample log-likelihood with respect to ``x``."""
    with torch.enable_grad():
        xg = x.detach().requires_grad_(True)
        score = classifier(xg, t, cond).sum()
        if not score.requires_grad:  # constant classifier
            return torch.zeros_like(x)
        (grad,) = torch.autograd.grad(score, xg, allow_unused=True)
    return torch.zeros_like(x) if grad is None else grad


def cg_noise(base_eps: torch.Tensor, classifier: Callable, x: torch.Tensor, t, cond: torch.Tensor,
             w: float, schedule: NoiseSchedule = NoiseSchedule()) -> torch.Tensor:
    """``base_eps - w sigma(t) grad_x log C(x, t, cond)``.

    ``base_eps`` is the unconditional prediction for plain classifier guidance,
    or a CFG prediction for the combined mode.
    """
    if w == 0:
        return base_eps
    sigma = _bcast(schedule.sigma(torch.as_tensor(t, dtype=torch.float64)), x)
    return base_eps - w * sigma * classifier_grad(classifier, x, t, cond)


def train_classifier(dataset: Dataset, normalizer: StateNormalizer, horizon: int, steps: int = 5000,
                     batch: int = 64, lr: float = 1e-3, seed: int = 0,
                     schedule: NoiseSchedule = NoiseSchedule(), fix_first: bool = False) -> GuidanceClassifier:
    """Regress normalized conditions from noised windows at uniformly drawn times."""
    sampler = SegmentSampler(dataset, horizon)
    windows = torch.as_tensor(normalizer.normalize(sampler.windows), dtype=torch.float32)
    g = torch.as_tensor(dataset.conditions, dtype=torch.float32)[sampler.traj_index]
    om = torch.as_tensor(dataset.omegas, dtype=torch.float32)[sampler.traj_index]
    with seeded(seed):
        clf = GuidanceClassifier(horizon, windows.shape[-1], om.shape[1])
    opt = make_adamw(clf, lr, 0.0)
    gen = torch.Generator().manual_seed(seed + 1)
    for _ in range(steps):
        idx = torch.randint(0, len(windows), (batch,), generator=gen)
        t = torch.rand(batch, generator=gen)
        xt = noisy_window(windows[idx], t, torch.randn(windows[idx].shape, generator=gen), schedule,
                          fix_first)
        loss = ((clf.predict(xt, t, om[idx]) - g[idx]) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return clf.eval()


# ------------------------------------------------------------------ sampling

@dataclass
class SamplerConfig:
    steps: int = 10
    guidance_w: float = 1.5
    temperature: float = 0.5
    inpaint: bool = True
    inpaint_noised: bool = True
    mode: str = "cfg"          # cfg | cg | cfg+cg
    cg_w: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampling steps must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")
        if self.mode not in ("cfg", "cg", "cfg+cg"):
            raise ConfigError(f"unknown guidance mode {self.mode!r}")


def time_grid(steps: int) -> np.ndarray:
    """Uniform decreasing grid ``1, (S-1)/S, ..., 0``."""
    return np.linspace(1.0, 0.0, steps + 1)


def randn(shape, gens: Generators, dtype=torch.float32) -> torch.Tensor:
    """Standard normal draw; a sequence of generators gives one independent stream per row."""
    if gens is None or isinstance(gens, torch.Generator):
        return torch.randn(shape, generator=gens, dtype=dtype)
    if len(gens) != shape[0]:
        raise ConfigError(f"{len(gens)} generators for a batch of {shape[0]}")
    return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in gens])


# ``noise_fn(x, t, i)`` returns the guided noise prediction at grid step ``i``
# (``i`` counts down from ``steps`` to 1, matching the planning loop).
NoiseFn = Callable[[torch.Tensor, float, int], torch.Tensor]


def ddim_loop(noise_fn: NoiseFn, shape, config: SamplerConfig, gens: Generators,
              fixed_s0: torch.Tensor | None = None, schedule: NoiseSchedule = NoiseSchedule(),
              dtype=torch.float32) -> torch.Tensor:
    """Deterministic first-order sampler in model (z-scored) units.

    ``x_t = alpha_t (x_s - sigma_s eps) / alpha_s + sigma_t eps``. With
    ``fixed_s0`` the first row is reset after every update: to the noised
    state ``alpha_t s0 + sigma_t eps`` (default), or to the clean ``s0`` when
    ``config.inpaint_noised`` is false. Either way it ends exactly at ``s0``.
    """
    grid = time_grid(config.steps)
    alphas = [float(schedule.alpha(t)) for t in grid]
    sigmas = [float(schedule.sigma(t)) for t in grid]
    noised = config.inpaint_noised
    x = config.temperature * randn(shape, gens, dtype)
    if fixed_s0 is not None:
        x[:, 0] = alphas[0] * fixed_s0 + sigmas[0] * x[:, 0] if noised else fixed_s0
    for k in range(config.steps):
        i = config.steps - k
        eps = noise_fn(x, grid[k], i)
        x = alphas[k + 1] * (x - sigmas[k] * eps) / alphas[k] + sigmas[k + 1] * eps
        if fixed_s0 is not None:
            x[:, 0] = alphas[k + 1] * fixed_s0 + sigmas[k + 1] * eps[:, 0] if noised else fixed_s0
        if not torch.isfinite(x).all():
            raise SamplingError(f"non-finite sample at step {k + 1}/{config.steps}", step=k + 1)
    return x


def guided_noise_fn(model: nn.Module, cond: torch.Tensor, config: SamplerConfig,
                    classifier: Callable | None = None,
                    schedule: NoiseSchedule = NoiseSchedule()) -> NoiseFn:
    def fn(x, t, i):
        if config.mode == "cg":
            b = x.shape[0]
            tt = torch.full((b,), float(t), dtype=x.dtype)
            base = model(x, tt, None, None)
        else:
            base = cfg_noise(model, x, t, cond, config.guidance_w)
        if config.mode in ("cg", "cfg+cg"):
            if classifier is None:
                raise ConfigError(f"guidance mode {config.mode!r} needs a classifier")
            base = cg_noise(base, classifier, x, t, cond, config.cg_w, schedule)
        return base
    return fn


@torch.no_grad()
def ddim_sample(model: nn.Module, cond, config: SamplerConfig, gens: Generators,
                normalizer: StateNormalizer | None = None, fixed_s0=None,
                classifier: Callable | None = None, schedule: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    """Sample a batch of state windows in environment units.

    Args:
        cond: (B, 2n) conditions ``[omega, g]``.
        gens: one generator, or one per batch row.
        fixed_s0: (B, state_dim) current states in environment units; row 0 of
            the result equals them exactly.
    """
    cfg = model.config
    cond_t = torch.as_tensor(np.asarray(cond, dtype=np.float64), dtype=torch.float32)
    noise_fn = guided_noise_fn(model, cond_t, config, classifier, schedule)
    return _run_sampler(noise_fn, len(cond_t), cfg.horizon, cfg.state_dim, config, gens, normalizer,
                        fixed_s0, schedule)


def _run_sampler(noise_fn, batch, horizon, state_dim, config, gens, normalizer, fixed_s0, schedule):
    s0_env = None
    s0_model = None
    if fixed_s0 is not None and config.inpaint:
        s0_env = np.asarray(fixed_s0, dtype=np.float64).reshape(batch, state_dim)
        z = normalizer.normalize(s0_env) if normalizer is not None else s0_env
        s0_model = torch.as_tensor(z, dtype=torch.float32)
    x = ddim_loop(noise_fn, (batch, horizon, state_dim), config, gens, s0_model, schedule)
    out = x.double().numpy()
    if normalizer is not None:
        out = normalizer.denormalize(out)
    if s0_env is not None:
        out[:, 0] = s0_env
    return out
