"""Slider adapter: a second noise network trained on the base model's preference derivative.

The adapter ``eps*(x, t, [omega, g])`` regresses the central difference of the
frozen base model along the simplex tangent ``d = (+1, -1)``::

    [eps(x, t, [omega + delta d, g]) - eps(x, t, [omega - delta d, g])] / (2 delta)

At sampling time the preference is walked from the nearest dataset preference
towards the target, and the adapter output (scaled by the shift per step) is
added to the guided prediction.
"""

from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .datastore import Dataset, SegmentSampler, StateNormalizer
from .diffusion import (
    Generators,
    NoiseSchedule,
    SamplerConfig,
    TrainResult,
    _run_sampler,
    noisy_window,
    cfg_noise,
    make_condition,
)
from .errors import ConfigError, InputError, TrainingDivergence
from .netcore import (
    EMA,
    Checkpoint,
    DenoiserConfig,
    build_denoiser,
    generator_state,
    make_adamw,
    optimizer_to_numpy,
    params_digest,
    seeded,
    state_to_numpy,
)


def tangent_direction(n_obj: int = 2) -> np.ndarray:
    if n_obj != 2:
        raise ConfigError("the slider direction is only defined for two objectives")
    return np.array([1.0, -1.0])


@dataclass
class PrefShift:
    delta: np.ndarray       # (B,) scalar shift along ``direction``
    direction: np.ndarray   # (n,)
    valid: np.ndarray       # (B,) False where no admissible shift was found

    def apply(self, omega: np.ndarray, sign: float) -> np.ndarray:
        return omega + sign * self.delta[:, None] * self.direction[None, :]


def sample_pref_shift(rng: np.random.Generator, delta_max: float, omegas: np.ndarray | None = None,
                      size: int | None = None, max_tries: int = 10) -> PrefShift:
    """Draw ``delta ~ U(-delta_max, delta_max)`` per sample along the simplex tangent.

    When ``omegas`` are given, draws that would push ``omega +/- delta d`` off
    the simplex are redrawn up to ``max_tries`` times; samples still invalid
    are flagged and should be skipped.
    """
    if not delta_max > 0:
        raise InputError(f"delta_max must be positive, got {delta_max}")
    d = tangent_direction()
    if omegas is None:
        n = 1 if size is None else size
        return PrefShift(rng.uniform(-delta_max, delta_max, n), d, np.ones(n, dtype=bool))
    omegas = np.asarray(omegas, dtype=np.float64)
    delta = rng.uniform(-delta_max, delta_max, len(omegas))
    for _ in range(max_tries):
        ok = _admissible(omegas, delta, d)
        if ok.all():
            break
        bad = ~ok
        delta[bad] = rng.uniform(-delta_max, delta_max, int(bad.sum()))
    ok = _admissible(omegas, delta, d) & (delta != 0)
    return PrefShift(delta, d, ok)


def _admissible(omegas, delta, d):
    hi = omegas + np.abs(delta)[:, None] * np.abs(d)[None, :]
    lo = omegas - np.abs(delta)[:, None] * np.abs(d)[None, :]
    return (lo >= 0).all(axis=1) & (hi <= 1).all(axis=1)


@torch.no_grad()
def slider_target(base: nn.Module, xt: torch.Tensor, t: torch.Tensor, omega: torch.Tensor,
                  g: torch.Tensor, delta: torch.Tensor, direction: torch.Tensor) -> torch.Tensor:
    """Central difference of the frozen base model along ``direction``; no gradient flows."""
    shift = delta[:, None] * direction[None, :]
    b = xt.shape[0]
    cond = torch.cat([torch.cat([omega + shift, g], 1), torch.cat([omega - shift, g], 1)])
    keep = torch.ones(2 * b, dtype=xt.dtype)
    out = base(torch.cat([xt, xt]), torch.cat([t, t]), cond, keep)
    return (out[:b] - out[b:]) / (2.0 * delta).reshape(-1, 1, 1)


def slider_loss(slider: nn.Module, base: nn.Module, xt: torch.Tensor, t: torch.Tensor,
                omega: torch.Tensor, g: torch.Tensor, delta: torch.Tensor,
                direction: torch.Tensor | None = None, target_base: nn.Module | None = None) -> torch.Tensor:
    """Mean squared error between the adapter and the base model's central difference.

    Samples with ``delta == 0`` are excluded. ``target_base`` may be a
    higher-precision copy of ``base`` used only to form the target.
    """
    if direction is None:
        direction = torch.tensor([1.0, -1.0], dtype=xt.dtype)
    use = delta != 0
    if not use.all():
        xt, t, omega, g, delta = xt[use], t[use], omega[use], g[use], delta[use]
    if len(xt) == 0:
        return torch.zeros((), dtype=xt.dtype, requires_grad=True)
    tb = target_base if target_base is not None else base
    dt = next(tb.parameters()).dtype
    target = slider_target(tb, xt.to(dt), t.to(dt), omega.to(dt), g.to(dt), delta.to(dt),
                           direction.to(dt)).to(xt.dtype)
    pred = slider(xt, t, torch.cat([omega, g], 1), torch.ones(len(xt), dtype=xt.dtype))
    return ((pred - target) ** 2).mean()


@dataclass
class SliderConfig:
    delta_max: float = 1e-3
    grad_steps: int = 10_000
    batch: int = 64
    lr: float = 2e-4
    weight_decay: float = 1e-5
    ema: float = 0.995
    seed: int = 0
    log_every: int = 1000
    eta_scale: float = 1.0

    def __post_init__(self):
        if not self.delta_max > 0:
            raise ConfigError("slider.delta_max must be positive")


def train_slider(dataset: Dataset, base: nn.Module, normalizer: StateNormalizer, config: SliderConfig,
                 schedule: NoiseSchedule = NoiseSchedule(), base_digest: str | None = None,
                 fix_first_state: bool = False, log=None) -> TrainResult:
    """AdamW + EMA training of a fresh adapter against the frozen base model.

    The base model's parameters are never updated; a float64 copy forms the
    finite-difference targets so small shifts do not drown in rounding.
    ``fix_first_state`` must match how the base model was trained.
    """
    dcfg: DenoiserConfig = base.config
    digest_before = params_digest(base)
    for p in base.parameters():
        p.requires_grad_(False)
    base.eval()
    target_base = copy.deepcopy(base).double()

    sampler = SegmentSampler(dataset, dcfg.horizon)
    windows = torch.as_tensor(normalizer.normalize(sampler.windows), dtype=torch.float32)
    om_np = dataset.omegas[sampler.traj_index]
    g_all = torch.as_tensor(dataset.conditions, dtype=torch.float32)[sampler.traj_index]

    with seeded(config.seed):
        slider = build_denoiser(dcfg)
    ema = EMA(slider, config.ema)
    opt = make_adamw(slider, config.lr, config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.default_rng(config.seed + 2)
    direction = torch.tensor(tangent_direction(), dtype=torch.float32)

    losses = []
    start = time.perf_counter()
    for step in range(config.grad_steps):
        idx = torch.randint(0, len(windows), (config.batch,), generator=gen)
        x0 = windows[idx]
        t = torch.rand(config.batch, generator=gen)
        xt = noisy_window(x0, t, torch.randn(x0.shape, generator=gen), schedule, fix_first_state)
        omega_np = om_np[idx.numpy()]
        shift = sample_pref_shift(rng, config.delta_max, omega_np)
        keep = torch.as_tensor(shift.valid)
        delta = torch.as_tensor(np.where(shift.valid, shift.delta, 0.0), dtype=torch.float32)
        loss = slider_loss(slider, base, xt[keep], t[keep], torch.as_tensor(omega_np, dtype=torch.float32)[keep],
                           g_all[idx][keep], delta[keep], direction, target_base)
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite slider loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ema.update(slider)
        losses.append(loss.item())
        if log and config.log_every and (step + 1) % config.log_every == 0:
            log(f"slider step {step + 1}/{config.grad_steps} loss {np.mean(losses[-config.log_every:]):.5f}")
    seconds = time.perf_counter() - start
    if params_digest(base) != digest_before:
        raise RuntimeError("base model parameters changed during slider training")

    ckpt = Checkpoint(
        kind="slider",
        config={"denoiser": dcfg.to_dict(), "train": asdict(config),
                "schedule": {"beta_min": schedule.beta_min, "beta_max": schedule.beta_max}},
        params=state_to_numpy(slider),
        ema=state_to_numpy(ema.model),
        optimizer=optimizer_to_numpy(opt),
        rng={"torch": generator_state(gen)},
        meta={"base_digest": base_digest or digest_before, "base_params_digest": digest_before,
              "final_loss": float(np.mean(losses[-100:])) if losses else None},
    )
    return TrainResult(ema.model, slider, losses, ckpt, seconds)


# ------------------------------------------------------------------ sampling

def nearest_preference(targets: np.ndarray, prefs: np.ndarray) -> np.ndarray:
    """Index of the L2-nearest dataset preference per target; ties go to the lowest index."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    prefs = np.asarray(prefs, dtype=np.float64)
    d = np.linalg.norm(targets[:, None, :] - prefs[None, :, :], axis=-1)
    return d.argmin(axis=1)  # argmin returns the first minimum


def preference_path(omega0: np.ndarray, shift: np.ndarray, steps: int, i: int) -> np.ndarray:
    """Preference used at denoising step ``i`` (``steps`` down to 1): ``omega0 + (S - i)/S shift``."""
    return omega0 + ((steps - i) / steps) * shift


@torch.no_grad()
def sliding_sample(base: nn.Module, slider: nn.Module | None, omega_target, dataset_prefs,
                   config: SamplerConfig, gens: Generators, normalizer: StateNormalizer | None = None,
                   fixed_s0=None, g=None, eta_scale: float = 1.0,
                   schedule: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    """Guided sampling that slides the preference from the nearest dataset preference to the target.

    With every shift zero the slider term is skipped, so the result is
    bit-identical to :func:`ddim_sample` on the same generators.
    """
    omega_target = np.atleast_2d(np.asarray(omega_target, dtype=np.float64))
    b, n = omega_target.shape
    omega0 = np.asarray(dataset_prefs, dtype=np.float64)[nearest_preference(omega_target, dataset_prefs)]
    shift = omega_target - omega0
    d = tangent_direction(n)
    delta_total = shift @ d / (d @ d)
    g = np.ones((b, n)) if g is None else np.broadcast_to(np.asarray(g, dtype=np.float64), (b, n))
    use_slider = slider is not None and bool(np.any(delta_total != 0))
    coef = torch.as_tensor(eta_scale * delta_total / config.steps, dtype=torch.float32).reshape(-1, 1, 1)
    cond_cache: dict[int, torch.Tensor] = {}

    def cond_at(i):
        if i not in cond_cache:
            w_i = preference_path(omega0, shift, config.steps, i)
            cond_cache[i] = torch.as_tensor(make_condition(w_i, g), dtype=torch.float32)
        return cond_cache[i]

    def noise_fn(x, t, i):
        cond = cond_at(i)
        eps = cfg_noise(base, x, t, cond, config.guidance_w)
        if use_slider:
            tt = torch.full((x.shape[0],), float(t), dtype=x.dtype)
            eps = eps + coef * slider(x, tt, cond, torch.ones(x.shape[0], dtype=x.dtype))
        return eps

    cfg = base.config
    return _run_sampler(noise_fn, b, cfg.horizon, cfg.state_dim, config, gens, normalizer, fixed_s0,
                        schedule)
