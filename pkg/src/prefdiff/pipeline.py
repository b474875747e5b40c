"""Glue between a resolved config and the training / evaluation building blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch.nn as nn

from . import config as C
from .datastore import Dataset, StateNormalizer
from .diffusion import DiffusionConfig, SamplerConfig, train_diffusion
from .errors import ConfigError
from .metrics import SweepResult, evaluate_sweep
from .normalize import ReturnPredictor, normalize, train_return_predictor
from .planner import InvDynConfig, InverseDynamics, Planner, PlannerConfig, rollout_fn, train_inverse_dynamics
from .slider import SliderConfig, train_slider


def diffusion_config(cfg: dict, seed: int | None = None) -> DiffusionConfig:
    d = C.subset(cfg, "diffusion")
    return DiffusionConfig(
        horizon=d["horizon"], grad_steps=d["grad_steps"], batch=d["batch"], lr=d["lr"],
        weight_decay=d["weight_decay"], ema=d["ema"], mask_prob=d["mask_prob"],
        next_state_weight=d["next_state_weight"], embedding_dim=d["embedding_dim"],
        n_heads=d["n_heads"], n_blocks=d["n_blocks"], arch=d["arch"], mlp_hidden=d["mlp_hidden"],
        fix_first_state=d["inpaint"] == "clean", seed=cfg["seed"] if seed is None else seed,
    )


def sampler_config(cfg: dict) -> SamplerConfig:
    d = C.subset(cfg, "diffusion")
    return SamplerConfig(steps=d["steps"], guidance_w=d["guidance_w"], temperature=d["temperature"],
                         mode=d["mode"], cg_w=d["cg_w"], inpaint_noised=d["inpaint"] == "noised")


def slider_config(cfg: dict, seed: int | None = None) -> SliderConfig:
    d = C.subset(cfg, "slider")
    return SliderConfig(delta_max=d["delta_max"], grad_steps=d["grad_steps"], batch=d["batch"],
                        lr=d["lr"], eta_scale=d["eta_scale"], seed=cfg["seed"] if seed is None else seed)


def invdyn_config(cfg: dict, seed: int | None = None) -> InvDynConfig:
    d = C.subset(cfg, "invdyn")
    return InvDynConfig(grad_steps=d["grad_steps"], batch=d["batch"], lr=d["lr"], hidden=d["hidden"],
                        seed=cfg["seed"] if seed is None else seed)


def planner_config(cfg: dict, use_slider: bool | None = None) -> PlannerConfig:
    return PlannerConfig(sampler=sampler_config(cfg),
                         use_slider=cfg["planner.use_slider"] if use_slider is None else use_slider,
                         replan_every=cfg["planner.replan_every"], eta_scale=cfg["slider.eta_scale"])


def normalize_for(cfg: dict, dataset: Dataset, predictor: ReturnPredictor | None = None,
                  predictor_ref: str | None = None, seed: int | None = None) -> Dataset:
    """Apply the configured normalization, fitting the PPN predictor if none is supplied."""
    kind = cfg["normalize.kind"]
    if kind == "ppn" and predictor is None:
        predictor = train_return_predictor(dataset, steps=cfg["predictor.grad_steps"], lr=cfg["predictor.lr"],
                                           seed=cfg["seed"] if seed is None else seed).model
    return normalize(dataset, kind, eps=cfg["normalize.epsilon"], predictor=predictor,
                     predictor_ref=predictor_ref)


@dataclass
class Models:
    base: nn.Module
    invdyn: InverseDynamics
    normalizer: StateNormalizer
    dataset_prefs: np.ndarray
    slider: nn.Module | None = None


def train_models(cfg: dict, dataset: Dataset, seed: int | None = None, with_slider: bool = False,
                 log: Callable[[str], None] | None = None) -> Models:
    """Normalize, then train the denoiser, inverse dynamics and optionally the slider."""
    seed = cfg["seed"] if seed is None else seed
    nds = normalize_for(cfg, dataset, seed=seed)
    normalizer = StateNormalizer.fit(nds)
    base = train_diffusion(nds, diffusion_config(cfg, seed), normalizer, log=log).model
    inv = train_inverse_dynamics(nds, invdyn_config(cfg, seed)).model
    slider = None
    if with_slider:
        slider = train_slider(nds, base, normalizer, slider_config(cfg, seed),
                              fix_first_state=cfg["diffusion.inpaint"] == "clean", log=log).model
    return Models(base, inv, normalizer, nds.omegas, slider)


def evaluate(cfg: dict, models: Models, use_slider: bool, seed: int | None = None, ood_regions=(),
             eval_predictor: Callable | None = None, workers: int = 1) -> SweepResult:
    if use_slider and models.slider is None:
        raise ConfigError("sliding guidance requested but no slider was trained")
    planner = Planner(models.base, models.invdyn, models.normalizer, planner_config(cfg, use_slider),
                      models.dataset_prefs, models.slider)
    return evaluate_sweep(rollout_fn(planner, cfg["env.episode_len"], workers), cfg["metrics.n_prefs"],
                          cfg["seed"] if seed is None else seed, ood_regions, eval_predictor,
                          cfg["metrics.reference_point"])
