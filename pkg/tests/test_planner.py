import json

import numpy as np
import pytest
import torch

from prefdiff import config as C, pipeline
from prefdiff.datastore import StateNormalizer
from prefdiff.diffusion import SamplerConfig
from prefdiff.errors import ConfigError
from prefdiff.momdp import collect_dataset
from prefdiff.netcore import DenoiserConfig, build_denoiser
from prefdiff.planner import (
    ConstantPolicy, InvDynConfig, InverseDynamics, Planner, PlannerConfig, make_generators, parallel_rollout,
    preference_seed, rollout, train_inverse_dynamics, transitions, write_trace,
)

from gradcheck import max_relative_error, randomize


@pytest.fixture(scope="module")
def invdyn_fit():
    return train_inverse_dynamics(collect_dataset("amateur", 300, seed=5), InvDynConfig(grad_steps=3000, hidden=128))


def tiny_planner(replan_every=1, horizon=4, invdyn=None):
    cfg = DenoiserConfig(state_dim=2, horizon=horizon, cond_dim=4, embedding_dim=16, arch="mlp", mlp_hidden=32)
    with torch.random.fork_rng():
        torch.manual_seed(0)
        base = build_denoiser(cfg).eval()
    invdyn = invdyn or InverseDynamics(hidden=16).eval()
    return Planner(base, invdyn, StateNormalizer(np.zeros(2), np.ones(2)),
                   PlannerConfig(SamplerConfig(), use_slider=False, replan_every=replan_every))


# ------------------------------------------------------------ inverse dynamics

def test_inverse_dynamics_recovers_closed_form(invdyn_fit):
    s, sn, a = transitions(collect_dataset("amateur", 100, seed=77))
    closed = (sn[:, 1] - 0.9 * s[:, 1]) / 0.1
    np.testing.assert_allclose(closed, a[:, 0], atol=1e-9)
    mse = np.mean((invdyn_fit.model.predict(s, sn)[:, 0] - a[:, 0]) ** 2)
    assert mse < 1e-3, mse


def test_inverse_dynamics_rest_gives_zero_action(invdyn_fit):
    s = np.array([[0.0, 0.0], [5.0, 0.0], [12.0, 0.0]])
    assert np.abs(invdyn_fit.model.predict(s, s)).max() < 0.05


def test_inverse_dynamics_output_is_bounded():
    m = randomize(InverseDynamics(hidden=16), 0, std=3.0)
    s = torch.randn(500, 2, dtype=torch.float64) * 100
    out = m(s, -s)
    assert out.abs().max().item() <= 1.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_inverse_dynamics_gradient(seed):
    m = randomize(InverseDynamics(hidden=8), seed)
    g = torch.Generator().manual_seed(seed)
    s, sn = torch.randn(5, 2, generator=g, dtype=torch.float64), torch.randn(5, 2, generator=g, dtype=torch.float64)
    a = torch.rand(5, 1, generator=g, dtype=torch.float64)
    assert max_relative_error(lambda: ((m(s, sn) - a) ** 2).mean(), m) < 1e-4


def test_inverse_dynamics_training_is_deterministic():
    ds = collect_dataset("expert", 30, seed=0)
    a = train_inverse_dynamics(ds, InvDynConfig(grad_steps=50, hidden=16))
    b = train_inverse_dynamics(ds, InvDynConfig(grad_steps=50, hidden=16))
    assert a.losses == b.losses


# --------------------------------------------------------------- planning

def test_planted_plan_gives_inverse_dynamics_of_first_rows(monkeypatch):
    p = tiny_planner()
    plan = np.array([[[0.0, 0.0], [0.05, 0.05], [0.15, 0.1], [0.3, 0.15]],
                     [[1.0, 0.2], [1.2, 0.2], [1.4, 0.2], [1.6, 0.2]]])
    monkeypatch.setattr(p, "sample_plan", lambda states: plan)
    p.reset(np.array([[0.5, 0.5], [0.2, 0.8]]), 0)
    out = p.act(plan[:, 0], 0)
    np.testing.assert_array_equal(out, p.invdyn.predict(plan[:, 0], plan[:, 1])[:, 0])


def test_open_loop_replanning_reuses_plan(monkeypatch):
    horizon = 4
    p = tiny_planner(replan_every=horizon - 1, horizon=horizon)
    calls = []
    plans = [np.cumsum(np.full((1, horizon, 2), k + 1.0), axis=1) for k in range(3)]

    def fake(states):
        calls.append(states.copy())
        return plans[len(calls) - 1]

    monkeypatch.setattr(p, "sample_plan", fake)
    p.reset(np.array([[0.5, 0.5]]), 0)
    got = [p.act(np.zeros((1, 2)), t)[0] for t in range(6)]
    assert len(calls) == 2
    want = [p.invdyn.predict(plans[k][:, j], plans[k][:, j + 1])[0, 0] for k in range(2) for j in range(3)]
    np.testing.assert_array_equal(got, want)
    with pytest.raises(ConfigError):
        tiny_planner(replan_every=horizon, horizon=horizon)


def test_first_planned_state_is_observed_state():
    p = tiny_planner()
    p.reset(np.array([[0.3, 0.7], [0.9, 0.1]]), 3)
    states = np.array([[1.25, 0.3], [7.5, 0.8]])
    assert np.array_equal(p.sample_plan(states)[:, 0], states)


def test_preference_seeds_are_keyed_by_index():
    assert preference_seed(0, 3) == preference_seed(0, 3) != preference_seed(1, 3)
    a = make_generators(5, 4)
    b = make_generators(5, 2, indices=[2, 3])
    assert torch.equal(torch.randn(3, generator=a[2]), torch.randn(3, generator=b[0]))


@pytest.fixture(scope="module")
def expert_models():
    cfg = C.resolve({"diffusion.grad_steps": 3000, "diffusion.lr": 1e-3, "diffusion.arch": "mlp",
                     "invdyn.grad_steps": 1500, "seed": 0})
    return cfg, pipeline.train_models(cfg, collect_dataset("expert", 400, seed=11))


def test_speed_preference_throttles_harder(expert_models):
    cfg, m = expert_models
    planner = Planner(m.base, m.invdyn, m.normalizer, pipeline.planner_config(cfg, use_slider=False))
    for seed in range(5):
        tr = rollout(planner, np.array([[1.0, 0.0], [0.0, 1.0]]), 32, seed)
        assert tr.actions[0].mean() > tr.actions[1].mean()


def test_rollout_is_deterministic(expert_models):
    cfg, m = expert_models
    planner = Planner(m.base, m.invdyn, m.normalizer, pipeline.planner_config(cfg, use_slider=False))
    omegas = np.array([[0.2, 0.8], [0.7, 0.3]])
    a, b = rollout(planner, omegas, 8, seed=4), rollout(planner, omegas, 8, seed=4)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
    assert not np.array_equal(a.actions, rollout(planner, omegas, 8, seed=5).actions)


def test_parallel_rollout_matches_serial(expert_models):
    cfg, m = expert_models
    planner = Planner(m.base, m.invdyn, m.normalizer, pipeline.planner_config(cfg, use_slider=False))
    omegas = np.stack([np.linspace(0, 1, 5), 1 - np.linspace(0, 1, 5)], 1)
    serial = rollout(planner, omegas, 6, seed=2)
    par = parallel_rollout(planner, omegas, 6, seed=2, workers=2)
    np.testing.assert_allclose(par.returns, serial.returns, atol=1e-4)


# ---------------------------------------------------------------- rollouts

def test_returns_equal_reward_sum():
    tr = rollout(ConstantPolicy(lambda w: w[:, 0]), np.array([[0.3, 0.7], [1.0, 0.0]]), 32)
    assert np.array_equal(tr.returns, tr.rewards.sum(axis=1))


@pytest.mark.parametrize("a", [0.0, 0.4, 1.0])
def test_constant_action_closed_form(a):
    tr = rollout(ConstantPolicy(lambda w: np.full(len(w), a)), np.array([[0.5, 0.5]]), 32)
    t = np.arange(1, 33)
    speed = np.sum(a * (1 - 0.9 ** t))
    np.testing.assert_allclose(tr.returns[0], [speed, 32 * (1 - a ** 2)], atol=1e-10)


def test_write_trace_layout(tmp_path):
    tr = rollout(ConstantPolicy(lambda w: w[:, 0]), np.array([[0.3, 0.7], [1.0, 0.0]]), 5, seed=9)
    lines = write_trace(tr, tmp_path / "trace.jsonl", "abc").read_text().splitlines()
    assert len(lines) == 2 * (1 + 5)
    head = json.loads(lines[0])
    assert head["omega"] == [0.3, 0.7] and head["seed"] == 9 and head["config_digest"] == "abc"
    steps = [json.loads(x) for x in lines[1:6]]
    np.testing.assert_allclose(np.sum([s["reward"] for s in steps], axis=0), head["return"], atol=1e-12)
