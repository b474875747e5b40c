import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, strategies as st

from prefdiff.datastore import StateNormalizer
from prefdiff.diffusion import (
    DiffusionConfig, NoiseSchedule, SamplerConfig, ddim_sample, make_condition, noisy_window, train_diffusion,
)
from prefdiff.errors import InputError
from prefdiff.netcore import DenoiserConfig, build_denoiser, params_digest
from prefdiff.normalize import normalize
from prefdiff.slider import (
    SliderConfig, nearest_preference, preference_path, sample_pref_shift, slider_loss, slider_target,
    sliding_sample, train_slider,
)

from gradcheck import max_relative_error, randomize


def small_model(seed=0, dtype=torch.float64):
    cfg = DenoiserConfig(state_dim=2, horizon=4, cond_dim=4, embedding_dim=16, n_heads=2, n_blocks=1,
                         arch="mlp", mlp_hidden=32)
    return randomize(build_denoiser(cfg), seed).to(dtype).eval()


def batch(seed=0, b=6, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    xt = torch.randn(b, 4, 2, generator=g, dtype=dtype)
    t = torch.rand(b, generator=g, dtype=dtype)
    a = torch.rand(b, generator=g, dtype=dtype) * 0.8 + 0.1
    omega = torch.stack([a, 1 - a], 1)
    cond_g = torch.rand(b, 2, generator=g, dtype=dtype)
    return xt, t, omega, cond_g


class LinearConditional(nn.Module):
    """Hand-built noise model ``eps = x + reshape(cond @ W)``, exactly linear in the preference."""

    def __init__(self, horizon=4, state_dim=2, cond_dim=4, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.W = nn.Parameter(torch.randn(cond_dim, horizon * state_dim, generator=g, dtype=torch.float64))
        self.shape = (horizon, state_dim)

    def forward(self, x, t, cond=None, cond_mask=None):
        return x + (cond @ self.W).reshape(-1, *self.shape)


class ConstantOutput(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = nn.Parameter(value.clone())

    def forward(self, x, t, cond=None, cond_mask=None):
        return self.value.expand(x.shape[0], *self.value.shape)


# ---------------------------------------------------------------- shifts

@given(st.floats(1e-6, 0.5), st.integers(0, 2 ** 31))
def test_shift_bounded(delta_max, seed):
    s = sample_pref_shift(np.random.default_rng(seed), delta_max, size=50)
    assert np.all(np.abs(s.delta) <= delta_max)


@given(st.integers(0, 2 ** 31))
def test_shift_keeps_preferences_on_simplex(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, 40)
    omegas = np.stack([a, 1 - a], 1)
    s = sample_pref_shift(rng, 1e-3, omegas)
    for sign in (1, -1):
        shifted = s.apply(omegas, sign)[s.valid]
        assert np.all(shifted >= 0) and np.all(shifted <= 1)
        np.testing.assert_allclose(shifted.sum(1), 1.0, atol=1e-12)


def test_shift_at_vertex_is_flagged():
    s = sample_pref_shift(np.random.default_rng(0), 1e-3, np.array([[1.0, 0.0], [0.5, 0.5]]))
    assert not s.valid[0] and s.valid[1]


def test_zero_shift_leaves_preference():
    omega = np.array([[0.3, 0.7]])
    s = sample_pref_shift(np.random.default_rng(0), 1e-3, size=1)
    s.delta[:] = 0.0
    assert np.array_equal(s.apply(omega, 1), omega) and np.array_equal(s.apply(omega, -1), omega)


def test_shift_mean_is_zero():
    d = sample_pref_shift(np.random.default_rng(0), 1e-3, size=100_000).delta
    se = 1e-3 / np.sqrt(3) / np.sqrt(len(d))
    assert abs(d.mean()) < 3 * se


def test_shift_needs_positive_bound():
    with pytest.raises(InputError):
        sample_pref_shift(np.random.default_rng(0), 0.0)


# ---------------------------------------------------------------- loss

def test_preference_blind_model_gives_zero_target():
    base = small_model()
    with torch.no_grad():
        for p in base.embed.cond.parameters():
            p.zero_()
    xt, t, omega, g = batch()
    delta = torch.full((len(xt),), 1e-3, dtype=torch.float64)
    target = slider_target(base, xt, t, omega, g, delta, torch.tensor([1.0, -1.0], dtype=torch.float64))
    assert target.abs().max().item() == 0.0
    zero = ConstantOutput(torch.zeros(4, 2, dtype=torch.float64))
    assert slider_loss(zero, base, xt, t, omega, g, delta).item() == 0.0


def test_linear_model_oracle():
    base = LinearConditional()
    xt, t, omega, g = batch()
    d = torch.tensor([1.0, -1.0], dtype=torch.float64)
    derivative = ((base.W[0] - base.W[1]).detach()).reshape(4, 2)
    for scale in (1e-4, 1e-3, 1e-2):
        delta = torch.full((len(xt),), scale, dtype=torch.float64)
        target = slider_target(base, xt, t, omega, g, delta, d)
        torch.testing.assert_close(target, derivative.expand_as(target), atol=1e-8, rtol=1e-8)
    delta = torch.linspace(-1e-3, 1e-3, len(xt), dtype=torch.float64) + 1e-5
    exact = ConstantOutput(derivative)
    off = ConstantOutput(derivative + 0.1)
    assert slider_loss(exact, base, xt, t, omega, g, delta).item() < 1e-14
    assert slider_loss(off, base, xt, t, omega, g, delta).item() == pytest.approx(0.01, rel=1e-6)


def test_zero_shift_samples_are_excluded():
    base, slider = small_model(0), small_model(1)
    xt, t, omega, g = batch()
    delta = torch.tensor([1e-3, 0.0, -1e-3, 0.0, 5e-4, 2e-4], dtype=torch.float64)
    keep = delta != 0
    full = slider_loss(slider, base, xt, t, omega, g, delta)
    part = slider_loss(slider, base, xt[keep], t[keep], omega[keep], g[keep], delta[keep])
    assert torch.isfinite(full) and full.item() == pytest.approx(part.item(), rel=1e-12)
    assert slider_loss(slider, base, xt, t, omega, g, torch.zeros(6, dtype=torch.float64)).item() == 0.0


def test_base_receives_no_gradient():
    base, slider = small_model(0), small_model(1)
    for p in base.parameters():
        p.requires_grad_(True)
    xt, t, omega, g = batch()
    delta = torch.full((len(xt),), 1e-3, dtype=torch.float64)
    slider_loss(slider, base, xt, t, omega, g, delta).backward()
    assert all(p.grad is None or p.grad.abs().max().item() == 0.0 for p in base.parameters())
    assert any(p.grad is not None and p.grad.abs().max().item() > 0 for p in slider.parameters())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_slider_loss_gradient(seed):
    base, slider = small_model(10 + seed), small_model(seed).train()
    xt, t, omega, g = batch(seed)
    delta = torch.linspace(-1e-3, 1e-3, len(xt), dtype=torch.float64) + 1e-4
    assert max_relative_error(lambda: slider_loss(slider, base, xt, t, omega, g, delta), slider) < 1e-4


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def trained(expert_small):
    nds = normalize(expert_small, "npn", eps=1e-2)
    norm = StateNormalizer.fit(nds)
    dcfg = DiffusionConfig(grad_steps=1500, batch=64, mlp_hidden=64, embedding_dim=32, lr=1e-3, log_every=0)
    base = train_diffusion(nds, dcfg, norm).model
    digest = params_digest(base)
    res = train_slider(nds, base, norm, SliderConfig(grad_steps=1500, lr=1e-3, log_every=0))
    return nds, norm, base, digest, res


def test_slider_training_reduces_loss_and_freezes_base(trained):
    _, _, base, digest, res = trained
    assert np.mean(res.losses[-100:]) < np.mean(res.losses[:100])
    assert params_digest(base) == digest
    assert res.checkpoint.meta["base_params_digest"] == digest


def test_slider_approximates_held_out_finite_difference(trained):
    nds, norm, base, _, res = trained
    rng = np.random.default_rng(123)
    gen = torch.Generator().manual_seed(123)
    idx = rng.integers(0, len(nds), 256)
    starts = rng.integers(0, len(nds[0]) - 4 + 1, 256)
    x0 = torch.as_tensor(np.stack([norm.normalize(nds[i].states[s:s + 4]) for i, s in zip(idx, starts)]),
                         dtype=torch.float64)
    t = torch.rand(256, generator=gen, dtype=torch.float64)
    xt = noisy_window(x0, t, torch.randn(x0.shape, generator=gen, dtype=torch.float64), NoiseSchedule(), False)
    a = torch.as_tensor(rng.uniform(0.05, 0.95, 256))
    omega = torch.stack([a, 1 - a], 1)
    g = torch.as_tensor(nds.conditions[idx])
    delta = torch.full((256,), 1e-3, dtype=torch.float64)
    fd = slider_target(base.double(), xt, t, omega, g, delta, torch.tensor([1.0, -1.0], dtype=torch.float64))
    base.float()
    with torch.no_grad():
        pred = res.model(xt.float(), t.float(), torch.cat([omega, g], 1).float(), torch.ones(256)).double()
    rel = ((pred - fd).norm() / fd.norm()).item()
    assert rel < 0.2, rel


# ---------------------------------------------------------------- sampling

def test_nearest_preference_ties_go_to_lowest_index():
    # dyadic values keep the tied distances exactly equal
    prefs = np.array([[0.25, 0.75], [0.75, 0.25], [0.5, 0.5]])
    targets = np.array([[0.375, 0.625], [0.625, 0.375], [0.5, 0.5], [1.0, 0.0]])
    assert nearest_preference(targets, prefs).tolist() == [0, 1, 2, 1]


def test_preference_path_endpoints():
    w0, shift = np.array([0.2, 0.8]), np.array([0.1, -0.1])
    assert np.array_equal(preference_path(w0, shift, 10, 10), w0)
    np.testing.assert_allclose(preference_path(w0, shift, 10, 1), w0 + 0.9 * shift, atol=1e-15)


def test_zero_shift_matches_plain_sampler_bitwise():
    base, slider = small_model(0, torch.float32), small_model(1, torch.float32)
    prefs = np.array([[0.1, 0.9], [0.5, 0.5], [0.8, 0.2]])
    cfg = SamplerConfig(guidance_w=1.5, temperature=0.7)
    s0 = np.array([[0.3, -0.2], [1.0, 0.5], [-0.4, 0.1]])
    a = sliding_sample(base, slider, prefs, prefs, cfg, torch.Generator().manual_seed(4), fixed_s0=s0)
    b = ddim_sample(base, make_condition(prefs, np.ones((3, 2))), cfg, torch.Generator().manual_seed(4),
                    fixed_s0=s0)
    assert np.array_equal(a, b)


def test_slider_contribution_is_linear_in_shift():
    base, slider = small_model(0, torch.float32), small_model(1, torch.float32)
    prefs = np.array([[0.5, 0.5]])
    cfg = SamplerConfig(steps=1, guidance_w=0.0, temperature=1.0)
    contrib = []
    for h in (0.01, 0.02, 0.04):
        target = prefs + np.array([[h, -h]])
        with_slider = sliding_sample(base, slider, target, prefs, cfg, torch.Generator().manual_seed(0))
        without = sliding_sample(base, None, target, prefs, cfg, torch.Generator().manual_seed(0))
        contrib.append(with_slider - without)
    # one step: the condition stays at omega0, so only the slider term depends on the shift
    assert np.abs(contrib[0]).max() > 1e-3
    np.testing.assert_allclose(contrib[1], 2 * contrib[0], rtol=1e-3, atol=1e-5)
    np.testing.assert_allclose(contrib[2], 4 * contrib[0], rtol=1e-3, atol=1e-5)
