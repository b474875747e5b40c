"""Network substrate: denoisers, small MLPs, AdamW/EMA helpers and checkpoints.

Gradients come from torch autograd; every network here is an ordinary
``nn.Module`` so a "parameter set" is simply its ``state_dict``.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, TrainingDivergence

CHECKPOINT_FORMAT = "prefdiff.checkpoint/v1"


@dataclass(frozen=True)
class DenoiserConfig:
    state_dim: int
    horizon: int
    cond_dim: int
    embedding_dim: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    arch: str = "auto"
    mlp_hidden: int = 256

    def __post_init__(self):
        for name in ("state_dim", "horizon", "cond_dim", "embedding_dim", "n_heads", "n_blocks", "mlp_hidden"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embedding_dim % self.n_heads:
            raise ConfigError(
                f"embedding_dim={self.embedding_dim} is not divisible by n_heads={self.n_heads}"
            )
        if self.arch not in ("auto", "mlp", "transformer"):
            raise ConfigError(f"unknown denoiser arch {self.arch!r}")

    @classmethod
    def paper_scale(cls, state_dim: int, horizon: int, cond_dim: int) -> "DenoiserConfig":
        # 128 / 4 blocks as published; 6 heads do not divide 128, so the
        # nearest valid head count is used.
        return cls(state_dim, horizon, cond_dim, embedding_dim=128, n_heads=8, n_blocks=4,
                   arch="transformer")

    @property
    def resolved_arch(self) -> str:
        if self.arch != "auto":
            return self.arch
        return "mlp" if self.horizon <= 4 else "transformer"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Truncated-normal weights, zero biases, for every Linear below ``module``."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def zero_linear(layer: nn.Linear) -> nn.Linear:
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class SinusoidalEmbedding(nn.Module):
    """Sin/cos features of a continuous diffusion time in [0, 1]."""

    def __init__(self, dim: int, scale: float = 1000.0):
        super().__init__()
        self.dim = dim
        self.scale = scale

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / max(half - 1, 1)
        )
        args = (t * self.scale)[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        if self.dim % 2:
            emb = F.pad(emb, (0, 1))
        return emb


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class _Embedder(nn.Module):
    # time + condition embedding shared by both denoiser variants
    def __init__(self, cond_dim: int, dim: int):
        super().__init__()
        self.cond_dim = cond_dim
        self.time = nn.Sequential(
            SinusoidalEmbedding(dim), nn.Linear(dim, dim * 2), nn.Mish(), nn.Linear(dim * 2, dim)
        )
        # 2-layer MLP over [preference, normalized return]
        self.cond = nn.Sequential(nn.Linear(cond_dim, dim), nn.Mish(), nn.Linear(dim, dim))

    def forward(self, t, cond, cond_mask, batch, dtype):
        t = torch.as_tensor(t, dtype=dtype)
        if t.ndim == 0:
            t = t.expand(batch)
        emb = self.time(t)
        if cond is not None:
            if cond.shape[-1] != self.cond_dim:
                raise ConfigError(f"condition has width {cond.shape[-1]}, expected {self.cond_dim}")
            c = self.cond(cond)
            if cond_mask is not None:
                c = c * cond_mask.reshape(-1, 1).to(c.dtype)
            emb = emb + c
        return emb


class MLPDenoiser(nn.Module):
    """Residual MLP over the flattened window, conditioned through adaptive LayerNorm."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d, h = config.embedding_dim, config.mlp_hidden
        flat = config.horizon * config.state_dim
        self.embed = _Embedder(config.cond_dim, d)
        self.inp = nn.Linear(flat, h)
        self.norms = nn.ModuleList(nn.LayerNorm(h, elementwise_affine=False) for _ in range(config.n_blocks))
        self.ada = nn.ModuleList(nn.Linear(d, 2 * h) for _ in range(config.n_blocks))
        self.fc1 = nn.ModuleList(nn.Linear(h, h) for _ in range(config.n_blocks))
        self.fc2 = nn.ModuleList(nn.Linear(h, h) for _ in range(config.n_blocks))
        self.out_norm = nn.LayerNorm(h, elementwise_affine=False)
        self.out_ada = nn.Linear(d, 2 * h)
        self.out = nn.Linear(h, flat)
        init_weights(self)
        for layer in (*self.ada, self.out_ada, self.out):
            zero_linear(layer)

    def forward(self, x, t, cond=None, cond_mask=None):
        cfg = self.config
        if x.shape[1:] != (cfg.horizon, cfg.state_dim):
            raise ConfigError(f"input shape {tuple(x.shape[1:])} != {(cfg.horizon, cfg.state_dim)}")
        b = x.shape[0]
        e = F.mish(self.embed(t, cond, cond_mask, b, x.dtype))
        h = self.inp(x.reshape(b, -1))
        for norm, ada, fc1, fc2 in zip(self.norms, self.ada, self.fc1, self.fc2):
            shift, scale = ada(e).chunk(2, dim=-1)
            h = h + fc2(F.mish(fc1(_modulate(norm(h), shift, scale))))
        shift, scale = self.out_ada(e).chunk(2, dim=-1)
        return self.out(_modulate(self.out_norm(h), shift, scale)).reshape(x.shape)


class _Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        return self.proj((att @ v).transpose(1, 2).reshape(b, n, d))


class _DiTBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = _Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.Mish(), nn.Linear(4 * dim, dim))
        self.ada = nn.Linear(dim, 6 * dim)

    def forward(self, x, e):
        s1, c1, g1, s2, c2, g2 = self.ada(e)[:, None, :].chunk(6, dim=-1)
        x = x + g1 * self.attn(_modulate(self.norm1(x), s1, c1))
        return x + g2 * self.mlp(_modulate(self.norm2(x), s2, c2))


class TransformerDenoiser(nn.Module):
    """One token per planning step, self-attention over the horizon, adaLN-zero blocks."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.embedding_dim
        self.embed = _Embedder(config.cond_dim, d)
        self.inp = nn.Linear(config.state_dim, d)
        self.pos = nn.Parameter(torch.zeros(config.horizon, d))
        self.blocks = nn.ModuleList(_DiTBlock(d, config.n_heads) for _ in range(config.n_blocks))
        self.out_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.out_ada = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, config.state_dim)
        init_weights(self)
        nn.init.trunc_normal_(self.pos, std=0.02, a=-0.04, b=0.04)
        for blk in self.blocks:
            zero_linear(blk.ada)
        zero_linear(self.out_ada)
        zero_linear(self.out)

    def forward(self, x, t, cond=None, cond_mask=None):
        cfg = self.config
        if x.shape[1:] != (cfg.horizon, cfg.state_dim):
            raise ConfigError(f"input shape {tuple(x.shape[1:])} != {(cfg.horizon, cfg.state_dim)}")
        e = F.mish(self.embed(t, cond, cond_mask, x.shape[0], x.dtype))
        h = self.inp(x) + self.pos
        for blk in self.blocks:
            h = blk(h, e)
        shift, scale = self.out_ada(e)[:, None, :].chunk(2, dim=-1)
        return self.out(_modulate(self.out_norm(h), shift, scale))


def build_denoiser(config: DenoiserConfig) -> nn.Module:
    if config.resolved_arch == "mlp":
        return MLPDenoiser(config)
    return TransformerDenoiser(config)


def denoiser_forward(model: nn.Module, x, t, cond=None, cond_mask=None) -> torch.Tensor:
    """Noise prediction for a batch of windows; ``cond=None`` is the null condition."""
    return model(x, t, cond, cond_mask)


class MLP(nn.Module):
    """Plain feed-forward net: Linear -> Mish (-> LayerNorm) per hidden layer.

    Args:
        sizes: layer widths including input and output, e.g. ``(2, 64, 64, 2)``.
        layer_norm: insert a LayerNorm after each hidden activation.
        out_act: ``None`` or ``"tanh"`` for a bounded head.
    """

    def __init__(self, sizes, layer_norm: bool = False, out_act: str | None = None):
        super().__init__()
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(sizes) - 2:
                layers.append(nn.Mish())
                if layer_norm:
                    layers.append(nn.LayerNorm(b))
        if out_act == "tanh":
            layers.append(nn.Tanh())
        elif out_act is not None:
            raise ConfigError(f"unknown output activation {out_act!r}")
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------- parameters

def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def all_finite(model: nn.Module) -> bool:
    return all(torch.isfinite(p).all().item() for p in model.parameters())


def params_digest(model_or_state) -> str:
    """sha256 over parameter names and their float64 bytes."""
    state = model_or_state.state_dict() if isinstance(model_or_state, nn.Module) else model_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(_to_numpy(state[name]).astype(np.float64))
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _to_numpy(v):
    if isinstance(v, torch.Tensor):
        return v.detach().cpu().numpy()
    return np.asarray(v)


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


def backward(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every trainable parameter of ``model``."""
    if loss.ndim != 0:
        raise ConfigError("backward needs a scalar loss")
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss.item()}")
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = {}
    for (n, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise TrainingDivergence(f"non-finite gradient for {n}")
        out[n] = g
    return out


def make_adamw(model: nn.Module, lr: float = 2e-4, weight_decay: float = 1e-5) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    try:
        return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay, fused=True)
    except (RuntimeError, TypeError):
        return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay, foreach=True)


def adamw_step(opt: torch.optim.AdamW, model: nn.Module, grads: dict[str, torch.Tensor] | None = None):
    """Apply one decoupled-weight-decay Adam update.

    If ``grads`` is given it is written into ``.grad`` first; otherwise whatever
    ``loss.backward()`` left there is used.
    """
    if grads is not None:
        for name, p in model.named_parameters():
            if name in grads:
                if grads[name].shape != p.shape:
                    raise ConfigError(f"gradient shape mismatch for {name}")
                p.grad = grads[name].detach().clone()
    opt.step()
    opt.zero_grad(set_to_none=True)
    return model


def ema_update(shadow: dict[str, torch.Tensor], params: dict[str, torch.Tensor], rate: float):
    """In place: shadow <- rate * shadow + (1 - rate) * params."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"ema rate must lie in [0, 1], got {rate}")
    keys = list(shadow)
    s = [shadow[k] for k in keys]
    p = [params[k].detach() for k in keys]
    torch._foreach_mul_(s, rate)
    torch._foreach_add_(s, p, alpha=1.0 - rate)
    return shadow


class EMA:
    """Shadow copy of a module whose floating parameters track an exponential average."""

    def __init__(self, model: nn.Module, rate: float = 0.995):
        self.rate = rate
        self.model = freeze(copy.deepcopy(model))

    def update(self, model: nn.Module) -> None:
        shadow = dict(self.model.named_parameters())
        ema_update(shadow, dict(model.named_parameters()), self.rate)


def set_threads(n: int = 1) -> None:
    torch.set_num_threads(n)


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under ``torch.manual_seed(seed)`` without leaking global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, Any] = field(default_factory=dict)
    rng: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def load_into(self, model: nn.Module, use_ema: bool = False) -> nn.Module:
        src = self.ema if use_ema and self.ema else self.params
        ref = model.state_dict()
        state = {k: torch.from_numpy(np.asarray(src[k])).to(ref[k].dtype) for k in ref}
        model.load_state_dict(state)
        return model

    @property
    def digest(self) -> str:
        return params_digest(self.ema or self.params)


def state_to_numpy(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float64) for k, v in model.state_dict().items()}


def optimizer_to_numpy(opt: torch.optim.Optimizer | None) -> dict[str, Any]:
    if opt is None:
        return {}
    sd = opt.state_dict()
    out: dict[str, Any] = {"param_groups": json.loads(json.dumps(sd["param_groups"]))}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            out[f"{idx}/{k}"] = _to_numpy(v).astype(np.float64)
    return out


def optimizer_from_numpy(opt: torch.optim.Optimizer, blob: dict[str, Any]) -> None:
    state: dict[int, dict] = {}
    for key, v in blob.items():
        if key == "param_groups":
            continue
        idx, name = key.split("/", 1)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(np.asarray(v)).float()
    groups = blob["param_groups"]
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write a self-describing zip: JSON header plus float64 .npy members.

    Member timestamps are fixed so identical checkpoints are byte-identical.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opt_arrays = {k: v for k, v in ckpt.optimizer.items() if k != "param_groups"}
    header = {
        "format": CHECKPOINT_FORMAT,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "param_groups": ckpt.optimizer.get("param_groups"),
        "rng": {k: v for k, v in ckpt.rng.items() if not isinstance(v, np.ndarray)},
        "digest": ckpt.digest,
    }
    members: list[tuple[str, np.ndarray]] = []
    members += [(f"params/{k}", v) for k, v in sorted(ckpt.params.items())]
    members += [(f"ema/{k}", v) for k, v in sorted(ckpt.ema.items())]
    members += [(f"optim/{k}", v) for k, v in sorted(opt_arrays.items())]
    members += [(f"rng/{k}", v) for k, v in sorted(ckpt.rng.items()) if isinstance(v, np.ndarray)]
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        _write_member(zf, "header.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name, arr in members:
            buf = io.BytesIO()
            arr = np.asarray(arr)
            if arr.dtype.kind == "f":
                arr = arr.astype(np.float64)
            np.save(buf, arr, allow_pickle=False)
            _write_member(zf, name + ".npy", buf.getvalue())
    return path


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        groups: dict[str, dict] = {"params": {}, "ema": {}, "optim": {}, "rng": {}}
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            section, key = name[:-4].split("/", 1)
            groups[section][key] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    optimizer = dict(groups["optim"])
    if header.get("param_groups") is not None:
        optimizer["param_groups"] = header["param_groups"]
    rng = dict(header.get("rng") or {})
    rng.update(groups["rng"])
    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        params=groups["params"],
        ema=groups["ema"],
        optimizer=optimizer,
        rng=rng,
        meta=header.get("meta") or {},
    )


def generator_state(gen: torch.Generator) -> np.ndarray:
    return gen.get_state().numpy().copy()


def restore_generator(state: np.ndarray) -> torch.Generator:
    g = torch.Generator()
    g.set_state(torch.from_numpy(np.asarray(state, dtype=np.uint8)))
    return g
