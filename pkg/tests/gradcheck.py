"""Central finite-difference oracle for parameter gradients (64-bit)."""

import numpy as np
import torch

from prefdiff.netcore import backward


def randomize(model: torch.nn.Module, seed: int, std: float = 0.3) -> torch.nn.Module:
    """Fresh non-degenerate float64 weights (zero-initialized heads would hide gradients)."""
    gen = torch.Generator().manual_seed(seed)
    model.double()
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)
    return model


def max_relative_error(loss_fn, model: torch.nn.Module, step: float = 1e-5, per_tensor: int = 12,
                       seed: int = 0, floor: float = 1e-5) -> float:
    """Worst ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` over sampled coordinates.

    The floor keeps exactly-zero gradients (e.g. attention key biases) from
    turning round-off in the difference quotient into a large ratio.
    """
    grads = backward(loss_fn(), model)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                ana = grads[name].view(-1)[i].item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst
