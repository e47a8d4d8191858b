"""Velocity-matching objective and the guided Euler sampler.

The probability path is the rectified linear interpolation with data at
t=0 and unit Gaussian noise at t=1, so the true velocity eps - x0 is
constant along each path. Training regresses the model's velocity onto it;
sampling integrates the learned field backwards from t=1 with fixed-step
Euler and classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .numerics import NumericFailure


@dataclass
class FlowState:
    """One perturbed training point on the linear path."""

    x0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor        # (B,) or scalar tensor in [0, 1]
    x_t: torch.Tensor
    v_true: torch.Tensor


@dataclass
class SamplerConfig:
    steps: int = 32
    cfg_scale: float = 8.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


def _broadcast_t(t, x: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.dim() == 0:
        return t
    return t.reshape(t.shape[0], *(1,) * (x.dim() - 1))


def interpolate(x0: torch.Tensor, eps: torch.Tensor, t) -> FlowState:
    """x_t = (1-t) x0 + t eps with the path-constant velocity eps - x0."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    tv = torch.as_tensor(t, dtype=x0.dtype)
    if ((tv < 0) | (tv > 1)).any():
        raise ValueError("t must lie in [0, 1]")
    tb = _broadcast_t(tv, x0)
    return FlowState(x0=x0, eps=eps, t=tv, x_t=(1 - tb) * x0 + tb * eps, v_true=eps - x0)


def draw_timesteps(n: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform training timesteps on [0, 1]."""
    return torch.rand(n, generator=generator)


def flow_loss(model: Callable, state: FlowState, prompt=None) -> torch.Tensor:
    """Mean squared error between predicted and true velocity.

    ``model`` is called as model(x_t, t, prompt) when a prompt is given,
    else model(x_t, t). Raises NumericFailure when the loss is non-finite.
    """
    pred = model(state.x_t, state.t, prompt) if prompt is not None else model(state.x_t, state.t)
    if pred.shape != state.v_true.shape:
        raise ValueError(
            f"model output shape {tuple(pred.shape)} != target {tuple(state.v_true.shape)}"
        )
    loss = (pred - state.v_true).square().mean()
    if not torch.isfinite(loss):
        raise NumericFailure("flow loss is non-finite")
    return loss


def cfg_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """v_uncond + scale * (v_cond - v_uncond)."""
    if v_cond.shape != v_uncond.shape:
        raise ValueError("conditional/unconditional velocity shapes differ")
    return v_uncond + scale * (v_cond - v_uncond)


def denoised_estimate(x_t: torch.Tensor, v: torch.Tensor, t) -> torch.Tensor:
    """x0 estimate implied by a velocity prediction on the linear path."""
    return x_t - _broadcast_t(t, x_t) * v


@torch.no_grad()
def sample(model: Callable, prompt, config: SamplerConfig, seed,
           shape, self_conditioning: bool = True) -> torch.Tensor:
    """Euler-integrate the velocity field from noise at t=1 down to t=0.

    ``model`` is called as model(x, t, prompt, self_cond). Guidance uses the
    fully-masked prompt as the unconditional branch; scale 1 (or 0) skips
    the unconditional (or conditional) forward entirely so those settings
    are bitwise identical to single-branch sampling. The rolling denoised
    estimate from the previous step is fed back as self-conditioning.
    Deterministic given (seed, config, weights).
    """
    if isinstance(seed, torch.Generator):
        generator = seed
    else:
        generator = torch.Generator()
        generator.manual_seed(int(seed))
    x = torch.randn(shape, generator=generator)
    uncond = prompt.fully_masked() if hasattr(prompt, "fully_masked") else None
    dt = 1.0 / config.steps
    prev_estimate: Optional[torch.Tensor] = None
    for i in range(config.steps):
        t = 1.0 - i * dt
        sc = prev_estimate if self_conditioning else None
        if config.cfg_scale == 1.0 or uncond is None:
            v = model(x, t, prompt, sc)
        elif config.cfg_scale == 0.0:
            v = model(x, t, uncond, sc)
        else:
            v = cfg_velocity(model(x, t, prompt, sc), model(x, t, uncond, sc),
                             config.cfg_scale)
        prev_estimate = denoised_estimate(x, v, t)
        x = x - dt * v
    return x


def clamp_video(x: torch.Tensor, lo: float = -3.0, hi: float = 3.0) -> torch.Tensor:
    """Output-range policy applied to raw sampled tensors before use."""
    return x.clamp(lo, hi)
