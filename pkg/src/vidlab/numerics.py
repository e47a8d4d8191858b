"""Gradient extraction, the AdamW/clipping stack, and seeded RNG plumbing.

Training runs in float32; gradient-check tests build the same models in
float64. All randomness flows through explicitly seeded torch.Generator
objects derived from a master seed, never the global RNG, so a (config,
seed) pair pins every artifact bit-exactly on a given machine.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping

import torch

DEFAULT_LR = 1e-4
DEFAULT_BETAS = (0.9, 0.99)
DEFAULT_WEIGHT_DECAY = 0.01
DEFAULT_EPS = 1e-8
DEFAULT_MAX_GRAD_NORM = 0.05

# Relative slack under which a gradient vector counts as already clipped.
# Rescaling rounds each element, so a strict norm==max_norm test would make
# clip-then-clip rescale by ~1 ulp; within this slack the second pass is a
# bitwise no-op.
_CLIP_SLACK = 1e-6


class NumericFailure(RuntimeError):
    """Non-finite loss or gradients; the offending step must be rejected."""


def grad(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for a named parameter set.

    Parameters not reachable from the loss get explicit zero gradients.
    Parameters outside ``params`` are untouched (no ``.grad`` pollution).
    """
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    if not names:
        return {}
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, tensors, grads)
    }


@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam state for one parameter group."""

    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    eps: float = DEFAULT_EPS
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1): got ({self.beta1}, {self.beta2})")

    def drop(self, names: Iterable[str]) -> None:
        """Forget moment estimates for parameters leaving the group."""
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)


@torch.no_grad()
def adamw_step(state: AdamWState, params: Mapping[str, torch.Tensor],
               grads: Mapping[str, torch.Tensor]) -> AdamWState:
    """One AdamW update, in place on ``params``.

    Rejects the whole step (raising :class:`NumericFailure`) if any gradient
    is non-finite; parameters without a gradient entry are left untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if not torch.isfinite(g).all():
            raise NumericFailure(f"non-finite gradient for {name!r}; step rejected")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if state.weight_decay:
            p.mul_(1.0 - state.lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m / bc1, denom, value=-state.lr)
    return state


def global_grad_norm(grads: Mapping[str, torch.Tensor] | Iterable[torch.Tensor]) -> float:
    tensors = list(grads.values()) if isinstance(grads, Mapping) else list(grads)
    if not tensors:
        return 0.0
    return float(torch.sqrt(sum(g.double().square().sum() for g in tensors)))


def clip_grad_norm(grads, max_norm: float = DEFAULT_MAX_GRAD_NORM):
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Direction is preserved; already-small gradients come back unchanged
    (same objects). Idempotent: re-clipping an output is a no-op.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    is_map = isinstance(grads, Mapping)
    norm = global_grad_norm(grads)
    if norm <= max_norm * (1.0 + _CLIP_SLACK):
        return dict(grads) if is_map else list(grads)
    scale = max_norm / norm
    if is_map:
        return {n: g * scale for n, g in grads.items()}
    return [g * scale for g in grads]


def derive_seed(master: int, *tags) -> int:
    """Stable 63-bit sub-seed for a named RNG stream."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little") & 0x7FFF_FFFF_FFFF_FFFF


def generator(master: int, *tags) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(master, *tags))
    return g
