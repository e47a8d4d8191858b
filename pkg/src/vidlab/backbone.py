"""Miniature joint spatio-temporal diffusion transformer.

Maps (noisy video, timestep, prompt, optional self-conditioning signal) to a
predicted velocity field of the same shape as the video. Videos are
patchified into a single token sequence attended with full 3D self-attention
(no windowing at this scale); text enters through cross-attention after each
self-attention; the timestep is injected through per-block modulation with
zero-initialized gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

TIME_FREQ_DIM = 256


@dataclass(frozen=True)
class DiTConfig:
    vocab_size: int
    blocks: int = 4
    model_dim: int = 128
    heads: int = 4
    context_dim: int = 64
    mlp_ratio: int = 4
    channels: int = 3
    patch: Tuple[int, int, int] = (1, 2, 2)
    rope_split: Tuple[int, int, int] = (2, 1, 1)
    rope_base: float = 10000.0
    max_frames: int = 8
    max_h: int = 32
    max_w: int = 64
    self_cond_prob: float = 0.9

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.head_dim % 8:
            # the 2:1:1 rotary split needs an even channel count per axis
            raise ValueError(f"head_dim {self.head_dim} must be divisible by 8")
        if self.rope_split != (2, 1, 1):
            raise ValueError("rope channel split is fixed at 2:1:1 (temporal:height:width)")
        if any(p < 1 for p in self.patch):
            raise ValueError(f"patch entries must be positive, got {self.patch}")
        if not 0.0 <= self.self_cond_prob <= 1.0:
            raise ValueError(f"self_cond_prob must be in [0,1], got {self.self_cond_prob}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def patch_dim(self) -> int:
        pt, ph, pw = self.patch
        return pt * ph * pw * self.channels

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "blocks": self.blocks,
            "model_dim": self.model_dim, "heads": self.heads,
            "context_dim": self.context_dim, "mlp_ratio": self.mlp_ratio,
            "channels": self.channels, "patch": list(self.patch),
            "rope_split": list(self.rope_split), "rope_base": self.rope_base,
            "max_frames": self.max_frames, "max_h": self.max_h, "max_w": self.max_w,
            "self_cond_prob": self.self_cond_prob,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        d = dict(d)
        for key in ("patch", "rope_split"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptSeq:
    """Token id sequence over the closed vocabulary plus learned concept slots.

    Ids below ``vocab_size`` index the base embedding table; ids at or above
    it index rows of the adapter bundle's learned-token table. Masked tokens
    contribute a shared null embedding (full masking is the CFG
    unconditional input).
    """

    ids: Tuple[int, ...]
    vocab_size: int
    mask: Tuple[bool, ...] = ()

    def __post_init__(self):
        if not self.mask:
            object.__setattr__(self, "mask", tuple(False for _ in self.ids))
        if len(self.mask) != len(self.ids):
            raise ValueError("mask length must match ids length")
        if any(i < 0 for i in self.ids):
            raise ValueError("token ids must be non-negative")

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "PromptSeq") -> "PromptSeq":
        if other.vocab_size != self.vocab_size:
            raise ValueError("cannot concatenate prompts over different vocabularies")
        return PromptSeq(self.ids + other.ids, self.vocab_size, self.mask + other.mask)

    @property
    def learned_slots(self) -> Tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.ids) if t >= self.vocab_size)

    def masked(self, prob: float, generator: torch.Generator) -> "PromptSeq":
        """Independently mask each token with probability ``prob``."""
        if not 0.0 <= prob <= 1.0:
            raise ValueError(f"mask probability must be in [0,1], got {prob}")
        if prob == 0.0:
            return self
        draws = torch.rand(len(self.ids), generator=generator)
        new_mask = tuple(bool(m or d < prob) for m, d in zip(self.mask, draws.tolist()))
        return PromptSeq(self.ids, self.vocab_size, new_mask)

    def fully_masked(self) -> "PromptSeq":
        return PromptSeq(self.ids, self.vocab_size, tuple(True for _ in self.ids))


@dataclass
class PromptBatch:
    ids: torch.Tensor        # (B, L) long
    learned: torch.Tensor    # (B, L) bool
    mask: torch.Tensor       # (B, L) bool
    vocab_size: int


def collate_prompts(prompts: Sequence[PromptSeq]) -> PromptBatch:
    lengths = {len(p) for p in prompts}
    if len(lengths) != 1:
        raise ValueError(f"prompts in one batch must share a length, got {sorted(lengths)}")
    vocab = {p.vocab_size for p in prompts}
    if len(vocab) != 1:
        raise ValueError("prompts in one batch must share a vocabulary")
    ids = torch.tensor([p.ids for p in prompts], dtype=torch.long)
    mask = torch.tensor([p.mask for p in prompts], dtype=torch.bool)
    return PromptBatch(ids=ids, learned=ids >= prompts[0].vocab_size,
                       mask=mask, vocab_size=prompts[0].vocab_size)


# ---------------------------------------------------------------------------
# patchify


@dataclass
class TokenGrid:
    tokens: torch.Tensor      # (B, N, patch_dim) flattened raw patches
    positions: torch.Tensor   # (N, 3) long (t_idx, h_idx, w_idx)
    grid: Tuple[int, int, int]


def patchify(video: torch.Tensor, patch: Tuple[int, int, int]) -> TokenGrid:
    """Flatten non-overlapping (pt, ph, pw) patches of a (B, T, H, W, C) video
    into a token sequence, t-major then h then w. Exact inverse: unpatchify."""
    if video.dim() == 4:
        video = video.unsqueeze(0)
    b, t, h, w, c = video.shape
    pt, ph, pw = patch
    if t % pt or h % ph or w % pw:
        raise ValueError(f"video dims ({t},{h},{w}) not divisible by patch {patch}")
    gt, gh, gw = t // pt, h // ph, w // pw
    x = video.reshape(b, gt, pt, gh, ph, gw, pw, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(b, gt * gh * gw, pt * ph * pw * c)
    pos = torch.stack(torch.meshgrid(
        torch.arange(gt), torch.arange(gh), torch.arange(gw), indexing="ij",
    ), dim=-1).reshape(-1, 3)
    return TokenGrid(tokens=x, positions=pos, grid=(gt, gh, gw))


def unpatchify(tokens: torch.Tensor, grid: Tuple[int, int, int],
               patch: Tuple[int, int, int], channels: int) -> torch.Tensor:
    """Inverse of :func:`patchify` for (B, N, pt*ph*pw*C) token tensors."""
    gt, gh, gw = grid
    pt, ph, pw = patch
    b = tokens.shape[0]
    x = tokens.reshape(b, gt, gh, gw, pt, ph, pw, channels)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, gt * pt, gh * ph, gw * pw, channels)


# ---------------------------------------------------------------------------
# rotary embeddings


def _rotate_slice(x: torch.Tensor, pos: torch.Tensor, base: float) -> torch.Tensor:
    d = x.shape[-1]
    half = d // 2
    freqs = base ** (-torch.arange(half, dtype=torch.float64) / half)
    theta = pos.to(torch.float64)[:, None] * freqs[None, :]
    cos = theta.cos().to(x.dtype)
    sin = theta.sin().to(x.dtype)
    shape = (1,) * (x.dim() - 2) + cos.shape
    cos = cos.reshape(shape)
    sin = sin.reshape(shape)
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).flatten(-2)


def rope_axis_dims(head_dim: int) -> Tuple[int, int, int]:
    """Channel split 2:1:1 over (temporal, height, width)."""
    return head_dim // 2, head_dim // 4, head_dim // 4


def rope3d(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Axis-wise rotary rotation of (..., N, head_dim) queries or keys.

    The head channels are partitioned 2:1:1 over (t, h, w); each slice is
    rotated by its axis position, so dot products depend on positions only
    through their differences.
    """
    d = x.shape[-1]
    dt, dh, dw = rope_axis_dims(d)
    if dt + dh + dw != d or dt % 2 or dh % 2 or dw % 2:
        raise ValueError(f"head_dim {d} cannot be partitioned 2:1:1 into even slices")
    parts = torch.split(x, [dt, dh, dw], dim=-1)
    out = [
        _rotate_slice(part, positions[:, axis], base)
        for axis, part in enumerate(parts)
    ]
    return torch.cat(out, dim=-1)


# ---------------------------------------------------------------------------
# attention


def rms_normalize(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.square().mean(dim=-1, keepdim=True) + eps)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              qk_norm: bool = True) -> torch.Tensor:
    """Softmax attention over (..., heads, N, head_dim) tensors with unit-RMS
    query/key normalization applied before the logits."""
    if qk_norm:
        q = rms_normalize(q)
        k = rms_normalize(k)
    return F.scaled_dot_product_attention(q, k, v)


def attention_weights(q: torch.Tensor, k: torch.Tensor,
                      qk_norm: bool = True) -> torch.Tensor:
    """Explicit softmax attention matrix; reference path for tests."""
    if qk_norm:
        q = rms_normalize(q)
        k = rms_normalize(k)
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return logits.softmax(dim=-1)


# ---------------------------------------------------------------------------
# adapter plumbing


class AdapterContext:
    """What a forward pass needs from an adapter bundle.

    ``branch(name)`` returns a callable delta for the named projection (or
    None), already carrying any per-step dropout masking; ``learned_table``
    is the stacked concept-token embedding matrix (or None).
    """

    def branch(self, name: str):
        raise NotImplementedError

    @property
    def learned_table(self) -> Optional[torch.Tensor]:
        raise NotImplementedError


def _apply_linear(proj: nn.Linear, x: torch.Tensor, adapters, name: str) -> torch.Tensor:
    y = proj(x)
    if adapters is not None:
        branch = adapters.branch(name)
        if branch is not None:
            y = y + branch(x)
    return y


# ---------------------------------------------------------------------------
# model


def timestep_embedding(t: torch.Tensor, dim: int = TIME_FREQ_DIM) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1], scaled to a [0, 1000] range."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * 1000.0 * freqs[None]
    emb = torch.cat([args.cos(), args.sin()], dim=-1)
    return emb.to(t.dtype if t.is_floating_point() else torch.float32)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class SelfAttention(nn.Module):
    def __init__(self, cfg: DiTConfig, prefix: str):
        super().__init__()
        self.cfg = cfg
        self.prefix = prefix
        d = cfg.model_dim
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, positions, adapters=None):
        b, n, d = x.shape
        cfg = self.cfg
        heads, hd = cfg.heads, cfg.head_dim

        def split(t):
            return t.reshape(b, n, heads, hd).transpose(1, 2)

        q = split(_apply_linear(self.q, x, adapters, f"{self.prefix}.q"))
        k = split(_apply_linear(self.k, x, adapters, f"{self.prefix}.k"))
        v = split(_apply_linear(self.v, x, adapters, f"{self.prefix}.v"))
        q = rope3d(q, positions, cfg.rope_base)
        k = rope3d(k, positions, cfg.rope_base)
        out = attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, n, d)
        return _apply_linear(self.o, out, adapters, f"{self.prefix}.o")


class CrossAttention(nn.Module):
    def __init__(self, cfg: DiTConfig, prefix: str):
        super().__init__()
        self.cfg = cfg
        self.prefix = prefix
        d = cfg.model_dim
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(cfg.context_dim, d)
        self.v = nn.Linear(cfg.context_dim, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, text, adapters=None):
        b, n, d = x.shape
        l = text.shape[1]
        cfg = self.cfg
        heads, hd = cfg.heads, cfg.head_dim
        q = _apply_linear(self.q, x, adapters, f"{self.prefix}.q")
        k = _apply_linear(self.k, text, adapters, f"{self.prefix}.k")
        v = _apply_linear(self.v, text, adapters, f"{self.prefix}.v")
        q = q.reshape(b, n, heads, hd).transpose(1, 2)
        k = k.reshape(b, l, heads, hd).transpose(1, 2)
        v = v.reshape(b, l, heads, hd).transpose(1, 2)
        out = attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, n, d)
        return _apply_linear(self.o, out, adapters, f"{self.prefix}.o")


class DiTBlock(nn.Module):
    def __init__(self, cfg: DiTConfig, index: int):
        super().__init__()
        d = cfg.model_dim
        self.self_attn = SelfAttention(cfg, f"blocks.{index}.self_attn")
        self.cross_attn = CrossAttention(cfg, f"blocks.{index}.cross_attn")
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(), nn.Linear(cfg.mlp_ratio * d, d),
        )
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(d, 9 * d))
        self.dim = d

    def forward(self, x, cond, text, positions, adapters=None):
        # per sublayer: (shift, scale, gate), gates zero at init
        mods = self.adaln(cond).reshape(-1, 3, 3, self.dim)
        h = modulate(F.layer_norm(x, (self.dim,)), mods[:, 0, 0], mods[:, 0, 1])
        x = x + mods[:, 0, 2].unsqueeze(1) * self.self_attn(h, positions, adapters)
        h = modulate(F.layer_norm(x, (self.dim,)), mods[:, 1, 0], mods[:, 1, 1])
        x = x + mods[:, 1, 2].unsqueeze(1) * self.cross_attn(h, text, adapters)
        h = modulate(F.layer_norm(x, (self.dim,)), mods[:, 2, 0], mods[:, 2, 1])
        x = x + mods[:, 2, 2].unsqueeze(1) * self.mlp(h)
        return x


class DiT(nn.Module):
    """Velocity-field backbone; forward is pure given weights, inputs, and the
    adapter context."""

    def __init__(self, cfg: DiTConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        # input carries the noisy video plus a same-shape self-conditioning
        # channel (zeros when unused)
        self.patch_proj = nn.Linear(2 * cfg.patch_dim, d)
        self.time_embed = nn.Sequential(
            nn.Linear(TIME_FREQ_DIM, d), nn.SiLU(), nn.Linear(d, d),
        )
        self.text_base = nn.Parameter(torch.empty(cfg.vocab_size, cfg.context_dim))
        self.null_embed = nn.Parameter(torch.empty(cfg.context_dim))
        self.blocks = nn.ModuleList(DiTBlock(cfg, i) for i in range(cfg.blocks))
        self.final_mod = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.final_proj = nn.Linear(d, cfg.patch_dim)
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        """Deterministic init: xavier projections, N(0, 0.02) embeddings,
        zeroed modulation and output head so the initial velocity field is 0."""
        g = generator if generator is not None else torch.Generator().manual_seed(0)

        def xavier(weight):
            fan_in, fan_out = weight.shape[1], weight.shape[0]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            weight.uniform_(-bound, bound, generator=g)

        done = set()

        def mark(name):
            done.add(name)

        for name, p in self.named_parameters():
            if ".adaln." in name or name.startswith(("final_mod", "final_proj")):
                p.zero_()
                mark(name)
            elif name in ("text_base", "null_embed"):
                # unit-RMS rows so the cross-attention value pathway starts at
                # the same scale as the video tokens
                p.normal_(0.0, self.cfg.context_dim ** -0.5, generator=g)
                mark(name)
            elif name.startswith("time_embed"):
                if name.endswith("bias"):
                    p.zero_()
                else:
                    p.normal_(0.0, 0.02, generator=g)
                mark(name)
            elif name.endswith(".bias"):
                p.zero_()
                mark(name)
            elif name.endswith(".weight"):
                xavier(p)
                mark(name)
        missing = {n for n, _ in self.named_parameters()} - done
        if missing:
            raise RuntimeError(f"parameters left uninitialized: {sorted(missing)}")

    # -- prompt embedding ---------------------------------------------------

    def embed_prompt(self, prompt: PromptBatch,
                     learned_table: Optional[torch.Tensor] = None) -> torch.Tensor:
        cfg = self.cfg
        if prompt.vocab_size != cfg.vocab_size:
            raise ValueError("prompt vocabulary does not match model config")
        ids = prompt.ids
        base = self.text_base[ids.clamp(max=cfg.vocab_size - 1)]
        if prompt.learned.any():
            if learned_table is None or learned_table.numel() == 0:
                raise ValueError("prompt uses learned tokens but no learned table was given")
            local = (ids - cfg.vocab_size).clamp(min=0)
            if int(local.max()) >= learned_table.shape[0]:
                raise ValueError("learned token id out of bounds for the adapter bundle")
            learned = learned_table[local]
            base = torch.where(prompt.learned.unsqueeze(-1), learned, base)
        null = self.null_embed.to(base.dtype).expand_as(base)
        return torch.where(prompt.mask.unsqueeze(-1), null, base)

    # -- forward ------------------------------------------------------------

    def forward(self, x: torch.Tensor, t, prompt,
                self_cond: Optional[torch.Tensor] = None,
                adapters=None) -> torch.Tensor:
        """Predict the velocity field for noisy video ``x`` at time ``t``.

        ``x``: (T, H, W, C) or (B, T, H, W, C); ``t``: scalar or (B,) in
        [0, 1]; ``prompt``: PromptSeq or PromptBatch; ``self_cond``: previous
        denoised estimate with the same shape as ``x``, or None for zeros.
        """
        squeeze = x.dim() == 4
        if squeeze:
            x = x.unsqueeze(0)
            if self_cond is not None and self_cond.dim() == 4:
                self_cond = self_cond.unsqueeze(0)
        b = x.shape[0]
        cfg = self.cfg
        if x.shape[-1] != cfg.channels:
            raise ValueError(f"expected {cfg.channels} channels, got {x.shape[-1]}")
        if (x.shape[1] > cfg.max_frames or x.shape[2] > cfg.max_h
                or x.shape[3] > cfg.max_w):
            raise ValueError(
                f"input {tuple(x.shape[1:4])} exceeds configured capacity "
                f"({cfg.max_frames}, {cfg.max_h}, {cfg.max_w})"
            )

        if not torch.is_tensor(t):
            t = torch.full((b,), float(t), dtype=x.dtype)
        elif t.dim() == 0:
            t = t.expand(b).to(x.dtype)
        if isinstance(prompt, PromptSeq):
            prompt = collate_prompts([prompt] * b)
        if prompt.ids.shape[0] != b:
            raise ValueError("prompt batch size does not match video batch size")

        sc = torch.zeros_like(x) if self_cond is None else self_cond
        if sc.shape != x.shape:
            raise ValueError("self-conditioning shape must match input shape")

        grid = patchify(torch.cat([x, sc], dim=-1), cfg.patch)
        h = self.patch_proj(grid.tokens)
        cond = self.time_embed(timestep_embedding(t).to(x.dtype))
        learned_table = adapters.learned_table if adapters is not None else None
        if learned_table is not None:
            learned_table = learned_table.to(x.dtype)
        text = self.embed_prompt(prompt, learned_table)
        for block in self.blocks:
            h = block(h, cond, text, grid.positions, adapters)
        m = self.final_mod(cond).reshape(b, 2, cfg.model_dim)
        h = modulate(F.layer_norm(h, (cfg.model_dim,)), m[:, 0], m[:, 1])
        out = self.final_proj(h)
        video = unpatchify(out, grid.grid, cfg.patch, cfg.channels)
        return video.squeeze(0) if squeeze else video

    def adapted_layer_names(self) -> List[str]:
        """Projection names that accept low-rank adapter branches."""
        names = []
        for i in range(self.cfg.blocks):
            for kind in ("self_attn", "cross_attn"):
                for p in ("q", "k", "v", "o"):
                    names.append(f"blocks.{i}.{kind}.{p}")
        return names

    def adapted_layer_dims(self) -> dict:
        dims = {}
        for name in self.adapted_layer_names():
            if ".cross_attn." in name and name.rsplit(".", 1)[1] in ("k", "v"):
                dims[name] = (self.cfg.context_dim, self.cfg.model_dim)
            else:
                dims[name] = (self.cfg.model_dim, self.cfg.model_dim)
        return dims


def self_condition(prev_estimate: Optional[torch.Tensor], prob: float,
                   generator: torch.Generator,
                   like: torch.Tensor) -> torch.Tensor:
    """Per-sample Bernoulli(prob) choice between the gradient-detached
    previous denoised estimate and zeros, as extra input channels."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must be in [0,1], got {prob}")
    zeros = torch.zeros_like(like)
    if prev_estimate is None or prob == 0.0:
        return zeros
    prev = prev_estimate.detach()
    if prev.shape != like.shape:
        raise ValueError("previous estimate shape must match input shape")
    if prob == 1.0:
        return prev
    b = like.shape[0] if like.dim() == 5 else 1
    keep = torch.rand(b, generator=generator) < prob
    if like.dim() == 4:
        return prev if bool(keep[0]) else zeros
    keep = keep.reshape(b, 1, 1, 1, 1).to(like.dtype)
    return prev * keep + zeros * (1 - keep)


# ---------------------------------------------------------------------------
# checkpoint helpers


def save_model(path, model: DiT, meta: dict | None = None) -> None:
    from . import serialization

    payload = dict(meta or {})
    payload["kind"] = "model"
    payload["backbone"] = model.cfg.to_dict()
    serialization.save_tensors(path, dict(model.state_dict()), payload)


def load_model(path) -> Tuple[DiT, dict]:
    from . import serialization

    tensors, meta = serialization.load_tensors(path)
    if meta.get("kind") != "model" or "backbone" not in meta:
        raise serialization.CorruptArtifactError(f"{path}: not a model checkpoint")
    cfg = DiTConfig.from_dict(meta["backbone"])
    model = DiT(cfg)
    model.load_state_dict({k: v for k, v in tensors.items()})
    return model, meta
