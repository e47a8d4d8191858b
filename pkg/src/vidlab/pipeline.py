"""Two-stage personalization of the video backbone, plus base-model
pretraining and oracle-scored evaluation tasks.

Stage 1 fits the adapter basis/coefficients and the [v] appearance token on
an unordered set of single frames under the appearance prompt. Stage 2
freezes that pair, adds second-stage coefficients and the [u] motion token,
and trains on the full clip under the combined prompt. Both stages mix in
prior-preservation batches sampled from the frozen base model, mask prompt
tokens at random, apply coefficient dropout, and feed back a detached
denoised estimate as self-conditioning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from . import flow, lora, numerics, synthworld
from .backbone import DiT, DiTConfig, PromptSeq, collate_prompts, self_condition
from .numerics import AdamWState, NumericFailure, adamw_step, clip_grad_norm, generator, grad

STATIC_TEMPLATE = "a [v] {color} {shape} on {background} background"
DYNAMIC_TEMPLATE = "performing [u] {motion} motion"
PRIOR_STATIC_TEMPLATE = "a {color} {shape} on {background} background"
PRIOR_DYNAMIC_TEMPLATE = "performing {motion} motion"


# ---------------------------------------------------------------------------
# prompts


@dataclass
class ConceptPrompt:
    """Appearance and motion token sequences for one concept.

    The combined sequence is the concatenation of the static fragment
    (which carries the [v] slot) and the dynamic fragment (which carries
    [u]); its ids therefore equal static ids ++ dynamic ids.
    """

    static_tokens: PromptSeq
    dynamic_tokens: PromptSeq
    static_template: str
    dynamic_template: str

    @property
    def motion_tokens(self) -> PromptSeq:
        return self.static_tokens + self.dynamic_tokens


def _template_seq(template: str, spec: synthworld.ConceptSpec,
                  slot_ids: Dict[str, int], vocab_size: int) -> PromptSeq:
    words = template.format(
        color=spec.color_name, shape=spec.shape,
        background=spec.background_name, motion=spec.motion,
    ).split()
    ids = []
    for w in words:
        if w in ("[v]", "[u]"):
            ids.append(slot_ids[w])
        else:
            ids.extend(synthworld.tokenize(w))
    return PromptSeq(tuple(ids), vocab_size)


def build_prompts(spec: synthworld.ConceptSpec, bundle: lora.AdapterBundle,
                  vocab_size: int) -> ConceptPrompt:
    """Instantiate the prompt templates for a concept in a bundle.

    The [v]/[u] slots resolve to the bundle's learned-token rows for this
    concept; every other word must be in the closed vocabulary.
    """
    slot_ids = {
        "[v]": vocab_size + bundle.slot(spec.concept_id, "v"),
        "[u]": vocab_size + bundle.slot(spec.concept_id, "u"),
    }
    return ConceptPrompt(
        static_tokens=_template_seq(STATIC_TEMPLATE, spec, slot_ids, vocab_size),
        dynamic_tokens=_template_seq(DYNAMIC_TEMPLATE, spec, slot_ids, vocab_size),
        static_template=STATIC_TEMPLATE,
        dynamic_template=DYNAMIC_TEMPLATE,
    )


def prior_prompt(spec: synthworld.ConceptSpec, vocab_size: int,
                 with_motion: bool) -> PromptSeq:
    """Two-part vocabulary-only prompt for prior-preservation samples."""
    template = PRIOR_STATIC_TEMPLATE + (" " + PRIOR_DYNAMIC_TEMPLATE if with_motion else "")
    return _template_seq(template, spec, {}, vocab_size)


def mask_tokens(prompt: PromptSeq, prob: float, generator: torch.Generator) -> PromptSeq:
    """Independently mask each token with probability ``prob``; masked tokens
    use the shared null embedding. prob=1 gives the CFG unconditional input."""
    return prompt.masked(prob, generator)


def parse_prompt(text: str, vocab_size: int,
                 bundle: Optional[lora.AdapterBundle] = None) -> PromptSeq:
    """Parse a user prompt string; ``[v]``/``[u]`` (or ``[v1]``, ``[u2]``, ...)
    resolve to a bundle's learned tokens by concept position."""
    ids: List[int] = []
    for word in text.lower().split():
        if word.startswith("[") and word.endswith("]"):
            inner = word[1:-1]
            kind, suffix = inner[0], inner[1:]
            if kind not in ("v", "u") or (suffix and not suffix.isdigit()):
                raise ValueError(f"unknown concept token {word!r}; use [v], [u], [v1], ...")
            if bundle is None:
                raise ValueError(f"prompt uses {word!r} but no adapter is loaded")
            index = int(suffix) if suffix else 0
            if index >= len(bundle.concepts):
                raise ValueError(
                    f"{word!r} refers to concept {index} but the adapter has "
                    f"{len(bundle.concepts)} concept(s)"
                )
            cid = bundle.concepts[index]["id"]
            ids.append(vocab_size + bundle.slot(cid, kind))
        else:
            ids.extend(synthworld.tokenize(word))
    return PromptSeq(tuple(ids), vocab_size)


# ---------------------------------------------------------------------------
# plans and logging


@dataclass
class TrainPlan:
    stage1_steps: int = 600
    stage2_steps: int = 900
    batch_size: int = 1
    frames_per_set_sample: int = 4
    token_drop_prob: float = 0.1
    prior_prob: float = 0.25
    stitched_prob: float = 0.1
    full_mask_prob: float = 0.1
    learned_token_lr: float = 1e-5
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    grad_clip: float = 0.05
    dropout_stage1: float = 0.8
    dropout_stage2: float = 0.5
    train_learned_tokens: bool = True
    stitched_remove_background: bool = False
    prior_videos: int = 6
    prior_sample_steps: int = 16

    def __post_init__(self):
        for name in ("token_drop_prob", "prior_prob", "stitched_prob",
                     "full_mask_prob", "dropout_stage1", "dropout_stage2"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ValueError("stage step counts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainPlan:
    # pretraining is the desk-scale stand-in for the upstream base model, so
    # its recipe (lr, schedule, mix) is free; the personalization stages keep
    # their pinned optimizer constants
    steps: int = 3000
    image_batch: int = 6
    video_batch: int = 1
    video_prob: float = 0.3
    token_drop_prob: float = 0.1
    full_mask_prob: float = 0.1
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    grad_clip: float = 0.05

    def to_dict(self) -> dict:
        return asdict(self)


class TrainLogger:
    """JSON-lines training log: one header object, then one object per step."""

    def __init__(self, header: Optional[dict] = None):
        self.header = dict(header or {})
        self.records: List[dict] = []

    def log(self, step: int, stage: int, loss: float, lr: float, seed: int,
            batch_kind: str) -> None:
        self.records.append({
            "step": step, "stage": stage, "loss": loss, "lr": lr,
            "seed": seed, "batch_kind": batch_kind,
        })

    def losses(self, stage: Optional[int] = None) -> List[float]:
        return [r["loss"] for r in self.records if stage is None or r["stage"] == stage]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            if self.header:
                fh.write(json.dumps({"header": True, **self.header}, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def dumps(self) -> str:
        lines = []
        if self.header:
            lines.append(json.dumps({"header": True, **self.header}, sort_keys=True))
        lines.extend(json.dumps(r, sort_keys=True) for r in self.records)
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data plumbing


def sample_frame_set(video: torch.Tensor, k: int,
                     generator: torch.Generator) -> torch.Tensor:
    """k frames drawn uniformly without replacement, each as a 1-frame clip."""
    t = video.shape[0]
    if k > t:
        raise ValueError(f"cannot draw {k} distinct frames from {t}")
    idx = torch.randperm(t, generator=generator)[:k]
    return video[idx].unsqueeze(1)


def stitch(videos: Sequence[torch.Tensor],
           masks: Optional[Sequence[torch.Tensor]] = None,
           remove_background: bool = False) -> torch.Tensor:
    """Side-by-side horizontal concatenation of equal-length clips.

    With ``remove_background`` (requires masks) pixels outside each clip's
    shape mask are replaced by neutral gray before stitching.
    """
    if not videos:
        raise ValueError("nothing to stitch")
    t0, h0 = videos[0].shape[0], videos[0].shape[1]
    for v in videos[1:]:
        if v.shape[0] != t0:
            raise ValueError("stitched clips must share temporal length")
        if v.shape[1] != h0:
            raise ValueError("stitched clips must share height")
    if remove_background:
        if masks is None or len(masks) != len(videos):
            raise ValueError("background removal needs one mask per clip")
        cleaned = []
        for v, m in zip(videos, masks):
            neutral = torch.full_like(v, 0.5)
            keep = m.unsqueeze(-1).to(v.dtype)
            cleaned.append(v * keep + neutral * (1 - keep))
        videos = cleaned
    if len(videos) == 1:
        return videos[0]
    return torch.cat(list(videos), dim=2)


class PriorCache:
    """Base-model videos used as prior-preservation targets.

    Generated once per run from two-part vocabulary prompts and reused on
    every prior batch; ``hits``/``misses`` expose the caching contract.
    """

    def __init__(self, model: DiT, count: int, sample_steps: int, seed: int):
        self.model = model
        self.count = count
        self.sample_steps = sample_steps
        self.seed = seed
        self._entries: Optional[List[dict]] = None
        self.hits = 0
        self.misses = 0

    def _generate(self) -> List[dict]:
        cfg = self.model.cfg
        gen = generator(self.seed, "prior", "specs")
        entries = []
        sampler = flow.SamplerConfig(steps=self.sample_steps, cfg_scale=1.0)
        for i in range(self.count):
            spec = synthworld.ConceptSpec(
                shape=synthworld.SHAPES[int(torch.randint(len(synthworld.SHAPES), (1,), generator=gen))],
                color_name=list(synthworld.COLORS)[int(torch.randint(len(synthworld.COLORS), (1,), generator=gen))],
                background_name=list(synthworld.BACKGROUNDS)[int(torch.randint(len(synthworld.BACKGROUNDS), (1,), generator=gen))],
                motion=synthworld.MOTIONS[int(torch.randint(len(synthworld.MOTIONS), (1,), generator=gen))],
            )
            video = sample_video(
                self.model, prior_prompt(spec, cfg.vocab_size, with_motion=True),
                sampler, numerics.derive_seed(self.seed, "prior", i),
            )
            entries.append({"spec": spec, "video": flow.clamp_video(video)})
        return entries

    def entries(self) -> List[dict]:
        if self._entries is None:
            self.misses += 1
            self._entries = self._generate()
        else:
            self.hits += 1
        return self._entries


def prior_batch(cache: PriorCache, generator: torch.Generator, vocab_size: int,
                frames: Optional[int], count: int) -> Tuple[torch.Tensor, List[PromptSeq]]:
    """Draw prior-preservation items from the cache.

    ``frames=1`` draws single frames with appearance-only prompts (stage-1
    regime); ``frames=None`` draws full clips with two-part prompts."""
    entries = cache.entries()
    if not entries:
        raise NumericFailure("prior cache is empty")
    items, prompts = [], []
    for _ in range(count):
        e = entries[int(torch.randint(len(entries), (1,), generator=generator))]
        video = e["video"]
        if frames == 1:
            f = int(torch.randint(video.shape[0], (1,), generator=generator))
            items.append(video[f:f + 1])
            prompts.append(prior_prompt(e["spec"], vocab_size, with_motion=False))
        else:
            items.append(video)
            prompts.append(prior_prompt(e["spec"], vocab_size, with_motion=True))
    return torch.stack(items), prompts


# ---------------------------------------------------------------------------
# sampling with adapters


def sample_video(model: DiT, prompt: PromptSeq, sampler: flow.SamplerConfig,
                 seed: int, bundle: Optional[lora.AdapterBundle] = None,
                 shape: Optional[Tuple[int, int, int, int]] = None) -> torch.Tensor:
    """Deterministic guided sampling; returns the raw (T, H, W, C) tensor."""
    cfg = model.cfg
    if shape is None:
        shape = (cfg.max_frames, cfg.max_h, cfg.max_h, cfg.channels)
    with torch.no_grad():
        prepared = bundle.prepare() if bundle is not None else None

        def model_fn(x, t, p, sc):
            return model(x, t, p, sc, adapters=prepared)

        return flow.sample(model_fn, prompt, sampler,
                           numerics.generator(seed, "sample-eps"), shape)


# ---------------------------------------------------------------------------
# training core


def _loss_on_batch(model: DiT, x0: torch.Tensor, prompts: Sequence[PromptSeq],
                   plan_token_drop: float, adapters, gens: dict,
                   self_cond_prob: float, full_mask_prob: float = 0.0) -> torch.Tensor:
    # occasional whole-prompt drop keeps the fully-masked (CFG unconditional)
    # input in-distribution; otherwise tokens drop independently
    if full_mask_prob > 0 and float(torch.rand(1, generator=gens["mask"])) < full_mask_prob:
        masked = [p.fully_masked() for p in prompts]
    else:
        masked = [p.masked(plan_token_drop, gens["mask"]) for p in prompts]
    batch = collate_prompts(masked)
    b = x0.shape[0]
    t = flow.draw_timesteps(b, gens["noise"])
    eps = torch.randn(x0.shape, generator=gens["noise"])
    state = flow.interpolate(x0, eps, t)
    sc = None
    if self_cond_prob > 0:
        with torch.no_grad():
            v0 = model(state.x_t, state.t, batch, None, adapters=adapters)
            estimate = flow.denoised_estimate(state.x_t, v0, state.t)
        sc = self_condition(estimate, self_cond_prob, gens["selfcond"], like=state.x_t)
    return flow.flow_loss(
        lambda x, tt, pp: model(x, tt, pp, sc, adapters=adapters), state, batch,
    )


def _optimize(loss: torch.Tensor, adapter_params: Dict[str, torch.Tensor],
              token_params: Dict[str, torch.Tensor], opt_adapters: AdamWState,
              opt_tokens: Optional[AdamWState], max_norm: float) -> None:
    merged = {**adapter_params, **token_params}
    grads = clip_grad_norm(grad(loss, merged), max_norm)
    adamw_step(opt_adapters, adapter_params,
               {k: grads[k] for k in adapter_params})
    if opt_tokens is not None and token_params:
        adamw_step(opt_tokens, token_params,
                   {k: grads[k] for k in token_params})


def _stage_generators(seed: int, label: str) -> dict:
    return {
        name: generator(seed, label, name)
        for name in ("data", "noise", "mask", "dropout", "selfcond")
    }


def _make_optimizers(plan: TrainPlan, has_tokens: bool):
    opt_adapters = AdamWState(lr=plan.lr, beta1=plan.beta1, beta2=plan.beta2,
                              weight_decay=plan.weight_decay)
    opt_tokens = None
    if has_tokens:
        opt_tokens = AdamWState(lr=plan.learned_token_lr, beta1=plan.beta1,
                                beta2=plan.beta2, weight_decay=plan.weight_decay)
    return opt_adapters, opt_tokens


def stage1_train(model: DiT, bundle: lora.AdapterBundle,
                 videos: Dict[str, torch.Tensor], plan: TrainPlan, seed: int,
                 logger: TrainLogger, prior_cache: Optional[PriorCache] = None,
                 steps: Optional[int] = None) -> lora.AdapterBundle:
    """Appearance stage: frame-set batches under the static prompt, training
    the basis/coefficient pair and the [v] token."""
    if bundle.stage != 1:
        raise lora.LoraError("bundle has already entered the second stage")
    cfg = model.cfg
    gens = _stage_generators(seed, "stage1")
    prompts = {
        c["id"]: build_prompts(synthworld.ConceptSpec.from_dict(c["spec"]), bundle,
                               cfg.vocab_size)
        for c in bundle.concepts
    }
    adapter_params = bundle.adapter_params()
    token_params = bundle.token_params() if plan.train_learned_tokens else {}
    opt_adapters, opt_tokens = _make_optimizers(plan, bool(token_params))
    dropout = lora.DropoutSpec(plan.dropout_stage1)
    ids = [c["id"] for c in bundle.concepts]
    total = plan.stage1_steps if steps is None else steps

    for step in range(total):
        use_prior = (prior_cache is not None
                     and float(torch.rand(1, generator=gens["data"])) < plan.prior_prob)
        k = plan.frames_per_set_sample
        if use_prior:
            x0, seqs = prior_batch(prior_cache, gens["data"], cfg.vocab_size,
                                   frames=1, count=k)
            kind = "prior"
        else:
            items, seqs = [], []
            for _ in range(k):
                cid = ids[int(torch.randint(len(ids), (1,), generator=gens["data"]))]
                items.append(sample_frame_set(videos[cid], 1, gens["data"])[0])
                seqs.append(prompts[cid].static_tokens)
            x0 = torch.stack(items)
            kind = "concept"
        prepared = bundle.prepare(dropout, gens["dropout"])
        loss = _loss_on_batch(model, x0, seqs, plan.token_drop_prob, prepared,
                              gens, cfg.self_cond_prob, plan.full_mask_prob)
        _optimize(loss, adapter_params, token_params, opt_adapters, opt_tokens,
                  plan.grad_clip)
        logger.log(step, 1, float(loss.detach()), plan.lr, seed, kind)
    return bundle


def stage2_train(model: DiT, bundle: lora.AdapterBundle,
                 videos: Dict[str, torch.Tensor], plan: TrainPlan, seed: int,
                 logger: TrainLogger, prior_cache: Optional[PriorCache] = None,
                 masks: Optional[Dict[str, torch.Tensor]] = None,
                 steps: Optional[int] = None) -> lora.AdapterBundle:
    """Motion stage: full-clip batches under the combined prompt, training the
    second-stage coefficients and the [u] token on the frozen pair."""
    if bundle.stage != 2:
        raise lora.LoraError(
            "second-stage training requires a bundle that finished stage 1 "
            "(call start_stage2 first)"
        )
    cfg = model.cfg
    gens = _stage_generators(seed, "stage2")
    prompts = {
        c["id"]: build_prompts(synthworld.ConceptSpec.from_dict(c["spec"]), bundle,
                               cfg.vocab_size)
        for c in bundle.concepts
    }
    adapter_params = bundle.adapter_params()
    token_params = bundle.token_params() if plan.train_learned_tokens else {}
    opt_adapters, opt_tokens = _make_optimizers(plan, bool(token_params))
    dropout = lora.DropoutSpec(plan.dropout_stage2)
    ids = [c["id"] for c in bundle.concepts]
    and_id = synthworld.WORD_TO_ID["and"]
    can_stitch = len(ids) >= 2 and plan.stitched_prob > 0
    total = plan.stage2_steps if steps is None else steps

    for step in range(total):
        draw = float(torch.rand(1, generator=gens["data"]))
        if prior_cache is not None and draw < plan.prior_prob:
            x0, seqs = prior_batch(prior_cache, gens["data"], cfg.vocab_size,
                                   frames=None, count=plan.batch_size)
            kind = "prior"
        elif can_stitch and draw < plan.prior_prob + plan.stitched_prob:
            pick = torch.randperm(len(ids), generator=gens["data"])[:2].tolist()
            ca, cb = ids[pick[0]], ids[pick[1]]
            pair_masks = [masks[ca], masks[cb]] if masks else None
            video = stitch([videos[ca], videos[cb]], pair_masks,
                           remove_background=plan.stitched_remove_background and masks is not None)
            joint = (prompts[ca].motion_tokens
                     + PromptSeq((and_id,), cfg.vocab_size)
                     + prompts[cb].motion_tokens)
            x0, seqs, kind = video.unsqueeze(0), [joint], "stitched"
        else:
            items, seqs = [], []
            for _ in range(plan.batch_size):
                cid = ids[int(torch.randint(len(ids), (1,), generator=gens["data"]))]
                items.append(videos[cid])
                seqs.append(prompts[cid].motion_tokens)
            x0, kind = torch.stack(items), "concept"
        prepared = bundle.prepare(dropout, gens["dropout"])
        loss = _loss_on_batch(model, x0, seqs, plan.token_drop_prob, prepared,
                              gens, cfg.self_cond_prob, plan.full_mask_prob)
        _optimize(loss, adapter_params, token_params, opt_adapters, opt_tokens,
                  plan.grad_clip)
        logger.log(step, 2, float(loss.detach()), plan.lr, seed, kind)
    return bundle


def single_stage_train(model: DiT, bundle: lora.AdapterBundle,
                       videos: Dict[str, torch.Tensor], plan: TrainPlan,
                       seed: int, logger: TrainLogger, steps: int) -> lora.AdapterBundle:
    """Plain single-stage LoRA baseline: full clips, combined prompt, both
    learned tokens, no second-stage coefficients. With dropout, masking and
    prior probability zeroed in the plan this is exactly the pipeline with
    every regularizer off, run for one stage."""
    if bundle.stage != 1:
        raise lora.LoraError("single-stage baseline expects a fresh bundle")
    cfg = model.cfg
    gens = _stage_generators(seed, "single")
    prompts = {
        c["id"]: build_prompts(synthworld.ConceptSpec.from_dict(c["spec"]), bundle,
                               cfg.vocab_size)
        for c in bundle.concepts
    }
    adapter_params = bundle.adapter_params()
    token_params = {}
    if plan.train_learned_tokens:
        for c in bundle.concepts:
            for suffix in (lora.VT_SUFFIX, lora.UT_SUFFIX):
                row = bundle.token_rows[c["id"] + suffix]
                row.requires_grad_(True)
                token_params[f"tokens.{c['id']}{suffix}"] = row
    opt_adapters, opt_tokens = _make_optimizers(plan, bool(token_params))
    dropout = lora.DropoutSpec(plan.dropout_stage1) if plan.dropout_stage1 > 0 else None
    ids = [c["id"] for c in bundle.concepts]

    for step in range(steps):
        items, seqs = [], []
        for _ in range(plan.batch_size):
            cid = ids[int(torch.randint(len(ids), (1,), generator=gens["data"]))]
            items.append(videos[cid])
            seqs.append(prompts[cid].motion_tokens)
        x0 = torch.stack(items)
        prepared = bundle.prepare(dropout, gens["dropout"])
        loss = _loss_on_batch(model, x0, seqs, plan.token_drop_prob, prepared,
                              gens, cfg.self_cond_prob, plan.full_mask_prob)
        _optimize(loss, adapter_params, token_params, opt_adapters, opt_tokens,
                  plan.grad_clip)
        logger.log(step, 1, float(loss.detach()), plan.lr, seed, "concept")
    return bundle


# ---------------------------------------------------------------------------
# end-to-end runs


def concept_meta(spec: synthworld.ConceptSpec) -> dict:
    return {
        "id": spec.concept_id,
        "spec": spec.to_dict(),
        "static_template": STATIC_TEMPLATE,
        "dynamic_template": DYNAMIC_TEMPLATE,
    }


def make_bundle(model: DiT, specs: Sequence[synthworld.ConceptSpec], rank: int,
                seed: int, scale: float = 1.0) -> lora.AdapterBundle:
    return lora.create_bundle(
        model.adapted_layer_dims(), [concept_meta(s) for s in specs], rank,
        model.cfg.context_dim, model.cfg.to_dict(), generator(seed, "lora-init"),
        scale=scale,
    )


def render_concepts(specs: Sequence[synthworld.ConceptSpec], cfg: DiTConfig):
    videos, masks = {}, {}
    for spec in specs:
        v, m = synthworld.render(spec, frames=cfg.max_frames,
                                 canvas=(cfg.max_h, cfg.max_h))
        videos[spec.concept_id] = v
        masks[spec.concept_id] = m
    return videos, masks


def personalize(model: DiT, specs: Sequence[synthworld.ConceptSpec],
                plan: TrainPlan, seed: int, rank: int = 8,
                header: Optional[dict] = None
                ) -> Tuple[lora.AdapterBundle, TrainLogger]:
    """Full two-stage run on one or more concepts' single clips.

    Returns the trained bundle (stage 2, identity frozen) and the training
    log. Deterministic given (model weights, plan, seed).
    """
    logger = TrainLogger(header={
        "stage1_steps": plan.stage1_steps, "stage2_steps": plan.stage2_steps,
        "token_drop_prob": plan.token_drop_prob, "prior_prob": plan.prior_prob,
        "stitched_prob": plan.stitched_prob,
        "dropout_stage1": plan.dropout_stage1, "dropout_stage2": plan.dropout_stage2,
        "self_cond_prob": model.cfg.self_cond_prob,
        "seed": seed, **(header or {}),
    })
    bundle = make_bundle(model, specs, rank, seed)
    videos, masks = render_concepts(specs, model.cfg)
    prior_cache = None
    if plan.prior_prob > 0:
        prior_cache = PriorCache(model, plan.prior_videos, plan.prior_sample_steps, seed)
    stage1_train(model, bundle, videos, plan, seed, logger, prior_cache)
    bundle.start_stage2()
    stage2_train(model, bundle, videos, plan, seed, logger, prior_cache, masks)
    return bundle, logger


def pretrain_base(manifest: List[dict], cfg: DiTConfig, plan: PretrainPlan,
                  seed: int) -> Tuple[DiT, TrainLogger]:
    """Train a fresh backbone on the procedural corpus with token masking and
    self-conditioning, mixing single-frame and full-clip batches."""
    model = DiT(cfg, generator(seed, "model-init"))
    entries = synthworld.split_entries(manifest, "pretrain")
    if not entries:
        raise ValueError("manifest has no pretrain entries")
    specs = [synthworld.manifest_spec(e) for e in entries]
    videos = [synthworld.render(s, frames=cfg.max_frames, canvas=(cfg.max_h, cfg.max_h))[0]
              for s in specs]
    static_prompts = [prior_prompt(s, cfg.vocab_size, with_motion=False) for s in specs]
    full_prompts = [prior_prompt(s, cfg.vocab_size, with_motion=True) for s in specs]

    params = dict(model.named_parameters())
    opt = AdamWState(lr=plan.lr, beta1=plan.beta1, beta2=plan.beta2,
                     weight_decay=plan.weight_decay)
    gens = _stage_generators(seed, "pretrain")
    logger = TrainLogger(header={"steps": plan.steps, "seed": seed,
                                 "self_cond_prob": cfg.self_cond_prob,
                                 "token_drop_prob": plan.token_drop_prob})

    for step in range(plan.steps):
        is_video = float(torch.rand(1, generator=gens["data"])) < plan.video_prob
        items, seqs = [], []
        if is_video:
            for _ in range(plan.video_batch):
                i = int(torch.randint(len(videos), (1,), generator=gens["data"]))
                items.append(videos[i])
                seqs.append(full_prompts[i])
        else:
            for _ in range(plan.image_batch):
                i = int(torch.randint(len(videos), (1,), generator=gens["data"]))
                f = int(torch.randint(videos[i].shape[0], (1,), generator=gens["data"]))
                items.append(videos[i][f:f + 1])
                seqs.append(static_prompts[i])
        x0 = torch.stack(items)
        loss = _loss_on_batch(model, x0, seqs, plan.token_drop_prob, None, gens,
                              cfg.self_cond_prob, plan.full_mask_prob)
        grads = clip_grad_norm(grad(loss, params), plan.grad_clip)
        adamw_step(opt, params, grads)
        logger.log(step, 0, float(loss.detach()), plan.lr, seed, "video" if is_video else "image")
    return model, logger


# ---------------------------------------------------------------------------
# evaluation tasks


EDIT_TARGETS = {
    # farthest background in RGB from each original
    "gray": "black",
    "black": "white",
    "white": "black",
    "navy": "white",
}


def _other_motion(motion: str) -> str:
    i = synthworld.MOTIONS.index(motion)
    return synthworld.MOTIONS[(i + 1) % len(synthworld.MOTIONS)]


def evaluate_tasks(model: DiT, bundle: lora.AdapterBundle, tasks: Sequence[str],
                   sampler: flow.SamplerConfig, seeds: Sequence[int],
                   ) -> dict:
    """Run oracle-scored tasks against a personalized model.

    Tasks: reconstruct, edit-background, recombine-motion, compose-two.
    Returns {"report": mean EvalReport fields, "tasks": per-task detail}.
    """
    cfg = model.cfg
    results: Dict[str, dict] = {}
    spec0 = synthworld.ConceptSpec.from_dict(bundle.concepts[0]["spec"])
    prompt0 = build_prompts(spec0, bundle, cfg.vocab_size)
    training_video, _ = synthworld.render(spec0, cfg.max_frames, (cfg.max_h, cfg.max_h))

    def run(prompt: PromptSeq, seed: int, adapters=True) -> torch.Tensor:
        return flow.clamp_video(sample_video(
            model, prompt, sampler, seed, bundle if adapters else None,
        ))

    for task in tasks:
        if task == "reconstruct":
            recs, base_mse = [], []
            for s in seeds:
                vid = run(prompt0.motion_tokens, s)
                ident = synthworld.oracle_identity(vid, spec0)
                motion = synthworld.oracle_motion(vid, spec0)
                recs.append({
                    "mse": synthworld.eval_mse(vid.clamp(0, 1), training_video),
                    "tc": synthworld.eval_tc(vid),
                    "identity": ident.score,
                    "motion": motion.score,
                    "motion_match": motion.match,
                    "edit": synthworld.oracle_edit_adherence(vid, spec0.background_name),
                })
                base_vid = flow.clamp_video(sample_video(
                    model, prior_prompt(spec0, cfg.vocab_size, True), sampler, s))
                base_mse.append(synthworld.eval_mse(base_vid.clamp(0, 1), training_video))
            results[task] = {
                "per_seed": recs,
                "baseline_mse": base_mse,
                "mean_mse": _mean(recs, "mse"),
                "mean_identity": _mean(recs, "identity"),
                "match_rate": sum(r["motion_match"] for r in recs) / len(recs),
            }
        elif task == "edit-background":
            target = EDIT_TARGETS[spec0.background_name]
            edited_spec = synthworld.ConceptSpec(
                spec0.shape, spec0.color_name, target, spec0.motion,
                spec0.size, spec0.speed, spec0.phase)
            edit_prompt_obj = build_prompts(edited_spec, bundle, cfg.vocab_size)
            recs = []
            for s in seeds:
                vid = run(edit_prompt_obj.motion_tokens, s)
                recs.append({
                    "edit": synthworld.oracle_edit_adherence(vid, target),
                    "identity": synthworld.oracle_identity(vid, edited_spec).score,
                    "tc": synthworld.eval_tc(vid),
                })
            results[task] = {
                "target_background": target,
                "per_seed": recs,
                "mean_edit": _mean(recs, "edit"),
                "mean_identity": _mean(recs, "identity"),
            }
        elif task == "recombine-motion":
            target_motion = _other_motion(spec0.motion)
            recombined = synthworld.ConceptSpec(
                spec0.shape, spec0.color_name, spec0.background_name, target_motion,
                spec0.size, spec0.speed, spec0.phase)
            dyn = _template_seq(PRIOR_DYNAMIC_TEMPLATE, recombined, {}, cfg.vocab_size)
            prompt = prompt0.static_tokens + dyn
            recs = []
            for s in seeds:
                vid = run(prompt, s)
                motion = synthworld.oracle_motion(vid, recombined)
                recs.append({
                    "motion": motion.score, "motion_match": motion.match,
                    "identity": synthworld.oracle_identity(vid, recombined).score,
                })
            results[task] = {
                "target_motion": target_motion,
                "per_seed": recs,
                "match_rate": sum(r["motion_match"] for r in recs) / len(recs),
                "mean_identity": _mean(recs, "identity"),
            }
        elif task == "compose-two":
            if len(bundle.concepts) < 2:
                raise ValueError("compose-two needs a joint adapter with >= 2 concepts")
            per_concept = []
            for c in bundle.concepts[:2]:
                spec = synthworld.ConceptSpec.from_dict(c["spec"])
                other = [cc for cc in bundle.concepts[:2] if cc is not c][0]
                other_spec = synthworld.ConceptSpec.from_dict(other["spec"])
                p = build_prompts(spec, bundle, cfg.vocab_size)
                own, leak, match = [], [], []
                for s in seeds:
                    vid = run(p.motion_tokens, s)
                    own.append(synthworld.oracle_identity(vid, spec).score)
                    leak.append(synthworld.oracle_identity(vid, other_spec).score)
                    match.append(synthworld.oracle_motion(vid, spec).match)
                per_concept.append({
                    "id": c["id"],
                    "identity": sum(own) / len(own),
                    "leakage": sum(leak) / len(leak),
                    "match_rate": sum(match) / len(match),
                })
            results[task] = {"per_concept": per_concept}
        else:
            raise ValueError(f"unknown evaluation task {task!r}")

    report = _summary_report(model, bundle, results, sampler, seeds)
    return {"report": report.to_dict(), "tasks": results}


def _mean(records: List[dict], key: str) -> float:
    return sum(r[key] for r in records) / len(records)


def _summary_report(model, bundle, results, sampler, seeds) -> synthworld.EvalReport:
    """Fill every report field, falling back to a reconstruct measurement for
    fields whose task was not requested."""
    cfg = model.cfg
    spec0 = synthworld.ConceptSpec.from_dict(bundle.concepts[0]["spec"])
    need_probe = not ({"reconstruct"} & set(results))
    if need_probe:
        prompt0 = build_prompts(spec0, bundle, cfg.vocab_size)
        vid = flow.clamp_video(sample_video(model, prompt0.motion_tokens, sampler,
                                            seeds[0], bundle))
        training_video, _ = synthworld.render(spec0, cfg.max_frames,
                                              (cfg.max_h, cfg.max_h))
        probe = {
            "mse": synthworld.eval_mse(vid.clamp(0, 1), training_video),
            "tc": synthworld.eval_tc(vid),
            "identity": synthworld.oracle_identity(vid, spec0).score,
            "motion": synthworld.oracle_motion(vid, spec0).score,
            "edit": synthworld.oracle_edit_adherence(vid, spec0.background_name),
        }
    else:
        rec = results["reconstruct"]
        probe = {
            "mse": rec["mean_mse"],
            "tc": _mean(rec["per_seed"], "tc"),
            "identity": rec["mean_identity"],
            "motion": _mean(rec["per_seed"], "motion"),
            "edit": _mean(rec["per_seed"], "edit"),
        }
    if "edit-background" in results:
        probe["edit"] = results["edit-background"]["mean_edit"]
    if "recombine-motion" in results:
        probe["motion"] = _mean(results["recombine-motion"]["per_seed"], "motion")
    return synthworld.EvalReport(
        mse=probe["mse"], temporal_coherence=probe["tc"],
        identity_score=probe["identity"], motion_score=probe["motion"],
        edit_adherence=probe["edit"],
    )
