"""Command-line surface: pretraining, personalization, sampling, composition,
evaluation, and checkpoint inspection.

Every command is reproducible: a JSON run config (strict schema, unknown
keys rejected) plus a seed pins all outputs bit-exactly, and each artifact
embeds the hash of the resolved config that produced it. Exit codes:
0 ok, 2 usage/config error, 3 corrupt artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from typing import List, Optional

import numpy as np
import torch

from . import backbone, flow, lora, numerics, pipeline, serialization, synthworld

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CORRUPT = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run config


_SECTION_TYPES = {
    "backbone": backbone.DiTConfig,
    "plan": pipeline.TrainPlan,
    "pretrain": pipeline.PretrainPlan,
    "sampler": flow.SamplerConfig,
}
_TOP_KEYS = set(_SECTION_TYPES) | {"manifest", "seed", "out_dir"}


def resolve_config(raw: dict) -> dict:
    """Merge a raw config dict over defaults, rejecting unknown keys."""
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    resolved = {
        "manifest": raw.get("manifest"),
        "seed": int(raw.get("seed", 0)),
        "out_dir": raw.get("out_dir", "runs/out"),
    }
    for section, cls in _SECTION_TYPES.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        valid = {f.name for f in dataclass_fields(cls)}
        bad = set(body) - valid
        if bad:
            raise ConfigError(f"unknown keys in config section {section!r}: {sorted(bad)}")
        if section == "backbone":
            body = {"vocab_size": len(synthworld.VOCAB), **body}
        try:
            obj = cls(**body)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config section {section!r}: {exc}") from exc
        resolved[section] = obj.to_dict() if hasattr(obj, "to_dict") else {
            f.name: getattr(obj, f.name) for f in dataclass_fields(cls)
        }
    return resolved


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return resolve_config({})
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return resolve_config(raw)


def _objects(resolved: dict):
    cfg = backbone.DiTConfig.from_dict(resolved["backbone"])
    plan = pipeline.TrainPlan(**resolved["plan"])
    pre = pipeline.PretrainPlan(**resolved["pretrain"])
    sampler = flow.SamplerConfig(**resolved["sampler"])
    return cfg, plan, pre, sampler


# ---------------------------------------------------------------------------
# helpers


def _write_png_grid(path, video: torch.Tensor, scale: int = 4) -> None:
    """Tile frames horizontally into one PNG; raw tensors stay authoritative."""
    from PIL import Image

    vid = (video.clamp(0, 1).numpy() * 255).astype(np.uint8)
    t, h, w, c = vid.shape
    pad = 2
    grid = np.full((h, t * w + (t - 1) * pad, c), 255, dtype=np.uint8)
    for f in range(t):
        grid[:, f * (w + pad):f * (w + pad) + w] = vid[f]
    img = Image.fromarray(grid)
    img = img.resize((grid.shape[1] * scale, grid.shape[0] * scale), Image.NEAREST)
    img.save(path)


def _load_base(path: str) -> backbone.DiT:
    model, _ = backbone.load_model(path)
    model.eval()
    return model


def _heldout_specs(manifest: List[dict], concept_ids: List[str]) -> List[synthworld.ConceptSpec]:
    by_id = {e["id"]: e for e in manifest}
    specs = []
    for cid in concept_ids:
        if cid not in by_id:
            known = ", ".join(sorted(by_id))
            raise ConfigError(f"concept {cid!r} not in manifest; known ids: {known}")
        specs.append(synthworld.manifest_spec(by_id[cid]))
    return specs


def _apply_plan_overrides(plan: pipeline.TrainPlan, args) -> pipeline.TrainPlan:
    updates = {}
    for arg_name, field_name in [
        ("stage1_steps", "stage1_steps"), ("stage2_steps", "stage2_steps"),
        ("dropout_stage1", "dropout_stage1"), ("dropout_stage2", "dropout_stage2"),
        ("token_drop", "token_drop_prob"),
    ]:
        value = getattr(args, arg_name, None)
        if value is not None:
            updates[field_name] = value
    if getattr(args, "no_learned_tokens", False):
        updates["train_learned_tokens"] = False
    if not updates:
        return plan
    body = plan.to_dict()
    body.update(updates)
    return pipeline.TrainPlan(**body)


def _personalize_run(args, stitched: bool) -> int:
    resolved = load_config(args.config)
    if args.seed is not None:
        resolved["seed"] = args.seed
    cfg, plan, _, _ = _objects(resolved)
    plan = _apply_plan_overrides(plan, args)
    if not stitched:
        body = plan.to_dict()
        body["stitched_prob"] = 0.0
        plan = pipeline.TrainPlan(**body)
    resolved["plan"] = plan.to_dict()
    chash = config_hash(resolved)
    seed = resolved["seed"]

    manifest_path = args.manifest or resolved["manifest"]
    if manifest_path is None or not os.path.exists(manifest_path or ""):
        raise ConfigError(f"manifest not found: {manifest_path}")
    manifest = synthworld.load_manifest(manifest_path)
    model = _load_base(args.base)
    if model.cfg.to_dict() != cfg.to_dict():
        raise ConfigError("config backbone section does not match the base checkpoint")
    specs = _heldout_specs(manifest, args.concepts.split(","))

    bundle, logger = pipeline.personalize(
        model, specs, plan, seed, rank=args.rank,
        header={"config_hash": chash},
    )
    out_dir = args.out or resolved["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    adapter_path = os.path.join(out_dir, "adapter.vt")
    lora.save_adapter(adapter_path, bundle,
                      {"config_hash": chash, "seed": seed})
    logger.write(os.path.join(out_dir, "train_log.jsonl"))
    print(f"adapter: {adapter_path}")
    print(f"log: {os.path.join(out_dir, 'train_log.jsonl')}")
    print(f"checkpoint sha256: {serialization.file_sha256(adapter_path)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands


def cmd_manifest(args) -> int:
    manifest = synthworld.default_manifest(heldout=args.heldout, seed=args.seed or 0)
    synthworld.save_manifest(args.out, manifest)
    held = [e["id"] for e in synthworld.split_entries(manifest, "heldout")]
    print(f"wrote {len(manifest)} concepts to {args.out}")
    print(f"heldout: {', '.join(held)}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    resolved = load_config(args.config)
    if args.seed is not None:
        resolved["seed"] = args.seed
    cfg, _, pre, _ = _objects(resolved)
    if args.steps is not None:
        body = pre.to_dict()
        body["steps"] = args.steps
        pre = pipeline.PretrainPlan(**body)
        resolved["pretrain"] = pre.to_dict()
    chash = config_hash(resolved)
    manifest_path = args.manifest or resolved["manifest"]
    if manifest_path is None or not os.path.exists(manifest_path or ""):
        raise ConfigError(f"manifest not found: {manifest_path}")
    manifest = synthworld.load_manifest(manifest_path)

    model, logger = pipeline.pretrain_base(manifest, cfg, pre, resolved["seed"])
    out_dir = args.out or resolved["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "base.vt")
    backbone.save_model(ckpt, model, {"config_hash": chash, "seed": resolved["seed"]})
    logger.header["config_hash"] = chash
    logger.write(os.path.join(out_dir, "pretrain_log.jsonl"))
    print(f"checkpoint: {ckpt}")
    print(f"log: {os.path.join(out_dir, 'pretrain_log.jsonl')}")
    print(f"checkpoint sha256: {serialization.file_sha256(ckpt)}")
    return EXIT_OK


def cmd_personalize(args) -> int:
    return _personalize_run(args, stitched=False)


def cmd_compose(args) -> int:
    return _personalize_run(args, stitched=args.stitched)


def _check_adapter_matches(bundle, model) -> None:
    if bundle.backbone != model.cfg.to_dict():
        raise ConfigError("adapter was trained against a different backbone config")


def cmd_sample(args) -> int:
    model = _load_base(args.base)
    bundle = lora.load_adapter(args.adapter) if args.adapter else None
    if bundle is not None:
        _check_adapter_matches(bundle, model)
    sampler = flow.SamplerConfig(steps=args.steps, cfg_scale=args.cfg)
    try:
        prompt = pipeline.parse_prompt(args.prompt, model.cfg.vocab_size, bundle)
    except (synthworld.UnknownWordError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    video = pipeline.sample_video(model, prompt, sampler, args.seed or 0, bundle)
    out = args.out or "sample"
    meta = {
        "kind": "video", "prompt": args.prompt, "seed": args.seed or 0,
        "sampler": {"steps": sampler.steps, "cfg_scale": sampler.cfg_scale},
    }
    serialization.save_tensors(out + ".vt", {"video": video}, meta)
    _write_png_grid(out + ".png", flow.clamp_video(video))
    print(f"video tensor: {out}.vt")
    print(f"frame grid: {out}.png")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = _load_base(args.base)
    bundle = lora.load_adapter(args.adapter)
    _check_adapter_matches(bundle, model)
    sampler = flow.SamplerConfig(steps=args.steps, cfg_scale=args.cfg)
    tasks = args.tasks.split(",")
    seed = args.seed or 0
    seeds = [numerics.derive_seed(seed, "eval", i) for i in range(args.eval_seeds)]
    result = pipeline.evaluate_tasks(model, bundle, tasks, sampler, seeds)
    payload = {
        "config_hash": bundle.meta.get("config_hash"),
        "seed": seed,
        "seeds": seeds,
        **result,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    print(json.dumps(payload["report"], indent=1, sort_keys=True))
    print(f"report: {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    tensors, meta = serialization.load_tensors(args.checkpoint)
    kind = meta.get("kind", "unknown")
    print(f"kind: {kind}")
    print(f"tensors: {len(tensors)}")
    if "config_hash" in meta:
        print(f"config_hash: {meta['config_hash']}")
    if kind == "adapter":
        stage = meta.get("stage")
        print(f"stage: {stage}")
        print(f"rank: {meta.get('rank')}  scale: {meta.get('scale')}")
        print(f"concepts: {', '.join(c['id'] for c in meta.get('concepts', []))}")
        layers = sorted({n[len("layers."):].rsplit(".", 1)[0]
                         for n in tensors if n.startswith("layers.")})
        for name in layers:
            a1 = tensors[f"layers.{name}.a1"]
            has_b2 = f"layers.{name}.b2" in tensors
            print(f"  {name}: rank {a1.shape[1]}"
                  f"{' + second-stage coefficients' if has_b2 else ''}")
            if stage == 2 and not has_b2:
                raise serialization.CorruptArtifactError(
                    f"{args.checkpoint}: stage-2 adapter missing b2 for {name}")
        if stage == 2:
            bundle = lora.load_adapter(args.checkpoint)
            recorded = meta.get("identity_fingerprint")
            actual = bundle.identity_fingerprint()
            if recorded != actual:
                raise serialization.CorruptArtifactError(
                    f"{args.checkpoint}: freeze invariant violated (frozen tensors "
                    f"do not match the recorded fingerprint)")
            print("freeze fingerprint: ok")
    elif kind == "model":
        cfg = meta.get("backbone", {})
        print(f"blocks: {cfg.get('blocks')}  dim: {cfg.get('model_dim')}  "
              f"heads: {cfg.get('heads')}")
    print(f"sha256: {serialization.file_sha256(args.checkpoint)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidlab",
        description="desk-scale video diffusion with two-stage low-rank personalization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manifest", help="write the default corpus manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--heldout", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_manifest)

    p = sub.add_parser("pretrain", help="pretrain the base model on the corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_pretrain)

    for name, fn in (("personalize", cmd_personalize), ("compose", cmd_compose)):
        p = sub.add_parser(name, help=f"{name} concepts on a pretrained base")
        p.add_argument("--config", default=None)
        p.add_argument("--manifest", default=None)
        p.add_argument("--base", required=True)
        p.add_argument("--concepts", required=True,
                       help="comma-separated concept ids from the manifest")
        p.add_argument("--rank", type=int, default=8)
        p.add_argument("--stage1-steps", dest="stage1_steps", type=int, default=None)
        p.add_argument("--stage2-steps", dest="stage2_steps", type=int, default=None)
        p.add_argument("--dropout-stage1", dest="dropout_stage1", type=float, default=None)
        p.add_argument("--dropout-stage2", dest="dropout_stage2", type=float, default=None)
        p.add_argument("--token-drop", dest="token_drop", type=float, default=None)
        p.add_argument("--no-learned-tokens", dest="no_learned_tokens",
                       action="store_true")
        if name == "compose":
            p.add_argument("--stitched", action="store_true",
                           help="mix stitched side-by-side clips into stage 2")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("sample", help="sample a video from a checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", default=None)
    p.add_argument("--prompt", required=True)
    p.add_argument("--cfg", type=float, default=8.0)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("evaluate", help="run oracle-scored evaluation tasks")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--tasks", default="reconstruct,edit-background,recombine-motion")
    p.add_argument("--cfg", type=float, default=8.0)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--eval-seeds", dest="eval_seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="report.json")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("inspect", help="summarize and validate a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except serialization.CorruptArtifactError as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except numerics.NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
