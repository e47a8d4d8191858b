"""Reference-run plumbing shared by the acceptance suite and
scripts/make_reference.py.

The desk-scale reference artifacts (pretrained base, personalized adapters,
ablation baseline, joint adapters, sampling scores) are expensive, so they
are built once through the CLI into .cache/reference/ and reused; deleting
that directory forces a full rebuild. Build-time-derived thresholds live in
reference/thresholds.json and are committed with the reference logs.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import torch

ROOT = Path(__file__).resolve().parents[1]
REF_DIR = ROOT / ".cache" / "reference"
RUN_DIR = REF_DIR / "run"
THRESHOLDS_PATH = ROOT / "reference" / "thresholds.json"

PRETRAIN_STEPS = 3000
STAGE1_STEPS = 600
STAGE2_STEPS = 900
SEED = 0
RANK = 8


def _cli():
    from vidlab import cli

    return cli


def reference_config_path() -> Path:
    REF_DIR.mkdir(parents=True, exist_ok=True)
    path = REF_DIR / "config.json"
    if not path.exists():
        path.write_text(json.dumps({
            "manifest": str(REF_DIR / "manifest.json"),
            "seed": SEED,
            "out_dir": str(RUN_DIR),
            "pretrain": {"steps": PRETRAIN_STEPS},
        }, indent=1))
    return path


def ensure_manifest() -> Path:
    path = REF_DIR / "manifest.json"
    if not path.exists():
        REF_DIR.mkdir(parents=True, exist_ok=True)
        code = _cli().main(["manifest", "--out", str(path), "--heldout", "4"])
        assert code == 0
    return path


def heldout_ids() -> list:
    from vidlab import synthworld

    manifest = synthworld.load_manifest(ensure_manifest())
    return [e["id"] for e in synthworld.split_entries(manifest, "heldout")]


def ensure_base() -> Path:
    base = RUN_DIR / "base.vt"
    if not base.exists():
        code = _cli().main([
            "pretrain", "--config", str(reference_config_path()),
            "--manifest", str(ensure_manifest()),
        ])
        assert code == 0, "reference pretraining failed"
    return base


def ensure_adapter(concepts: list, out_name: str, stitched: bool = False,
                   seed: int = SEED) -> Path:
    """Two-stage personalization (or joint composition) through the CLI."""
    out = RUN_DIR / out_name
    adapter = out / "adapter.vt"
    if not adapter.exists():
        cmd = "compose" if (len(concepts) > 1 or stitched) else "personalize"
        argv = [
            cmd, "--config", str(reference_config_path()),
            "--manifest", str(ensure_manifest()),
            "--base", str(ensure_base()),
            "--concepts", ",".join(concepts),
            "--rank", str(RANK), "--seed", str(seed), "--out", str(out),
        ]
        if stitched:
            argv.append("--stitched")
        code = _cli().main(argv)
        assert code == 0, f"reference {cmd} failed for {concepts}"
    return adapter


def ensure_baseline(concept: str) -> Path:
    """Single-stage rank-8 adapter with every regularizer off, trained for
    the same total step budget as the two-stage reference run."""
    out = RUN_DIR / "baseline"
    adapter = out / "adapter.vt"
    if adapter.exists():
        return adapter
    from vidlab import backbone, lora, pipeline, synthworld

    model, _ = backbone.load_model(ensure_base())
    model.eval()
    manifest = synthworld.load_manifest(ensure_manifest())
    spec = synthworld.manifest_spec(next(e for e in manifest if e["id"] == concept))
    plan = pipeline.TrainPlan(
        stage1_steps=1, stage2_steps=1, prior_prob=0.0, token_drop_prob=0.0,
        dropout_stage1=0.0, dropout_stage2=0.0, stitched_prob=0.0,
    )
    bundle = pipeline.make_bundle(model, [spec], rank=RANK, seed=SEED)
    logger = pipeline.TrainLogger(header={"baseline": "single-stage",
                                          "steps": STAGE1_STEPS + STAGE2_STEPS})
    pipeline.single_stage_train(model, bundle,
                                pipeline.render_concepts([spec], model.cfg)[0],
                                plan, SEED, logger,
                                steps=STAGE1_STEPS + STAGE2_STEPS)
    out.mkdir(parents=True, exist_ok=True)
    lora.save_adapter(adapter, bundle, {"config_hash": "baseline", "seed": SEED})
    logger.write(out / "train_log.jsonl")
    return adapter


def sampling_scores(adapter_path: Path, cache_name: str, seeds, cfg_scale: float,
                    steps: int = 32) -> dict:
    """Per-seed oracle scores for reconstruct-style sampling, json-cached."""
    cache = adapter_path.parent / f"{cache_name}.json"
    if cache.exists():
        return json.loads(cache.read_text())
    from vidlab import backbone, flow, lora, pipeline, synthworld

    model, _ = backbone.load_model(ensure_base())
    model.eval()
    bundle = lora.load_adapter(adapter_path)
    cfg = model.cfg
    spec = synthworld.ConceptSpec.from_dict(bundle.concepts[0]["spec"])
    prompt = pipeline.build_prompts(spec, bundle, cfg.vocab_size).motion_tokens
    training_video, _ = synthworld.render(spec, cfg.max_frames, (cfg.max_h, cfg.max_h))
    sampler = flow.SamplerConfig(steps=steps, cfg_scale=cfg_scale)
    per_seed = []
    for seed in seeds:
        vid = flow.clamp_video(pipeline.sample_video(model, prompt, sampler, seed,
                                                     bundle)).clamp(0, 1)
        ident = synthworld.oracle_identity(vid, spec)
        motion = synthworld.oracle_motion(vid, spec)
        per_seed.append({
            "seed": seed,
            "identity": ident.score,
            "motion_score": motion.score,
            "motion_match": bool(motion.match),
            "mse": synthworld.eval_mse(vid, training_video),
        })
    payload = {"concept": spec.concept_id, "cfg_scale": cfg_scale, "steps": steps,
               "per_seed": per_seed}
    cache.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return payload


def edit_scores(adapter_path: Path, cache_name: str, seeds, cfg_scale: float,
                steps: int = 32) -> dict:
    """Edit-background task scores for one adapter, json-cached."""
    cache = adapter_path.parent / f"{cache_name}.json"
    if cache.exists():
        return json.loads(cache.read_text())
    from vidlab import backbone, flow, lora, pipeline

    model, _ = backbone.load_model(ensure_base())
    model.eval()
    bundle = lora.load_adapter(adapter_path)
    sampler = flow.SamplerConfig(steps=steps, cfg_scale=cfg_scale)
    result = pipeline.evaluate_tasks(model, bundle, ["edit-background"], sampler,
                                     list(seeds))
    payload = result["tasks"]["edit-background"]
    cache.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return payload


def compose_scores(adapter_path: Path, cache_name: str, seeds, cfg_scale: float,
                   steps: int = 32) -> dict:
    cache = adapter_path.parent / f"{cache_name}.json"
    if cache.exists():
        return json.loads(cache.read_text())
    from vidlab import backbone, flow, lora, pipeline

    model, _ = backbone.load_model(ensure_base())
    model.eval()
    bundle = lora.load_adapter(adapter_path)
    sampler = flow.SamplerConfig(steps=steps, cfg_scale=cfg_scale)
    result = pipeline.evaluate_tasks(model, bundle, ["compose-two"], sampler,
                                     list(seeds))
    payload = result["tasks"]["compose-two"]
    cache.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return payload


def ensure_pretrain_quality(n_concepts: int = 12, cfg_scale: float = 4.0,
                            steps: int = 32) -> dict:
    """Shape-classification accuracy of base-model samples on pretrain
    concepts' prompts, json-cached next to the base checkpoint."""
    cache = RUN_DIR / "pretrain_quality.json"
    if cache.exists():
        return json.loads(cache.read_text())
    from vidlab import backbone, flow, pipeline, synthworld

    model, _ = backbone.load_model(ensure_base())
    model.eval()
    manifest = synthworld.load_manifest(ensure_manifest())
    entries = synthworld.split_entries(manifest, "pretrain")
    stride = max(1, len(entries) // n_concepts)
    picked = entries[::stride][:n_concepts]
    sampler = flow.SamplerConfig(steps=steps, cfg_scale=cfg_scale)
    hits, rows = 0, []
    for i, entry in enumerate(picked):
        spec = synthworld.manifest_spec(entry)
        prompt = pipeline.prior_prompt(spec, model.cfg.vocab_size, with_motion=True)
        vid = flow.clamp_video(pipeline.sample_video(model, prompt, sampler, 1000 + i))
        got = synthworld.classify_shape(vid.clamp(0, 1))
        ident = synthworld.oracle_identity(vid.clamp(0, 1), spec)
        hits += got == spec.shape
        rows.append({"concept": entry["id"], "classified": got,
                     "identity": ident.score})
    payload = {"shape_accuracy": hits / len(picked), "cfg_scale": cfg_scale,
               "rows": rows}
    cache.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return payload


def load_thresholds() -> dict:
    if not THRESHOLDS_PATH.exists():
        raise RuntimeError(
            "reference/thresholds.json is missing; run scripts/make_reference.py "
            "to produce the reference run and freeze the derived thresholds"
        )
    return json.loads(THRESHOLDS_PATH.read_text())
