import os

import pytest
import torch

from vidlab import backbone, lora, pipeline, synthworld


TINY_KW = dict(
    vocab_size=len(synthworld.VOCAB), blocks=2, model_dim=32, heads=2,
    context_dim=16, max_frames=4, max_h=8, max_w=16,
)


@pytest.fixture(scope="session")
def tiny_cfg():
    return backbone.DiTConfig(**TINY_KW)


@pytest.fixture(scope="session")
def tiny_manifest():
    return synthworld.default_manifest(heldout=2, seed=0)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg, tiny_manifest):
    # a freshly initialized backbone has zero modulation gates and a zero
    # output head, so nothing upstream receives gradient; a short pretrain
    # opens the gates, matching how adapters meet the model in real use
    plan = pipeline.PretrainPlan(steps=30, image_batch=4, video_batch=1,
                                 video_prob=0.25)
    model, _ = pipeline.pretrain_base(tiny_manifest, tiny_cfg, plan, seed=11)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_spec(tiny_manifest):
    return synthworld.manifest_spec(synthworld.split_entries(tiny_manifest, "heldout")[0])


@pytest.fixture()
def tiny_bundle(tiny_model, tiny_spec):
    return pipeline.make_bundle(tiny_model, [tiny_spec], rank=2, seed=3)


@pytest.fixture()
def tiny_plan():
    return pipeline.TrainPlan(stage1_steps=4, stage2_steps=4, prior_videos=2,
                              prior_sample_steps=2)


@pytest.fixture()
def trained_tiny_bundle(tiny_model, tiny_spec, tiny_plan):
    bundle, logger = pipeline.personalize(tiny_model, [tiny_spec], tiny_plan, seed=5, rank=2)
    return bundle, logger


@pytest.fixture(scope="session")
def reference_artifacts():
    """Desk-scale reference run (pretrain + two-stage personalization),
    built through the CLI on first use and cached under .cache/reference/."""
    import acceptance_helpers as ref

    os.chdir(ref.ROOT)
    base = ref.ensure_base()
    target = ref.heldout_ids()[0]
    adapter = ref.ensure_adapter([target], "personalize")
    ref.ensure_pretrain_quality()
    return {"base": base, "adapter": adapter, "target": target}
