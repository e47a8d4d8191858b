import json
import os
import struct

import pytest
import torch

from vidlab import cli, lora, serialization, synthworld
from vidlab.cli import EXIT_CORRUPT, EXIT_OK, EXIT_USAGE
from vidlab.serialization import file_sha256

TINY_BACKBONE = {
    "blocks": 2, "model_dim": 32, "heads": 2, "context_dim": 16,
    "max_frames": 4, "max_h": 8, "max_w": 16,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Manifest + config + tiny pretrained base, built once through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    manifest = root / "manifest.json"
    assert cli.main(["manifest", "--out", str(manifest), "--heldout", "2"]) == EXIT_OK
    config = root / "config.json"
    config.write_text(json.dumps({
        "manifest": str(manifest),
        "seed": 0,
        "out_dir": str(root / "run"),
        "backbone": TINY_BACKBONE,
        "pretrain": {"steps": 25, "image_batch": 3, "video_batch": 1},
        "plan": {"stage1_steps": 4, "stage2_steps": 4, "prior_videos": 2,
                 "prior_sample_steps": 2},
        "sampler": {"steps": 2, "cfg_scale": 2.0},
    }))
    assert cli.main(["pretrain", "--config", str(config)]) == EXIT_OK
    base = root / "run" / "base.vt"
    assert base.exists()
    entries = synthworld.load_manifest(manifest)
    heldout = [e["id"] for e in synthworld.split_entries(entries, "heldout")]
    return {"root": root, "manifest": manifest, "config": config, "base": base,
            "heldout": heldout}


class TestConfig:
    def test_unknown_top_level_key_rejected(self, tmp_path):
        bad = tmp_path / "c.json"
        bad.write_text(json.dumps({"sede": 1}))
        assert cli.main(["pretrain", "--config", str(bad)]) == EXIT_USAGE

    def test_unknown_section_key_rejected(self, tmp_path):
        bad = tmp_path / "c.json"
        bad.write_text(json.dumps({"plan": {"stage3_steps": 1}}))
        assert cli.main(["pretrain", "--config", str(bad)]) == EXIT_USAGE

    def test_missing_config_file(self):
        assert cli.main(["pretrain", "--config", "/nonexistent.json"]) == EXIT_USAGE

    def test_config_hash_stable(self):
        a = cli.config_hash(cli.resolve_config({"seed": 1}))
        b = cli.config_hash(cli.resolve_config({"seed": 1}))
        c = cli.config_hash(cli.resolve_config({"seed": 2}))
        assert a == b != c


class TestPretrain:
    def test_missing_manifest_exits_2(self, tmp_path, capsys):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"manifest": str(tmp_path / "none.json"),
                                      "backbone": TINY_BACKBONE}))
        assert cli.main(["pretrain", "--config", str(config)]) == EXIT_USAGE
        assert "manifest" in capsys.readouterr().err

    def test_checkpoint_loads_and_embeds_config_hash(self, workdir):
        tensors, meta = serialization.load_tensors(workdir["base"])
        assert meta["kind"] == "model"
        assert "config_hash" in meta and meta["seed"] == 0

    def test_seed_reproducibility(self, workdir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = cli.main(["pretrain", "--config", str(workdir["config"]),
                             "--steps", "3", "--seed", "7", "--out", str(out)])
            assert code == EXIT_OK
            outs.append(file_sha256(out / "base.vt"))
        assert outs[0] == outs[1]


class TestPersonalizeCommand:
    def test_run_and_inspect(self, workdir, tmp_path):
        out = tmp_path / "p"
        code = cli.main([
            "personalize", "--config", str(workdir["config"]),
            "--base", str(workdir["base"]), "--concepts", workdir["heldout"][0],
            "--rank", "2", "--out", str(out),
        ])
        assert code == EXIT_OK
        adapter = out / "adapter.vt"
        assert adapter.exists() and (out / "train_log.jsonl").exists()
        assert cli.main(["inspect", str(adapter)]) == EXIT_OK

    def test_unknown_concept_exits_2(self, workdir, capsys):
        code = cli.main([
            "personalize", "--config", str(workdir["config"]),
            "--base", str(workdir["base"]), "--concepts", "not-a-concept",
        ])
        assert code == EXIT_USAGE
        assert "known ids" in capsys.readouterr().err

    def test_step_flag_overrides_honored(self, workdir, tmp_path):
        out = tmp_path / "p2"
        code = cli.main([
            "personalize", "--config", str(workdir["config"]),
            "--base", str(workdir["base"]), "--concepts", workdir["heldout"][0],
            "--rank", "2", "--stage1-steps", "2", "--stage2-steps", "3",
            "--out", str(out),
        ])
        assert code == EXIT_OK
        lines = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
        header, records = lines[0], lines[1:]
        assert header["stage1_steps"] == 2 and header["stage2_steps"] == 3
        assert sum(r["stage"] == 1 for r in records) == 2
        assert sum(r["stage"] == 2 for r in records) == 3

    def test_determinism_across_runs(self, workdir, tmp_path):
        hashes, logs = [], []
        for name in ("d1", "d2"):
            out = tmp_path / name
            code = cli.main([
                "personalize", "--config", str(workdir["config"]),
                "--base", str(workdir["base"]), "--concepts", workdir["heldout"][0],
                "--rank", "2", "--seed", "3", "--out", str(out),
            ])
            assert code == EXIT_OK
            hashes.append(file_sha256(out / "adapter.vt"))
            logs.append((out / "train_log.jsonl").read_text())
        assert hashes[0] == hashes[1]
        assert logs[0] == logs[1]

    def test_compose_two_concepts_lists_both(self, workdir, tmp_path):
        out = tmp_path / "joint"
        code = cli.main([
            "compose", "--config", str(workdir["config"]),
            "--base", str(workdir["base"]),
            "--concepts", ",".join(workdir["heldout"][:2]),
            "--rank", "2", "--stitched", "--out", str(out),
        ])
        assert code == EXIT_OK
        bundle = lora.load_adapter(out / "adapter.vt")
        assert [c["id"] for c in bundle.concepts] == workdir["heldout"][:2]

    def test_stitched_flag_recorded_in_log(self, workdir, tmp_path):
        out = tmp_path / "stitched"
        config = json.loads(workdir["config"].read_text())
        config["plan"]["stage2_steps"] = 10
        config["plan"]["stitched_prob"] = 0.9
        config["plan"]["prior_prob"] = 0.0
        cpath = out.with_suffix(".json")
        cpath.write_text(json.dumps(config))
        code = cli.main([
            "compose", "--config", str(cpath), "--base", str(workdir["base"]),
            "--concepts", ",".join(workdir["heldout"][:2]),
            "--rank", "2", "--stitched", "--out", str(out),
        ])
        assert code == EXIT_OK
        records = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()][1:]
        assert any(r["batch_kind"] == "stitched" for r in records)


class TestSampleCommand:
    def test_emits_tensor_and_png(self, workdir, tmp_path):
        out = tmp_path / "s"
        code = cli.main([
            "sample", "--base", str(workdir["base"]),
            "--prompt", "a red circle on gray background",
            "--steps", "2", "--cfg", "2", "--seed", "1", "--out", str(out),
        ])
        assert code == EXIT_OK
        tensors, meta = serialization.load_tensors(str(out) + ".vt")
        assert tensors["video"].shape == (4, 8, 8, 3)
        assert meta["kind"] == "video"
        assert (tmp_path / "s.png").exists()

    def test_unknown_word_exits_2_and_lists_vocabulary(self, workdir, capsys):
        code = cli.main([
            "sample", "--base", str(workdir["base"]),
            "--prompt", "a purple dinosaur", "--steps", "1",
        ])
        assert code == EXIT_USAGE
        err = capsys.readouterr().err
        assert "purple" in err and "circle" in err

    def test_cfg1_matches_conditional_only_bitwise(self, workdir, tmp_path):
        hashes = []
        for name in ("c1", "c2"):
            out = tmp_path / name
            code = cli.main([
                "sample", "--base", str(workdir["base"]),
                "--prompt", "a red circle on gray background",
                "--steps", "2", "--cfg", "1", "--seed", "9", "--out", str(out),
            ])
            assert code == EXIT_OK
            hashes.append(file_sha256(str(out) + ".vt"))
        assert hashes[0] == hashes[1]

    def test_concept_token_requires_adapter(self, workdir, capsys):
        code = cli.main([
            "sample", "--base", str(workdir["base"]),
            "--prompt", "a [v] circle", "--steps", "1",
        ])
        assert code == EXIT_USAGE


class TestEvaluateCommand:
    def test_report_fields_and_hash(self, workdir, tmp_path):
        out = tmp_path / "p"
        assert cli.main([
            "personalize", "--config", str(workdir["config"]),
            "--base", str(workdir["base"]), "--concepts", workdir["heldout"][0],
            "--rank", "2", "--out", str(out),
        ]) == EXIT_OK
        report_path = tmp_path / "report.json"
        code = cli.main([
            "evaluate", "--base", str(workdir["base"]),
            "--adapter", str(out / "adapter.vt"),
            "--tasks", "reconstruct", "--steps", "2", "--cfg", "1",
            "--eval-seeds", "2", "--out", str(report_path),
        ])
        assert code == EXIT_OK
        payload = json.loads(report_path.read_text())
        assert set(payload["report"]) == {"mse", "temporal_coherence",
                                          "identity_score", "motion_score",
                                          "edit_adherence"}
        assert payload["config_hash"]
        assert len(payload["seeds"]) == 2


class TestInspectCommand:
    def test_valid_model_exits_0(self, workdir):
        assert cli.main(["inspect", str(workdir["base"])]) == EXIT_OK

    def test_corrupt_file_exits_3(self, workdir, tmp_path):
        broken = tmp_path / "broken.vt"
        raw = workdir["base"].read_bytes()
        broken.write_bytes(raw[: len(raw) // 2])
        assert cli.main(["inspect", str(broken)]) == EXIT_CORRUPT

    def test_tampered_frozen_tensor_detected(self, workdir, tmp_path):
        out = tmp_path / "p"
        assert cli.main([
            "personalize", "--config", str(workdir["config"]),
            "--base", str(workdir["base"]), "--concepts", workdir["heldout"][0],
            "--rank", "2", "--out", str(out),
        ]) == EXIT_OK
        adapter = out / "adapter.vt"
        assert cli.main(["inspect", str(adapter)]) == EXIT_OK

        raw = bytearray(adapter.read_bytes())
        (header_len,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + header_len].decode())
        entry = next(v for k, v in header.items() if k.endswith(".a1"))
        offset = 8 + header_len + entry["byte_offset"]
        raw[offset] ^= 0xFF
        tampered = tmp_path / "tampered.vt"
        tampered.write_bytes(bytes(raw))
        assert cli.main(["inspect", str(tampered)], ) == EXIT_CORRUPT

    def test_numeric_failure_maps_to_exit_4(self, workdir, monkeypatch):
        from vidlab import numerics, pipeline as pl

        def boom(*a, **k):
            raise numerics.NumericFailure("diverged")

        monkeypatch.setattr(pl, "personalize", boom)
        code = cli.main([
            "personalize", "--config", str(workdir["config"]),
            "--base", str(workdir["base"]), "--concepts", workdir["heldout"][0],
        ])
        assert code == cli.EXIT_NUMERIC
