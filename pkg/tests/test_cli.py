import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from tryonlab import cli, synth, training
from tryonlab.adapters import AdapterSet
from tryonlab.model import ModelConfig, TryOnModel, save_model


def run_cli(*args):
    return cli.main([str(a) for a in args])


def test_usage_error_on_unknown_command(capsys):
    assert run_cli("not-a-command") == cli.EXIT_USAGE


def test_synth_command(tmp_path):
    out = tmp_path / "data"
    code = run_cli("synth", "--n", 8, "--seed", 1, "--out", out,
                   "--canvas", 32, 32)
    assert code == cli.EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest) == 8
    assert (out / "config_echo.yaml").exists()


def test_synth_rerun_reproduces_bitwise(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("synth", "--n", 4, "--seed", 9, "--out", out,
                       "--canvas", 32, 32) == cli.EXIT_OK
    ma = json.loads((a / "manifest.json").read_text())
    for rec in ma:
        for key in ("tryon_path", "person_path", "mask_path"):
            assert (a / rec[key]).read_bytes() == (b / rec[key]).read_bytes()


def test_erase_command_extends_manifest(tmp_path):
    data = tmp_path / "data"
    run_cli("synth", "--n", 3, "--seed", 2, "--out", data, "--canvas", 32, 32)
    out = tmp_path / "erased"
    code = run_cli("erase", "--manifest", data / "manifest.json", "--out", out,
                   "--mode", "traceless", "--trace-strength", "0.05")
    assert code == cli.EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    for rec in manifest:
        for key in ("repainted_person_path", "blended_tryon_path",
                    "trace_mode", "t", "blur_radius"):
            assert key in rec
        assert rec["trace_mode"] == "traceless"
        assert (out / rec["repainted_person_path"]).exists()


def test_erase_missing_manifest_is_data_error(tmp_path):
    code = run_cli("erase", "--manifest", tmp_path / "nope.json",
                   "--out", tmp_path / "o")
    assert code == cli.EXIT_DATA


def test_train_pretrain_then_stage1_and_infer(tmp_path):
    data = tmp_path / "data"
    run_cli("synth", "--n", 6, "--seed", 3, "--out", data, "--canvas", 32, 32)
    erased = tmp_path / "erased"
    run_cli("erase", "--manifest", data / "manifest.json", "--out", erased)

    pre = tmp_path / "pre"
    code = run_cli("train", "--stage", "pretrain", "--manifest",
                   data / "manifest.json", "--out", pre, "--steps", 3,
                   "--batch-size", 2, "--embed-dim", 32, "--depth", 1)
    assert code == cli.EXIT_OK
    base = pre / "base_final.npz"
    assert base.exists()

    s1 = tmp_path / "s1"
    code = run_cli("train", "--stage", "stage1", "--manifest",
                   erased / "manifest.json", "--out", s1, "--steps", 3,
                   "--batch-size", 2, "--model", base)
    assert code == cli.EXIT_OK
    adapters = s1 / "adapters_stage1_final.npz"
    assert adapters.exists()

    manifest = json.loads((data / "manifest.json").read_text())
    person = data / manifest[0]["person_path"]
    out_img = tmp_path / "result" / "r.png"
    code = run_cli("infer", "--person", person, "--prompt",
                   manifest[0]["prompt"], "--seed", 4, "--out", out_img,
                   "--model", base, "--adapters", adapters,
                   "--num-steps", 2)
    assert code == cli.EXIT_OK
    assert out_img.exists()
    assert (out_img.parent / "r_change.png").exists()


def test_train_stage1_without_model_is_usage_error(tmp_path):
    code = run_cli("train", "--stage", "stage1", "--manifest",
                   tmp_path / "m.json", "--out", tmp_path / "o")
    assert code == cli.EXIT_USAGE


def test_stage2_few_shot_flow(tmp_path):
    data = tmp_path / "paired"
    run_cli("synth", "--n", 4, "--seed", 5, "--out", data, "--canvas", 32, 32,
            "--paired")
    erased = tmp_path / "erased"
    run_cli("erase", "--manifest", data / "manifest.json", "--out", erased)
    # erase keeps the object_path fields from the source manifest
    manifest = json.loads((erased / "manifest.json").read_text())
    assert all(r.get("object_path") for r in manifest)

    pre = tmp_path / "pre"
    run_cli("train", "--stage", "pretrain", "--manifest", data / "manifest.json",
            "--out", pre, "--steps", 3, "--batch-size", 2,
            "--embed-dim", 32, "--depth", 1)
    s2 = tmp_path / "s2"
    code = run_cli("train", "--stage", "stage2", "--manifest",
                   erased / "manifest.json", "--out", s2, "--steps", 3,
                   "--batch-size", 2, "--model", pre / "base_final.npz",
                   "--init", "scratch", "--few-shot", 2)
    assert code == cli.EXIT_OK
    assert (s2 / "adapters_stage2_final.npz").exists()


def test_eval_command(tmp_path, scene64):
    _, person, lay = scene64
    rng = np.random.default_rng(1)
    from tryonlab import imageio

    results = []
    root = tmp_path / "results"
    for i, cls in enumerate(("hat", "bag")):
        obj = synth.random_object_spec(rng, cls, lay, background_mode="white")
        tryon, _ = synth.compose_tryon(person, obj)
        obj_img, _ = synth.render_object_image(obj, person.shape[:2])
        imageio.save_image(root / f"images/{i}_result.png", tryon)
        imageio.save_image(root / f"images/{i}_person.png", person)
        imageio.save_image(root / f"images/{i}_object.png", obj_img)
        results.append({"id": f"pair-{i}", "ok": True, "class": cls,
                        "prompt": synth.prompt_for_class(cls),
                        "result_path": f"images/{i}_result.png",
                        "person_path": f"images/{i}_person.png",
                        "object_path": f"images/{i}_object.png"})
    (root / "results.json").write_text(json.dumps(results))
    report_path = tmp_path / "report.json"
    code = run_cli("eval", "--results", root / "results.json", "--out",
                   report_path)
    assert code == cli.EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["summary"]["g_accuracy"] == 1.0
    assert report["summary"]["n_pairs"] == 2
    assert set(report["per_class"]) == {"hat", "bag"}


def test_eval_missing_image_is_data_error(tmp_path):
    root = tmp_path
    (root / "results.json").write_text(json.dumps([
        {"id": "x", "ok": True, "class": "hat", "prompt": "trying on hat",
         "result_path": "missing.png", "person_path": "missing2.png"}]))
    code = run_cli("eval", "--results", root / "results.json")
    assert code == cli.EXIT_DATA


def test_config_file_section_merge(tmp_path):
    cfg = {"version": 1, "synth": {"n": 5, "canvas": [32, 32], "seed": 7}}
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    out = tmp_path / "out"
    code = run_cli("--config", cfg_path, "synth", "--out", out)
    assert code == cli.EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest) == 5
    echo = yaml.safe_load((out / "config_echo.yaml").read_text())
    assert echo["synth"]["n"] == 5
    assert echo["command"] == "synth"


def test_config_version_mismatch(tmp_path):
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump({"version": 99}))
    code = run_cli("--config", cfg_path, "synth", "--out", tmp_path / "o")
    assert code == cli.EXIT_DATA
