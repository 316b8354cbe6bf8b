import json
import os

import numpy as np
import pytest

from had_splat import io
from had_splat.cli import main

SMALL_SCENE = {"scene_kind": "textured_room", "num_gaussians": 50, "num_input_views": 4, "num_target_views": 3,
               "num_test_views": 2, "image_size": [32, 32], "seed": 3}
SMALL_TRAIN = {"total_iters": 40, "num_gaussians": 40, "mask_threshold": 0.08}


def _json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _json(d / "scene_cfg.json", SMALL_SCENE)
    assert main(["scene", "--config", cfg, "--out", str(d / "scene")]) == 0
    return d


def test_no_command_and_bad_flags_are_usage_errors(capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["fuse", "x", "--method", "median"]) == 1
    assert main(["scene"]) == 1  # --out missing
    assert "--out" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "missing"), str(tmp_path / "ck")]) == 2
    bad = _json(tmp_path / "bad.json", {"total_iters": 10, "no_such_field": 1})
    assert main(["train", str(tmp_path), "--config", bad, "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "stack").mkdir()
    (tmp_path / "stack" / "version_0.ppm").write_bytes(b"P6\n4 ")
    io.write_pfm(tmp_path / "stack" / "score_0.pfm", np.zeros((4, 4), np.float32))
    assert main(["fuse", str(tmp_path / "stack")]) == 2
    assert "height" in capsys.readouterr().err


def test_scene_command_writes_views(scene_dir):
    gt, views, spec = io.load_scene(scene_dir / "scene")
    assert spec.to_dict() == dict(SMALL_SCENE, image_size=[32, 32])
    assert len(views.views) == 9 and len(gt) == 50
    assert (scene_dir / "scene" / "view_0000.ppm").exists()


@pytest.mark.parametrize("fmt", ["pfm", "ppm"])
def test_fuse_single_version_is_byte_identical(tmp_path, fmt):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(6, 5, 3)).astype(np.float32)
    io.write_image(tmp_path / f"version_0.{fmt}", img, fmt)
    io.write_pfm(tmp_path / "score_0.pfm", rng.uniform(size=(6, 5)).astype(np.float32))
    for method in ("argmin", "weighted"):
        out = tmp_path / method
        assert main(["fuse", str(tmp_path), "--method", method, "--out", str(out)]) == 0
        assert (out / f"fused.{fmt}").read_bytes() == (tmp_path / f"version_0.{fmt}").read_bytes()
        assert (out / "fused_score.pfm").read_bytes() == (tmp_path / "score_0.pfm").read_bytes()


def test_fuse_picks_lowest_score(tmp_path):
    a, b = np.zeros((3, 3, 3), np.float32), np.ones((3, 3, 3), np.float32)
    sa, sb = np.full((3, 3), 0.2, np.float32), np.full((3, 3), 0.1, np.float32)
    sa[0, 0] = 0.0
    for k, (img, s) in enumerate(((a, sa), (b, sb))):
        io.write_pfm(tmp_path / f"version_{k}.pfm", img)
        io.write_pfm(tmp_path / f"score_{k}.pfm", s)
    assert main(["fuse", str(tmp_path)]) == 0
    fused = io.read_pfm(tmp_path / "fused.pfm")
    assert np.all(fused[0, 0] == 0) and np.all(fused[1:, :] == 1)


def test_train_eval_triplets_fit_score(scene_dir):
    d = scene_dir
    scene = str(d / "scene")
    cfg = _json(d / "train_cfg.json", dict(SMALL_TRAIN, pipeline_mode="had_ms", score_source="oracle"))
    assert main(["train", scene, "--config", cfg, "--seed", "1", "--out", str(d / "run"), "--dump-rounds"]) == 0
    assert io.read_metrics_csv(d / "run" / "metrics.csv")[0]["method"] == "had_ms"
    assert len(io.read_json(d / "run" / "augmentation_log.json")) > 0
    assert (d / "run" / "round_000" / "slot_00_score.pfm").exists()
    ck = str(d / "run" / "final")
    assert main(["eval", scene, ck, "--roles", "test,target", "--out", str(d / "eval.csv")]) == 0
    assert len(io.read_metrics_csv(d / "eval.csv")) == 5
    assert main(["triplets", scene, ck, "--seed", "2", "--out", str(d / "tri")]) == 0
    assert len(os.listdir(d / "tri")) == 5
    model_path = str(d / "scorer.json")
    assert main(["fit-scorer", scene, ck, str(d / "tri"), "--out", model_path]) == 0
    assert main(["score", scene, ck, str(d / "tri"), "--scorer", model_path, "--threshold", "0.05"]) == 0
    pred = io.read_pfm(d / "tri" / "view_0004" / "pred_score.pfm")
    assert pred.shape == (32, 32) and pred.min() >= 0
    assert main(["augment", scene, ck, "--config", cfg, "--out", str(d / "aug")]) == 0
    assert (d / "aug" / "round_000" / "slot_00_fused.ppm").exists()


def test_train_is_deterministic(scene_dir):
    d = scene_dir
    cfg = _json(d / "splat_cfg.json", dict(SMALL_TRAIN, pipeline_mode="splat_only"))
    for name in ("a", "b"):
        assert main(["train", str(d / "scene"), "--config", cfg, "--seed", "4", "--out", str(d / name)]) == 0
    for f in ("metrics.csv", "loss.csv"):
        assert io.csv_body(d / "a" / f) == io.csv_body(d / "b" / f)
    assert (d / "a" / "final.npz").read_bytes() == (d / "b" / "final.npz").read_bytes()
