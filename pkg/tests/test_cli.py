"""CLI command contracts: determinism, error shape, and render output."""

import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from irlcast.cli import main
from irlcast.scene import load_scenario

SVG_NS = {"svg": "http://www.w3.org/2000/svg"}


def run(args):
    return main(args)


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_gen_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        assert run(["gen", "--kind", "t_junction", "--count", "3",
                    "--seed", "3", "--out", str(out)]) == 0
    names = sorted(os.listdir(a))
    assert len([n for n in names if n != "run_config.json"]) == 3
    for name in names:
        assert read(a / name) == read(b / name)


def test_gen_rejects_bad_kind(tmp_path, capsys):
    assert run(["gen", "--kind", "loop", "--out", str(tmp_path / "x")]) == 1
    err = capsys.readouterr().err.strip()
    doc = json.loads(err.splitlines()[-1])
    assert doc["error"] == "bad-kind"


def test_config_file_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 1, "bogus_knob": 2}))
    assert run(["gen", "--kind", "straight", "--config", str(cfg),
                "--out", str(tmp_path / "o")]) == 1
    doc = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "bogus_knob" in doc["message"]


def test_mask_sets_cells_undrivable(tmp_path, tiny_workdir):
    out = tmp_path / "masked.json"
    src = load_scenario(tiny_workdir["scenario"])
    on = np.argwhere(src.drivable_mask)
    cells = f"{on[0][0]},{on[0][1]};{on[1][0]},{on[1][1]}"
    assert run(["mask", "--scenario", tiny_workdir["scenario"],
                "--cells", cells, "--out", str(out)]) == 0
    masked = load_scenario(str(out))
    assert not masked.drivable_mask[on[0][0], on[0][1]]
    assert not masked.drivable_mask[on[1][0], on[1][1]]
    diff = src.drivable_mask != masked.drivable_mask
    assert diff.sum() == 2


def test_mask_rejects_out_of_range(tmp_path, tiny_workdir, capsys):
    assert run(["mask", "--scenario", tiny_workdir["scenario"],
                "--cells", "99,0", "--out", str(tmp_path / "m.json")]) == 1
    doc = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert doc["error"] == "cell-out-of-range"


def test_predict_then_render_svg_layers(tmp_path, tiny_workdir):
    pred_path = tmp_path / "pred.json"
    assert run(["predict", "--scenario", tiny_workdir["scenario"],
                "--stage1", tiny_workdir["stage1"],
                "--stage2", tiny_workdir["stage2"],
                "--config", tiny_workdir["config"],
                "--seed", "4", "--out", str(pred_path)]) == 0
    payload = json.loads(pred_path.read_text())
    assert abs(sum(payload["probabilities"]) - 1.0) <= 1e-9
    assert len(payload["trajectories"]) == payload["k"]

    svg_path = tmp_path / "scene.svg"
    assert run(["render", "--scenario", tiny_workdir["scenario"],
                "--stage1", tiny_workdir["stage1"],
                "--stage2", tiny_workdir["stage2"],
                "--config", tiny_workdir["config"],
                "--seed", "4", "--out", str(svg_path)]) == 0
    root = ET.parse(svg_path).getroot()
    ids = {el.get("id") for el in root.iter() if el.get("id")}
    for layer in ("lanes", "drivable", "reward", "plans", "predictions"):
        assert layer in ids, layer
    pred_group = root.findall(".//svg:g[@id='predictions']", SVG_NS)[0]
    polylines = pred_group.findall(".//svg:path", SVG_NS)
    assert len(polylines) == payload["k"]
    labels = [g for g in root.iter() if g.get("id", "").startswith("prediction-label-")]
    assert len(labels) == payload["k"]


def test_predict_missing_checkpoint_error(tmp_path, tiny_workdir, capsys):
    assert run(["predict", "--scenario", tiny_workdir["scenario"],
                "--stage1", str(tmp_path / "nope.json"),
                "--stage2", tiny_workdir["stage2"],
                "--out", str(tmp_path / "p.json")]) == 1
    doc = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert doc["error"] == "missing-checkpoint"


def test_eval_is_byte_stable(tmp_path, tiny_workdir):
    outs = []
    for name in ("e1.csv", "e2.csv"):
        path = tmp_path / name
        assert run(["eval", "--corpus", tiny_workdir["corpus"],
                    "--stage1", tiny_workdir["stage1"],
                    "--stage2", tiny_workdir["stage2"],
                    "--config", tiny_workdir["config"],
                    "--seed", "2", "--out", str(path)]) == 0
        outs.append(read(path))
    assert outs[0] == outs[1]
    header = outs[0].decode().splitlines()[0]
    assert header == "scenario_id,K,minADE,minFDE,MR,brier_minFDE,P_best,wall_ms"


def test_bench_prints_table(tmp_path, tiny_workdir, capsys):
    assert run(["bench", "--scenario", tiny_workdir["scenario"],
                "--stage1", tiny_workdir["stage1"],
                "--stage2", tiny_workdir["stage2"],
                "--config", tiny_workdir["config"],
                "--repeat", "1"]) == 0
    out = capsys.readouterr().out
    for stage in ("soft_value_iteration", "expected_svf", "sample_plans"):
        assert stage in out
