"""What-if service endpoints: sessions, mask semantics, predict payloads."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from irlcast.scene import load_scenario
from irlcast.service import create_app


@pytest.fixture(scope="module")
def client(tiny_workdir):
    app = create_app(tiny_workdir["corpus"], tiny_workdir["stage1"],
                     tiny_workdir["stage2"], tiny_workdir["cfg"])
    with TestClient(app) as c:
        yield c


def test_health(client):
    a = client.get("/api/health")
    b = client.get("/api/health")
    assert a.status_code == 200
    assert a.json()["status"] == "ok"
    assert a.json() == b.json()


def test_unknown_path_is_json_404(client):
    r = client.get("/api/nope")
    assert r.status_code == 404
    assert "error" in r.json()


def test_scenario_listing_and_round_trip(client, tiny_workdir):
    ids = client.get("/api/scenarios").json()["scenarios"]
    assert len(ids) == 6
    doc = client.get(f"/api/scenarios/{ids[0]}").json()
    import os
    path = os.path.join(tiny_workdir["corpus"], f"{ids[0]}.json")
    on_disk = json.loads(open(path).read())
    assert doc == on_disk
    assert client.get("/api/scenarios/missing").status_code == 404


def test_session_mask_semantics(client, tiny_workdir):
    scenario = load_scenario(tiny_workdir["scenario"])
    sid = client.post("/api/sessions",
                      json={"scenario_id": scenario.id}).json()["session_id"]
    on = np.argwhere(scenario.drivable_mask)
    r, c = map(int, on[0])
    out = client.post(f"/api/sessions/{sid}/mask",
                      json={"blocked_cells": [[r, c]]}).json()
    assert out["blocked_cells"] == [[r, c]]

    # revert restores the base mask
    out = client.post(f"/api/sessions/{sid}/mask",
                      json={"revert": [[r, c]]}).json()
    assert out["blocked_cells"] == []

    # blocking an already-undrivable cell is a flagged no-op
    off = np.argwhere(~scenario.drivable_mask)
    r2, c2 = map(int, off[0])
    out = client.post(f"/api/sessions/{sid}/mask",
                      json={"blocked_cells": [[r2, c2]]}).json()
    assert out["noop_cells"] == [[r2, c2]]
    assert out["blocked_cells"] == []

    bad = client.post(f"/api/sessions/{sid}/mask",
                      json={"blocked_cells": [[99, 0]]})
    assert bad.status_code == 422
    assert "(99,0)" in bad.json()["message"]


def test_unknown_session_and_scenario(client):
    assert client.post("/api/sessions",
                       json={"scenario_id": "ghost"}).status_code == 404
    assert client.post("/api/sessions/none/mask", json={}).status_code == 404
    assert client.post("/api/sessions/none/predict", json={}).status_code == 404


def test_predict_payload_consistency_and_determinism(client, tiny_workdir):
    ids = client.get("/api/scenarios").json()["scenarios"]
    sid = client.post("/api/sessions", json={"scenario_id": ids[1]}).json()["session_id"]
    cfg = tiny_workdir["cfg"]
    a = client.post(f"/api/sessions/{sid}/predict", json={"seed": 9}).json()
    b = client.post(f"/api/sessions/{sid}/predict", json={"seed": 9}).json()
    assert a == b

    assert abs(sum(a["probabilities"]) - 1.0) <= 1e-9
    assert len(a["reward"]) == cfg.coarse_side
    assert all(len(row) == cfg.coarse_side for row in a["reward"])
    assert len(a["svf"]) == cfg.coarse_side
    for traj in a["trajectories"]:
        assert len(traj) == cfg.t_f
    assert len(a["plans"]) <= cfg.plan_payload_limit
    assert a["decimated"] == (cfg.oversample > cfg.plan_payload_limit)


def test_sessions_are_isolated(client, tiny_workdir):
    scenario = load_scenario(tiny_workdir["scenario"])
    s1 = client.post("/api/sessions",
                     json={"scenario_id": scenario.id}).json()["session_id"]
    s2 = client.post("/api/sessions",
                     json={"scenario_id": scenario.id}).json()["session_id"]
    on = np.argwhere(scenario.drivable_mask)
    r, c = map(int, on[3])
    client.post(f"/api/sessions/{s1}/mask", json={"blocked_cells": [[r, c]]})
    out2 = client.post(f"/api/sessions/{s2}/mask", json={}).json()
    assert out2["blocked_cells"] == []
    # base scenario untouched on disk/service
    doc = client.get(f"/api/scenarios/{scenario.id}").json()
    assert doc["drivable_mask"][r][c] is True


def test_predict_without_checkpoints_is_409(tiny_workdir):
    app = create_app(tiny_workdir["corpus"], None, None, tiny_workdir["cfg"])
    with TestClient(app) as c:
        ids = c.get("/api/scenarios").json()["scenarios"]
        sid = c.post("/api/sessions", json={"scenario_id": ids[0]}).json()["session_id"]
        r = c.post(f"/api/sessions/{sid}/predict", json={"seed": 0})
        assert r.status_code == 409


def test_blocked_prediction_differs_and_masks_apply(client, tiny_workdir):
    scenario = load_scenario(tiny_workdir["scenario"])
    sid = client.post("/api/sessions",
                      json={"scenario_id": scenario.id}).json()["session_id"]
    base = client.post(f"/api/sessions/{sid}/predict", json={"seed": 3}).json()

    # block a handful of drivable cells ahead of the agent
    cells = [[int(r), int(c)] for r, c in np.argwhere(scenario.drivable_mask)
             if c > scenario.grid_side // 2 + 5][:8]
    client.post(f"/api/sessions/{sid}/mask", json={"blocked_cells": cells})
    blocked = client.post(f"/api/sessions/{sid}/predict", json={"seed": 3}).json()
    assert blocked["blocked_cells"] == sorted(map(list, map(tuple, cells)))
    assert blocked["reward"] != base["reward"]
