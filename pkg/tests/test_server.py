"""Teleop session semantics and the annotation HTTP API."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from pressfit import geometry as geo
from pressfit.data import load_trajectory, save_trajectory
from pressfit.env import KinematicEnv, get_task
from pressfit.errors import BadConfig
from pressfit.pipeline.collect import run_expert_episode
from pressfit.pipeline.server import (SNAPSHOT_RING, UNDO_FRAMES,
                                      TeleopSession, build_app,
                                      scene_from_observation,
                                      validate_indices)

STEP = {"type": "action", "dpos": [0.004, 0.0, -0.002],
        "drot": [0.0, 0.0, 0.01], "grip": -1.0}


def fresh_session(tmp_path, seed=11):
    s = TeleopSession(tmp_path)
    replies = s.handle({"type": "reset", "task": "one_peg", "seed": seed})
    assert replies[0]["type"] == "state" and replies[0]["step"] == 0
    return s


# -- session core -----------------------------------------------------------


def test_state_message_fields(tmp_path):
    s = fresh_session(tmp_path)
    msg = s.handle(STEP)[0]
    assert msg["type"] == "state"
    assert set(msg) >= {"ee", "parts", "receptacles", "step", "done", "success"}
    assert len(msg["ee"]["pos"]) == 3 and len(msg["ee"]["quat"]) == 4
    assert msg["parts"][0]["kind"] in ("round", "square")
    assert msg["step"] == 1 and msg["done"] is False


def test_incremental_action_moves_relative(tmp_path):
    s = fresh_session(tmp_path)
    before = np.array(s.env.state.ee_pos)
    s.handle({"type": "action", "dpos": [0.004, -0.002, 0.001],
              "drot": [0.0, 0.0, 0.0], "grip": -1.0})
    after = np.array(s.env.state.ee_pos)
    assert np.allclose(after - before, [0.004, -0.002, 0.001], atol=1e-12)


def test_undo_restores_snapshot_bit_exactly(tmp_path):
    s = fresh_session(tmp_path)
    snap_at = {}
    for _ in range(15):
        s.handle(STEP)
        snap_at[len(s.act_log)] = s.env.snapshot()
    replies = s.handle({"type": "undo"})
    assert replies[0]["step"] == 15 - UNDO_FRAMES == 5
    assert s.env.snapshot() == snap_at[5]
    assert len(s.obs_log) == 5 and len(s.act_log) == 5


def test_undo_near_start_clamps_to_zero(tmp_path):
    s = fresh_session(tmp_path)
    start = s.env.snapshot()
    for _ in range(3):
        s.handle(STEP)
    replies = s.handle({"type": "undo"})
    assert replies[0]["step"] == 0
    assert s.env.snapshot() == start
    assert s.obs_log == [] and s.act_log == []


def test_repeated_undo_within_ring(tmp_path):
    s = fresh_session(tmp_path)
    snaps = {0: s.env.snapshot()}
    for _ in range(2 * UNDO_FRAMES):
        s.handle(STEP)
        snaps[len(s.act_log)] = s.env.snapshot()
    assert s.handle({"type": "undo"})[0]["step"] == UNDO_FRAMES
    assert s.handle({"type": "undo"})[0]["step"] == 0
    assert s.env.snapshot() == snaps[0]


def test_undo_then_continue_keeps_recording_consistent(tmp_path):
    s = fresh_session(tmp_path, seed=21)
    for _ in range(15):
        s.handle(STEP)
    s.handle({"type": "undo"})
    for _ in range(2):
        s.handle(STEP)
    saved = s.handle({"type": "save"})[0]["saved"]
    traj = load_trajectory(saved["path"])
    assert len(traj) == 7
    env = KinematicEnv(get_task("one_peg"))
    env.reset(traj.seed)
    for a in traj.actions:
        env.step(a)
    assert np.array_equal(env.state.ee_pos, s.env.state.ee_pos)
    assert env.state.step_count == s.env.state.step_count


def test_save_reports_success_flag_and_path(tmp_path):
    s = fresh_session(tmp_path)
    s.handle(STEP)
    reply = s.handle({"type": "save"})[0]
    assert reply["type"] == "state"
    saved = reply["saved"]
    assert saved["success"] is False
    traj = load_trajectory(saved["path"])
    assert traj.source == "teleop" and len(traj) == 1


def test_discard_restarts_identical_episode(tmp_path):
    s = fresh_session(tmp_path, seed=33)
    first = s.handle({"type": "discard"})  # no steps yet: same state back
    for _ in range(6):
        s.handle(STEP)
    replies = s.handle({"type": "discard"})
    assert replies[0] == first[0]
    assert replies[0]["step"] == 0
    assert s.obs_log == [] and s.act_log == []


def test_command_errors(tmp_path):
    s = TeleopSession(tmp_path)
    assert s.handle({"type": "action", **STEP})[0]["type"] == "error"
    assert s.handle({"type": "undo"})[0]["type"] == "error"
    assert s.handle({"type": "save"})[0]["type"] == "error"
    assert s.handle({"type": "warp"})[0]["type"] == "error"
    assert s.handle("nonsense")[0]["type"] == "error"
    assert s.handle({"type": "reset", "task": "one_peg"})[0]["type"] == "error"
    s.handle({"type": "reset", "task": "one_peg", "seed": 1})
    bad = dict(STEP, dpos=[0.0, 0.0])
    replies = s.handle(bad)
    assert replies[0]["type"] == "error"
    assert replies[1]["type"] == "state"      # state still follows when live
    assert s.handle({"type": "save"})[0]["type"] == "error"  # nothing recorded
    nan = dict(STEP, dpos=[float("nan"), 0.0, 0.0])
    assert s.handle(nan)[0]["type"] == "error"


def test_ring_capacity_consistent():
    assert SNAPSHOT_RING >= UNDO_FRAMES + 1


# -- scene decoding ---------------------------------------------------------


def test_scene_from_observation_matches_state():
    env = KinematicEnv(get_task("one_peg"))
    env.reset(5)
    scene = scene_from_observation(env.observe(), n_parts=1)
    s = env.state
    assert np.allclose(scene["ee"]["pos"], s.ee_pos, atol=1e-12)
    dq = geo.quat_multiply(geo.quat_canonical(np.array(scene["ee"]["quat"])),
                           geo.quat_conjugate(geo.quat_canonical(s.ee_quat)))
    assert abs(abs(dq[0]) - 1.0) < 1e-9
    assert scene["ee"]["gripper_width"] == s.gripper_width
    p = scene["parts"][0]
    assert np.allclose(p["pos"], s.parts[0].pos, atol=1e-12)
    assert p["kind"] == s.parts[0].kind and p["active"] == s.parts[0].active
    with pytest.raises(BadConfig):
        scene_from_observation(env.observe(), n_parts=0)


# -- websocket transport ----------------------------------------------------


def test_ws_protocol_roundtrip(tmp_path):
    client = TestClient(build_app(tmp_path))
    with client.websocket_connect("/teleop") as ws:
        ws.send_json({"type": "reset", "task": "one_peg", "seed": 2})
        state = ws.receive_json()
        assert state["type"] == "state" and state["step"] == 0
        for i in range(15):
            ws.send_json(STEP)
            state = ws.receive_json()
            assert state["step"] == i + 1
        ws.send_json({"type": "undo"})
        assert ws.receive_json()["step"] == 5
        ws.send_json({"type": "save"})
        state = ws.receive_json()
        assert state["saved"]["success"] is False
        path = state["saved"]["path"]
    assert load_trajectory(path).source == "teleop"


def test_ws_unknown_command_reports_error(tmp_path):
    client = TestClient(build_app(tmp_path))
    with client.websocket_connect("/teleop") as ws:
        ws.send_json({"type": "noop"})
        assert ws.receive_json()["type"] == "error"


# -- annotation HTTP API ----------------------------------------------------


@pytest.fixture()
def populated(tmp_path):
    demo = run_expert_episode("one_peg", 4)
    path = save_trajectory(demo, tmp_path)
    return TestClient(build_app(tmp_path)), path, demo


def test_http_list_and_detail(populated):
    client, path, demo = populated
    listing = client.get("/trajectories").json()["trajectories"]
    assert len(listing) == 1
    row = listing[0]
    assert row["id"] == path.stem
    assert row["task"] == "one_peg" and row["success"] is True
    assert row["length"] == len(demo)
    assert row["n_annotations"] == len(demo.bottleneck_indices)

    detail = client.get(f"/trajectories/{path.stem}").json()
    assert detail["bottleneck_indices"] == list(demo.bottleneck_indices)
    assert len(detail["frames"]) == len(demo)
    frame0 = detail["frames"][0]
    assert np.allclose(frame0["ee"]["pos"], demo.observations[0][:3])
    assert len(detail["receptacles"]) == 1

    assert client.get("/trajectories/missing").status_code == 404


def test_http_annotation_roundtrip(populated):
    client, path, demo = populated
    r = client.put(f"/trajectories/{path.stem}/annotations",
                   json={"indices": [2, 9]})
    assert r.status_code == 200 and r.json()["indices"] == [2, 9]
    detail = client.get(f"/trajectories/{path.stem}").json()
    assert detail["bottleneck_indices"] == [2, 9]
    assert load_trajectory(path).bottleneck_indices == [2, 9]
    # id (filename) survives the edit so clients can keep their handle
    assert path.exists()


def test_http_annotation_validation(populated):
    client, path, demo = populated
    url = f"/trajectories/{path.stem}/annotations"
    for bad in ([3, 2], [2, 2], [-1], [len(demo)], ["x"], [True], "2,3"):
        assert client.put(url, json={"indices": bad}).status_code == 400, bad
    assert client.put("/trajectories/zzz/annotations",
                      json={"indices": []}).status_code == 404
    # clearing annotations with an empty list is legitimate
    assert client.put(url, json={"indices": []}).status_code == 200
    assert load_trajectory(path).bottleneck_indices == []


def test_validate_indices_oracle():
    assert validate_indices([0, 3, 7], 8) == [0, 3, 7]
    assert validate_indices([], 5) == []
    for bad in ([1, 1], [2, 1], [8], [-1], [0.5], None):
        with pytest.raises(BadConfig):
            validate_indices(bad, 8)
