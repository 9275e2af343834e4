"""Teleop and annotation server.

One WebSocket endpoint drives a per-connection environment session with
undo support; a small HTTP API lists stored trajectories, serves decoded
per-frame scene states for the annotation scrubber, and persists edited
bottleneck indices.  All simulation happens here; clients only render the
reported state.
"""

import json
from collections import deque
from pathlib import Path

import numpy as np

from .. import geometry as geo
from ..data import Trajectory, list_trajectories, load_trajectory, save_trajectory
from ..env import MAX_PARTS, PROPRIO_DIM, KinematicEnv, get_task, make_action
from ..errors import BadConfig

UNDO_FRAMES = 10
# ring depth: enough for two full undos before clamping to the oldest entry
SNAPSHOT_RING = 2 * UNDO_FRAMES + 1


def scene_from_observation(obs, n_parts: int) -> dict:
    """Decode one stored observation row into renderable poses."""
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if n_parts < 1 or n_parts > MAX_PARTS:
        raise BadConfig(f"n_parts must be 1..{MAX_PARTS}")
    parts = []
    for i in range(n_parts):
        base = PROPRIO_DIM + 11 * i
        parts.append({
            "pos": obs[base:base + 3].tolist(),
            "quat": geo.decode_rot6d(obs[base + 3:base + 9]).tolist(),
            "kind": "square" if obs[base + 9] > 0.5 else "round",
            "active": bool(obs[base + 10] > 0.5),
        })
    return {
        "ee": {"pos": obs[0:3].tolist(),
               "quat": geo.decode_rot6d(obs[3:9]).tolist(),
               "gripper_width": float(obs[15])},
        "parts": parts,
    }


def receptacle_list(task_spec) -> list:
    active_kinds = [p.kind for p in task_spec.parts if p.active]
    return [{"kind": k, "position": list(r.position), "yaw": r.yaw,
             "tol_pos": r.tol_pos, "tol_ang": r.tol_ang, "symmetry": r.symmetry}
            for k, r in zip(active_kinds, task_spec.receptacles)]


def state_message(env, extra=None) -> dict:
    s = env.state
    msg = {
        "type": "state",
        "ee": {"pos": s.ee_pos.tolist(), "quat": s.ee_quat.tolist(),
               "gripper_width": s.gripper_width, "closed": s.gripper_closed},
        "parts": [{"kind": p.kind, "pos": p.pos.tolist(), "quat": p.quat.tolist(),
                   "active": p.active, "assembled": p.assembled,
                   "attached": p.attached is not None} for p in s.parts],
        "receptacles": receptacle_list(env.task),
        "step": s.step_count,
        "done": env.done,
        "success": env.is_success(),
    }
    if extra:
        msg.update(extra)
    return msg


def _error(message: str) -> dict:
    return {"type": "error", "message": message}


def _vec3(msg, key):
    v = msg.get(key)
    if (not isinstance(v, (list, tuple)) or len(v) != 3
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                       for x in v)):
        raise BadConfig(f"{key} must be a list of 3 numbers")
    out = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise BadConfig(f"{key} must be finite")
    return out


class TeleopSession:
    """Command handler behind one WebSocket connection.

    Keeps the environment, the recording buffers, and a ring of the last
    SNAPSHOT_RING snapshots.  Undo restores the snapshot UNDO_FRAMES steps
    back (clamped to the oldest retained) and rewinds the recording to match,
    so a saved trajectory always replays cleanly.
    """

    def __init__(self, root, env_factory=None):
        self.root = root
        self.env_factory = env_factory or (
            lambda task, randomness: KinematicEnv(get_task(task, randomness)))
        self.env = None
        self.seed = None
        self.obs_log = []
        self.act_log = []
        self.snapshots = deque(maxlen=SNAPSHOT_RING)

    def handle(self, msg) -> list:
        if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
            return [_error("commands are objects with a string 'type' field")]
        kind = msg["type"]
        handler = getattr(self, f"_cmd_{kind.replace('-', '_')}", None)
        if handler is None:
            return [_error(f"unknown command {kind!r}")]
        try:
            return handler(msg)
        except BadConfig as e:
            replies = [_error(str(e))]
            if self.env is not None:
                replies.append(state_message(self.env))
            return replies

    def _need_env(self):
        if self.env is None:
            raise BadConfig("no active episode; send reset first")

    def _begin(self):
        self.obs_log, self.act_log = [], []
        self.snapshots = deque([(0, self.env.snapshot())], maxlen=SNAPSHOT_RING)

    def _cmd_reset(self, msg) -> list:
        task = msg.get("task", "one_peg")
        seed = msg.get("seed")
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise BadConfig("reset needs an integer seed")
        randomness = msg.get("randomness", "low")
        self.env = self.env_factory(task, randomness)
        self.env.reset(seed)
        self.seed = seed
        self._begin()
        return [state_message(self.env)]

    def _cmd_action(self, msg) -> list:
        self._need_env()
        if self.env.done:
            raise BadConfig("episode is done; reset or save")
        dpos = _vec3(msg, "dpos")
        drot = _vec3(msg, "drot")
        grip = msg.get("grip")
        if (not isinstance(grip, (int, float)) or isinstance(grip, bool)
                or not np.isfinite(grip)):
            raise BadConfig("grip must be a finite number (sign selects open/closed)")
        s = self.env.state
        angle = float(np.linalg.norm(drot))
        dq = geo.quat_from_axis_angle(drot / angle, angle) if angle > 1e-12 \
            else np.array([1.0, 0.0, 0.0, 0.0])
        target_quat = geo.quat_canonical(geo.quat_multiply(dq, s.ee_quat))
        action = make_action(s.ee_pos + dpos, target_quat, float(grip))
        self.obs_log.append(self.env.observe())
        self.env.step(action)
        self.act_log.append(action)
        self.snapshots.append((len(self.act_log), self.env.snapshot()))
        return [state_message(self.env)]

    def _cmd_undo(self, msg) -> list:
        self._need_env()
        current = len(self.act_log)
        target = max(0, current - UNDO_FRAMES)
        held = {step: snap for step, snap in self.snapshots}
        if target not in held:
            target = min(held)    # ring already dropped older frames
        self.env.restore(held[target])
        del self.obs_log[target:]
        del self.act_log[target:]
        while self.snapshots and self.snapshots[-1][0] > target:
            self.snapshots.pop()
        return [state_message(self.env)]

    def _cmd_save(self, msg) -> list:
        self._need_env()
        if not self.act_log:
            raise BadConfig("nothing recorded yet")
        traj = Trajectory(task=self.env.task.name, source="teleop",
                          seed=self.seed, success=self.env.is_success(),
                          randomness=self.env.task.randomness,
                          observations=np.array(self.obs_log),
                          actions=np.array(self.act_log))
        path = save_trajectory(traj, self.root)
        saved = {"id": path.stem, "path": str(path), "success": traj.success}
        return [state_message(self.env, extra={"saved": saved})]

    def _cmd_discard(self, msg) -> list:
        self._need_env()
        self.env.reset(self.seed)     # deterministic: same seed, same episode
        self._begin()
        return [state_message(self.env)]


# -- annotation HTTP API ----------------------------------------------------


def _index(root) -> dict:
    return {p.stem: p for p in list_trajectories(root)}


def _summary(path: Path) -> dict:
    traj = load_trajectory(path)
    return {"id": path.stem, "task": traj.task, "source": traj.source,
            "seed": traj.seed, "success": traj.success,
            "randomness": traj.randomness, "length": len(traj),
            "n_annotations": len(traj.bottleneck_indices)}


def _detail(path: Path) -> dict:
    traj = load_trajectory(path)
    n_parts = len(get_task(traj.task).parts)
    frames = [scene_from_observation(o, n_parts) for o in traj.observations]
    out = _summary(path)
    out["bottleneck_indices"] = list(traj.bottleneck_indices)
    out["receptacles"] = receptacle_list(get_task(traj.task))
    out["frames"] = frames
    return out


def validate_indices(indices, length: int) -> list:
    if not isinstance(indices, list):
        raise BadConfig("indices must be a list")
    for i in indices:
        if not isinstance(i, int) or isinstance(i, bool):
            raise BadConfig("indices must be integers")
        if not (0 <= i < length):
            raise BadConfig(f"index {i} outside [0, {length})")
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise BadConfig("indices must be sorted and unique")
    return [int(i) for i in indices]


def put_annotations(path: Path, indices) -> list:
    """Rewrite the stored file's bottleneck indices in place.

    The filename (and its embedded content hash) is kept stable so clients
    can hold on to trajectory ids across edits.
    """
    doc = json.loads(path.read_bytes())
    idx = validate_indices(indices, len(doc["steps"]))
    doc["bottleneck_indices"] = idx
    path.write_bytes(json.dumps(doc, separators=(",", ":"),
                                allow_nan=False).encode())
    return idx


def build_app(root, env_factory=None):
    """FastAPI app exposing the teleop WebSocket and the annotation API."""
    from fastapi import FastAPI, WebSocket, WebSocketDisconnect
    from fastapi.responses import JSONResponse

    root = Path(root)
    app = FastAPI()

    @app.websocket("/teleop")
    async def teleop(ws: WebSocket):
        await ws.accept()
        session = TeleopSession(root, env_factory)
        try:
            while True:
                try:
                    msg = await ws.receive_json()
                except json.JSONDecodeError:
                    await ws.send_json(_error("commands must be JSON objects"))
                    continue
                for reply in session.handle(msg):
                    await ws.send_json(reply)
        except WebSocketDisconnect:
            pass

    @app.get("/trajectories")
    def list_all():
        return {"trajectories": [_summary(p) for p in _index(root).values()]}

    @app.get("/trajectories/{traj_id}")
    def detail(traj_id: str):
        path = _index(root).get(traj_id)
        if path is None:
            return JSONResponse({"error": f"unknown trajectory {traj_id!r}"},
                                status_code=404)
        return _detail(path)

    @app.put("/trajectories/{traj_id}/annotations")
    def annotate(traj_id: str, body: dict):
        path = _index(root).get(traj_id)
        if path is None:
            return JSONResponse({"error": f"unknown trajectory {traj_id!r}"},
                                status_code=404)
        try:
            idx = put_annotations(path, body.get("indices"))
        except BadConfig as e:
            return JSONResponse({"error": str(e)}, status_code=400)
        return {"id": traj_id, "indices": idx}

    return app


def serve(root, host: str = "127.0.0.1", port: int = 8800):
    """Run the server until interrupted."""
    import uvicorn

    root = Path(root)
    if not root.exists():
        raise BadConfig(f"data root {root} does not exist")
    uvicorn.run(build_app(root), host=host, port=port, log_level="warning")
