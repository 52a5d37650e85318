"""Scene data model: agents on a uniform time grid, strict JSONL I/O,
canonical agent ordering and finite-difference kinematics.

A scene file is UTF-8 with one JSON object per line:

    {"scene_id": str, "split": "train"|"val"|"test", "dt": number,
     "obs_len": int, "pred_len": int,
     "agents": [{"id": int, "kind": "ego_vehicle"|"pedestrian"|"bicyclist",
                 "xy": [[x, y], ...]}]}

Unknown keys are rejected; numbers round-trip at full precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

AGENT_KINDS = ("ego_vehicle", "pedestrian", "bicyclist")
SPLITS = ("train", "val", "test")

_SCENE_KEYS = {"scene_id", "split", "dt", "obs_len", "pred_len", "agents"}
_AGENT_KEYS = {"id", "kind", "xy"}


class SceneError(ValueError):
    """Malformed or inconsistent scene data."""


@dataclass(frozen=True)
class Agent:
    id: int
    kind: str
    positions: np.ndarray  # (T, 2) float64, step dt; treat as immutable

    def past(self, obs_len: int) -> np.ndarray:
        return self.positions[:obs_len]

    def future(self, obs_len: int, pred_len: int) -> np.ndarray:
        return self.positions[obs_len:obs_len + pred_len]


@dataclass(frozen=True)
class Scene:
    scene_id: str
    split: str
    dt: float
    obs_len: int
    pred_len: int
    agents: tuple[Agent, ...]

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def ego(self) -> Agent:
        for a in self.agents:
            if a.kind == "ego_vehicle":
                return a
        raise SceneError(f"scene {self.scene_id}: no ego_vehicle agent")

    def non_ego(self) -> tuple[Agent, ...]:
        return tuple(a for a in self.agents if a.kind != "ego_vehicle")


@dataclass(frozen=True)
class SplitDataset:
    train: tuple[Scene, ...]
    val: tuple[Scene, ...]
    test: tuple[Scene, ...]

    def split(self, name: str) -> tuple[Scene, ...]:
        if name not in SPLITS:
            raise SceneError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_scenes(self) -> tuple[Scene, ...]:
        return self.train + self.val + self.test


def validate_scene(scene: Scene) -> None:
    """Enforce the scene invariants; raises SceneError naming the scene."""
    sid = scene.scene_id
    if scene.n_agents < 1:
        raise SceneError(f"scene {sid}: no agents")
    if not (scene.dt > 0 and math.isfinite(scene.dt)):
        raise SceneError(f"scene {sid}: invalid dt {scene.dt}")
    if scene.obs_len < 1 or scene.pred_len < 1:
        raise SceneError(f"scene {sid}: obs_len/pred_len must be positive")
    n_ego = sum(1 for a in scene.agents if a.kind == "ego_vehicle")
    if n_ego == 0:
        raise SceneError(f"scene {sid}: missing ego")
    if n_ego > 1:
        raise SceneError(f"scene {sid}: multiple ego agents")
    need = scene.obs_len + scene.pred_len
    seen_ids = set()
    for a in scene.agents:
        if a.kind not in AGENT_KINDS:
            raise SceneError(f"scene {sid}: agent {a.id} has unknown kind {a.kind!r}")
        if a.id in seen_ids:
            raise SceneError(f"scene {sid}: duplicate agent id {a.id}")
        seen_ids.add(a.id)
        pos = a.positions
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise SceneError(f"scene {sid}: agent {a.id} positions must be (T, 2)")
        if pos.shape[0] < need:
            raise SceneError(
                f"scene {sid}: agent {a.id} has {pos.shape[0]} positions, "
                f"needs >= obs_len + pred_len = {need}"
            )
        if not np.isfinite(pos).all():
            raise SceneError(f"scene {sid}: agent {a.id} has non-finite positions")


# ---------------------------------------------------------------------------
# file I/O


def _parse_agent(obj: dict, sid: str, lineno: int) -> Agent:
    if not isinstance(obj, dict) or set(obj) != _AGENT_KEYS:
        raise SceneError(
            f"line {lineno}: scene {sid}: agent record keys {sorted(obj)} "
            f"!= {sorted(_AGENT_KEYS)}"
        )
    if not isinstance(obj["id"], int) or isinstance(obj["id"], bool):
        raise SceneError(f"line {lineno}: scene {sid}: agent id must be an integer")
    xy = obj["xy"]
    if not isinstance(xy, list) or not all(
        isinstance(p, list) and len(p) == 2 and all(isinstance(c, (int, float)) for c in p)
        for p in xy
    ):
        raise SceneError(f"line {lineno}: scene {sid}: agent {obj['id']} xy must be [[x, y], ...]")
    return Agent(id=obj["id"], kind=obj["kind"], positions=np.asarray(xy, dtype=np.float64))


def parse_scene_line(line: str, lineno: int) -> Scene:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as err:
        raise SceneError(f"line {lineno}: not valid JSON ({err.msg})") from None
    if not isinstance(obj, dict) or set(obj) != _SCENE_KEYS:
        got = sorted(obj) if isinstance(obj, dict) else type(obj).__name__
        raise SceneError(f"line {lineno}: scene record keys {got} != {sorted(_SCENE_KEYS)}")
    sid = obj["scene_id"]
    if not isinstance(sid, str):
        raise SceneError(f"line {lineno}: scene_id must be a string")
    if obj["split"] not in SPLITS:
        raise SceneError(f"line {lineno}: scene {sid}: unknown split {obj['split']!r}")
    for key in ("obs_len", "pred_len"):
        if not isinstance(obj[key], int) or isinstance(obj[key], bool):
            raise SceneError(f"line {lineno}: scene {sid}: {key} must be an integer")
    scene = Scene(
        scene_id=sid,
        split=obj["split"],
        dt=float(obj["dt"]),
        obs_len=obj["obs_len"],
        pred_len=obj["pred_len"],
        agents=tuple(_parse_agent(a, sid, lineno) for a in obj["agents"]),
    )
    try:
        validate_scene(scene)
    except SceneError as err:
        raise SceneError(f"line {lineno}: {err}") from None
    return scene


def load_scenes(path) -> SplitDataset:
    """Load and validate a scene file into per-split scene lists."""
    path = Path(path)
    if not path.exists():
        raise SceneError(f"scene file not found: {path}")
    buckets: dict[str, list[Scene]] = {s: [] for s in SPLITS}
    grid = None
    split_ids: dict[str, set[str]] = {s: set() for s in SPLITS}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            scene = parse_scene_line(line, lineno)
            if grid is None:
                grid = (scene.dt, scene.obs_len, scene.pred_len)
            elif grid != (scene.dt, scene.obs_len, scene.pred_len):
                raise SceneError(
                    f"line {lineno}: scene {scene.scene_id}: inconsistent grid "
                    f"(dt, obs_len, pred_len) {(scene.dt, scene.obs_len, scene.pred_len)} "
                    f"!= {grid}"
                )
            for other in SPLITS:
                if other != scene.split and scene.scene_id in split_ids[other]:
                    raise SceneError(
                        f"line {lineno}: scene {scene.scene_id} appears in both "
                        f"{other!r} and {scene.split!r} splits"
                    )
            if scene.scene_id in split_ids[scene.split]:
                raise SceneError(f"line {lineno}: duplicate scene_id {scene.scene_id}")
            split_ids[scene.split].add(scene.scene_id)
            buckets[scene.split].append(scene)
    return SplitDataset(
        train=tuple(buckets["train"]), val=tuple(buckets["val"]), test=tuple(buckets["test"])
    )


def scene_to_json(scene: Scene) -> str:
    """Canonical one-line serialization (full float round-trip precision)."""
    obj = {
        "scene_id": scene.scene_id,
        "split": scene.split,
        "dt": scene.dt,
        "obs_len": scene.obs_len,
        "pred_len": scene.pred_len,
        "agents": [
            {"id": a.id, "kind": a.kind, "xy": [[float(x), float(y)] for x, y in a.positions]}
            for a in scene.agents
        ],
    }
    return json.dumps(obj, separators=(",", ":"))


def save_scenes(path, dataset: SplitDataset) -> None:
    """Write a dataset in canonical form; load(save(d)) is byte-stable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for split in SPLITS:
            for scene in dataset.split(split):
                fh.write(scene_to_json(scene) + "\n")


# ---------------------------------------------------------------------------
# ordering and kinematics


def order_agents(scene: Scene) -> Scene:
    """Canonical processing order: ego first, then ascending distance to the
    ego at the last observed step, ties broken by ascending agent id."""
    ego = scene.ego
    anchor = ego.positions[scene.obs_len - 1]

    def key(agent: Agent):
        if agent.kind == "ego_vehicle":
            return (-1.0, agent.id)
        d = float(np.linalg.norm(agent.positions[scene.obs_len - 1] - anchor))
        return (d, agent.id)

    return replace(scene, agents=tuple(sorted(scene.agents, key=key)))


def kinematics(positions: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Velocity and acceleration series from positions on a uniform grid.

    Velocity: central differences interior, one-sided at the ends.
    Acceleration: second differences of positions interior, end values
    copied from the adjacent interior estimate. Lengths match positions.
    """
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if p.shape[0] < 3:
        raise SceneError(f"kinematics: needs >= 3 positions, got {p.shape[0]}")
    vel = np.empty_like(p)
    vel[1:-1] = (p[2:] - p[:-2]) / (2.0 * dt)
    vel[0] = (p[1] - p[0]) / dt
    vel[-1] = (p[-1] - p[-2]) / dt
    acc = np.empty_like(p)
    acc[1:-1] = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / (dt * dt)
    acc[0] = acc[1]
    acc[-1] = acc[-2]
    return vel, acc


def agent_kinematics(agent: Agent, dt: float) -> tuple[np.ndarray, np.ndarray]:
    return kinematics(agent.positions, dt)


# ---------------------------------------------------------------------------
# scene-local frame

# Scenes are modeled in a frame anchored at the ego's last observed pose:
# origin at its position, heading along +x. SceneFrame maps both ways so
# predictions can be reported in the coordinates of the input file.


@dataclass(frozen=True)
class SceneFrame:
    origin: np.ndarray  # (2,)
    rot: np.ndarray  # (2, 2), world <- local columns

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) @ self.rot

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rot.T + self.origin


def ego_frame(scene: Scene) -> SceneFrame:
    """Frame from the ego's last observed position and heading. Uses only
    past observations, so it is available at inference time."""
    ego = scene.ego
    t = scene.obs_len - 1
    origin = ego.positions[t].copy()
    if t >= 1:
        step = ego.positions[t] - ego.positions[t - 1]
    else:
        step = np.zeros(2)
    norm = float(np.linalg.norm(step))
    if norm < 1e-9:
        heading = np.array([1.0, 0.0])
    else:
        heading = step / norm
    rot = np.array([[heading[0], -heading[1]], [heading[1], heading[0]]])
    return SceneFrame(origin=origin, rot=rot)


def to_local_frame(scene: Scene) -> tuple[Scene, SceneFrame]:
    frame = ego_frame(scene)
    agents = tuple(
        replace(a, positions=frame.to_local(a.positions)) for a in scene.agents
    )
    return replace(scene, agents=agents), frame
