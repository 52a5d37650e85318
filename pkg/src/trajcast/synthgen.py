"""Seeded generator of ego-pedestrian(-bicyclist) scenes with controllable
interaction density.

Dense mode stages crossing conflicts in front of a moving ego vehicle:
per-agent latent decisions (cross ahead of the vehicle, yield to it, or
ignore it) switch on goal/repulsion forces once the prediction window
starts, which makes futures multi-modal and couples them to the ego's own
(sampled) behavior. Sparse mode keeps every agent beyond 20 m of the ego
path so that no interaction ever triggers.

Scenes are emitted in the ego-anchored local frame and are bit-identical
for a given (seed, config); each scene uses an RNG derived from
(seed, scene index) so generation order cannot matter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from trajcast import scene_data as sd

DECISIONS = ("cross_before", "yield_to_vehicle", "continue")


class GenError(ValueError):
    """Unsatisfiable or invalid generator configuration."""


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    n_scenes: int = 100
    agents_per_scene: tuple[int, int] = (2, 4)  # non-ego agents, inclusive range
    interaction_mode: str = "dense"  # dense | sparse
    yield_prob: float = 0.5  # probability the ego yields
    decision_noise: float = 0.5  # goal perturbation std, meters
    ego_speed: float = 6.0
    ped_speed: float = 1.4
    bike_speed: float = 4.0
    bike_frac: float = 0.2
    dt: float = 0.5
    obs_len: int = 2
    pred_len: int = 6
    split_counts: tuple[int, int, int] | None = None  # explicit (train, val, test)
    # social-forces constants
    k_goal: float = 2.0  # 1/s
    k_repulse: float = 4.0  # m/s^2
    ttc0: float = 3.0  # s, trigger horizon for non-ego agents
    ego_ttc0: float = 1.5  # s, the ego brakes later than pedestrians react
    a_max: float = 4.0  # m/s^2
    speedup: float = 1.5  # cross_before speed factor

    def validate(self):
        if self.n_scenes < 1:
            raise GenError("n_scenes must be >= 1")
        lo, hi = self.agents_per_scene
        if not (1 <= lo <= hi):
            raise GenError(f"bad agents_per_scene range {self.agents_per_scene}")
        if self.interaction_mode not in ("dense", "sparse"):
            raise GenError(f"unknown interaction_mode {self.interaction_mode!r}")
        if not (0.0 <= self.yield_prob <= 1.0):
            raise GenError(f"yield_prob {self.yield_prob} outside [0, 1]")
        if not (0.0 <= self.bike_frac <= 1.0):
            raise GenError(f"bike_frac {self.bike_frac} outside [0, 1]")
        if min(self.ego_speed, self.ped_speed, self.bike_speed) <= 0:
            raise GenError("speeds must be positive")
        if self.decision_noise < 0:
            raise GenError("decision_noise must be >= 0")
        if self.split_counts is not None:
            if len(self.split_counts) != 3 or min(self.split_counts) < 0:
                raise GenError(f"bad split_counts {self.split_counts}")
            if sum(self.split_counts) != self.n_scenes:
                raise GenError(
                    f"split_counts {self.split_counts} do not sum to n_scenes {self.n_scenes}"
                )

    @property
    def max_speed(self) -> float:
        return 1.5 * max(self.ego_speed, self.ped_speed)


@dataclass(frozen=True)
class DecisionRecord:
    scene_id: str
    agent_id: int
    label: str


@dataclass
class Body:
    """Simulation state of one agent (index 0 of a world is the ego)."""

    kind: str
    pos: np.ndarray
    vel: np.ndarray
    goal: np.ndarray
    pref_speed: float


@dataclass
class World:
    bodies: list[Body] = field(default_factory=list)
    ego_yields: bool = False


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < 1e-9:
        return np.zeros(2)
    return v / n


def time_to_collision(pos, vel, other_pos, other_vel) -> float:
    """Time until closest approach assuming constant velocities; inf when
    the pair is not closing."""
    r = np.asarray(pos, dtype=float) - np.asarray(other_pos, dtype=float)
    rv = np.asarray(vel, dtype=float) - np.asarray(other_vel, dtype=float)
    dist = float(np.linalg.norm(r))
    if dist < 1e-9:
        return 0.0
    closing = -float(np.dot(r, rv)) / dist  # rate at which distance shrinks
    if closing <= 1e-9:
        return float("inf")
    return dist / closing


def _clamp_norm(v: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n > limit:
        return v * (limit / n)
    return v


def step_dynamics(bodies: list[Body], decisions: dict[int, str], config: GenConfig,
                  ego_yields: bool, interactive: bool = True) -> list[Body]:
    """One Euler step of the social-forces update; returns new bodies.

    Goal attraction k_goal*(v_goal - v) always applies. When `interactive`,
    agents respond to the ego within their time-to-collision horizon
    according to their decision, and a yielding ego brakes; all interaction
    forces scale with k_repulse except the cross_before speed factor.
    """
    ego = bodies[0]
    out = []
    for idx, b in enumerate(bodies):
        if idx == 0:
            target = _unit(b.goal - b.pos) * b.pref_speed
            if interactive and ego_yields:
                ttc = min(
                    (time_to_collision(b.pos, b.vel, o.pos, o.vel) for o in bodies[1:]),
                    default=float("inf"),
                )
                if ttc < config.ego_ttc0:
                    brake = config.k_repulse * max(0.0, 1.0 - ttc / config.ego_ttc0)
                    accel = config.k_goal * (target * 0.0 - b.vel) - brake * _unit(b.vel)
                else:
                    accel = config.k_goal * (target - b.vel)
            else:
                accel = config.k_goal * (target - b.vel)
        else:
            decision = decisions.get(idx, "continue")
            ttc = time_to_collision(b.pos, b.vel, ego.pos, ego.vel)
            triggered = interactive and ttc < config.ttc0
            speed = b.pref_speed
            if triggered and decision == "cross_before":
                speed *= config.speedup
            target = _unit(b.goal - b.pos) * speed
            accel = config.k_goal * (target - b.vel)
            if triggered and decision == "yield_to_vehicle":
                push = config.k_repulse * max(0.0, 1.0 - ttc / config.ttc0)
                accel = accel + push * _unit(b.pos - ego.pos)
        accel = _clamp_norm(accel, config.a_max)
        vel = _clamp_norm(b.vel + accel * config.dt, config.max_speed)
        out.append(Body(kind=b.kind, pos=b.pos + vel * config.dt, vel=vel,
                        goal=b.goal, pref_speed=b.pref_speed))
    return out


def simulate(world: World, decisions: dict[int, str], config: GenConfig) -> np.ndarray:
    """Roll a world forward; returns positions (obs_len + pred_len, n, 2).

    Decision-dependent forces are inactive during the observation window:
    the step leaving the last observed state is the first interactive one,
    so pasts are decision-free and futures can be re-rolled.
    """
    total = config.obs_len + config.pred_len
    bodies = [Body(b.kind, b.pos.copy(), b.vel.copy(), b.goal.copy(), b.pref_speed)
              for b in world.bodies]
    traj = np.empty((total, len(bodies), 2))
    traj[0] = [b.pos for b in bodies]
    for t in range(1, total):
        interactive = t - 1 >= config.obs_len - 1
        bodies = step_dynamics(bodies, decisions, config, world.ego_yields, interactive)
        traj[t] = [b.pos for b in bodies]
    return traj


# ---------------------------------------------------------------------------
# scene construction


def _draw_decision(rng, forced: bool) -> str:
    if forced:
        return "cross_before" if rng.random() < 0.5 else "yield_to_vehicle"
    r = rng.random()
    if r < 0.35:
        return "cross_before"
    if r < 0.80:
        return "yield_to_vehicle"
    return "continue"


def _build_world(rng: np.random.Generator, config: GenConfig) -> tuple[World, dict[int, str]]:
    """Lay out one scene in world coordinates. All geometry draws precede
    decision draws so futures can be re-rolled over a fixed layout."""
    ego_x_last = config.ego_speed * config.dt * (config.obs_len - 1)
    world = World()
    world.bodies.append(Body(
        kind="ego_vehicle",
        pos=np.zeros(2),
        vel=np.array([config.ego_speed, 0.0]),
        goal=np.array([1000.0, 0.0]),
        pref_speed=config.ego_speed,
    ))
    n_non_ego = int(rng.integers(config.agents_per_scene[0], config.agents_per_scene[1] + 1))
    dense = config.interaction_mode == "dense"
    if dense:
        # one far agent per scene keeps the >20 m distance bins populated
        n_crossers = n_non_ego - 1 if n_non_ego >= 2 else n_non_ego
    else:
        n_crossers = 0

    for k in range(n_non_ego):
        is_bike = rng.random() < config.bike_frac
        kind = "bicyclist" if is_bike else "pedestrian"
        base_speed = config.bike_speed if is_bike else config.ped_speed
        pref = float(np.clip(rng.normal(base_speed, 0.12 * base_speed),
                             0.6 * base_speed, 1.4 * base_speed))
        side = 1.0 if rng.random() < 0.5 else -1.0
        if k < n_crossers:
            y0 = side * rng.uniform(2.5, 5.5)
            x0 = ego_x_last + rng.uniform(4.0, 14.0)
            goal = np.array([x0 + rng.uniform(-2.0, 2.0), -side * (abs(y0) + rng.uniform(2.0, 5.0))])
        else:
            lateral = 24.0 + rng.uniform(0.0, 12.0) if dense else 22.0 + rng.uniform(0.0, 15.0)
            y0 = side * lateral
            x0 = ego_x_last + rng.uniform(-12.0, 25.0)
            walk = 1.0 if rng.random() < 0.5 else -1.0
            goal = np.array([x0 + walk * 40.0, y0])
        goal = goal + rng.normal(0.0, config.decision_noise, size=2)
        pos = np.array([x0, float(y0)])
        world.bodies.append(Body(
            kind=kind, pos=pos, vel=_unit(goal - pos) * pref, goal=goal, pref_speed=pref,
        ))

    world.ego_yields = dense and rng.random() < config.yield_prob
    decisions: dict[int, str] = {}
    for k in range(n_non_ego):
        idx = k + 1
        if dense and k < n_crossers:
            decisions[idx] = _draw_decision(rng, forced=(k == 0))
        else:
            decisions[idx] = "continue"
    return world, decisions


def _interaction_satisfied(traj: np.ndarray, config: GenConfig,
                           a_min: float = 1.0, d_max: float = 10.0) -> bool:
    """Does any non-ego agent show an acceleration spike near the ego?"""
    ego = traj[:, 0, :]
    for a in range(1, traj.shape[1]):
        _, acc = sd.kinematics(traj[:, a, :], config.dt)
        dist = np.linalg.norm(traj[:, a, :] - ego, axis=1)
        near = dist <= d_max
        if near.any() and np.linalg.norm(acc[near], axis=1).max() >= a_min:
            return True
    return False


def _split_of(index: int, counts: tuple[int, int, int]) -> str:
    if index < counts[0]:
        return "train"
    if index < counts[0] + counts[1]:
        return "val"
    return "test"


def _default_split_counts(n: int) -> tuple[int, int, int]:
    if n < 3:
        return (n, 0, 0)
    n_val = max(1, n // 10)
    n_test = max(1, n // 10)
    return (n - n_val - n_test, n_val, n_test)


def _scene_rng(config: GenConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, index])


def _world_to_scene(traj: np.ndarray, world: World, config: GenConfig,
                    scene_id: str, split: str) -> sd.Scene:
    agents = []
    for idx, body in enumerate(world.bodies):
        agents.append(sd.Agent(id=idx, kind=body.kind, positions=traj[:, idx, :].copy()))
    scene = sd.Scene(
        scene_id=scene_id, split=split, dt=config.dt,
        obs_len=config.obs_len, pred_len=config.pred_len, agents=tuple(agents),
    )
    local, _ = sd.to_local_frame(scene)
    return local


def _make_scene(config: GenConfig, index: int, split: str) -> tuple[sd.Scene, dict[int, str]]:
    rng = _scene_rng(config, index)
    world, decisions = _build_world(rng, config)
    traj = simulate(world, decisions, config)
    if config.interaction_mode == "dense" and not _interaction_satisfied(traj, config):
        # deterministic repair: a yielding lead agent with a non-yielding ego
        # always produces a close-range spike
        decisions = dict(decisions)
        decisions[1] = "yield_to_vehicle"
        world.ego_yields = False
        traj = simulate(world, decisions, config)
    scene_id = f"{config.interaction_mode}_{config.seed}_{index:05d}"
    return _world_to_scene(traj, world, config, scene_id, split), decisions


def generate(config: GenConfig) -> tuple[sd.SplitDataset, list[DecisionRecord]]:
    """Generate a full dataset plus per-agent decision ground truth."""
    config.validate()
    counts = config.split_counts or _default_split_counts(config.n_scenes)
    buckets: dict[str, list[sd.Scene]] = {s: [] for s in sd.SPLITS}
    records: list[DecisionRecord] = []
    for index in range(config.n_scenes):
        split = _split_of(index, counts)
        scene, decisions = _make_scene(config, index, split)
        buckets[split].append(scene)
        for idx in sorted(decisions):
            records.append(DecisionRecord(scene.scene_id, idx, decisions[idx]))
    dataset = sd.SplitDataset(
        train=tuple(buckets["train"]), val=tuple(buckets["val"]), test=tuple(buckets["test"])
    )
    return dataset, records


def resample_futures(config: GenConfig, index: int, n_draws: int,
                     resample_seed: int = 0) -> list[tuple[dict[int, str], np.ndarray]]:
    """Re-roll a scene's future with fresh decisions over its frozen layout.

    Returns (decisions, local-frame positions) per draw; pasts are identical
    across draws by construction. Exposes the multi-modality the forecaster
    is expected to capture.
    """
    config.validate()
    rng = _scene_rng(config, index)
    world, _ = _build_world(rng, config)
    dense = config.interaction_mode == "dense"
    # crossers are the agents staged near the road; far walkers never react
    crosser_idx = [i for i, b in enumerate(world.bodies[1:], start=1) if abs(b.pos[1]) < 10.0]
    draws = []
    for d in range(n_draws):
        draw_rng = np.random.default_rng([config.seed, index, 7919, resample_seed, d])
        decisions = {i: "continue" for i in range(1, len(world.bodies))}
        if dense:
            for j, idx in enumerate(crosser_idx):
                decisions[idx] = _draw_decision(draw_rng, forced=(j == 0))
        world.ego_yields = dense and draw_rng.random() < config.yield_prob
        traj = simulate(world, decisions, config)
        scene = _world_to_scene(traj, world, config, f"resample_{index}_{d}", "train")
        positions = np.stack([a.positions for a in scene.agents], axis=1)
        draws.append((decisions, positions))
    return draws


# ---------------------------------------------------------------------------
# sidecar I/O


def save_decisions(path, records: list[DecisionRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(
                {"scene_id": r.scene_id, "agent_id": r.agent_id, "label": r.label},
                separators=(",", ":")) + "\n")


def load_decisions(path) -> list[DecisionRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(DecisionRecord(obj["scene_id"], obj["agent_id"], obj["label"]))
    return records
