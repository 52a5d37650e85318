"""Interaction-density diagnostics over scene corpora: per-agent interaction
tags, closest-approach CDF, acceleration-vs-distance curves, and prediction
error binned by proximity to the ego vehicle."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trajcast import scene_data as sd

# operational surrogate for "presence causes a change in velocity": an
# acceleration spike while close to the ego
A_MIN = 1.0  # m/s^2
D_MAX = 10.0  # m

BIN_EDGES = np.arange(0.0, 50.0 + 1e-9, 2.5)


@dataclass(frozen=True)
class InteractionTag:
    scene_id: str
    agent_id: int
    interacting: bool
    closest_approach: float
    max_accel_near: float


@dataclass(frozen=True)
class BinnedCurve:
    """Values over distance bins; empty bins are absent, not zero."""

    bin_low: np.ndarray
    bin_high: np.ndarray
    value: np.ndarray
    count: np.ndarray

    def value_at(self, distance: float) -> float:
        for lo, hi, v in zip(self.bin_low, self.bin_high, self.value):
            if lo <= distance < hi:
                return float(v)
        raise KeyError(f"no occupied bin contains {distance}")

    def peak_bin(self) -> tuple[float, float]:
        """(bin_low, bin_high) of the occupied bin with the largest value."""
        k = int(np.argmax(self.value))
        return float(self.bin_low[k]), float(self.bin_high[k])


def _distance_to_ego(scene: sd.Scene, agent: sd.Agent) -> np.ndarray:
    ego = scene.ego
    n = min(len(agent.positions), len(ego.positions))
    return np.linalg.norm(agent.positions[:n] - ego.positions[:n], axis=1)


def interaction_tags(scenes, a_min: float = A_MIN, d_max: float = D_MAX) -> list[InteractionTag]:
    """Tag every non-ego agent; deterministic and order-independent."""
    tags = []
    for scene in scenes:
        for agent in scene.non_ego():
            dist = _distance_to_ego(scene, agent)
            _, acc = sd.kinematics(agent.positions, scene.dt)
            mag = np.linalg.norm(acc, axis=1)[: len(dist)]
            near = dist <= d_max
            max_near = float(mag[near].max()) if near.any() else 0.0
            tags.append(InteractionTag(
                scene_id=scene.scene_id,
                agent_id=agent.id,
                interacting=bool(max_near >= a_min),
                closest_approach=float(dist.min()),
                max_accel_near=max_near,
            ))
    return tags


def closest_approach_cdf(scenes) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF of per-agent closest approach to the ego.

    Returns (distances sorted ascending, cumulative fraction at each).
    """
    dists = []
    for scene in scenes:
        for agent in scene.non_ego():
            dists.append(float(_distance_to_ego(scene, agent).min()))
    if not dists:
        return np.empty(0), np.empty(0)
    d = np.sort(np.asarray(dists))
    frac = np.arange(1, d.size + 1) / d.size
    return d, frac


def cdf_at(distances: np.ndarray, fractions: np.ndarray, x: float) -> float:
    """CDF value at x, i.e. the fraction of agents with closest approach <= x."""
    if distances.size == 0:
        return 0.0
    k = int(np.searchsorted(distances, x, side="right"))
    return 0.0 if k == 0 else float(fractions[k - 1])


def accel_vs_distance(scenes, bin_edges: np.ndarray = BIN_EDGES) -> BinnedCurve:
    """Mean over agents of per-agent max |accel| per visited distance bin."""
    n_bins = len(bin_edges) - 1
    sums = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=int)
    for scene in scenes:
        for agent in scene.non_ego():
            dist = _distance_to_ego(scene, agent)
            _, acc = sd.kinematics(agent.positions, scene.dt)
            mag = np.linalg.norm(acc, axis=1)[: len(dist)]
            idx = np.digitize(dist, bin_edges) - 1
            for b in np.unique(idx):
                if 0 <= b < n_bins:
                    sel = idx == b
                    sums[b] += mag[sel].max()
                    counts[b] += 1
    occupied = counts > 0
    return BinnedCurve(
        bin_low=bin_edges[:-1][occupied],
        bin_high=bin_edges[1:][occupied],
        value=sums[occupied] / counts[occupied],
        count=counts[occupied],
    )


def error_vs_proximity(per_agent_records, tags, bin_edges: np.ndarray = BIN_EDGES,
                       horizon_key=None) -> BinnedCurve:
    """Mean per-agent FDE binned by closest approach to the ego.

    `per_agent_records` are metric AgentRecord objects; the FDE at the
    largest horizon is used unless horizon_key picks another.
    """
    tag_map = {(t.scene_id, t.agent_id): t for t in tags}
    n_bins = len(bin_edges) - 1
    sums = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=int)
    for rec in per_agent_records:
        tag = tag_map.get((rec.scene_id, rec.agent_id))
        if tag is None:
            continue
        horizon = horizon_key if horizon_key is not None else max(rec.fde)
        err = rec.fde[horizon]
        b = int(np.digitize(tag.closest_approach, bin_edges)) - 1
        if 0 <= b < n_bins:
            sums[b] += err
            counts[b] += 1
    occupied = counts > 0
    return BinnedCurve(
        bin_low=bin_edges[:-1][occupied],
        bin_high=bin_edges[1:][occupied],
        value=sums[occupied] / counts[occupied],
        count=counts[occupied],
    )


def save_curve(path, curve: BinnedCurve) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "value", "count"])
        for lo, hi, v, c in zip(curve.bin_low, curve.bin_high, curve.value, curve.count):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(v)), int(c)])


def save_cdf(path, distances: np.ndarray, fractions: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["closest_approach", "cumulative_fraction"])
        for d, f in zip(distances, fractions):
            w.writerow([repr(float(d)), repr(float(f))])
