"""Evaluation metrics: best-of-N final / average displacement errors and the
negative log-likelihood of the ground truth under a Gaussian kernel density
fit to the sampled endpoints, reported at fixed horizons."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from trajcast import scene_data as sd

LN_2PI = math.log(2.0 * math.pi)

# isotropic standard deviation used when the sample cloud is degenerate
KDE_FALLBACK_BW = 1e-3  # meters
KDE_COV_REG = 1e-6


class MetricError(ValueError):
    pass


def fde_best_of_n(samples: np.ndarray, gt: np.ndarray, step: int) -> float:
    """Min over samples of the endpoint error at `step` (0-based)."""
    samples = np.asarray(samples, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise MetricError(f"samples must be (N, T, 2), got {samples.shape}")
    if not (0 <= step < gt.shape[0]):
        raise MetricError(f"step {step} outside ground truth of length {gt.shape[0]}")
    return float(np.linalg.norm(samples[:, step, :] - gt[step], axis=1).min())


def ade_best_of_n(samples: np.ndarray, gt: np.ndarray, step: int) -> float:
    """Min over samples of the mean error over steps 0..step, where the best
    sample is chosen by its own average."""
    samples = np.asarray(samples, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise MetricError(f"samples must be (N, T, 2), got {samples.shape}")
    if not (0 <= step < gt.shape[0]):
        raise MetricError(f"step {step} outside ground truth of length {gt.shape[0]}")
    err = np.linalg.norm(samples[:, :step + 1, :] - gt[None, :step + 1, :], axis=2)
    return float(err.mean(axis=1).min())


def _kde_log_density(points: np.ndarray, query: np.ndarray) -> float:
    """Log density of a Gaussian mixture centered on `points` with a shared
    bandwidth matrix H = f^2 * (cov + reg*I), Scott factor f = N^(-1/6)."""
    n = points.shape[0]
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    factor = n ** (-1.0 / 6.0)  # Scott's rule for 2-D data
    H = factor * factor * (cov + KDE_COV_REG * np.eye(2))
    det = H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0]
    if not np.isfinite(det) or det <= 0.0:
        H = (KDE_FALLBACK_BW ** 2) * np.eye(2)
        det = H[0, 0] * H[1, 1]
    H_inv = np.linalg.inv(H)
    d = points - query
    mahal = np.einsum("ni,ij,nj->n", d, H_inv, d)
    log_kernels = -0.5 * (mahal + math.log(det)) - LN_2PI
    m = log_kernels.max()
    return float(m + math.log(np.exp(log_kernels - m).mean()))


def kde_nll(samples: np.ndarray, gt: np.ndarray, step: int) -> float:
    """Negative log-likelihood of the ground-truth position at `step` under a
    2-D Gaussian KDE over the N sampled positions at that step."""
    samples = np.asarray(samples, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if samples.shape[0] < 2:
        raise MetricError("kde_nll needs at least 2 samples")
    points = samples[:, step, :]
    if np.allclose(points, points[0], atol=0.0):
        H = (KDE_FALLBACK_BW ** 2) * np.eye(2)
        d = points - gt[step]
        mahal = (d * d).sum(axis=1) / (KDE_FALLBACK_BW ** 2)
        log_kernels = -0.5 * (mahal + math.log(H[0, 0] * H[1, 1])) - LN_2PI
        m = log_kernels.max()
        return float(-(m + math.log(np.exp(log_kernels - m).mean())))
    return -_kde_log_density(points, gt[step])


def kde_nll_horizon(samples: np.ndarray, gt: np.ndarray, step: int) -> float:
    """Per-step KDE NLL averaged over steps 0..step (the reported quantity)."""
    return float(np.mean([kde_nll(samples, gt, t) for t in range(step + 1)]))


# ---------------------------------------------------------------------------
# report assembly


def horizon_step(horizon_s: float, dt: float, pred_len: int) -> int:
    """Map a horizon in seconds to a 0-based future step index; the horizon
    must sit exactly on the grid."""
    ratio = horizon_s / dt
    if abs(ratio - round(ratio)) > 1e-9:
        raise MetricError(f"horizon {horizon_s}s is not a multiple of dt {dt}s")
    step = int(round(ratio)) - 1
    if not (0 <= step < pred_len):
        raise MetricError(
            f"horizon {horizon_s}s maps to step {step}, outside pred_len {pred_len}"
        )
    return step


@dataclass
class AgentRecord:
    scene_id: str
    agent_id: int
    fde: dict[float, float]
    ade: dict[float, float]
    nll: dict[float, float]


@dataclass
class MetricReport:
    variant: str
    interactions_flag: str
    n_samples: int
    horizons: tuple[float, ...]
    fde: dict[float, float] = field(default_factory=dict)
    ade: dict[float, float] = field(default_factory=dict)
    kde: dict[float, float] = field(default_factory=dict)
    n_agents: int = 0
    per_agent: list[AgentRecord] = field(default_factory=list)


def evaluate(scenes, predictions, horizons=(1.0, 2.0, 3.0), variant: str = "model",
             interactions_flag: str = "-") -> MetricReport:
    """Score predictions against ground truth; split-level numbers are means
    over non-ego agents."""
    by_id = {p.scene_id: p for p in predictions}
    report = MetricReport(variant=variant, interactions_flag=interactions_flag,
                          n_samples=0, horizons=tuple(horizons))
    for scene in scenes:
        pred = by_id.get(scene.scene_id)
        if pred is None:
            raise MetricError(f"no predictions for scene {scene.scene_id}")
        report.n_samples = max(report.n_samples, pred.n_samples)
        steps = {h: horizon_step(h, scene.dt, scene.pred_len) for h in horizons}
        for agent in scene.non_ego():
            samples = pred.samples.get(agent.id)
            if samples is None:
                raise MetricError(
                    f"scene {scene.scene_id}: no samples for agent {agent.id}"
                )
            gt = agent.future(scene.obs_len, scene.pred_len)
            rec = AgentRecord(scene_id=scene.scene_id, agent_id=agent.id,
                              fde={}, ade={}, nll={})
            for h, step in steps.items():
                rec.fde[h] = fde_best_of_n(samples, gt, step)
                rec.ade[h] = ade_best_of_n(samples, gt, step)
                rec.nll[h] = kde_nll_horizon(samples, gt, step)
            report.per_agent.append(rec)
    report.n_agents = len(report.per_agent)
    for h in horizons:
        report.fde[h] = float(np.mean([r.fde[h] for r in report.per_agent]))
        report.ade[h] = float(np.mean([r.ade[h] for r in report.per_agent]))
        report.kde[h] = float(np.mean([r.nll[h] for r in report.per_agent]))
    return report


def save_report_csv(path, reports: list[MetricReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "interactions_flag", "horizon", "fde", "ade",
                    "kde_nll", "n_agents"])
        for r in reports:
            for h in r.horizons:
                w.writerow([r.variant, r.interactions_flag, repr(float(h)),
                            repr(r.fde[h]), repr(r.ade[h]), repr(r.kde[h]), r.n_agents])


def format_report_table(reports: list[MetricReport]) -> str:
    """Aligned text table, one row per (variant, interactions) pair."""
    horizons = reports[0].horizons if reports else ()
    header = ["variant", "inter"] + [f"fde@{h:g}s" for h in horizons] \
        + [f"ade@{h:g}s" for h in horizons] + [f"nll@{h:g}s" for h in horizons] + ["agents"]
    rows = [header]
    for r in reports:
        rows.append(
            [r.variant, r.interactions_flag]
            + [f"{r.fde[h]:.3f}" for h in horizons]
            + [f"{r.ade[h]:.3f}" for h in horizons]
            + [f"{r.kde[h]:.2f}" for h in horizons]
            + [str(r.n_agents)]
        )
    widths = [max(len(row[c]) for row in rows) for c in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def save_per_agent_csv(path, report: MetricReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["scene_id", "agent_id"]
        for h in report.horizons:
            header += [f"fde_{h:g}", f"ade_{h:g}", f"nll_{h:g}"]
        w.writerow(header)
        for rec in report.per_agent:
            row = [rec.scene_id, rec.agent_id]
            for h in report.horizons:
                row += [repr(rec.fde[h]), repr(rec.ade[h]), repr(rec.nll[h])]
            w.writerow(row)
