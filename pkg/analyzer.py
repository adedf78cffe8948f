# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

"""
Imagination-execution analysis: colour-centroid keypoints, trajectories, Hungarian matching,
motion similarity, the automatic imagination judge and the similarity-success correlation
"""

import json
import logging
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import pandas as pd
from imageio import imwrite

from codec import decode
from rollout import read_archive, load_trial
from tabletop import (EMBODIMENTS, DIRT_RGB, FRAME_SIZE, WIPE_GRID, WIPE_FRACTION, palette_of,
                      position_success)
from utils import DataError, atomic_write

logger = logging.getLogger(__name__)

COLOR_TOL = 0.1
STATIC_NORM = 0.5 / FRAME_SIZE
UNMATCHABLE = 1e6
TOPPLE_ELONGATION = 2.5
DIRTY_FRACTION = 0.25


def task_palette(task, embodiment):
    """
    Detector colour table of a trial: scene objects by id, the gripper under id 0
    """
    palette = palette_of(task)
    palette[0] = EMBODIMENTS[embodiment].rgb8
    return palette


def color_mask(frame, rgb8, tol=COLOR_TOL):
    target = np.asarray(rgb8, dtype=np.float32) / np.float32(255.0)
    return np.max(np.abs(np.asarray(frame, dtype=np.float32) - target), axis=-1) <= tol


def detect_keypoints(frame, palette, tol=COLOR_TOL):
    """
    Centroid of the pixels within L-inf distance tol of each palette colour
    :param frame: [H, W, 3] in [0, 1]
    :param palette: id -> rgb8
    :param tol: colour tolerance
    :return: list of (id, x, y) for every detected id, missing colours are left out
    """
    height, width = frame.shape[:2]
    found = []
    for key in sorted(palette):
        rows, cols = np.nonzero(color_mask(frame, palette[key], tol))
        if len(rows):
            found.append((key, float((cols.mean() + 0.5) / width), float((rows.mean() + 0.5) / height)))
    return found


@dataclass
class Trajectory:
    id: int
    positions: np.ndarray           # [M, 2], NaN where undetected
    valid: np.ndarray               # [M] bool

    @property
    def usable(self):
        return int(self.valid.sum()) >= 2


@dataclass
class TrajectorySet:
    trajectories: dict = field(default_factory=dict)     # id -> Trajectory

    def __len__(self):
        return len(self.trajectories)

    def __getitem__(self, key):
        return self.trajectories[key]

    def ids(self):
        return sorted(self.trajectories)

    def translated(self, dx, dy):
        return TrajectorySet({k: Trajectory(k, t.positions + np.array([dx, dy]), t.valid.copy())
                              for k, t in self.trajectories.items()})


def track(frames, palette, tol=COLOR_TOL):
    """
    Per-colour detection in every frame; colour identity stands in for a point tracker
    :return: TrajectorySet with one trajectory per palette id
    """
    positions = {key: np.full((len(frames), 2), np.nan) for key in palette}
    for t, frame in enumerate(frames):
        for key, x, y in detect_keypoints(frame, palette, tol):
            positions[key][t] = (x, y)
    return TrajectorySet({key: Trajectory(key, p, ~np.isnan(p[:, 0])) for key, p in positions.items()})


def hungarian(cost):
    """
    Minimum-cost assignment with potentials, O(n^2 m) for n <= m
    :param cost: n x m finite cost matrix
    :return: (sorted list of (row, col) pairs, total cost)
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return [], 0.0
    if cost.ndim != 2 or not np.all(np.isfinite(cost)):
        raise ValueError("Invalid cost matrix specified, need a finite 2-D matrix!")
    if cost.shape[0] > cost.shape[1]:
        pairs, total = hungarian(cost.T)
        return sorted((c, r) for r, c in pairs), total

    n, m = cost.shape
    u, v = np.zeros(n + 1), np.zeros(m + 1)
    p, way = np.zeros(m + 1, dtype=int), np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0], j0 = i, 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    pairs = sorted((int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j])
    return pairs, float(sum(cost[r, c] for r, c in pairs))


def _joint(a, b):
    length = min(len(a.valid), len(b.valid))
    return np.flatnonzero(a.valid[:length] & b.valid[:length])


def _displacements(trajectory, frames):
    return np.diff(trajectory.positions[frames], axis=0).reshape(-1)


def _cosine(x, y):
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx < 1e-12 or ny < 1e-12:
        return 0.0
    return float(np.clip(np.dot(x / nx, y / ny), -1.0, 1.0))


def matching_cost(a, b, cost="position"):
    """
    position: mean time-aligned distance; cosine: 1 - cosine of the displacement vectors
    """
    frames = _joint(a, b)
    if len(frames) < 2:
        return UNMATCHABLE
    if cost == "position":
        return float(np.mean(np.linalg.norm(a.positions[frames] - b.positions[frames], axis=1)))
    if cost == "cosine":
        return 1.0 - _cosine(_displacements(a, frames), _displacements(b, frames))
    raise ValueError(f"Invalid similarity cost specified: {cost}")


@dataclass
class SimilarityReport:
    pairs: list                     # (executed id, imagined id, cosine or None when static)
    mean: float
    matched: int
    static: int
    unmatched_executed: int
    unmatched_imagined: int


def motion_similarity(executed, imagined, cost="position"):
    """
    Hungarian-matched mean cosine between the displacement vectors of executed and imagined trajectories
    :param executed: TrajectorySet
    :param imagined: TrajectorySet, time-aligned with executed
    :param cost: position or cosine matching cost
    :return: SimilarityReport, pairs where both trajectories stay within half a pixel are left out of the mean
    """
    rows = [k for k in executed.ids() if executed[k].usable]
    cols = [k for k in imagined.ids() if imagined[k].usable]
    matrix = np.array([[matching_cost(executed[r], imagined[c], cost) for c in cols] for r in rows])
    assignment, _ = hungarian(matrix.reshape(len(rows), len(cols)))

    pairs, cosines, static = [], [], 0
    for i, j in assignment:
        a, b = executed[rows[i]], imagined[cols[j]]
        frames = _joint(a, b)
        if len(frames) < 2:
            continue
        da, db = _displacements(a, frames), _displacements(b, frames)
        if np.linalg.norm(da) < STATIC_NORM and np.linalg.norm(db) < STATIC_NORM:
            static += 1
            pairs.append((rows[i], cols[j], None))
            continue
        cosines.append(_cosine(da, db))
        pairs.append((rows[i], cols[j], cosines[-1]))
    if not pairs:
        raise DataError("No matched trajectory pairs")
    mean = float(np.mean(cosines)) if cosines else 1.0
    return SimilarityReport(pairs, mean, len(pairs), static, len(rows) - len(pairs), len(cols) - len(pairs))


def decode_clip(latents, patch=4, channels=3):
    return np.clip(decode(np.asarray(latents, dtype=np.float32), patch, channels), 0.0, 1.0)


def _last_seen(frames, palette, ids):
    positions = {}
    for frame in reversed(frames):
        for key, x, y in detect_keypoints(frame, {k: palette[k] for k in ids if k not in positions}):
            positions[key] = (x, y)
        if len(positions) == len(ids):
            break
    return positions


def _toppled(frame, rgb8):
    rows, cols = np.nonzero(color_mask(frame, rgb8))
    if len(rows) < 3:
        return False
    eigen = np.linalg.eigvalsh(np.cov(np.stack([cols, rows]).astype(np.float64)))
    return eigen[0] <= 0 or eigen[1] / eigen[0] >= TOPPLE_ELONGATION


def _strip_clean_fraction(frame, task):
    cell = frame.shape[0] // WIPE_GRID
    dirt = color_mask(frame, DIRT_RGB)
    cells = task.strip_cells()
    clean = sum(dirt[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell].mean() < DIRTY_FRACTION for r, c in cells)
    return clean / len(cells)


def judge_imagination(latents, task, palette, patch=4, channels=3):
    """
    Task predicate on the decoded imagination
    :param latents: [n, h, w, c_lat] imagined clip, None for models without video
    :param task: TaskSpec
    :param palette: id -> rgb8
    :return: bool, False when a required object is never detected
    """
    if latents is None:
        return False
    frames = decode_clip(latents, patch, channels)
    if task.skill == "topple":
        return _toppled(frames[-1], palette[task.args[0]])
    if task.skill == "wipe":
        return _strip_clean_fraction(frames[-1], task) >= WIPE_FRACTION
    need = task.args + ((task.target,) if task.target is not None else ())
    positions = _last_seen(frames, palette, need)
    return position_success(task, positions)


@dataclass
class CorrelationReport:
    n_success: int
    n_failure: int
    mean_success: float
    mean_failure: float
    difference: float
    point_biserial: float
    auroc: float
    scatter: list                   # (similarity, success)

    def to_dict(self):
        return asdict(self)


def auroc(scores, labels):
    """
    Mann-Whitney estimate of P(score of a success > score of a failure), ties count half
    """
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool)
    pos, neg = scores[labels], scores[~labels]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))


def correlate(results):
    """
    :param results: iterable of (similarity, success flag)
    :return: CorrelationReport
    """
    results = [(float(s), bool(y)) for s, y in results if np.isfinite(s)]
    scores = np.array([s for s, _ in results])
    labels = np.array([y for _, y in results], dtype=bool)
    if labels.sum() < 2 or (~labels).sum() < 2:
        raise DataError(f"Need at least 2 results per class, got {int(labels.sum())} successes "
                        f"and {int((~labels).sum())} failures")
    mean_success, mean_failure = float(scores[labels].mean()), float(scores[~labels].mean())
    biserial = float(np.corrcoef(scores, labels.astype(np.float64))[0, 1]) if scores.std() > 0 else float("nan")
    return CorrelationReport(int(labels.sum()), int((~labels).sum()), mean_success, mean_failure,
                             mean_success - mean_failure, biserial, auroc(scores, labels), results)


def scatter_svg(report_or_points, width=480, height=240, seed=0):
    """
    Self-contained SVG: similarity on x, success class with jitter on y, class means as vertical lines
    """
    points = report_or_points.scatter if isinstance(report_or_points, CorrelationReport) else report_or_points
    rng = np.random.default_rng(seed)
    margin = 40

    def px(similarity):
        return margin + (similarity + 1.0) / 2.0 * (width - 2 * margin)

    def py(success, jitter):
        band = (height - 2 * margin) / 2.0
        return margin + (0.5 if success else 1.5) * band + jitter * band * 0.6

    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
            f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">motion similarity</text>',
            f'<text x="8" y="{margin + 10}" font-size="12">success</text>',
            f'<text x="8" y="{height - margin - 10}" font-size="12">failure</text>']
    for value in (-1.0, 0.0, 1.0):
        body.append(f'<text x="{px(value):.1f}" y="{height - margin + 14}" text-anchor="middle" '
                    f'font-size="10">{value:g}</text>')
    for similarity, success in points:
        color = "#1a9641" if success else "#d7191c"
        body.append(f'<circle cx="{px(similarity):.2f}" cy="{py(success, rng.uniform(-0.5, 0.5)):.2f}" r="3" '
                    f'fill="{color}" fill-opacity="0.6"/>')
    for success in (True, False):
        values = [s for s, y in points if y == success]
        if values:
            x = px(float(np.mean(values)))
            color = "#1a9641" if success else "#d7191c"
            body.append(f'<line x1="{x:.2f}" y1="{margin}" x2="{x:.2f}" y2="{height - margin}" stroke="{color}" '
                        f'stroke-dasharray="4 2" stroke-width="2"/>')
    body.append("</svg>")
    return "\n".join(body) + "\n"


def trial_similarity(task, episode, clips, windows, cost="position", patch=4, channels=3):
    """
    Mean motion similarity over the replans of one trial; each imagined clip is truncated
    to the frames its window executed
    :return: (similarity or NaN, per-replan reports)
    """
    palette = task_palette(task, episode.embodiment)
    reports = []
    for clip, (first, count) in zip(clips, windows):
        executed = episode.frames[2 * first:2 * (first + count) + 1]
        imagined = decode_clip(clip, patch, channels)[:len(executed)]
        try:
            reports.append(motion_similarity(track(executed, palette), track(imagined, palette), cost))
        except DataError:
            logger.debug(f"Replan at action {first} has no matchable trajectories")
    if not reports:
        return float("nan"), reports
    return float(np.mean([r.mean for r in reports])), reports


def _frame_strip(frames):
    return np.rint(np.concatenate(list(frames), axis=1) * 255.0).astype(np.uint8)


def analyze_archive(archive_dir, out_dir, cost="position", frames_dir=None):
    """
    Analyse a trial archive written by rollout.write_archive
    :param archive_dir: archive directory
    :param out_dir: output directory for analysis.csv, imagination_vs_execution.csv, correlation.json, scatter.svg
    :param cost: Hungarian matching cost
    :param frames_dir: optional directory for PNG strips of executed and imagined frames
    :return: (analysis DataFrame, written paths)
    """
    records = read_archive(archive_dir)
    rows = []
    for _, record in records.iterrows():
        if not record["n_replans"]:
            raise DataError(f"Trial {record['trial_id']} has no replans recorded")
        task, episode, clips = load_trial(archive_dir, record)
        windows = [tuple(w) for w in record["windows"]]
        similarity, _ = trial_similarity(task, episode, clips, windows, cost)
        palette = task_palette(task, episode.embodiment)
        imagined_success = any(judge_imagination(c, task, palette) for c in clips)
        rows.append({"trial_id": record["trial_id"], "task": record["task"], "split": record["split"],
                     "similarity": similarity, "execution_success": bool(record["success"]),
                     "imagination_success": bool(imagined_success)})
        if frames_dir is not None and clips:
            os.makedirs(frames_dir, exist_ok=True)
            first, count = windows[0]
            executed = episode.frames[2 * first:2 * (first + count) + 1]
            imagined = decode_clip(clips[0])[:len(executed)]
            imwrite(os.path.join(frames_dir, f"{record['trial_id']}.png"),
                    np.concatenate([_frame_strip(executed), _frame_strip(imagined)], axis=0))

    analysis = pd.DataFrame(rows, columns=["trial_id", "task", "split", "similarity", "execution_success",
                                           "imagination_success"])
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, name) for name in
             ("analysis.csv", "imagination_vs_execution.csv", "correlation.json", "scatter.svg")]
    atomic_write(paths[0], analysis.to_csv(index=False).encode("utf-8"))
    atomic_write(paths[1], imagination_table(analysis).to_csv(index=False).encode("utf-8"))

    points = [(s, y) for s, y in zip(analysis["similarity"], analysis["execution_success"]) if np.isfinite(s)]
    try:
        report = correlate(points).to_dict()
    except DataError as err:
        logger.warning(f"Correlation skipped: {err}")
        report = {"error": str(err), "scatter": points}
    atomic_write(paths[2], json.dumps(report, indent=2, sort_keys=True).encode("utf-8"))
    atomic_write(paths[3], scatter_svg(points).encode("utf-8"))
    logger.info(f"Analysed {len(analysis)} trials, mean similarity {analysis['similarity'].mean():.4f}")
    return analysis, paths


def imagination_table(analysis):
    """
    Execution and auto-judged imagination success rates per split and task, plus split averages
    """
    grouped = analysis.groupby(["split", "task"], sort=False)
    table = grouped.agg(trials=("trial_id", "size"), execution_rate=("execution_success", "mean"),
                        imagination_rate=("imagination_success", "mean")).reset_index()
    averages = analysis.groupby("split", sort=False).agg(trials=("trial_id", "size"),
                                                         execution_rate=("execution_success", "mean"),
                                                         imagination_rate=("imagination_success", "mean")).reset_index()
    averages.insert(1, "task", "average")
    return pd.concat([table, averages], ignore_index=True)
