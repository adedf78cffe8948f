import itertools
import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from analyzer import (hungarian, detect_keypoints, task_palette, track, Trajectory, TrajectorySet, matching_cost,
                      motion_similarity, judge_imagination, auroc, correlate, scatter_svg, analyze_archive,
                      imagination_table, UNMATCHABLE)
from codec import encode
from config import RolloutConfig
from rollout import ExpertPolicy, RandomPolicy, evaluate, write_archive
from tabletop import (HOME, TABLE_RGB, DIRT_RGB, FRAME_SIZE, reset, render, sample_task, training_pool, split_spec)
from utils import DataError


def test_hungarian_square():
    pairs, total = hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert pairs == [(0, 1), (1, 0), (2, 2)]
    assert total == 5.0


def test_hungarian_rectangular():
    pairs, total = hungarian([[1, 9, 9, 0.5], [9, 2, 9, 9]])
    assert pairs == [(0, 3), (1, 1)] and total == 2.5
    pairs, total = hungarian(np.array([[1, 9, 9, 0.5], [9, 2, 9, 9]]).T)
    assert pairs == [(1, 1), (3, 0)] and total == 2.5


def test_hungarian_edge_cases():
    assert hungarian(np.zeros((0, 3))) == ([], 0.0)
    assert hungarian([[7.0]]) == ([(0, 0)], 7.0)
    with pytest.raises(ValueError):
        hungarian([[1.0, np.nan]])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(0, 100, allow_nan=False, width=32)))
def test_hungarian_matches_brute_force(cost):
    pairs, total = hungarian(cost)
    n, m = cost.shape
    assert len(pairs) == min(n, m)
    assert len({r for r, _ in pairs}) == len({c for _, c in pairs}) == min(n, m)
    if n <= m:
        best = min(sum(cost[i, c] for i, c in enumerate(cols)) for cols in itertools.permutations(range(m), n))
    else:
        best = min(sum(cost[r, j] for j, r in enumerate(rows)) for rows in itertools.permutations(range(n), m))
    assert total == pytest.approx(best, abs=1e-9)


def test_detect_keypoints_on_render():
    colors, shapes = training_pool("A")
    task = sample_task("pick_place", np.random.default_rng(0), colors, shapes)
    state = reset(task, "A", 0)
    palette = task_palette(task, "A")
    found = {key: (x, y) for key, x, y in detect_keypoints(render(state), palette)}
    assert set(found) == {0} | {s.id for s in task.scene}
    for spec, pose in zip(state.scene, state.objects):
        if pose.y > 0.75:
            continue
        assert found[spec.id][0] == pytest.approx(pose.x, abs=2.0 / FRAME_SIZE)
        assert found[spec.id][1] == pytest.approx(pose.y, abs=2.0 / FRAME_SIZE)


def test_detect_keypoints_skips_missing_colours():
    frame = np.tile(np.asarray(TABLE_RGB, np.float32) / 255.0, (8, 8, 1))
    frame[2:4, 4:6] = np.asarray((200, 30, 30), np.float32) / 255.0
    found = detect_keypoints(frame, {1: (200, 30, 30), 2: (30, 30, 200)})
    assert found == [(1, 5.0 / 8, 3.0 / 8)]


def line(id_, start, velocity, frames=5):
    positions = np.asarray(start) + np.outer(np.arange(frames), velocity)
    return Trajectory(id_, positions, np.ones(frames, dtype=bool))


def trajectory_set(*trajectories):
    return TrajectorySet({t.id: t for t in trajectories})


def test_identical_motion_scores_one():
    executed = trajectory_set(line(0, (0.5, 0.5), (0.05, 0.0)), line(1, (0.2, 0.2), (0.0, -0.03)))
    report = motion_similarity(executed, executed)
    assert report.mean == pytest.approx(1.0)
    assert report.matched == 2 and report.static == 0


def test_opposite_motion_scores_minus_one():
    executed = trajectory_set(line(0, (0.5, 0.5), (0.05, 0.0)))
    imagined = trajectory_set(line(0, (0.5, 0.5), (-0.05, 0.0)))
    assert motion_similarity(executed, imagined, "cosine").mean == pytest.approx(-1.0)


def test_static_pairs_are_left_out():
    executed = trajectory_set(line(0, (0.5, 0.5), (0.05, 0.0)), line(1, (0.2, 0.2), (0.0, 0.0)))
    imagined = trajectory_set(line(0, (0.5, 0.5), (0.0, 0.05)), line(1, (0.2, 0.2), (0.0, 0.0)))
    report = motion_similarity(executed, imagined)
    assert report.static == 1
    assert report.mean == pytest.approx(0.0)
    assert (1, 1, None) in report.pairs


def test_all_static_scores_one():
    still = trajectory_set(line(1, (0.2, 0.2), (0.0, 0.0)))
    assert motion_similarity(still, still).mean == 1.0


@pytest.mark.parametrize("cost", ["position", "cosine"])
def test_similarity_is_symmetric_and_translation_invariant(cost, rng):
    executed = trajectory_set(*(line(k, rng.uniform(0.2, 0.8, 2), rng.uniform(-0.05, 0.05, 2)) for k in range(3)))
    imagined = trajectory_set(*(line(k, rng.uniform(0.2, 0.8, 2), rng.uniform(-0.05, 0.05, 2)) for k in range(3)))
    forward = motion_similarity(executed, imagined, cost).mean
    assert motion_similarity(imagined, executed, cost).mean == pytest.approx(forward)
    if cost == "cosine":
        assert motion_similarity(executed, imagined.translated(0.3, -0.1), cost).mean == pytest.approx(forward)


def test_unmatched_trajectories_are_counted():
    executed = trajectory_set(line(0, (0.5, 0.5), (0.05, 0.0)), line(1, (0.2, 0.2), (0.0, 0.05)))
    imagined = trajectory_set(line(0, (0.5, 0.5), (0.05, 0.0)))
    report = motion_similarity(executed, imagined)
    assert report.unmatched_executed == 1 and report.unmatched_imagined == 0


def test_unusable_trajectories():
    lost = Trajectory(0, np.full((5, 2), np.nan), np.zeros(5, dtype=bool))
    assert not lost.usable
    assert matching_cost(lost, line(0, (0.5, 0.5), (0.1, 0.0))) == UNMATCHABLE
    with pytest.raises(DataError):
        motion_similarity(trajectory_set(lost), trajectory_set(line(0, (0.5, 0.5), (0.1, 0.0))))


def test_track_follows_expert_gripper():
    colors, shapes = training_pool("A")
    task = sample_task("pick_place", np.random.default_rng(2), colors, shapes)
    state = reset(task, "A", 2)
    trajectories = track([render(state)], task_palette(task, "A"))
    assert trajectories[0].valid.tolist() == [True]
    assert trajectories[0].positions[0, 0] == pytest.approx(HOME[0], abs=2.0 / FRAME_SIZE)


def test_auroc():
    assert auroc([0.9, 0.8, 0.1, 0.2], [True, True, False, False]) == 1.0
    assert auroc([0.1, 0.2, 0.9, 0.8], [True, True, False, False]) == 0.0
    assert auroc([0.5, 0.5, 0.5, 0.5], [True, False, True, False]) == 0.5
    points = [(0.9, 1), (0.8, 1), (0.7, 0), (0.6, 1), (0.4, 0), (0.2, 0)]
    assert auroc([s for s, _ in points], [bool(y) for _, y in points]) == pytest.approx(8 / 9)


@given(st.lists(st.tuples(st.integers(-50, 50), st.booleans()), min_size=2, max_size=30)
       .filter(lambda rows: len({y for _, y in rows}) == 2))
def test_auroc_invariant_under_monotone_transform(rows):
    scores = np.array([s for s, _ in rows], dtype=np.float64)
    labels = [y for _, y in rows]
    expected = auroc(scores, labels)
    assert auroc(np.exp(scores / 10.0), labels) == expected
    assert auroc(scores ** 3 + 2.0 * scores - 7.0, labels) == expected


def test_correlate():
    report = correlate([(0.9, True), (0.7, True), (0.1, False), (0.3, False), (float("nan"), False)])
    assert (report.n_success, report.n_failure) == (2, 2)
    assert report.mean_success == pytest.approx(0.8) and report.mean_failure == pytest.approx(0.2)
    assert report.difference == pytest.approx(0.6)
    assert report.auroc == 1.0
    assert report.point_biserial > 0.9
    assert json.loads(json.dumps(report.to_dict()))["n_success"] == 2


def test_correlate_needs_both_classes():
    with pytest.raises(DataError):
        correlate([(0.9, True), (0.7, True), (0.1, False)])


def test_scatter_svg():
    svg = scatter_svg([(0.9, True), (0.1, False), (-0.5, False)])
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<circle") == 3
    assert svg.count("stroke-dasharray") == 2


def blank_clip():
    return np.tile(np.asarray(TABLE_RGB, np.float32) / np.float32(255.0), (13, FRAME_SIZE, FRAME_SIZE, 1))


def paint(clip, rgb8, rows, cols):
    clip[:, rows, cols] = np.asarray(rgb8, np.float32) / np.float32(255.0)


def test_judge_pick_place():
    colors, shapes = training_pool("A")
    task = sample_task("pick_place", np.random.default_rng(0), colors, shapes)
    palette = task_palette(task, "A")
    placed = blank_clip()
    paint(placed, palette[task.target], slice(12, 20), slice(12, 20))
    paint(placed, palette[task.args[0]], slice(15, 17), slice(15, 17))
    assert judge_imagination(encode(placed), task, palette)

    apart = blank_clip()
    paint(apart, palette[task.target], slice(12, 20), slice(12, 20))
    paint(apart, palette[task.args[0]], slice(2, 4), slice(26, 28))
    assert not judge_imagination(encode(apart), task, palette)

    missing = blank_clip()
    paint(missing, palette[task.target], slice(12, 20), slice(12, 20))
    assert not judge_imagination(encode(missing), task, palette)
    assert not judge_imagination(None, task, palette)


def test_judge_topple():
    colors, shapes = training_pool("B")
    task = sample_task("topple", np.random.default_rng(0), colors, shapes)
    palette = task_palette(task, "B")
    lying = blank_clip()
    paint(lying, palette[task.args[0]], slice(15, 17), slice(8, 20))
    assert judge_imagination(encode(lying), task, palette)
    upright = blank_clip()
    paint(upright, palette[task.args[0]], slice(14, 18), slice(14, 18))
    assert not judge_imagination(encode(upright), task, palette)


def test_judge_wipe():
    colors, shapes = training_pool("B")
    task = sample_task("wipe", np.random.default_rng(0), colors, shapes)
    palette = task_palette(task, "B")
    assert judge_imagination(encode(blank_clip()), task, palette)
    dirty = blank_clip()
    paint(dirty, DIRT_RGB, slice(None), slice(None))
    assert not judge_imagination(encode(dirty), task, palette)


def test_imagination_table():
    analysis = pd.DataFrame({"trial_id": list("abcd"), "task": ["stack", "stack", "wipe", "wipe"],
                             "split": ["in_domain"] * 2 + ["new_skills"] * 2, "similarity": [1.0, 0.5, 0.0, 0.2],
                             "execution_success": [True, False, True, True],
                             "imagination_success": [True, True, False, True]})
    table = imagination_table(analysis)
    assert table["task"].tolist() == ["stack", "wipe", "average", "average"]
    assert table["execution_rate"].tolist() == [0.5, 1.0, 0.5, 1.0]
    assert table["imagination_rate"].tolist() == [1.0, 0.5, 1.0, 0.5]


@pytest.fixture(scope="module")
def mixed_archive(tmp_path_factory):
    archive = tmp_path_factory.mktemp("archive")
    cfg = RolloutConfig()
    expert_table, expert_results = evaluate(ExpertPolicy(6, 13, 4), split_spec("in_domain", ["pick_place"], ["A"]),
                                            cfg, trials_per_task=3)
    random_table, random_results = evaluate(RandomPolicy(6, 13, 4), split_spec("new_skills"), cfg,
                                            trials_per_task=1)
    write_archive(str(archive), pd.concat([expert_table, random_table], ignore_index=True),
                  expert_results + random_results, "mixed")
    return archive


def test_analyze_archive(mixed_archive, tmp_path):
    analysis, paths = analyze_archive(str(mixed_archive), str(tmp_path / "analysis"), frames_dir=str(tmp_path / "png"))
    assert len(analysis) == 7
    assert all((tmp_path / "analysis" / name).exists() for name in
               ("analysis.csv", "imagination_vs_execution.csv", "correlation.json", "scatter.svg"))
    expert_rows = analysis[analysis["split"] == "in_domain"]
    np.testing.assert_allclose(expert_rows["similarity"], 1.0, atol=1e-6)
    random_rows = analysis[analysis["split"] == "new_skills"]
    assert not np.any(random_rows["similarity"] >= 0.5)
    assert len(list((tmp_path / "png").glob("*.png"))) == 7

    report = json.loads((tmp_path / "analysis" / "correlation.json").read_text())
    if "error" not in report:
        assert report["difference"] > 0.5
        assert report["auroc"] >= 0.9


def test_analyze_archive_cosine_cost(mixed_archive, tmp_path):
    analysis, _ = analyze_archive(str(mixed_archive), str(tmp_path), cost="cosine")
    expert_rows = analysis[analysis["split"] == "in_domain"]
    np.testing.assert_allclose(expert_rows["similarity"], 1.0, atol=1e-6)
