# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

"""
Closed-loop evaluation: predict a chunk, execute a prefix, replan until success or timeout,
aggregate success rates per split and archive every trial for the analyzer
"""

import json
import logging
import os
import struct
from abc import ABCMeta, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from codec import encode
from episodes import Episode, write_episode, read_episode
from instructions import instantiate_template, tokenize
from tabletop import (SKILLS, EMBODIMENTS, SimulationError, TaskSpec, reset, render, advance, keypoint_array,
                      check_success, expert_action, sample_split_task)
from utils import DataError, atomic_write, derive_seed

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["split", "task", "embodiment", "trials", "successes", "rate"]
TRIALS = "trials.jsonl"
SUCCESS_TABLE = "success_table.csv"


def _pad_clip(frames, n_frames):
    """Truncate to n_frames or pad by repeating the last frame."""
    frames = list(frames[:n_frames])
    frames += [frames[-1]] * (n_frames - len(frames))
    return np.stack(frames)


class Policy(object, metaclass=ABCMeta):
    """
    Chunk predictor queried once per replan
    """
    def __init__(self, k_actions, n_frames, patch):
        self.k_actions = k_actions
        self.n_frames = n_frames
        self.patch = patch

    @abstractmethod
    def plan(self, state, frame, task, instruction, seed):
        """
        :param state: true WorldState (only stand-in policies may look at it)
        :param frame: current rendered observation
        :param task: TaskSpec
        :param instruction: instruction string
        :param seed: seed of this prediction
        :return: (imagined latent clip [n, h, w, c_lat] in [0, 1] or None, raw actions [K, 7])
        """


class ModelPolicy(Policy):
    """
    The trained transformer: pixels and instruction in, imagined latents and denormalised actions out
    """
    def __init__(self, model, steps=None, infer_mode=None):
        c = model.mcfg
        super().__init__(c.k_actions, c.n_frames, c.patch)
        if model.normalizer is None:
            raise DataError("Checkpoint carries no action normaliser")
        self.model = model
        self.steps = steps
        self.infer_mode = infer_mode

    def plan(self, state, frame, task, instruction, seed):
        text = tokenize(instruction, self.model.vocab, self.model.mcfg.l_text)
        obs_latent = encode(frame[None], self.patch)[0]
        clip, actions = self.model.sample(text[None], obs_latent[None], seed, self.steps, self.infer_mode)
        return (clip[0] if clip is not None else None), self.model.normalizer.denormalize(actions[0])


class ExpertPolicy(Policy):
    """
    Ceiling stand-in: plans by simulating the scripted expert; imagination is the recorded future
    """
    def plan(self, state, frame, task, instruction, seed):
        frames, actions = [frame], []
        for _ in range(self.k_actions):
            action = np.asarray(expert_action(state, task), dtype=np.float32)
            state, new_frames, _ = advance(state, action)
            actions.append(action)
            frames.extend(new_frames)
        return encode(_pad_clip(frames, self.n_frames), self.patch), np.stack(actions)


class RandomPolicy(Policy):
    """
    Baseline stand-in: uniform translation and yaw deltas, coin-flip gripper, static imagination
    """
    scale = 0.25

    def plan(self, state, frame, task, instruction, seed):
        rng = np.random.default_rng(seed)
        actions = np.zeros((self.k_actions, 7), dtype=np.float32)
        actions[:, 2:6] = rng.uniform(-self.scale, self.scale, (self.k_actions, 4))
        actions[:, 6] = rng.integers(0, 2, self.k_actions)
        return encode(_pad_clip([frame], self.n_frames), self.patch), actions


@dataclass
class TrialResult:
    trial_id: str
    split: str
    task: TaskSpec
    embodiment: str
    seed: int
    success: bool
    frames: np.ndarray              # [T, H, W, C] executed frames, observation first
    actions: np.ndarray             # [T_a, 7] executed actions
    keypoints: np.ndarray           # [T, P, 2] ground-truth keypoints
    imagined: list = field(default_factory=list)    # per replan latent clip or None
    windows: list = field(default_factory=list)     # per replan (first action, executed count)
    error: str = None

    @property
    def instruction(self):
        return instantiate_template(self.task)

    @property
    def n_replans(self):
        return len(self.windows)


def run_trial(policy, task, emb, cfg, trial_seed, trial_id="trial", split=""):
    """
    Closed loop of one trial
    :param policy: Policy
    :param task: TaskSpec
    :param emb: embodiment name
    :param cfg: RolloutConfig
    :param trial_seed: seed of the reset and of every prediction
    :param trial_id: archive identifier
    :param split: split name recorded with the result
    :return: TrialResult
    """
    state = reset(task, emb, derive_seed(trial_seed, 1))
    instruction = instantiate_template(task)
    frames, points, actions = [render(state)], [keypoint_array(state)], []
    imagined, windows = [], []
    success, error = check_success(state, task), None
    try:
        for replan in range(cfg.max_replans):
            if success:
                break
            clip, chunk = policy.plan(state, frames[-1], task, instruction, derive_seed(trial_seed, 2, replan))
            imagined.append(clip)
            first = len(actions)
            for action in np.asarray(chunk[:cfg.execute], dtype=np.float32):
                state, new_frames, new_points = advance(state, action)
                actions.append(action)
                frames.extend(new_frames)
                points.extend(new_points)
                if check_success(state, task):
                    success = True
                    break
            windows.append((first, len(actions) - first))
    except SimulationError as err:
        logger.debug(f"Trial {trial_id} aborted: {err}")
        success, error = False, str(err)
        if len(imagined) > len(windows):
            windows.append((first, len(actions) - first))

    return TrialResult(trial_id, split, task, emb, int(trial_seed), bool(success), np.stack(frames),
                       np.stack(actions) if actions else np.zeros((0, 7), np.float32), np.stack(points),
                       imagined, windows, error)


def evaluate(policy, split, cfg, trials_per_task=None, seed=None, jobs=1):
    """
    Run every cell of a split
    :param policy: Policy
    :param split: tabletop.SplitSpec
    :param cfg: RolloutConfig
    :param trials_per_task: trials per (skill, embodiment) cell, cfg.trials_per_task when None
    :param seed: master seed, cfg.seed when None
    :param jobs: worker threads
    :return: (SuccessTable DataFrame with a trailing average row, list of TrialResult)
    """
    if not split.cells:
        raise DataError(f"Split {split.name} has no (skill, embodiment) cells")
    trials_per_task = trials_per_task or cfg.trials_per_task
    seed = cfg.seed if seed is None else seed

    jobs_list = []
    for skill, emb in split.cells:
        for trial in range(trials_per_task):
            trial_seed = derive_seed(seed, SKILLS.index(skill), EMBODIMENTS[emb].index, trial)
            task = sample_split_task(split, skill, emb, np.random.default_rng(trial_seed), trial)
            jobs_list.append((task, emb, trial_seed, f"{split.name}_{skill}_{emb}_{trial:04d}"))

    def work(job):
        task, emb, trial_seed, trial_id = job
        return run_trial(policy, task, emb, cfg, trial_seed, trial_id, split.name)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(tqdm(pool.map(work, jobs_list), total=len(jobs_list), desc=f"eval {split.name}", leave=False))
    return success_table(split.name, results), results


def success_table(split_name, results):
    """
    Per-cell success counts in first-seen order plus the trial-weighted average row
    """
    frame = pd.DataFrame({"task": [r.task.skill for r in results], "embodiment": [r.embodiment for r in results],
                          "success": [int(r.success) for r in results]})
    table = frame.groupby(["task", "embodiment"], sort=False).agg(trials=("success", "size"),
                                                                   successes=("success", "sum")).reset_index()
    table.insert(0, "split", split_name)
    average = {"split": split_name, "task": "average", "embodiment": "all", "trials": int(table["trials"].sum()),
               "successes": int(table["successes"].sum())}
    table = pd.concat([table, pd.DataFrame([average])], ignore_index=True)
    table["rate"] = table["successes"] / table["trials"]
    return table[TABLE_COLUMNS]


def write_imagination(path, clips):
    """
    Imagined latent clips: u32 count, then per clip u8 rank, u32 extents and f32 LE values
    """
    chunks = [struct.pack("<I", len(clips))]
    for clip in clips:
        array = np.asarray(clip, dtype="<f4")
        chunks.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    atomic_write(path, b"".join(chunks))


def read_imagination(path):
    with open(path, "rb") as in_file:
        payload = in_file.read()
    try:
        (count,) = struct.unpack_from("<I", payload)
        offset, clips = 4, []
        for _ in range(count):
            (rank,) = struct.unpack_from("<B", payload, offset)
            shape = struct.unpack_from(f"<{rank}I", payload, offset + 1)
            offset += 1 + 4 * rank
            size = int(np.prod(shape))
            if offset + 4 * size > len(payload):
                raise DataError(f"Truncated imagination blob {path}")
            clips.append(np.frombuffer(payload, "<f4", size, offset).reshape(shape).astype(np.float32))
            offset += 4 * size
    except struct.error as err:
        raise DataError(f"Corrupt imagination blob {path}: {err}")
    return clips


def write_archive(out_dir, table, results, policy_name="model"):
    """
    Trial archive: episode file and imagination blob per trial, trials.jsonl and success_table.csv
    :return: written paths
    """
    trial_dir = os.path.join(out_dir, "trials")
    os.makedirs(trial_dir, exist_ok=True)
    records, paths = [], []
    for r in results:
        episode_path = os.path.join("trials", f"{r.trial_id}.vvla")
        imag_path = os.path.join("trials", f"{r.trial_id}.imag")
        write_episode(os.path.join(out_dir, episode_path),
                      Episode(r.frames, r.actions, r.embodiment, r.task.skill, r.success, r.instruction, r.keypoints))
        has_imagination = bool(r.imagined) and all(c is not None for c in r.imagined)
        write_imagination(os.path.join(out_dir, imag_path), r.imagined if has_imagination else [])
        records.append({"trial_id": r.trial_id, "split": r.split, "task": r.task.skill, "embodiment": r.embodiment,
                        "seed": r.seed, "success": r.success, "error": r.error, "policy": policy_name,
                        "episode": episode_path, "imagination": imag_path if has_imagination else None,
                        "windows": [list(w) for w in r.windows], "n_replans": r.n_replans,
                        "spec": r.task.to_dict()})
        paths += [episode_path, imag_path]
    atomic_write(os.path.join(out_dir, TRIALS),
                 "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in records).encode("utf-8"))
    atomic_write(os.path.join(out_dir, SUCCESS_TABLE), table.to_csv(index=False).encode("utf-8"))
    return [os.path.join(out_dir, p) for p in paths] + [os.path.join(out_dir, TRIALS),
                                                       os.path.join(out_dir, SUCCESS_TABLE)]


def read_archive(archive_dir):
    """
    :return: trial records as a DataFrame, one row per trial
    """
    path = os.path.join(archive_dir, TRIALS)
    if not os.path.isfile(path):
        raise DataError(f"No trial archive found in {archive_dir}")
    with open(path, encoding="utf-8") as in_file:
        records = [json.loads(line) for line in in_file if line.strip()]
    if not records:
        raise DataError(f"Empty trial archive {archive_dir}")
    return pd.DataFrame.from_records(records)


def load_trial(archive_dir, record):
    """
    :param record: one row of read_archive
    :return: (TaskSpec, executed Episode, list of imagined latent clips)
    """
    episode = read_episode(os.path.join(archive_dir, record["episode"]))
    clips = read_imagination(os.path.join(archive_dir, record["imagination"])) if record["imagination"] else []
    return TaskSpec.from_dict(record["spec"]), episode, clips


def check_split_hygiene(split, manifest):
    """
    Verify that no training episode exposes a combination held out by the split
    :param split: tabletop.SplitSpec
    :param manifest: training manifest DataFrame with split_tags
    :return: True, raises DataError listing offending episodes otherwise
    """
    if split.name == "novel_objects":
        held_out = {f"color:{c}" for c in split.held_out_colors} | {f"shape:{s}" for s in split.held_out_shapes}
        embs = {f"emb:{emb}" for _, emb in split.cells}
        offending = [p for p, tags in zip(manifest["path"], manifest["split_tags"])
                     if set(tags) & embs and set(tags) & held_out]
    elif split.name == "new_skills":
        cells = {f"cell:{skill}/{emb}" for skill, emb in split.cells}
        offending = [p for p, tags in zip(manifest["path"], manifest["split_tags"]) if set(tags) & cells]
    else:
        offending = []
    if offending:
        raise DataError(f"Split {split.name} leaks into training: {len(offending)} episodes, e.g. {offending[:3]}")
    return True
