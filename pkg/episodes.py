# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

"""
Episode files, the dataset manifest and scripted-expert data generation
"""

import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

from instructions import build_vocab, instantiate_template
from tabletop import (SKILLS, EMBODIMENTS, SimulationError, TaskSpec, reset, render, advance, keypoint_array,
                      check_success, expert_action, hold_action, sample_task, training_pool, training_cells)
from utils import DataError, atomic_write, derive_seed

logger = logging.getLogger(__name__)

EPISODE_MAGIC = b"VVLA"
EPISODE_VERSION = 1
HEADER = struct.Struct("<4sIHHBHHBBBH")
MANIFEST = "manifest.jsonl"
VOCAB = "vocab.txt"


@dataclass
class Episode:
    frames: np.ndarray              # [T, H, W, C] float32, T = 2 T_a + 1
    actions: np.ndarray             # [T_a, 7] float32
    embodiment: str
    skill: str
    success: bool
    instruction: str
    keypoints: np.ndarray           # [T, P, 2] float32, gripper first
    task: TaskSpec = None


def write_episode(path, episode):
    """
    Serialise an episode: fixed header, instruction, then frames, actions and keypoints as f32 LE
    :param path: destination file
    :param episode: Episode
    """
    frames = np.asarray(episode.frames, dtype="<f4")
    actions = np.asarray(episode.actions, dtype="<f4").reshape(-1, 7)
    points = np.asarray(episode.keypoints, dtype="<f4")
    n_frames, height, width, channels = frames.shape
    if points.shape[:1] != (n_frames,) or points.shape[-1] != 2:
        raise DataError(f"Keypoints {points.shape} do not match {n_frames} frames")
    instruction = episode.instruction.encode("utf-8")
    header = HEADER.pack(EPISODE_MAGIC, EPISODE_VERSION, height, width, channels, n_frames, len(actions),
                         EMBODIMENTS[episode.embodiment].index, SKILLS.index(episode.skill),
                         int(bool(episode.success)), len(instruction))
    atomic_write(path, b"".join([header, instruction, frames.tobytes(), actions.tobytes(), points.tobytes()]))


def read_episode(path):
    """
    :param path: episode file
    :return: Episode (task left unset, the manifest carries the full task)
    """
    with open(path, "rb") as in_file:
        payload = in_file.read()
    if len(payload) < HEADER.size or payload[:4] != EPISODE_MAGIC:
        raise DataError(f"Invalid episode file specified: {path}")
    (_, version, height, width, channels, n_frames, n_actions, emb_index, task_index, success,
     text_length) = HEADER.unpack_from(payload)
    if version != EPISODE_VERSION:
        raise DataError(f"Unsupported episode version {version} in {path}")
    by_index = {e.index: name for name, e in EMBODIMENTS.items()}
    if emb_index not in by_index or task_index >= len(SKILLS):
        raise DataError(f"Invalid embodiment or task id in {path}")

    offset = HEADER.size
    instruction = payload[offset:offset + text_length].decode("utf-8")
    offset += text_length
    frame_values = n_frames * height * width * channels
    action_values = 7 * n_actions
    if len(payload) < offset + 4 * (frame_values + action_values):
        raise DataError(f"Truncated episode file {path}")
    frames = np.frombuffer(payload, "<f4", frame_values, offset).reshape(n_frames, height, width, channels)
    offset += 4 * frame_values
    actions = np.frombuffer(payload, "<f4", action_values, offset).reshape(n_actions, 7)
    offset += 4 * action_values
    remaining = len(payload) - offset
    per_point = 4 * 2 * n_frames
    if n_frames == 0 or remaining % per_point:
        raise DataError(f"Keypoint block of {remaining} bytes does not fit {n_frames} frames in {path}")
    points = np.frombuffer(payload, "<f4", remaining // 4, offset).reshape(n_frames, remaining // per_point, 2)
    return Episode(frames.astype(np.float32), actions.astype(np.float32), by_index[emb_index], SKILLS[task_index],
                   bool(success), instruction, points.astype(np.float32))


def record_expert_episode(task, emb, seed, max_steps=60, hold_steps=3):
    """
    Roll the scripted expert from a seeded reset, two frames per action, hold actions after success
    :param task: TaskSpec
    :param emb: embodiment name
    :param seed: reset seed
    :param max_steps: expert step budget
    :param hold_steps: hold actions appended once the task succeeds
    :return: Episode
    """
    state = reset(task, emb, seed)
    frames, points, actions = [render(state)], [keypoint_array(state)], []

    def apply(action):
        nonlocal state
        action = np.asarray(action, dtype=np.float32)
        state, new_frames, new_points = advance(state, action)
        actions.append(action)
        frames.extend(new_frames)
        points.extend(new_points)

    for _ in range(max_steps):
        if check_success(state, task):
            break
        apply(expert_action(state, task))
    success = check_success(state, task)
    if success:
        for _ in range(hold_steps):
            apply(hold_action(state))
    return Episode(np.stack(frames), np.stack(actions) if actions else np.zeros((0, 7), np.float32), emb,
                   task.skill, success, instantiate_template(task), np.stack(points), task)


def split_tags(task, emb):
    """
    Tags recording every attribute combination an episode exposes, used by the split hygiene check
    """
    tags = ["train", f"emb:{emb}", f"skill:{task.skill}", f"cell:{task.skill}/{emb}"]
    tags += sorted({f"color:{s.color}" for s in task.scene} | {f"shape:{s.shape}" for s in task.scene})
    return tags


def _generate_cell(skill, emb, data_cfg, out_dir):
    colors, shapes = training_pool(emb)
    task_index, emb_index = SKILLS.index(skill), EMBODIMENTS[emb].index
    records = []
    for k in range(data_cfg.episodes_per_cell):
        seed = derive_seed(data_cfg.seed, task_index, emb_index, k)
        task = sample_task(skill, np.random.default_rng(seed), colors, shapes)
        reset_seed = derive_seed(seed, 1)
        episode = record_expert_episode(task, emb, reset_seed, data_cfg.max_steps, data_cfg.hold_steps)
        if not episode.success:
            raise SimulationError(f"Expert failed on {skill}/{emb} episode {k} (reset seed {reset_seed}) "
                                  f"within {data_cfg.max_steps} steps")
        path = os.path.join("episodes", f"{skill}_{emb}_{k:05d}.vvla")
        write_episode(os.path.join(out_dir, path), episode)
        records.append({"path": path, "task": skill, "embodiment": emb, "episode": k, "seed": reset_seed,
                        "n_actions": len(episode.actions), "success": True, "instruction": episode.instruction,
                        "split_tags": split_tags(task, emb), "spec": task.to_dict()})
    return records


def generate_dataset(data_cfg, out_dir, skills=None, embodiments=None, jobs=1):
    """
    Expert episodes for every training (skill, embodiment) cell, the manifest and the vocabulary
    :param data_cfg: DataConfig
    :param out_dir: dataset directory
    :param skills: restrict to these skills
    :param embodiments: restrict to these embodiments
    :param jobs: worker threads, one cell per task
    :return: manifest DataFrame
    """
    cells = training_cells(skills, embodiments)
    if not cells:
        raise DataError(f"No training cells for skills {skills} and embodiments {embodiments}")
    os.makedirs(os.path.join(out_dir, "episodes"), exist_ok=True)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = [pool.submit(_generate_cell, skill, emb, data_cfg, out_dir) for skill, emb in cells]
        records = []
        for (skill, emb), future in tqdm(zip(cells, futures), total=len(cells), desc="gen-data", leave=False):
            cell_records = future.result()
            logger.info(f"Cell {skill}/{emb}: {len(cell_records)} episodes")
            records.extend(cell_records)

    manifest = pd.DataFrame.from_records(records)
    write_manifest(out_dir, manifest)
    build_vocab().save(os.path.join(out_dir, VOCAB))
    return manifest


def write_manifest(out_dir, manifest, name=MANIFEST):
    payload = manifest.to_json(orient="records", lines=True)
    atomic_write(os.path.join(out_dir, name), payload.encode("utf-8"))


def read_manifest(data_dir, name=MANIFEST):
    """
    :return: manifest DataFrame, one record per episode
    """
    path = os.path.join(data_dir, name)
    if not os.path.isfile(path):
        raise DataError(f"No manifest found in {data_dir}")
    manifest = pd.read_json(path, orient="records", lines=True, dtype=False)
    if manifest.empty:
        raise DataError(f"Empty manifest {path}")
    return manifest
