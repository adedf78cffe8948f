import numpy as np
import pytest

from config import DataConfig
from episodes import (Episode, write_episode, read_episode, record_expert_episode, generate_dataset, read_manifest,
                      split_tags, HEADER)
from instructions import Vocab, build_vocab
from tabletop import training_pool, sample_task
from utils import DataError


def make_episode(seed=0, skill="pick_place", emb="A"):
    colors, shapes = training_pool(emb)
    task = sample_task(skill, np.random.default_rng(seed), colors, shapes)
    return record_expert_episode(task, emb, seed, max_steps=60, hold_steps=2)


def test_episode_file_round_trip(tmp_path):
    episode = make_episode()
    path = tmp_path / "episode.vvla"
    write_episode(path, episode)
    restored = read_episode(path)
    assert np.array_equal(restored.frames, episode.frames)
    assert np.array_equal(restored.actions, episode.actions.astype(np.float32))
    assert np.array_equal(restored.keypoints, episode.keypoints)
    assert (restored.embodiment, restored.skill, restored.success, restored.instruction) == \
        (episode.embodiment, episode.skill, episode.success, episode.instruction)


def test_hold_steps_appended():
    episode = make_episode()
    assert episode.success
    np.testing.assert_array_equal(episode.actions[-1][:6], np.zeros(6))
    np.testing.assert_array_equal(episode.frames[-1], episode.frames[-3])


def test_read_episode_rejects_garbage(tmp_path):
    path = tmp_path / "bad.vvla"
    path.write_bytes(b"NOPE" + bytes(HEADER.size))
    with pytest.raises(DataError):
        read_episode(path)


def test_read_episode_rejects_truncation(tmp_path):
    path = tmp_path / "episode.vvla"
    write_episode(path, make_episode())
    payload = path.read_bytes()
    path.write_bytes(payload[:len(payload) // 2])
    with pytest.raises(DataError):
        read_episode(path)


def test_write_episode_rejects_mismatched_keypoints(tmp_path):
    episode = make_episode()
    broken = Episode(episode.frames, episode.actions, episode.embodiment, episode.skill, episode.success,
                     episode.instruction, episode.keypoints[1:])
    with pytest.raises(DataError):
        write_episode(tmp_path / "broken.vvla", broken)


def test_split_tags():
    colors, shapes = training_pool("B")
    task = sample_task("topple", np.random.default_rng(0), colors, shapes)
    tags = split_tags(task, "B")
    assert {"train", "emb:B", "skill:topple", "cell:topple/B", "shape:bottle"} <= set(tags)


def test_generate_dataset(tmp_path):
    cfg = DataConfig(episodes_per_cell=2, seed=5)
    manifest = generate_dataset(cfg, str(tmp_path), skills=["pick_place", "topple"], jobs=2)
    assert len(manifest) == 6
    assert manifest.groupby(["task", "embodiment"]).size().to_dict() == \
        {("pick_place", "A"): 2, ("pick_place", "B"): 2, ("topple", "B"): 2}
    assert manifest["success"].all()
    assert Vocab.load(tmp_path / "vocab.txt") == build_vocab()

    restored = read_manifest(str(tmp_path))
    assert list(restored["path"]) == list(manifest["path"])
    assert isinstance(restored["split_tags"][0], list)
    episode = read_episode(tmp_path / restored["path"][0])
    assert episode.instruction == restored["instruction"][0]


def test_generate_dataset_is_deterministic(tmp_path):
    cfg = DataConfig(episodes_per_cell=1, seed=1)
    first = generate_dataset(cfg, str(tmp_path / "a"), skills=["stack"], embodiments=["A"])
    second = generate_dataset(cfg, str(tmp_path / "b"), skills=["stack"], embodiments=["A"], jobs=3)
    other = generate_dataset(DataConfig(episodes_per_cell=1, seed=2), str(tmp_path / "c"), skills=["stack"],
                             embodiments=["A"])
    path = first["path"][0]
    assert (tmp_path / "a" / path).read_bytes() == (tmp_path / "b" / path).read_bytes()
    assert (tmp_path / "a" / path).read_bytes() != (tmp_path / "c" / other["path"][0]).read_bytes()
    assert first.to_json() == second.to_json()


def test_generate_dataset_rejects_empty_partition(tmp_path):
    with pytest.raises(DataError):
        generate_dataset(DataConfig(episodes_per_cell=1), str(tmp_path), skills=["topple"], embodiments=["A"])


def test_generate_dataset_fails_on_expert_failure(tmp_path):
    cfg = DataConfig(episodes_per_cell=1, max_steps=1)
    with pytest.raises(DataError, match="stack/A episode 0"):
        generate_dataset(cfg, str(tmp_path), skills=["stack"], embodiments=["A"])


def test_read_manifest_missing(tmp_path):
    with pytest.raises(DataError):
        read_manifest(str(tmp_path))
