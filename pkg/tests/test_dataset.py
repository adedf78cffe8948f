import logging

import numpy as np
import pytest

from dataset import (ActionNormalizer, EpisodeArrays, WindowDataset, window_offsets, build_dataset, save_cache,
                     load_cache, load_training_episodes)
from episodes import generate_dataset
from config import DataConfig
from instructions import build_vocab
from tabletop import training_cells
from utils import DataError


def synthetic_episode(n_actions, rng, skill="pick_place", emb="A"):
    frames = rng.integers(0, 256, size=(2 * n_actions + 1, 8, 8, 3)).astype(np.uint8)
    actions = rng.uniform(-1, 1, size=(n_actions, 7)).astype(np.float32)
    return EpisodeArrays(frames, actions, np.arange(4, dtype=np.int32), skill, emb)


@pytest.mark.parametrize("length, n_frames, stride, expected", [
    (13, 13, 1, [0]),
    (25, 13, 4, [0, 4, 8, 12]),
    (12, 13, 1, []),
    (15, 13, 2, [0, 2]),
    (16, 13, 2, [0, 2, 4]),
])
def test_window_offsets(length, n_frames, stride, expected):
    assert window_offsets(length, n_frames, stride) == expected


def test_window_offsets_rejects_zero_stride():
    with pytest.raises(ValueError):
        window_offsets(13, 13, 0)


def test_short_episode_warns(rng, caplog):
    episodes = [synthetic_episode(2, rng), synthetic_episode(6, rng)]
    with caplog.at_level(logging.WARNING):
        dataset = WindowDataset(episodes, 13, 6, 2, patch=4)
    assert len(dataset) == 1
    assert "fewer than 13" in caplog.text


def test_empty_dataset_is_an_error(rng):
    with pytest.raises(DataError):
        build_dataset([synthetic_episode(2, rng)], 13, 6, 2, patch=4)


def test_window_alignment_and_padding(rng):
    episode = synthetic_episode(7, rng)
    dataset = WindowDataset([episode], 13, 6, 2, patch=4)
    assert dataset.windows == [(0, 0), (0, 2)]

    first = dataset[0]
    assert first.frame_mask.all() and first.action_mask.all()
    np.testing.assert_array_equal(first.actions, episode.actions[:6])
    np.testing.assert_array_equal(first.frames[0], episode.frames[0] / np.float32(255.0))

    last = dataset[1]
    assert last.frame_mask.tolist() == [True] * 13
    assert last.action_mask.tolist() == [True] * 6
    np.testing.assert_array_equal(last.actions[0], episode.actions[1])


def test_padded_window_masks(rng):
    dataset = WindowDataset([synthetic_episode(7, rng)], 13, 6, 4, patch=4)
    padded = dataset[1]
    assert padded.offset == 4
    assert padded.frame_mask.sum() == 11
    assert padded.action_mask.tolist() == [True] * 5 + [False]
    assert padded.latent_mask().tolist() == [True, True, False]
    np.testing.assert_array_equal(padded.frames[-1], padded.frames[10])


def test_batch_layout(rng):
    dataset = WindowDataset([synthetic_episode(9, rng) for _ in range(3)], 13, 6, 2, patch=4)
    batch = dataset.sample_batch(np.random.default_rng(0), 5)
    assert batch.text.shape == (5, 4)
    assert batch.obs.shape == (5, 4, 192)
    assert batch.future.shape == (5, 3, 4, 192)
    assert batch.future_mask.shape == (5, 3)
    assert batch.actions.shape == (5, 6, 7) and batch.action_mask.shape == (5, 6)
    assert batch.obs.min() >= -1.0 and batch.obs.max() <= 1.0
    assert np.abs(batch.actions).max() <= 1.0


def test_sample_batch_is_seeded(rng):
    dataset = WindowDataset([synthetic_episode(9, rng) for _ in range(3)], 13, 6, 2, patch=4)
    first = dataset.sample_batch(np.random.default_rng(4), 3)
    second = dataset.sample_batch(np.random.default_rng(4), 3)
    np.testing.assert_array_equal(first.future, second.future)
    np.testing.assert_array_equal(first.actions, second.actions)


def test_normalizer_maps_percentiles(rng):
    actions = rng.uniform(-3, 5, size=(5000, 7))
    norm = ActionNormalizer.fit(actions)
    np.testing.assert_allclose(norm.lo, np.percentile(actions, 1, axis=0), rtol=1e-5)
    scaled = norm.normalize(actions)
    assert scaled.min() == -1.0 and scaled.max() == 1.0
    inside = (actions > norm.lo) & (actions < norm.hi)
    np.testing.assert_allclose(norm.denormalize(scaled)[inside], actions[inside], atol=1e-5)


def test_normalizer_degenerate_dimensions():
    actions = np.zeros((100, 7))
    actions[:, 6] = np.r_[np.zeros(50), np.ones(50)]
    norm = ActionNormalizer.fit(actions)
    assert np.all(norm.hi > norm.lo)
    assert norm.lo[0] == pytest.approx(-1e-2) and norm.hi[0] == pytest.approx(1e-2)
    assert norm.normalize(np.zeros(7))[0] == pytest.approx(0.0)
    np.testing.assert_allclose(norm.normalize(actions[-1])[6], 1.0)


def test_normalizer_rejects_bad_bounds():
    with pytest.raises(DataError):
        ActionNormalizer(np.ones(7), np.zeros(7))
    with pytest.raises(DataError):
        ActionNormalizer.fit(np.zeros((0, 7)))


def test_cache_round_trip(rng, tmp_path):
    episodes = [synthetic_episode(3, rng, "stack", "B"), synthetic_episode(5, rng)]
    path = str(tmp_path / "cache.hdf5")
    save_cache(path, episodes, "abc")
    restored = load_cache(path, "abc")
    assert len(restored) == 2
    for a, b in zip(episodes, restored):
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.text, b.text)
        assert (a.skill, a.embodiment) == (b.skill, b.embodiment)
    assert load_cache(path, "other") is None
    assert load_cache(str(tmp_path / "missing.hdf5"), "abc") is None


def test_load_training_episodes(tmp_path):
    data = str(tmp_path / "data")
    generate_dataset(DataConfig(episodes_per_cell=1, seed=0), data, skills=["pick_place", "stack"])
    vocab = build_vocab()
    cache = str(tmp_path / "cache.hdf5")
    episodes = load_training_episodes(data, vocab, 16, training_cells(embodiments=["A"]), cache_path=cache)
    assert [(e.skill, e.embodiment) for e in episodes] == [("pick_place", "A"), ("stack", "A")]
    cached = load_training_episodes(data, vocab, 16, training_cells(embodiments=["A"]), cache_path=cache)
    for a, b in zip(episodes, cached):
        np.testing.assert_array_equal(a.frames, b.frames)
    with pytest.raises(DataError):
        load_training_episodes(data, vocab, 16, [("wipe", "B")])


def test_load_training_episodes_per_embodiment(tmp_path):
    data = str(tmp_path / "data")
    generate_dataset(DataConfig(episodes_per_cell=1, seed=0), data, skills=["pick_place", "stack", "topple"])
    cells = training_cells(embodiment_skills={"A": ["pick_place"], "B": ["stack", "topple"]})
    episodes = load_training_episodes(data, build_vocab(), 16, cells)
    assert [(e.skill, e.embodiment) for e in episodes] == [("pick_place", "A"), ("stack", "B"), ("topple", "B")]
