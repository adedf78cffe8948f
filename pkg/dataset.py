# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

"""
Training windows over expert episodes: sliding-window sampling with padding masks, per-dimension
action normalisation, batch assembly in latent layout and the HDF5 episode cache
"""

import logging
import os
from dataclasses import dataclass

import numpy as np
from silx.io.dictdump import dicttoh5, h5todict

from codec import encode, flatten_raster, to_model_range, n_latents, TEMPORAL_RATE
from instructions import tokenize
from utils import DataError, content_hash

logger = logging.getLogger(__name__)

FRAMES_PER_ACTION = 2
NORMALIZER_FLOOR = 1e-2


class ActionNormalizer(object):
    """
    Per-dimension affine map of actions onto [-1, 1] from dataset percentiles
    """
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float32)
        self.hi = np.asarray(hi, dtype=np.float32)
        if self.lo.shape != (7,) or self.hi.shape != (7,) or np.any(self.hi <= self.lo):
            raise DataError("Invalid action normaliser bounds specified!")

    @classmethod
    def fit(cls, actions, floor=NORMALIZER_FLOOR):
        """
        1st / 99th percentile bounds; degenerate dimensions fall back to min / max, then to a symmetric floor
        :param actions: [M, 7] raw actions
        :param floor: minimum half-width of a dimension
        """
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, 7)
        if not len(actions):
            raise DataError("Cannot fit an action normaliser on zero actions")
        lo, hi = np.percentile(actions, 1, axis=0), np.percentile(actions, 99, axis=0)
        narrow = hi - lo < floor
        lo[narrow], hi[narrow] = actions[:, narrow].min(axis=0), actions[:, narrow].max(axis=0)
        narrow = hi - lo < floor
        mid = 0.5 * (lo + hi)
        lo[narrow], hi[narrow] = mid[narrow] - floor, mid[narrow] + floor
        return cls(lo, hi)

    def normalize(self, actions):
        scaled = 2.0 * (np.asarray(actions, dtype=np.float32) - self.lo) / (self.hi - self.lo) - 1.0
        return np.clip(scaled, -1.0, 1.0).astype(np.float32)

    def denormalize(self, actions):
        unit = (np.asarray(actions, dtype=np.float32) + 1.0) * 0.5
        return (unit * (self.hi - self.lo) + self.lo).astype(np.float32)


@dataclass
class EpisodeArrays:
    """
    Compact in-memory episode: uint8 frames and the tokenized instruction
    """
    frames: np.ndarray              # [T, H, W, C] uint8
    actions: np.ndarray             # [T_a, 7] float32 raw actions
    text: np.ndarray                # [L_text] int32
    skill: str
    embodiment: str

    @classmethod
    def from_episode(cls, episode, vocab, l_text):
        frames = np.rint(np.asarray(episode.frames) * 255.0).astype(np.uint8)
        return cls(frames, np.asarray(episode.actions, dtype=np.float32),
                   tokenize(episode.instruction, vocab, l_text), episode.skill, episode.embodiment)


@dataclass
class TrainSample:
    text: np.ndarray                # [L_text] int32
    frames: np.ndarray              # [N, H, W, C] float32, frame 0 is the observation
    frame_mask: np.ndarray          # [N] bool, False for padding
    actions: np.ndarray             # [K, 7] raw actions
    action_mask: np.ndarray         # [K] bool
    skill: str
    embodiment: str
    episode: int
    offset: int

    def latent_mask(self):
        """
        Validity of every future latent: False as soon as one of its four frames is padding
        """
        future = self.frame_mask[1:].reshape(-1, TEMPORAL_RATE)
        return future.all(axis=1)


@dataclass
class Batch:
    text: np.ndarray                # [B, L_text] int32
    obs: np.ndarray                 # [B, h w, c_lat] model range
    future: np.ndarray              # [B, n - 1, h w, c_lat] model range
    future_mask: np.ndarray         # [B, n - 1] float32
    actions: np.ndarray             # [B, K, 7] normalised
    action_mask: np.ndarray         # [B, K] float32


def window_offsets(n_episode_frames, n_frames, stride):
    """
    Offsets 0, s, 2s, ... up to and including the first window that reaches the episode end
    :return: list of offsets, empty for episodes shorter than one window
    """
    if stride < 1:
        raise ValueError("Invalid stride specified, must be at least 1!")
    if n_episode_frames < n_frames:
        return []
    offsets, offset = [], 0
    while True:
        offsets.append(offset)
        if offset + n_frames >= n_episode_frames:
            return offsets
        offset += stride


class WindowDataset(object):
    """
    Lazily materialised training windows over a list of episodes
    """
    def __init__(self, episodes, n_frames, k_actions, stride, patch=4, normalizer=None):
        """
        :param episodes: list of EpisodeArrays
        :param n_frames: frames per window N = 4(n - 1) + 1
        :param k_actions: actions per window K
        :param stride: window stride in frames
        :param patch: spatial patch of the latent codec
        :param normalizer: ActionNormalizer, fitted on all episode actions when None
        """
        n_latents(n_frames)
        self.episodes = episodes
        self.n_frames = n_frames
        self.k_actions = k_actions
        self.patch = patch
        self.windows = []
        for e, episode in enumerate(episodes):
            offsets = window_offsets(len(episode.frames), n_frames, stride)
            if not offsets:
                logger.warning(f"Episode {e} has {len(episode.frames)} frames, fewer than {n_frames}: no windows")
            self.windows.extend((e, o) for o in offsets)
        if not self.windows:
            raise DataError("Empty dataset: no episode is long enough for a single window")
        self.normalizer = normalizer or ActionNormalizer.fit(np.concatenate([e.actions for e in episodes]))

    def __len__(self):
        return len(self.windows)

    def __getitem__(self, i):
        e, offset = self.windows[i]
        episode = self.episodes[e]
        n_total = len(episode.frames)
        frame_index = offset + np.arange(self.n_frames)
        frame_mask = frame_index < n_total
        frames = episode.frames[np.minimum(frame_index, n_total - 1)].astype(np.float32) / np.float32(255.0)

        n_actions = len(episode.actions)
        action_index = offset // FRAMES_PER_ACTION + np.arange(self.k_actions)
        action_mask = action_index < n_actions
        actions = episode.actions[np.minimum(action_index, n_actions - 1)]
        return TrainSample(episode.text, frames, frame_mask, actions, action_mask, episode.skill,
                           episode.embodiment, e, offset)

    def collate(self, samples):
        latents = to_model_range(flatten_raster(encode(np.stack([s.frames for s in samples]), self.patch)))
        latents = latents.astype(np.float32)
        return Batch(text=np.stack([s.text for s in samples]),
                     obs=latents[:, 0],
                     future=latents[:, 1:],
                     future_mask=np.stack([s.latent_mask() for s in samples]).astype(np.float32),
                     actions=self.normalizer.normalize(np.stack([s.actions for s in samples])),
                     action_mask=np.stack([s.action_mask for s in samples]).astype(np.float32))

    def sample_batch(self, rng, batch_size):
        """
        Uniformly drawn windows (with replacement) assembled into a Batch
        :param rng: numpy Generator of the step
        :param batch_size: windows per batch
        """
        return self.collate([self[int(i)] for i in rng.integers(len(self), size=batch_size)])


def build_dataset(episodes, n_frames, k_actions, stride, patch=4, normalizer=None):
    return WindowDataset(episodes, n_frames, k_actions, stride, patch, normalizer)


def save_cache(path, episodes, key):
    """
    Write episodes to an HDF5 cache file
    :param path: cache file
    :param episodes: list of EpisodeArrays
    :param key: content hash of the inputs the cache was built from
    """
    tree = {"key": _bytes(key), "episodes": {
        f"{i:06d}": {"frames": e.frames, "actions": e.actions, "text": e.text,
                     "skill": _bytes(e.skill), "embodiment": _bytes(e.embodiment)}
        for i, e in enumerate(episodes)}}
    create_ds_args = {"compression": "gzip", "shuffle": True, "fletcher32": True}
    dicttoh5(tree, path, mode="w", create_dataset_args=create_ds_args)


def _bytes(text):
    return np.array([text.encode("utf-8")])


def _text(value):
    if isinstance(value, np.ndarray):
        value = value.reshape(-1)[0]
    return value.decode("utf-8") if isinstance(value, bytes) else str(value)


def load_cache(path, key):
    """
    :return: list of EpisodeArrays, or None when the cache is absent or built from other inputs
    """
    if not os.path.isfile(path):
        return None
    tree = h5todict(path)
    if _text(tree.get("key", b"")) != key:
        logger.info(f"Episode cache {path} is stale, rebuilding")
        return None
    return [EpisodeArrays(np.asarray(e["frames"], dtype=np.uint8), np.asarray(e["actions"], dtype=np.float32),
                          np.asarray(e["text"], dtype=np.int32), _text(e["skill"]), _text(e["embodiment"]))
            for _, e in sorted(tree["episodes"].items())]


def load_training_episodes(data_dir, vocab, l_text, cells=None, cache_path=None):
    """
    Read the training episodes of a dataset directory, through the HDF5 cache when given
    :param data_dir: directory written by episodes.generate_dataset
    :param vocab: instruction vocabulary
    :param l_text: instruction length
    :param cells: keep only these (skill, embodiment) cells (None = every episode)
    :param cache_path: optional HDF5 cache file
    :return: list of EpisodeArrays
    """
    from episodes import read_manifest, read_episode

    manifest = read_manifest(data_dir)
    if cells is not None:
        keep = set(map(tuple, cells))
        mask = np.array([(t, e) in keep for t, e in zip(manifest["task"], manifest["embodiment"])], dtype=bool)
        manifest = manifest[mask]
    if manifest.empty:
        raise DataError(f"No training episodes in {data_dir} for cells {cells}")
    paths = [os.path.join(data_dir, p) for p in manifest["path"]]
    key = content_hash(paths, {"l_text": l_text, "vocab": list(vocab.words)})

    if cache_path is not None:
        cached = load_cache(cache_path, key)
        if cached is not None:
            logger.info(f"Loaded {len(cached)} episodes from cache {cache_path}")
            return cached
    episodes = [EpisodeArrays.from_episode(read_episode(p), vocab, l_text) for p in paths]
    if cache_path is not None:
        save_cache(cache_path, episodes, key)
    return episodes
