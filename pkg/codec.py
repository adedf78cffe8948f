# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

"""
Lossless causal frame <-> latent rearrangement. The first latent holds the observation
(replicated four times), every further latent holds a block of four future frames.
All functions accept leading batch dimensions.
"""

import numpy as np

TEMPORAL_RATE = 4


def n_latents(n_frames):
    """
    Latent count for a clip of n_frames = 4(n - 1) + 1 frames
    """
    if n_frames < 1 or (n_frames - 1) % TEMPORAL_RATE:
        raise ValueError(f"Invalid frame count specified: {n_frames}, need N = 1 (mod 4)")
    return (n_frames - 1) // TEMPORAL_RATE + 1


def n_frames(n_lat):
    if n_lat < 1:
        raise ValueError(f"Invalid latent count specified: {n_lat}")
    return TEMPORAL_RATE * (n_lat - 1) + 1


def latent_channels(patch, channels):
    return TEMPORAL_RATE * patch * patch * channels


def encode(clip, patch=4):
    """
    Space-time-to-depth of a clip
    :param clip: [..., N, H, W, C]
    :param patch: spatial patch p, must divide H and W
    :return: latents [..., n, H/p, W/p, 4 p p C]
    """
    clip = np.asarray(clip)
    if clip.ndim < 4:
        raise ValueError(f"Invalid clip shape specified: {clip.shape}")
    *lead, frames, height, width, channels = clip.shape
    n = n_latents(frames)
    if height % patch or width % patch:
        raise ValueError(f"Frame size {height}x{width} not divisible by patch {patch}")
    h, w = height // patch, width // patch

    first = np.repeat(clip[..., :1, :, :, :], TEMPORAL_RATE, axis=-4)
    blocks = np.concatenate([first, clip[..., 1:, :, :, :]], axis=-4)
    x = blocks.reshape(*lead, n, TEMPORAL_RATE, h, patch, w, patch, channels)
    k = len(lead)
    axes = tuple(range(k)) + (k, k + 2, k + 4, k + 1, k + 3, k + 5, k + 6)
    return np.ascontiguousarray(np.transpose(x, axes)).reshape(*lead, n, h, w, latent_channels(patch, channels))


def decode(latents, patch=4, channels=3):
    """
    Inverse of encode; the observation's four replicas are averaged
    :param latents: [..., n, h, w, 4 p p C]
    :param patch: spatial patch p
    :param channels: frame channels C
    :return: clip [..., 4(n - 1) + 1, h p, w p, C]
    """
    latents = np.asarray(latents)
    if not np.issubdtype(latents.dtype, np.floating):
        latents = latents.astype(np.float64)
    if latents.ndim < 4 or latents.shape[-1] != latent_channels(patch, channels):
        raise ValueError(f"Invalid latent shape specified: {latents.shape}")
    *lead, n, h, w, _ = latents.shape
    k = len(lead)
    x = latents.reshape(*lead, n, h, w, TEMPORAL_RATE, patch, patch, channels)
    axes = tuple(range(k)) + (k, k + 3, k + 1, k + 4, k + 2, k + 5, k + 6)
    x = np.transpose(x, axes).reshape(*lead, n, TEMPORAL_RATE, h * patch, w * patch, channels)

    replicas = x[..., 0, :, :, :, :]
    quarter = latents.dtype.type(0.25)
    first = ((replicas[..., 0, :, :, :] + replicas[..., 1, :, :, :]) +
             (replicas[..., 2, :, :, :] + replicas[..., 3, :, :, :])) * quarter
    rest = x[..., 1:, :, :, :, :].reshape(*lead, TEMPORAL_RATE * (n - 1), h * patch, w * patch, channels)
    return np.concatenate([first[..., None, :, :, :].astype(rest.dtype), rest], axis=-4)


def flatten_raster(grid):
    """
    Row-major token order over a latent grid: [..., h, w, c] -> [..., h w, c]
    """
    grid = np.asarray(grid)
    *lead, h, w, c = grid.shape
    return grid.reshape(*lead, h * w, c)


def unflatten_raster(tokens, h, w):
    tokens = np.asarray(tokens)
    *lead, length, c = tokens.shape
    if length != h * w:
        raise ValueError(f"Token count {length} does not match a {h}x{w} grid")
    return tokens.reshape(*lead, h, w, c)


def to_model_range(x):
    """[0, 1] -> [-1, 1]"""
    return 2.0 * x - 1.0


def from_model_range(x):
    """[-1, 1] -> [0, 1]"""
    return (x + 1.0) * 0.5
