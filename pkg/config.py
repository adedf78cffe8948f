# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

import os
from dataclasses import dataclass, field, fields, asdict

from utils import import_path, UsageError

LOSS_MODES = ("dual", "no_video_loss", "action_only")
MASK_MODES = ("bidirectional", "causal")
TIMESTEP_MODES = ("sync", "async")
INFER_MODES = ("joint", "two_stage")
SIMILARITY_COSTS = ("position", "cosine")
SECTIONS = ("model", "diffusion", "train", "rollout", "data")


@dataclass
class ModelConfig:
    d_model: int = 128                  # Width of every token embedding
    n_heads: int = 4                    # Attention heads, must divide d_model
    n_blocks: int = 6                   # Number of adaLN self-attention blocks
    mlp_ratio: int = 4                  # Hidden size of the GELU MLP as a multiple of d_model
    freq_dim: int = 256                 # Size of the sinusoidal timestep features
    l_text: int = 16                    # Fixed instruction length in tokens
    image_size: int = 32                # Rendered frame height and width
    channels: int = 3                   # Frame channels
    patch: int = 4                      # Spatial patch of the latent codec
    n_latents: int = 4                  # Latents per clip (observation + future), frames = 4(n-1)+1
    k_actions: int = 6                  # Actions predicted per chunk
    mask_mode: str = "bidirectional"    # bidirectional or causal (video tokens never see action tokens)
    dropout: float = 0.0                # Residual dropout during training
    use_positions: bool = True          # Learned positional embeddings (off only in equivariance tests)

    @property
    def grid(self):
        return self.image_size // self.patch, self.image_size // self.patch

    @property
    def tokens_per_latent(self):
        h, w = self.grid
        return h * w

    @property
    def c_lat(self):
        return self.patch * self.patch * self.channels * 4

    @property
    def n_frames(self):
        return 4 * (self.n_latents - 1) + 1

    def seq_len(self, with_video=True):
        latents = self.n_latents if with_video else 1
        return self.l_text + latents * self.tokens_per_latent + self.k_actions

    def validate(self):
        if self.d_model % self.n_heads:
            raise UsageError("Invalid model config: d_model must be divisible by n_heads!")
        if self.image_size % self.patch:
            raise UsageError("Invalid model config: image_size must be divisible by patch!")
        if self.n_latents < 2 or self.k_actions < 1 or self.l_text < 1 or self.n_blocks < 1:
            raise UsageError("Invalid model config: n_latents >= 2, k_actions, l_text, n_blocks >= 1 required!")
        if self.mask_mode not in MASK_MODES:
            raise UsageError(f"Invalid mask mode specified: {self.mask_mode}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("Invalid dropout specified!")


@dataclass
class DiffusionConfig:
    timesteps: int = 1000               # DDPM steps T
    beta_min: float = 1e-4              # First beta of the linear schedule
    beta_max: float = 0.02              # Last beta of the linear schedule
    sample_steps: int = 50              # DDIM steps at inference (10 for the deployment setting)
    infer_mode: str = "joint"           # joint or two_stage denoising at inference

    def validate(self):
        if self.infer_mode not in INFER_MODES:
            raise UsageError(f"Invalid inference mode specified: {self.infer_mode}")
        if not 1 <= self.sample_steps <= self.timesteps:
            raise UsageError("Invalid sample_steps specified, must lie in [1, timesteps]!")


@dataclass
class TrainConfig:
    loss_mode: str = "dual"             # dual, no_video_loss or action_only
    lam: float = 1.0                    # Weight of the action loss term
    batch_size: int = 32                # Windows per optimiser step
    steps: int = 10000                  # Optimiser steps
    learning_rate: float = 1e-4         # AdamW learning rate
    weight_decay: float = 1e-4          # Decoupled weight decay
    beta1: float = 0.9                  # AdamW first moment decay
    beta2: float = 0.999                # AdamW second moment decay
    seed: int = 0                       # Master seed of initialisation, batches and noise
    timestep_mode: str = "sync"         # sync or async timesteps for video and actions
    stride: int = 2                     # Window stride in frames (one window per action step)
    checkpoint_interval: int = 1000     # Steps between checkpoints
    log_interval: int = 100             # Steps between status lines
    skills: list = None                 # Restrict training to these skills (None = all training cells)
    embodiments: list = None            # Restrict training to these embodiments (None = all)
    embodiment_skills: dict = None      # Per-embodiment skill lists on top of the above, e.g. {"B": ["topple"]}
    grad_check: bool = True             # Finite-difference check at reduced size before training

    def validate(self):
        if self.loss_mode not in LOSS_MODES:
            raise UsageError(f"Invalid loss mode specified: {self.loss_mode}")
        if self.timestep_mode not in TIMESTEP_MODES:
            raise UsageError(f"Invalid timestep mode specified: {self.timestep_mode}")
        if self.lam <= 0:
            raise UsageError("Invalid lam specified, the action loss weight must be positive!")
        if self.batch_size < 1 or self.steps < 0 or self.stride < 1 or self.checkpoint_interval < 1:
            raise UsageError("Invalid batch_size, steps, stride or checkpoint_interval specified!")
        if self.embodiment_skills is not None and not isinstance(self.embodiment_skills, dict):
            raise UsageError("Invalid embodiment_skills specified, expected a mapping of embodiment to skills")


@dataclass
class RolloutConfig:
    execute: int = 3                    # Actions executed per replan (m)
    max_replans: int = 20               # Predictions per trial before timeout
    trials_per_task: int = 50           # Trials per (skill, embodiment) row
    seed: int = 0                       # Master seed of trial seeds
    similarity_cost: str = "position"   # Hungarian cost: position or cosine

    def validate(self, k_actions=None):
        if self.execute < 1 or (k_actions is not None and self.execute > k_actions):
            raise UsageError("Invalid execute count specified, need 1 <= m <= K!")
        if self.max_replans < 0 or self.trials_per_task < 1:
            raise UsageError("Invalid max_replans or trials_per_task specified!")
        if self.similarity_cost not in SIMILARITY_COSTS:
            raise UsageError(f"Invalid similarity cost specified: {self.similarity_cost}")


@dataclass
class DataConfig:
    episodes_per_cell: int = 600        # Expert episodes per training (skill, embodiment) cell
    hold_steps: int = 3                 # Hold actions recorded after success
    max_steps: int = 60                 # Expert step budget per episode
    seed: int = 0                       # Master seed of scene sampling

    def validate(self):
        if self.episodes_per_cell < 1 or self.hold_steps < 0 or self.max_steps < 1:
            raise UsageError("Invalid data config specified!")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.model.validate()
        self.diffusion.validate()
        self.train.validate()
        self.rollout.validate(self.model.k_actions)
        self.data.validate()
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, sections):
        """
        Build a config from nested section dictionaries, unknown keys are rejected
        :param sections: {"model": {...}, "train": {...}, ...}
        :return: validated RunConfig
        """
        cfg = cls()
        for name, values in (sections or {}).items():
            if name not in SECTIONS:
                raise UsageError(f"Invalid config section specified: {name}")
            apply_overrides(getattr(cfg, name), values)
        return cfg.validate()


def apply_overrides(section, values):
    """
    Overwrite dataclass fields from a dictionary
    :param section: one of the config dataclasses
    :param values: key -> value mapping
    """
    known = {f.name for f in fields(section)}
    for key, value in (values or {}).items():
        if key not in known:
            raise UsageError(f"Invalid config key specified: {type(section).__name__}.{key}")
        setattr(section, key, value)


def load_config(path=None):
    """
    Load a config module (sections as dicts) on top of the documented defaults
    :param path: path to a python config file, or None for defaults only
    :return: validated RunConfig, with VVLA_SEED applied to every seed when set
    """
    sections = {}
    if path is not None:
        module = import_path(path)
        sections = {name: getattr(module, name) for name in SECTIONS if hasattr(module, name)}
    cfg = RunConfig.from_dict(sections)

    env_seed = os.environ.get("VVLA_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise UsageError(f"Invalid VVLA_SEED specified: {env_seed}")
        cfg.train.seed = cfg.rollout.seed = cfg.data.seed = seed
    return cfg
