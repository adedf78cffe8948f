# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

# Every key is optional, missing keys keep the documented defaults of config.py

model = {
    "d_model": 128,                     # Width of every token embedding
    "n_heads": 4,                       # Attention heads, must divide d_model
    "n_blocks": 6,                      # Number of adaLN self-attention blocks
    "mlp_ratio": 4,                     # Hidden size of the GELU MLP as a multiple of d_model
    "freq_dim": 256,                    # Size of the sinusoidal timestep features
    "l_text": 16,                       # Fixed instruction length in tokens
    "image_size": 32,                   # Rendered frame height and width
    "channels": 3,                      # Frame channels
    "patch": 4,                         # Spatial patch of the latent codec
    "n_latents": 4,                     # Latents per clip (observation + future) [2, 4, 7, 13]
    "k_actions": 6,                     # Actions predicted per chunk
    "mask_mode": "bidirectional",       # bidirectional or causal
    "dropout": 0.0,                     # Residual dropout during training
}

diffusion = {
    "timesteps": 1000,                  # DDPM steps T
    "beta_min": 1e-4,                   # First beta of the linear schedule
    "beta_max": 0.02,                   # Last beta of the linear schedule
    "sample_steps": 50,                 # DDIM steps at inference (10 for the deployment setting)
    "infer_mode": "joint",              # joint or two_stage
}

train = {
    "loss_mode": "dual",                # dual, no_video_loss or action_only
    "lam": 1.0,                         # Weight of the action loss term
    "batch_size": 32,                   # Windows per optimiser step
    "steps": 10000,                     # Optimiser steps
    "learning_rate": 1e-4,              # AdamW learning rate
    "weight_decay": 1e-4,               # Decoupled weight decay
    "seed": 0,                          # Master seed
    "timestep_mode": "sync",            # sync or async
    "stride": 2,                        # Window stride in frames
    "checkpoint_interval": 1000,        # Steps between checkpoints
    "log_interval": 100,                # Steps between status lines
    "skills": None,                     # Restrict training to these skills
    "embodiments": None,                # Restrict training to these embodiments
    "embodiment_skills": None,          # Per-embodiment skill lists, e.g. {"B": ["pick_place", "topple"]}
}

rollout = {
    "execute": 3,                       # Actions executed per replan
    "max_replans": 20,                  # Predictions per trial before timeout
    "trials_per_task": 50,              # Trials per (task, embodiment) row
    "seed": 0,                          # Master seed of trial seeds
    "similarity_cost": "position",      # Hungarian cost: position or cosine
}

data = {
    "episodes_per_cell": 600,           # Expert episodes per training cell
    "hold_steps": 3,                    # Hold actions recorded after success
    "max_steps": 60,                    # Expert step budget per episode
    "seed": 0,                          # Master seed of scene sampling
}
