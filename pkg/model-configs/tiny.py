# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

# Smoke-test size: a few minutes end to end on a laptop CPU

model = {
    "d_model": 32,
    "n_heads": 2,
    "n_blocks": 2,
    "freq_dim": 32,
}

diffusion = {
    "timesteps": 100,
    "sample_steps": 10,
}

train = {
    "steps": 200,
    "batch_size": 8,
    "learning_rate": 1e-3,
    "checkpoint_interval": 100,
    "log_interval": 50,
}

rollout = {
    "max_replans": 5,
    "trials_per_task": 4,
}

data = {
    "episodes_per_cell": 4,
}
