# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

# Desk-scale learning run: pick_place and stack on both embodiments, move_near and topple demonstrated
# by embodiment B only so that the new_skills split measures their transfer to embodiment A

model = {
    "d_model": 128,
    "n_heads": 4,
    "n_blocks": 6,
    "n_latents": 4,
    "k_actions": 6,
}

train = {
    "steps": 10000,
    "batch_size": 32,
    "embodiment_skills": {
        "A": ["pick_place", "stack"],
        "B": ["pick_place", "stack", "move_near", "topple"],
    },
}

rollout = {
    "trials_per_task": 200,
}

data = {
    "episodes_per_cell": 600,
}
