# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

import argparse
import os
import numpy as np
from imageio import imwrite
from episodes import read_episode, read_manifest


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description='Dump the frames of recorded episodes as PNG files')
    parser.add_argument("-d", "--data", type=str, required=True, help="Dataset or trial archive directory")
    parser.add_argument("-o", "--out", type=str, required=True, help="Output directory")
    parser.add_argument("-n", "--count", type=int, default=4, help="Number of episodes to dump")
    parser.add_argument("-s", "--scale", type=int, default=4, help="Nearest-neighbour upscaling factor")
    parser.add_argument("--keypoints", action="store_true", help="Mark recorded keypoints in red")
    args = parser.parse_args()

    # the dataset manifest lists its episodes under "path", trial archives under "episode"
    if os.path.isfile(os.path.join(args.data, "trials.jsonl")):
        records = read_manifest(args.data, "trials.jsonl")
        paths = list(records["episode"])
    else:
        records = read_manifest(args.data)
        paths = list(records["path"])

    red = np.array([255, 0, 0], dtype=np.uint8)
    for path in paths[:args.count]:
        episode = read_episode(os.path.join(args.data, path))
        frames = np.rint(episode.frames * 255.0).astype(np.uint8)
        height, width = frames.shape[1:3]

        # mark the keypoint pixels before upscaling so that every marker stays one source pixel wide
        if args.keypoints:
            for t, points in enumerate(episode.keypoints):
                for x, y in points:
                    i, j = int(np.clip(y * height, 0, height - 1)), int(np.clip(x * width, 0, width - 1))
                    frames[t, i, j] = red

        name = os.path.splitext(os.path.basename(path))[0]
        out_dir = os.path.join(args.out, name)
        os.makedirs(out_dir, exist_ok=True)
        for i, frame in enumerate(frames):
            imwrite(os.path.join(out_dir, f"{i:04d}.png"), np.kron(frame, np.ones((args.scale, args.scale, 1),
                                                                                    dtype=np.uint8)))
        with open(os.path.join(out_dir, "episode.txt"), "w") as out_file:
            out_file.write(f"{episode.instruction}\n{episode.skill} {episode.embodiment} "
                           f"success={episode.success} actions={len(episode.actions)}\n")
