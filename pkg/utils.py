# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, asdict
from importlib.machinery import SourceFileLoader
from importlib.util import spec_from_loader, module_from_spec

import numpy as np

logger = logging.getLogger(__name__)

# CLI exit codes, stable for scripting
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

RUN_MANIFEST = "run_manifest.json"


class UsageError(ValueError):
    """Bad flags, unknown config keys or a refused overwrite."""


class DataError(ValueError):
    """Malformed files, empty datasets or splits, unsatisfiable scenes."""


class NumericalError(FloatingPointError):
    """Non-finite values in training, sampling or gradient checks."""


def setup_logging(verbose=False):
    """
    Configure the root logger once for command-line runs
    :param verbose: switch to DEBUG messages
    """
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def import_path(path):
    """
    Read config files
    :param path: path to the config file
    :return: module that contains all the parameters as specified in the config file
    """
    if not os.path.isfile(path):
        raise UsageError(f"Invalid config path specified: {path}")
    module_name = os.path.basename(path)
    spec = spec_from_loader(
        module_name,
        SourceFileLoader(module_name, path)
    )
    module = module_from_spec(spec)
    spec.loader.exec_module(module)
    sys.modules[module_name] = module
    return module


def derive_seed(*keys):
    """
    Derive an independent 32-bit seed from a master seed and any number of integer keys
    :param keys: master seed followed by stream identifiers (task index, trial index, ...)
    :return: seed as a python int
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def configure_tensorflow(deterministic=True, threads=None):
    """
    Make TensorFlow ops reproducible; called once before any model is built
    :param deterministic: enable deterministic op implementations
    :param threads: optional cap on intra-op threads
    """
    import tensorflow as tf

    if deterministic:
        tf.config.experimental.enable_op_determinism()
    if threads:
        try:
            tf.config.threading.set_intra_op_parallelism_threads(int(threads))
            tf.config.threading.set_inter_op_parallelism_threads(int(threads))
        except RuntimeError:
            # threading can only be set before the runtime starts
            logger.debug("TensorFlow already initialised, thread caps ignored")


def prepare_output_dir(path, force=False):
    """
    Create an output directory, refusing to write into a non-empty one unless forced
    :param path: output directory
    :param force: allow reuse of a non-empty directory
    """
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"Output directory {path} is not empty, use --force to overwrite")
    os.makedirs(path, exist_ok=True)


def atomic_write(path, payload):
    """
    Write bytes through a temporary file so an interrupted run never leaves a torn file
    :param path: destination path
    :param payload: bytes to write
    """
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as out_file:
        out_file.write(payload)
    os.replace(tmp, path)


def content_hash(paths, extra=None):
    """
    Git-style content hash of input files plus an optional JSON-able payload, run manifests of earlier
    commands are not inputs
    :param paths: files (or directories, walked in sorted order) that form the inputs
    :param extra: config snapshot or other JSON-serialisable data
    :return: hex digest
    """
    digest = hashlib.sha256()
    files = []
    for path in paths:
        if os.path.isdir(path):
            for root, _, names in sorted(os.walk(path)):
                files.extend(os.path.join(root, n) for n in sorted(names) if n != RUN_MANIFEST)
        elif os.path.isfile(path):
            files.append(path)
    for name in files:
        with open(name, "rb") as in_file:
            data = in_file.read()
        digest.update(f"blob {len(data)}\0".encode())
        digest.update(data)
    if extra is not None:
        digest.update(json.dumps(extra, sort_keys=True).encode())
    return digest.hexdigest()


@dataclass
class RunManifest:
    """
    One record per command run: what ran, with which inputs, and where it wrote
    """
    command: str
    config: dict
    seed: int
    input_hash: str
    started: float = field(default_factory=time.time)
    finished: float = None
    outputs: list = field(default_factory=list)

    def finish(self, out_dir, outputs):
        """
        Stamp the end time and write run_manifest.json into the output directory
        :param out_dir: output directory of the run
        :param outputs: paths written by the run
        :return: manifest path
        """
        self.finished = time.time()
        self.outputs = sorted(str(o) for o in outputs)
        path = os.path.join(out_dir, RUN_MANIFEST)
        with open(path, "w") as out_file:
            json.dump(asdict(self), out_file, indent=2, sort_keys=True)
        return path
