# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

"""
Differentiable substrate: named parameter stores over TensorFlow variables, the AdamW step,
a finite-difference gradient verifier and the binary checkpoint format
"""

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import tensorflow as tf

from utils import DataError, NumericalError, atomic_write

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VVCK"
CHECKPOINT_VERSION = 1


class ParamStore(object):
    """
    Named parameter tensors backed by tf.Variable, iterated in sorted name order
    """
    def __init__(self, tensors, dtype=tf.float32):
        """
        :param tensors: mapping name -> array-like initial value
        :param dtype: tf.float32 for training, tf.float64 for gradient verification
        """
        self.variables = {}
        for name in sorted(tensors):
            self.variables[name] = tf.Variable(tf.cast(tensors[name], dtype), name=name, trainable=True)

    def __getitem__(self, name):
        return self.variables[name]

    def __contains__(self, name):
        return name in self.variables

    def __iter__(self):
        return iter(self.variables)

    def __len__(self):
        return len(self.variables)

    def names(self):
        return list(self.variables)

    def items(self):
        return self.variables.items()

    def trainable(self):
        return list(self.variables.values())

    @property
    def dtype(self):
        return next(iter(self.variables.values())).dtype

    @property
    def size(self):
        return int(sum(np.prod(v.shape) for v in self.variables.values()))

    def numpy(self):
        return {name: v.numpy() for name, v in self.variables.items()}

    def assign(self, tensors):
        """
        Overwrite parameter values in place, shapes must agree
        :param tensors: mapping name -> array for every parameter
        """
        missing = set(self.variables) - set(tensors)
        if missing:
            raise DataError(f"Missing parameters: {sorted(missing)[:5]}")
        for name, var in self.variables.items():
            value = np.asarray(tensors[name])
            if tuple(value.shape) != tuple(var.shape):
                raise DataError(f"Shape mismatch for {name}: {value.shape} vs {tuple(var.shape)}")
            var.assign(tf.cast(value, var.dtype))

    def cast(self, dtype):
        return ParamStore(self.numpy(), dtype=dtype)


def assert_finite(value, where):
    """
    Raise NumericalError if a tensor holds NaN or Inf
    :param value: tensor or array
    :param where: description used in the error message
    """
    array = value.numpy() if hasattr(value, "numpy") else np.asarray(value)
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"Non-finite values in {where}")


@dataclass
class GradReport:
    """
    Outcome of a finite-difference gradient check
    """
    rtol: float
    probes: list = field(default_factory=list)      # (name, flat index, analytic, finite difference, rel err)
    excluded: int = 0

    @property
    def max_rel_err(self):
        errors = [p[4] for p in self.probes if p[4] is not None]
        return max(errors) if errors else 0.0

    @property
    def passed(self):
        return self.max_rel_err < self.rtol

    @property
    def worst(self):
        scored = [p for p in self.probes if p[4] is not None]
        return max(scored, key=lambda p: p[4]) if scored else None

    def to_frame(self):
        return pd.DataFrame(self.probes, columns=["name", "index", "analytic", "finite_difference", "rel_err"])


def _probe_sites(params, n_probe, rng):
    """
    Choose scalar parameters to probe: one per tensor first, the rest uniformly over all scalars
    """
    names = params.names()
    sizes = np.array([int(np.prod(params[n].shape)) for n in names])
    sites = []
    if n_probe >= len(names):
        for name, size in zip(names, sizes):
            sites.append((name, int(rng.integers(size))))
    bounds = np.cumsum(sizes)
    for flat in rng.integers(bounds[-1], size=n_probe - len(sites)):
        k = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[k - 1] if k else 0))
        sites.append((names[k], offset))
    return sites


def _scalar_loss(loss_fn, params, where):
    value = float(loss_fn(params))
    if not np.isfinite(value):
        raise NumericalError(f"Non-finite loss while probing {where}")
    return value


def check_gradients(loss_fn, params, n_probe=256, eps=1e-5, rtol=1e-3, seed=0, abs_floor=1e-7, zero_tol=1e-10):
    """
    Compare tape gradients against central finite differences on randomly chosen scalars
    :param loss_fn: deterministic function ParamStore -> scalar tensor
    :param params: ParamStore, float64 recommended
    :param n_probe: number of probed scalars
    :param eps: finite-difference step
    :param rtol: pass threshold on the maximum relative error
    :param seed: seed of the probe selection
    :param abs_floor: lower bound of the relative error denominator
    :param zero_tol: pairs with both |analytic| and |fd| below this are excluded
    :return: GradReport
    """
    if eps <= 0:
        raise ValueError("Invalid eps specified, must be positive!")
    for name, var in params.items():
        assert_finite(var, f"parameter {name}")

    with tf.GradientTape() as tape:
        loss = loss_fn(params)
    if not np.isfinite(float(loss)):
        raise NumericalError("Non-finite loss at the unperturbed parameters")
    grads = tape.gradient(loss, params.trainable(), unconnected_gradients=tf.UnconnectedGradients.ZERO)
    analytic = {name: g.numpy().reshape(-1) for name, g in zip(params.names(), grads)}

    report = GradReport(rtol=rtol)
    rng = np.random.default_rng(seed)
    for name, index in _probe_sites(params, n_probe, rng):
        var = params[name]
        original = var.numpy()
        perturbed = original.copy().reshape(-1)

        perturbed[index] = original.reshape(-1)[index] + eps
        var.assign(perturbed.reshape(original.shape))
        f_plus = _scalar_loss(loss_fn, params, f"{name}[{index}]")
        perturbed[index] = original.reshape(-1)[index] - eps
        var.assign(perturbed.reshape(original.shape))
        f_minus = _scalar_loss(loss_fn, params, f"{name}[{index}]")
        var.assign(original)

        fd = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name][index])
        if abs(a) < zero_tol and abs(fd) < zero_tol:
            report.excluded += 1
            report.probes.append((name, index, a, fd, None))
            continue
        rel = abs(a - fd) / max(abs(a), abs(fd), abs_floor)
        report.probes.append((name, index, a, fd, rel))

    worst = report.worst
    logger.info(f"Gradient check: {len(report.probes)} probes, {report.excluded} excluded, "
                f"max rel err {report.max_rel_err:.3e}" + (f" at {worst[0]}" if worst else ""))
    return report


class AdamState(object):
    """
    First and second moments per parameter plus the shared step counter
    """
    def __init__(self, params):
        self.m = {n: tf.Variable(tf.zeros_like(v), trainable=False) for n, v in params.items()}
        self.v = {n: tf.Variable(tf.zeros_like(v), trainable=False) for n, v in params.items()}
        self.step = tf.Variable(0, dtype=tf.int64, trainable=False)

    def numpy(self):
        """
        Moments as named arrays, the step counter is kept separately as an integer
        """
        tensors = {f"opt/m/{n}": v.numpy() for n, v in self.m.items()}
        tensors.update({f"opt/v/{n}": v.numpy() for n, v in self.v.items()})
        return tensors

    def assign(self, tensors, step):
        for n in self.m:
            self.m[n].assign(tf.cast(tensors[f"opt/m/{n}"], self.m[n].dtype))
            self.v[n].assign(tf.cast(tensors[f"opt/v/{n}"], self.v[n].dtype))
        self.step.assign(int(step))


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, wd=0.0, eps=1e-8):
    """
    One AdamW update with bias correction and decoupled weight decay, in place
    :param params: ParamStore
    :param grads: mapping name -> gradient tensor, one for every parameter
    :param state: AdamState of the same parameters
    :param lr: learning rate
    :param beta1: first moment decay
    :param beta2: second moment decay
    :param wd: decoupled weight decay
    :param eps: denominator guard
    """
    for name in params:
        if grads.get(name) is None:
            raise ValueError(f"Missing gradient for parameter {name}")

    state.step.assign_add(1)
    t = tf.cast(state.step, params.dtype)
    correction1 = 1.0 - tf.pow(tf.cast(beta1, params.dtype), t)
    correction2 = 1.0 - tf.pow(tf.cast(beta2, params.dtype), t)
    for name, p in params.items():
        g = tf.cast(grads[name], p.dtype)
        m = state.m[name].assign(beta1 * state.m[name] + (1.0 - beta1) * g)
        v = state.v[name].assign(beta2 * state.v[name] + (1.0 - beta2) * tf.square(g))
        update = (m / correction1) / (tf.sqrt(v / correction2) + eps)
        p.assign_sub(lr * (update + wd * p))


def save_checkpoint(path, tensors, config=None, counters=None):
    """
    Write named tensors as float32 little-endian entries followed by a JSON trailer
    :param path: destination file
    :param tensors: mapping name -> array, written in sorted name order
    :param config: JSON-serialisable config snapshot
    :param counters: integer counters (optimiser step, ...) kept exact in the trailer
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        array = np.asarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    counters = {name: int(value) for name, value in (counters or {}).items()}
    trailer = json.dumps({"config": config or {}, "counters": counters}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(trailer)) + trailer)
    atomic_write(path, b"".join(chunks))


def load_checkpoint(path):
    """
    Read a checkpoint written by save_checkpoint
    :param path: checkpoint file
    :return: (dict name -> float32 array, config dict, counters dict)
    """
    with open(path, "rb") as in_file:
        payload = in_file.read()
    if payload[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"Invalid checkpoint magic in {path}")
    try:
        version, count = struct.unpack_from("<II", payload, 4)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"Unsupported checkpoint version {version} in {path}")
        offset = 12
        tensors = {}
        for _ in range(count):
            (length,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + length].decode("utf-8")
            offset += length
            (rank,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            n_bytes = 4 * int(np.prod(shape))
            if offset + n_bytes > len(payload):
                raise DataError(f"Truncated tensor {name} in {path}")
            tensors[name] = np.frombuffer(payload, dtype="<f4", count=n_bytes // 4, offset=offset).reshape(shape).copy()
            offset += n_bytes
        trailer = {}
        if offset < len(payload):
            (length,) = struct.unpack_from("<I", payload, offset)
            trailer = json.loads(payload[offset + 4:offset + 4 + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DataError(f"Corrupt checkpoint {path}: {err}")
    return tensors, trailer.get("config", {}), trailer.get("counters", {})
