# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

import glob
import logging
import math
import os
import re
from abc import ABCMeta, abstractmethod

import tensorflow as tf

from numerics import ParamStore, AdamState, save_checkpoint, load_checkpoint

logger = logging.getLogger(__name__)

CHECKPOINT_PATTERN = re.compile(r"ckpt-(\d{6})\.vvck$")
MASK_VALUE = -1e9


class BaseModel(object, metaclass=ABCMeta):
    """
    Class for the base model that contains the parameter store, checkpointing and the generalised ops
    """
    def __init__(self, cfg):
        """
        Initialise the BaseModel
        :param cfg: resolved RunConfig
        """
        self.cfg = cfg
        self.params = None
        self.opt_state = None

    @abstractmethod
    def init_params(self, seed):
        pass

    @abstractmethod
    def forward(self, *args, **kwargs):
        pass

    def extra_tensors(self):
        """
        Non-parameter tensors to store alongside the weights (normalisers, ...)
        """
        return {}

    def restore_extra(self, tensors):
        pass

    def save(self, step, checkpoint_dir):
        """
        Save parameters, optimiser moments and extras to checkpoint
        :param step: completed training steps
        :param checkpoint_dir: directory of the checkpoints
        :return: checkpoint path
        """
        os.makedirs(checkpoint_dir, exist_ok=True)
        tensors = {f"param/{name}": value for name, value in self.params.numpy().items()}
        counters = {}
        if self.opt_state is not None:
            tensors.update(self.opt_state.numpy())
            counters["opt_step"] = int(self.opt_state.step.numpy())
        tensors.update(self.extra_tensors())
        path = os.path.join(checkpoint_dir, f"ckpt-{step:06d}.vvck")
        save_checkpoint(path, tensors, self.cfg.to_dict(), counters)
        return path

    @staticmethod
    def latest_checkpoint(checkpoint_dir):
        """
        :param checkpoint_dir: directory to scan
        :return: (path, step) of the newest checkpoint or (None, 0)
        """
        found = []
        for path in glob.glob(os.path.join(checkpoint_dir, "ckpt-*.vvck")):
            match = CHECKPOINT_PATTERN.search(path)
            if match:
                found.append((int(match.group(1)), path))
        if not found:
            return None, 0
        step, path = max(found)
        return path, step

    def load(self, checkpoint):
        """
        Load model from a checkpoint file or the latest checkpoint of a directory
        :param checkpoint: file or directory
        :return: the training step of the checkpoint, 0 if nothing was loaded
        """
        logger.info(" [*] Reading checkpoints...")
        if os.path.isdir(checkpoint):
            path, _ = self.latest_checkpoint(checkpoint)
        else:
            path = checkpoint if os.path.isfile(checkpoint) else None
        if path is None:
            logger.info(" [!] Load failed")
            return 0

        tensors, _, counters = load_checkpoint(path)
        self.params.assign({name[len("param/"):]: value for name, value in tensors.items()
                            if name.startswith("param/")})
        if "opt_step" in counters:
            if self.opt_state is None:
                self.opt_state = AdamState(self.params)
            self.opt_state.assign(tensors, counters["opt_step"])
        self.restore_extra(tensors)
        match = CHECKPOINT_PATTERN.search(path)
        step = int(match.group(1)) if match else int(counters.get("opt_step", 0))
        logger.info(f" [*] Load SUCCESS {os.path.basename(path)}")
        return step

    @staticmethod
    def truncated_normal(shapes, seed, stddev=0.02):
        """
        Seeded truncated-normal initial values, one stateless stream per tensor
        :param shapes: mapping name -> shape, drawn in sorted name order
        :param seed: integer seed
        :param stddev: standard deviation before truncation
        :return: mapping name -> float32 array
        """
        values = {}
        for i, name in enumerate(sorted(shapes)):
            values[name] = tf.random.stateless_truncated_normal(shapes[name], seed=[int(seed), i],
                                                                stddev=stddev).numpy()
        return values

    @staticmethod
    def linear(x, w, b=None):
        y = tf.linalg.matmul(x, w)
        return y + b if b is not None else y

    @staticmethod
    def layer_norm(x, eps=1e-6):
        """
        LayerNorm without affine parameters, adaLN supplies scale and shift
        """
        mean, var = tf.nn.moments(x, axes=[-1], keepdims=True)
        return (x - mean) * tf.math.rsqrt(var + eps)

    @staticmethod
    def modulate(x, shift, scale):
        return x * (1.0 + scale) + shift

    @staticmethod
    def gelu(x):
        return tf.nn.gelu(x, approximate=True)

    @staticmethod
    def timestep_embedding(t, dim, dtype, max_period=10000):
        """
        Sinusoidal timestep features
        :param t: [B] timesteps
        :param dim: feature size
        :param dtype: output dtype
        :return: [B, dim]
        """
        half = dim // 2
        freqs = tf.exp(-math.log(max_period) * tf.range(half, dtype=dtype) / half)
        args = tf.cast(t, dtype)[:, None] * freqs[None, :]
        embedding = tf.concat([tf.cos(args), tf.sin(args)], axis=-1)
        if dim % 2:
            embedding = tf.concat([embedding, tf.zeros_like(embedding[:, :1])], axis=-1)
        return embedding

    @staticmethod
    def attention(x, qkv_w, qkv_b, proj_w, proj_b, n_heads, bias=None):
        """
        Multi-head self-attention
        :param x: [B, S, d]
        :param bias: additive [S, S] logit bias (MASK_VALUE blocks a column for a row)
        :return: [B, S, d]
        """
        batch, length, width = tf.shape(x)[0], tf.shape(x)[1], x.shape[-1]
        head = width // n_heads
        qkv = BaseModel.linear(x, qkv_w, qkv_b)
        qkv = tf.reshape(qkv, [batch, length, 3, n_heads, head])
        qkv = tf.transpose(qkv, [2, 0, 3, 1, 4])
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = tf.linalg.matmul(q, k, transpose_b=True) * tf.cast(1.0 / math.sqrt(head), x.dtype)
        if bias is not None:
            logits = logits + bias
        weights = tf.nn.softmax(logits, axis=-1)
        out = tf.linalg.matmul(weights, v)
        out = tf.reshape(tf.transpose(out, [0, 2, 1, 3]), [batch, length, width])
        return BaseModel.linear(out, proj_w, proj_b)

    @staticmethod
    def loss_functions(loss_choice, labels, prediction, mask=None):
        """
        Method that contains different options for computing losses
        :param loss_choice: Sum of Absolute Differences (SAD) or Mean Squared Error (MSE)
        :param labels: target noise [B, tokens, channels]
        :param prediction: predicted noise of the same shape
        :param mask: optional [B, tokens] validity weights, padded tokens carry 0
        :return: mean loss over valid elements
        """
        if loss_choice == "SAD":
            residual = tf.math.abs(labels - prediction)
        elif loss_choice == "MSE":
            residual = tf.square(labels - prediction)
        else:
            raise ValueError("Invalid loss function selected!")
        if mask is None:
            return tf.reduce_mean(residual)
        mask = tf.cast(mask, residual.dtype)[..., None]
        count = tf.reduce_sum(mask) * tf.cast(tf.shape(residual)[-1], residual.dtype)
        return tf.reduce_sum(residual * mask) / tf.maximum(count, 1.0)


def joint_loss(eps_video, eps_hat_video, eps_action, eps_hat_action, mode, lam, mask_video=None, mask_action=None):
    """
    Joint denoising loss, per-modality means summed
    :param mode: dual (video MSE + lam action MSE), no_video_loss (lam action MSE) or action_only (action MSE)
    :param lam: weight of the action term
    :return: (total, video term, action term); the video term is reported without gradient
             unless it enters the total
    """
    action = BaseModel.loss_functions("MSE", eps_action, eps_hat_action, mask_action)
    if mode == "action_only":
        return action, tf.zeros_like(action), action
    video = BaseModel.loss_functions("MSE", eps_video, eps_hat_video, mask_video)
    if mode == "dual":
        return video + lam * action, video, action
    if mode == "no_video_loss":
        return lam * action, tf.stop_gradient(video), action
    raise ValueError(f"Invalid loss mode specified: {mode}")
