# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

import copy
import logging
import os
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd
import tensorflow as tf
from tqdm import tqdm

from codec import flatten_raster, unflatten_raster, to_model_range
from config import RunConfig, apply_overrides
from diffusion import build_schedule, add_noise, sample_timesteps, ddim_sample
from instructions import build_vocab
from model_base import BaseModel, MASK_VALUE, joint_loss
from numerics import ParamStore, AdamState, adam_step, check_gradients, load_checkpoint
from utils import DataError, NumericalError, atomic_write

logger = logging.getLogger(__name__)

# modality tags of the token sequence, in segment order
TEXT, OBSERVATION, FUTURE, ACTION = 0, 1, 2, 3
ACTION_DIM = 7


@dataclass
class TokenSequence:
    content: tf.Tensor              # [B, S, d] per-token projections, before positions
    position: tf.Tensor             # [S, d] positional plus modality embeddings
    tags: np.ndarray                # [S] modality tag per token
    index: np.ndarray               # [S] index within the segment (latent tokens: time * h w + raster)

    @property
    def embeddings(self):
        return self.content + self.position[None]

    def __len__(self):
        return len(self.tags)


def sequence_layout(model_cfg, with_video=True):
    """
    Static token layout [text | observation latent | future latents | actions]
    :return: (tags, index) int arrays of length model_cfg.seq_len(with_video)
    """
    hw = model_cfg.tokens_per_latent
    n_lat = model_cfg.n_latents if with_video else 1
    tags = np.concatenate([np.full(model_cfg.l_text, TEXT), np.full(hw, OBSERVATION),
                           np.full((n_lat - 1) * hw, FUTURE), np.full(model_cfg.k_actions, ACTION)])
    index = np.concatenate([np.arange(model_cfg.l_text), np.arange(n_lat * hw), np.arange(model_cfg.k_actions)])
    return tags.astype(np.int32), index.astype(np.int32)


def attention_bias(tags, mask_mode, dtype=tf.float32):
    """
    Additive attention bias; causal blocks every non-action row from every action column
    """
    if mask_mode == "bidirectional":
        return None
    if mask_mode != "causal":
        raise ValueError(f"Invalid mask mode specified: {mask_mode}")
    blocked = (tags[:, None] != ACTION) & (tags[None, :] == ACTION)
    return tf.constant(np.where(blocked, MASK_VALUE, 0.0), dtype=dtype)


def _zero_initialised(name):
    leaf = name.rsplit("/", 1)[-1]
    return leaf in ("b", "b1", "b2", "ada_w") or leaf.endswith("_b") or name.startswith("head/")


class VideoActionDiT(BaseModel):
    """
    Joint video-action diffusion transformer: one self-attention stack over instruction, observation latent,
    noisy future latents and a noisy action chunk, timestep-modulated through adaLN
    """
    def __init__(self, cfg, vocab=None, dtype=tf.float32):
        """
        :param cfg: RunConfig
        :param vocab: instruction vocabulary, the closed template vocabulary by default
        :param dtype: tf.float32 for training, tf.float64 for gradient verification
        """
        super().__init__(cfg)
        cfg.model.validate()
        self.mcfg = cfg.model
        self.vocab = vocab if vocab is not None else build_vocab()
        self.dtype = dtype
        self.with_video = cfg.train.loss_mode != "action_only"
        self.sched = build_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)
        self.normalizer = None
        self.head_grad_norms = []
        self._infer_fn = None

    @classmethod
    def from_checkpoint(cls, path):
        """
        Rebuild a model from the config snapshot embedded in a checkpoint and load its weights
        :param path: checkpoint file or checkpoint directory
        """
        if os.path.isdir(path):
            found, _ = cls.latest_checkpoint(path)
            if found is None:
                raise DataError(f"No checkpoint found in {path}")
            path = found
        _, config, _ = load_checkpoint(path)
        model = cls(RunConfig.from_dict(config))
        model.init_params(0)
        model.load(path)
        return model

    def param_shapes(self):
        c = self.mcfg
        d, hidden = c.d_model, c.d_model * c.mlp_ratio
        shapes = {
            "text/embed": (len(self.vocab), d),
            "text/pos": (c.l_text, d),
            "latent/w": (c.c_lat, d),
            "latent/b": (d,),
            "latent/spatial_pos": (c.tokens_per_latent, d),
            "latent/time_pos": (c.n_latents if self.with_video else 1, d),
            "action/w": (ACTION_DIM, d),
            "action/b": (d,),
            "action/pos": (c.k_actions, d),
            "modality": (4, d),
            "time/w1": (c.freq_dim, d),
            "time/b1": (d,),
            "time/w2": (d, d),
            "time/b2": (d,),
            "final/ada_w": (d, 2 * d),
            "final/ada_b": (2 * d,),
            "head/action_w": (d, ACTION_DIM),
            "head/action_b": (ACTION_DIM,),
        }
        if self.with_video:
            shapes["head/video_w"] = (d, c.c_lat)
            shapes["head/video_b"] = (c.c_lat,)
        for i in range(c.n_blocks):
            prefix = f"blocks/{i:02d}/"
            shapes.update({
                prefix + "ada_w": (d, 6 * d), prefix + "ada_b": (6 * d,),
                prefix + "qkv_w": (d, 3 * d), prefix + "qkv_b": (3 * d,),
                prefix + "proj_w": (d, d), prefix + "proj_b": (d,),
                prefix + "mlp1_w": (d, hidden), prefix + "mlp1_b": (hidden,),
                prefix + "mlp2_w": (hidden, d), prefix + "mlp2_b": (d,),
            })
        return shapes

    def init_params(self, seed):
        """
        Truncated-normal weights (std 0.02); biases, adaLN projections and output heads start at zero
        :param seed: initialisation seed
        :return: ParamStore
        """
        shapes = self.param_shapes()
        drawn = self.truncated_normal({n: s for n, s in shapes.items() if not _zero_initialised(n)}, seed)
        values = {n: drawn[n] if n in drawn else np.zeros(s, dtype=np.float32) for n, s in shapes.items()}
        self.params = ParamStore(values, dtype=self.dtype)
        self.opt_state = None
        self._infer_fn = None
        return self.params

    def extra_tensors(self):
        if self.normalizer is None:
            return {}
        return {"norm/lo": self.normalizer.lo, "norm/hi": self.normalizer.hi}

    def restore_extra(self, tensors):
        from dataset import ActionNormalizer

        if "norm/lo" in tensors:
            self.normalizer = ActionNormalizer(tensors["norm/lo"], tensors["norm/hi"])

    def assemble_sequence(self, params, text, obs, future, actions):
        """
        Embed [text | observation latent | noisy future latents | noisy actions] into one sequence
        :param params: ParamStore
        :param text: [B, L_text] token ids
        :param obs: [B, h w, c_lat] observation latent tokens (model range)
        :param future: [B, n - 1, h w, c_lat] noisy future latent tokens, None without video
        :param actions: [B, K, 7] noisy normalised actions
        :return: TokenSequence
        """
        c = self.mcfg
        dtype = params.dtype
        hw = c.tokens_per_latent
        if text.shape[-1] != c.l_text:
            raise ValueError(f"Shape mismatch: text length {text.shape[-1]} vs l_text {c.l_text}")
        if tuple(obs.shape[1:]) != (hw, c.c_lat):
            raise ValueError(f"Shape mismatch: observation {tuple(obs.shape)} vs (B, {hw}, {c.c_lat})")
        if tuple(actions.shape[1:]) != (c.k_actions, ACTION_DIM):
            raise ValueError(f"Shape mismatch: actions {tuple(actions.shape)} vs (B, {c.k_actions}, 7)")
        if (future is not None) != self.with_video:
            raise ValueError("Future latents must be given exactly when the model predicts video")
        if future is not None and tuple(future.shape[1:]) != (c.n_latents - 1, hw, c.c_lat):
            raise ValueError(f"Shape mismatch: future {tuple(future.shape)} vs (B, {c.n_latents - 1}, {hw}, {c.c_lat})")

        latents = tf.cast(obs, dtype)[:, None]
        if future is not None:
            latents = tf.concat([latents, tf.cast(future, dtype)], axis=1)
        n_lat = latents.shape[1]
        text_tokens = tf.gather(params["text/embed"], tf.cast(text, tf.int32))
        latent_tokens = self.linear(latents, params["latent/w"], params["latent/b"])
        latent_tokens = tf.reshape(latent_tokens, [-1, n_lat * hw, c.d_model])
        action_tokens = self.linear(tf.cast(actions, dtype), params["action/w"], params["action/b"])
        content = tf.concat([text_tokens, latent_tokens, action_tokens], axis=1)

        tags, index = sequence_layout(c, future is not None)
        position = tf.gather(params["modality"], tags)
        if c.use_positions:
            latent_pos = params["latent/time_pos"][:n_lat, None, :] + params["latent/spatial_pos"][None]
            position += tf.concat([params["text/pos"], tf.reshape(latent_pos, [n_lat * hw, c.d_model]),
                                   params["action/pos"]], axis=0)
        return TokenSequence(content, position, tags, index)

    def time_embed(self, params, t):
        features = self.timestep_embedding(t, self.mcfg.freq_dim, params.dtype)
        hidden = tf.nn.silu(self.linear(features, params["time/w1"], params["time/b1"]))
        return self.linear(hidden, params["time/w2"], params["time/b2"])

    @staticmethod
    def _per_token(is_action, emb_video, emb_action, w, b):
        """
        adaLN modulation: action tokens follow the action timestep, every other token the video timestep
        """
        mod_video = BaseModel.linear(tf.nn.silu(emb_video), w, b)[:, None, :]
        mod_action = BaseModel.linear(tf.nn.silu(emb_action), w, b)[:, None, :]
        return tf.where(is_action, mod_action, mod_video)

    def _dropout(self, x, training, seed, salt):
        if not training or self.mcfg.dropout == 0.0 or seed is None:
            return x
        step_seed = tf.cast(seed, tf.int64) + tf.constant([0, salt], tf.int64)
        return tf.nn.experimental.stateless_dropout(x, rate=self.mcfg.dropout, seed=step_seed)

    def block(self, params, i, x, emb_video, emb_action, is_action, bias, training=False, seed=None):
        prefix = f"blocks/{i:02d}/"
        mod = self._per_token(is_action, emb_video, emb_action, params[prefix + "ada_w"], params[prefix + "ada_b"])
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = tf.split(mod, 6, axis=-1)

        h = self.modulate(self.layer_norm(x), shift_msa, scale_msa)
        h = self.attention(h, params[prefix + "qkv_w"], params[prefix + "qkv_b"], params[prefix + "proj_w"],
                           params[prefix + "proj_b"], self.mcfg.n_heads, bias)
        x = x + gate_msa * self._dropout(h, training, seed, 2 * i)

        h = self.modulate(self.layer_norm(x), shift_mlp, scale_mlp)
        h = self.gelu(self.linear(h, params[prefix + "mlp1_w"], params[prefix + "mlp1_b"]))
        h = self.linear(h, params[prefix + "mlp2_w"], params[prefix + "mlp2_b"])
        return x + gate_mlp * self._dropout(h, training, seed, 2 * i + 1)

    def forward(self, params, text, obs, future, actions, t_video, t_action, training=False, seed=None,
                checked=False, mask_mode=None):
        """
        Predict the noise of the future latents and of the action chunk
        :param params: ParamStore
        :param text: [B, L_text] token ids
        :param obs: [B, h w, c_lat] clean observation latent tokens
        :param future: [B, n - 1, h w, c_lat] noisy future latents, None for action-only models
        :param actions: [B, K, 7] noisy actions
        :param t_video: [B] timesteps of the future latents (also modulates text and observation)
        :param t_action: [B] timesteps of the actions
        :param training: apply residual dropout
        :param seed: [2] integer seed of the dropout masks
        :param checked: raise NumericalError naming the first block with non-finite activations (eager only)
        :param mask_mode: override of the configured attention mask
        :return: (eps_video [B, n - 1, h w, c_lat] or None, eps_action [B, K, 7])
        """
        c = self.mcfg
        seq = self.assemble_sequence(params, text, obs, future, actions)
        x = seq.embeddings
        emb_video = self.time_embed(params, t_video)
        emb_action = self.time_embed(params, t_action)
        is_action = tf.constant((seq.tags == ACTION)[None, :, None])
        bias = attention_bias(seq.tags, mask_mode or c.mask_mode, params.dtype)

        for i in range(c.n_blocks):
            x = self.block(params, i, x, emb_video, emb_action, is_action, bias, training, seed)
            if checked and not bool(tf.reduce_all(tf.math.is_finite(x))):
                raise NumericalError(f"Non-finite activations after block {i}")

        mod = self._per_token(is_action, emb_video, emb_action, params["final/ada_w"], params["final/ada_b"])
        shift, scale = tf.split(mod, 2, axis=-1)
        x = self.modulate(self.layer_norm(x), shift, scale)

        eps_video = None
        if future is not None:
            start, hw = c.l_text + c.tokens_per_latent, c.tokens_per_latent
            video = x[:, start:start + (c.n_latents - 1) * hw]
            eps_video = self.linear(video, params["head/video_w"], params["head/video_b"])
            eps_video = tf.reshape(eps_video, [-1, c.n_latents - 1, hw, c.c_lat])
        eps_action = self.linear(x[:, -c.k_actions:], params["head/action_w"], params["head/action_b"])
        return eps_video, eps_action

    def make_feeds(self, batch, rng):
        """
        Draw timesteps and noise for a batch of windows
        :param batch: dataset.Batch
        :param rng: numpy Generator of this step
        :return: dict of arrays consumed by loss_terms
        """
        size = batch.text.shape[0]
        t_video, t_action = sample_timesteps(self.cfg.train.timestep_mode, rng, self.sched.timesteps, size)
        eps_actions = rng.standard_normal(batch.actions.shape).astype(np.float32)
        feeds = {
            "text": batch.text,
            "obs": batch.obs,
            "actions": add_noise(batch.actions, eps_actions, t_action, self.sched).astype(np.float32),
            "eps_actions": eps_actions,
            "action_mask": batch.action_mask,
            "t_video": t_video.astype(np.int64),
            "t_action": t_action.astype(np.int64),
        }
        if self.with_video:
            eps_future = rng.standard_normal(batch.future.shape).astype(np.float32)
            feeds["future"] = add_noise(batch.future, eps_future, t_video, self.sched).astype(np.float32)
            feeds["eps_future"] = eps_future
            feeds["future_mask"] = np.repeat(batch.future_mask[:, :, None], self.mcfg.tokens_per_latent, axis=2)
        return feeds

    def loss_terms(self, params, feeds, training=False, seed=None):
        """
        :return: (total, video, action) joint denoising loss of one batch
        """
        eps_video, eps_action = self.forward(params, feeds["text"], feeds["obs"], feeds.get("future"),
                                             feeds["actions"], feeds["t_video"], feeds["t_action"], training, seed)
        eps_future = feeds.get("eps_future")
        if eps_future is not None:
            eps_future = tf.cast(eps_future, params.dtype)
        train = self.cfg.train
        return joint_loss(eps_future, eps_video, tf.cast(feeds["eps_actions"], params.dtype), eps_action,
                          train.loss_mode, train.lam, feeds.get("future_mask"), feeds["action_mask"])

    def video_head_names(self):
        return [n for n in self.params.names() if n.startswith("head/video")]

    def _build_train_step(self):
        train = self.cfg.train
        names = self.params.names()
        video_head = set(self.video_head_names())

        @tf.function(reduce_retracing=True)
        def train_step(feeds, seed):
            with tf.GradientTape() as tape:
                total, video, action = self.loss_terms(self.params, feeds, training=True, seed=seed)
            grads = tape.gradient(total, self.params.trainable(), unconnected_gradients=tf.UnconnectedGradients.ZERO)
            grads = dict(zip(names, grads))
            adam_step(self.params, grads, self.opt_state, train.learning_rate, train.beta1, train.beta2,
                      train.weight_decay)
            head = [g for n, g in grads.items() if n in video_head]
            head_norm = tf.linalg.global_norm(head) if head else tf.zeros([], total.dtype)
            return total, video, action, head_norm

        return train_step

    def train(self, dataset, out_dir, resume=True):
        """
        Train the model, checkpointing into out_dir/checkpoints and logging the loss curve to out_dir/loss.csv
        :param dataset: dataset.WindowDataset with a fitted action normaliser
        :param out_dir: output directory of the run
        :param resume: continue from the latest checkpoint in out_dir
        :return: path of the final checkpoint
        """
        train = self.cfg.train
        checkpoint_dir = os.path.join(out_dir, "checkpoints")
        loss_path = os.path.join(out_dir, "loss.csv")
        self.normalizer = dataset.normalizer
        if self.params is None:
            self.init_params(train.seed)
        self.opt_state = AdamState(self.params)

        start = self.load(checkpoint_dir) if resume and os.path.isdir(checkpoint_dir) else 0
        rows = []
        if start and os.path.isfile(loss_path):
            history = pd.read_csv(loss_path, float_precision="round_trip")
            rows = history[history["step"] < start].to_dict("records")
        if start >= train.steps and start:
            logger.info(f" [*] Training already complete at step {start}")
            return self.latest_checkpoint(checkpoint_dir)[0]

        logger.info(f"Training {self.params.size} parameters, loss mode {train.loss_mode}, "
                    f"mask {self.mcfg.mask_mode}, timesteps {train.timestep_mode}, {len(dataset)} windows")
        train_step = self._build_train_step()
        self.head_grad_norms = []
        start_time = time.time()
        path = None

        def flush():
            frame = pd.DataFrame(rows, columns=["step", "loss_total", "loss_video", "loss_action"])
            atomic_write(loss_path, frame.to_csv(index=False).encode("utf-8"))

        for step in tqdm(range(start, train.steps), initial=start, total=train.steps, desc="train", leave=False):
            rng = np.random.default_rng([train.seed, step])
            feeds = self.make_feeds(dataset.sample_batch(rng, train.batch_size), rng)
            seed = tf.constant(rng.integers(0, 2 ** 31 - 1, size=2), tf.int64)
            total, video, action, head_norm = train_step(feeds, seed)
            total, video, action = float(total), float(video), float(action)
            if not np.isfinite(total):
                flush()
                raise NumericalError(f"Non-finite loss at step {step}, last checkpoint retained")
            rows.append({"step": step, "loss_total": total, "loss_video": video, "loss_action": action})
            self.head_grad_norms.append(float(head_norm))

            if step % train.log_interval == 0:
                logger.info("Step: [%5d/%5d], time: [%4.2f], loss: [%.6f], video: [%.6f], action: [%.6f]"
                            % (step, train.steps, time.time() - start_time, total, video, action))
            if (step + 1) % train.checkpoint_interval == 0 or step + 1 == train.steps:
                path = self.save(step + 1, checkpoint_dir)
                flush()
        if path is None:
            path = self.save(train.steps, checkpoint_dir)
            flush()
        return path

    def _infer(self, text, obs, future, actions, t_video, t_action):
        if self._infer_fn is None:
            self._infer_fn = tf.function(
                lambda text, obs, future, actions, t_video, t_action:
                self.forward(self.params, text, obs, future, actions, t_video, t_action),
                reduce_retracing=True)
        return self._infer_fn(text, obs, future, actions, t_video, t_action)

    def sample(self, text, obs_latent, seed, steps=None, infer_mode=None):
        """
        Imagine the future and plan an action chunk
        :param text: [B, L_text] token ids
        :param obs_latent: [B, h, w, c_lat] observation latent in [0, 1]
        :param seed: sampler seed
        :param steps: DDIM steps, configured default when None
        :param infer_mode: joint or two_stage, configured default when None
        :return: (latent clip [B, n, h, w, c_lat] in [0, 1] with the observation first, None without video;
                  normalised actions [B, K, 7])
        """
        c = self.mcfg
        steps = steps or self.cfg.diffusion.sample_steps
        infer_mode = infer_mode or self.cfg.diffusion.infer_mode
        obs_latent = np.asarray(obs_latent, dtype=np.float32)
        text = np.asarray(text, dtype=np.int32)
        obs = to_model_range(flatten_raster(obs_latent)).astype(np.float32)
        size = obs.shape[0]
        video_shape = (size, c.n_latents - 1, c.tokens_per_latent, c.c_lat) if self.with_video else None

        def eps_model(x_video, x_action, t_video, t_action):
            future = x_video.astype(np.float32) if x_video is not None else None
            eps_video, eps_action = self._infer(text, obs, future, x_action.astype(np.float32), t_video, t_action)
            return (eps_video.numpy() if eps_video is not None else None), eps_action.numpy()

        video, actions = ddim_sample(eps_model, video_shape, (size, c.k_actions, ACTION_DIM), self.sched,
                                     steps, seed, infer_mode)
        if video is None:
            return None, actions
        h, w = c.grid
        clip = np.concatenate([obs_latent[:, None], unflatten_raster(video, h, w)], axis=1)
        return clip, actions


def gradient_check(cfg, n_probe=256, seed=0, rtol=1e-3, eps=1e-5, batch_size=2):
    """
    Finite-difference check of the full forward + loss composition at a tiny float64 size
    :param cfg: RunConfig whose loss mode, mask and horizon are kept
    :param n_probe: probed scalar parameters
    :param seed: seed of the parameters, the batch and the probes
    :param rtol: pass threshold
    :param eps: finite-difference step
    :param batch_size: windows in the probe batch
    :return: numerics.GradReport
    """
    tiny = copy.deepcopy(cfg)
    apply_overrides(tiny.model, {"d_model": 16, "n_heads": 2, "n_blocks": 2, "freq_dim": 16, "l_text": 4,
                                 "image_size": 8, "dropout": 0.0})
    model = VideoActionDiT(tiny, dtype=tf.float64)
    rng = np.random.default_rng(seed)
    # zero-initialised heads would hide every upstream gradient, so all tensors are drawn here
    model.params = ParamStore({n: rng.normal(0.0, 0.2, s) for n, s in model.param_shapes().items()},
                              dtype=tf.float64)

    c = tiny.model
    hw = c.tokens_per_latent
    feeds = {
        "text": rng.integers(len(model.vocab), size=(batch_size, c.l_text)).astype(np.int32),
        "obs": rng.uniform(-1.0, 1.0, (batch_size, hw, c.c_lat)),
        "actions": rng.standard_normal((batch_size, c.k_actions, ACTION_DIM)),
        "eps_actions": rng.standard_normal((batch_size, c.k_actions, ACTION_DIM)),
        "action_mask": np.ones((batch_size, c.k_actions)),
        "t_video": rng.integers(1, model.sched.timesteps + 1, size=batch_size),
        "t_action": rng.integers(1, model.sched.timesteps + 1, size=batch_size),
    }
    if model.with_video:
        feeds["future"] = rng.standard_normal((batch_size, c.n_latents - 1, hw, c.c_lat))
        feeds["eps_future"] = rng.standard_normal((batch_size, c.n_latents - 1, hw, c.c_lat))
        feeds["future_mask"] = np.ones((batch_size, c.n_latents - 1, hw))

    compiled = tf.function(lambda: model.loss_terms(model.params, feeds)[0])
    return check_gradients(lambda params: compiled(), model.params, n_probe=n_probe, eps=eps, rtol=rtol, seed=seed)
