import os

import numpy as np
import pandas as pd
import pytest

from dataset import build_dataset
from model_dit import VideoActionDiT
from utils import NumericalError
from conftest import make_tiny_config, make_episodes


def run_training(cfg, out_dir, episodes=None, model=None):
    episodes = episodes or make_episodes()
    dataset = build_dataset(episodes, cfg.model.n_frames, cfg.model.k_actions, cfg.train.stride, cfg.model.patch)
    model = model or VideoActionDiT(cfg)
    path = model.train(dataset, str(out_dir))
    return model, path


def read_losses(out_dir):
    return pd.read_csv(os.path.join(str(out_dir), "loss.csv"), float_precision="round_trip")


def test_initial_losses_near_one(tiny_cfg, tmp_path):
    run_training(tiny_cfg, tmp_path)
    losses = read_losses(tmp_path)
    assert list(losses.columns) == ["step", "loss_total", "loss_video", "loss_action"]
    assert list(losses["step"]) == [0, 1, 2, 3]
    first = losses.iloc[0]
    assert first["loss_video"] == pytest.approx(1.0, abs=0.1)
    assert first["loss_action"] == pytest.approx(1.0, abs=0.4)
    assert first["loss_total"] == pytest.approx(first["loss_video"] + first["loss_action"])


def test_checkpoints_written(tiny_cfg, tmp_path):
    _, path = run_training(tiny_cfg, tmp_path)
    names = sorted(os.listdir(tmp_path / "checkpoints"))
    assert names == ["ckpt-000002.vvck", "ckpt-000004.vvck"]
    assert path.endswith("ckpt-000004.vvck")
    restored = VideoActionDiT.from_checkpoint(path)
    assert restored.normalizer is not None


def test_training_is_deterministic(tiny_cfg, tmp_path):
    _, first = run_training(tiny_cfg, tmp_path / "a")
    _, second = run_training(make_tiny_config(), tmp_path / "b")
    with open(first, "rb") as a, open(second, "rb") as b:
        assert a.read() == b.read()
    pd.testing.assert_frame_equal(read_losses(tmp_path / "a"), read_losses(tmp_path / "b"))


def test_seed_changes_training(tmp_path):
    _, first = run_training(make_tiny_config(seed=0), tmp_path / "a")
    _, second = run_training(make_tiny_config(seed=1), tmp_path / "b")
    with open(first, "rb") as a, open(second, "rb") as b:
        assert a.read() != b.read()


def test_resume_matches_uninterrupted_run(tiny_cfg, tmp_path):
    _, full = run_training(tiny_cfg, tmp_path / "full")
    _, interrupted = run_training(make_tiny_config(), tmp_path / "resumed")
    os.remove(interrupted)
    _, resumed = run_training(make_tiny_config(), tmp_path / "resumed")
    assert os.path.basename(resumed) == os.path.basename(full)
    with open(full, "rb") as a, open(resumed, "rb") as b:
        assert a.read() == b.read()
    pd.testing.assert_frame_equal(read_losses(tmp_path / "full"), read_losses(tmp_path / "resumed"))


def test_completed_run_is_not_retrained(tiny_cfg, tmp_path):
    _, path = run_training(tiny_cfg, tmp_path)
    mtime = os.path.getmtime(path)
    model, again = run_training(make_tiny_config(), tmp_path)
    assert again == path
    assert os.path.getmtime(path) == mtime
    assert model.head_grad_norms == []


def test_action_only_training(tmp_path):
    model, _ = run_training(make_tiny_config(loss_mode="action_only"), tmp_path)
    assert "head/video_w" not in model.params
    losses = read_losses(tmp_path)
    assert np.all(losses["loss_video"] == 0.0)
    np.testing.assert_array_equal(losses["loss_total"], losses["loss_action"])


def test_no_video_loss_leaves_video_head_untouched(tmp_path):
    model, _ = run_training(make_tiny_config(loss_mode="no_video_loss"), tmp_path)
    assert model.head_grad_norms == [0.0] * 4
    assert not np.any(model.params["head/video_w"].numpy())
    losses = read_losses(tmp_path)
    assert np.all(losses["loss_video"] > 0.0)


def test_dual_training_updates_video_head(tiny_cfg, tmp_path):
    model, _ = run_training(tiny_cfg, tmp_path)
    assert all(norm > 0.0 for norm in model.head_grad_norms)
    assert np.any(model.params["head/video_w"].numpy())


@pytest.mark.parametrize("timestep_mode", ["sync", "async"])
def test_timestep_modes_train(timestep_mode, tmp_path):
    run_training(make_tiny_config(timestep_mode=timestep_mode), tmp_path)
    assert np.all(np.isfinite(read_losses(tmp_path)["loss_total"]))


def test_non_finite_loss_aborts(tiny_cfg, tmp_path):
    model = VideoActionDiT(tiny_cfg)
    model.init_params(0)
    values = model.params.numpy()
    values["blocks/00/mlp1_w"][:] = np.nan
    model.params.assign(values)
    with pytest.raises(NumericalError, match="step 0"):
        run_training(tiny_cfg, tmp_path, model=model)
    assert not os.path.isdir(tmp_path / "checkpoints") or not os.listdir(tmp_path / "checkpoints")


@pytest.mark.slow
def test_loss_decreases(tmp_path):
    cfg = make_tiny_config(steps=200, checkpoint_interval=200, log_interval=50)
    run_training(cfg, tmp_path, episodes=make_episodes(n_episodes=2))
    losses = read_losses(tmp_path)["loss_total"]
    assert losses.iloc[-20:].mean() < 0.8 * losses.iloc[:20].mean()
