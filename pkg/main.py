# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

import argparse
import logging
import os
import shutil
import sys

from config import load_config, apply_overrides, LOSS_MODES, MASK_MODES, TIMESTEP_MODES, INFER_MODES, \
    SIMILARITY_COSTS
from tabletop import SPLITS
from utils import (EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, UsageError, DataError, NumericalError,
                   RunManifest, setup_logging, configure_tensorflow, prepare_output_dir, content_hash)

logger = logging.getLogger("main")

POLICIES = ("model", "expert", "random")


class ArgumentParser(argparse.ArgumentParser):
    """
    Parser whose errors surface as UsageError so that every failure maps onto the exit-code contract
    """
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _dashed(values):
    return [v.replace("_", "-") for v in values]


def build_parser():
    parser = ArgumentParser(description='Joint video-action diffusion transformer on a synthetic tabletop')
    parser.add_argument('-v', '--verbose', action='store_true', help='DEBUG log messages')
    commands = parser.add_subparsers(dest='command', required=True)

    def command(name, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument('-c', '--config', type=str, default=None, help='Config filepath')
        sub.add_argument('-o', '--out', type=str, required=True, help='Output directory')
        sub.add_argument('-s', '--seed', type=int, default=None, help='Master seed, overrides the config')
        sub.add_argument('-f', '--force', action='store_true', help='Overwrite a non-empty output directory')
        sub.add_argument('-j', '--jobs', type=int, default=1, help='Worker threads')
        return sub

    command('gen-data', 'Generate scripted expert episodes for the training partition')

    train = command('train', 'Train the transformer on a generated dataset')
    train.add_argument('-d', '--data', type=str, required=True, help='Dataset directory written by gen-data')
    train.add_argument('--loss-mode', choices=_dashed(LOSS_MODES), default=None, help='Loss configuration')
    train.add_argument('--mask', choices=MASK_MODES, default=None, help='Attention mask')
    train.add_argument('--timesteps', choices=TIMESTEP_MODES, default=None, help='Timestep schedule')
    train.add_argument('--latents', type=int, default=None, help='Latents per clip, observation included')
    train.add_argument('--steps', type=int, default=None, help='Optimiser steps')
    train.add_argument('--skip-gradient-check', action='store_true', help='Do not verify gradients first')

    evaluate = command('eval', 'Closed-loop evaluation on a split')
    evaluate.add_argument('--checkpoint', type=str, default=None, help='Checkpoint file or directory')
    evaluate.add_argument('--split', choices=SPLITS, default='in_domain', help='Evaluation split')
    evaluate.add_argument('--trials', type=int, default=None, help='Trials per (task, embodiment)')
    evaluate.add_argument('--policy', choices=POLICIES, default='model', help='Trained model or a stand-in')
    evaluate.add_argument('--sample-steps', type=int, default=None, help='DDIM steps per prediction')
    evaluate.add_argument('--infer-mode', choices=_dashed(INFER_MODES), default=None, help='Denoising order')
    evaluate.add_argument('-d', '--data', type=str, default=None, help='Training dataset for the hygiene check')

    analyze = command('analyze', 'Imagination-execution analysis of a trial archive')
    analyze.add_argument('-a', '--archive', type=str, required=True, help='Directory written by eval')
    analyze.add_argument('--cost', choices=SIMILARITY_COSTS, default=None, help='Hungarian matching cost')
    analyze.add_argument('--frames', action='store_true', help='Dump PNG strips of executed and imagined frames')
    return parser


def resolve_config(args):
    """
    Defaults < config file < flags < VVLA_SEED
    """
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = cfg.rollout.seed = cfg.data.seed = args.seed
    train, model = {}, {}
    if getattr(args, "loss_mode", None):
        train["loss_mode"] = args.loss_mode.replace("-", "_")
    if getattr(args, "timesteps", None):
        train["timestep_mode"] = args.timesteps
    if getattr(args, "steps", None) is not None:
        train["steps"] = args.steps
    if getattr(args, "mask", None):
        model["mask_mode"] = args.mask
    if getattr(args, "latents", None) is not None:
        model["n_latents"] = args.latents
    apply_overrides(cfg.train, train)
    apply_overrides(cfg.model, model)
    if getattr(args, "trials", None) is not None:
        cfg.rollout.trials_per_task = args.trials
    if getattr(args, "cost", None):
        cfg.rollout.similarity_cost = args.cost
    if os.environ.get("VVLA_SEED") is not None:
        seed = int(os.environ["VVLA_SEED"])
        cfg.train.seed = cfg.rollout.seed = cfg.data.seed = seed
    return cfg.validate()


def cmd_gen_data(args, cfg):
    from episodes import generate_dataset, MANIFEST, VOCAB

    prepare_output_dir(args.out, args.force)
    manifest = generate_dataset(cfg.data, args.out, jobs=args.jobs)
    counts = manifest.groupby(["task", "embodiment"], sort=False).size()
    for (task, emb), count in counts.items():
        print(f"{task:<12s} {emb}  {count:6d}")
    paths = [os.path.join(args.out, p) for p in manifest["path"]]
    paths += [os.path.join(args.out, MANIFEST), os.path.join(args.out, VOCAB)]
    return RunManifest("gen-data", cfg.to_dict(), cfg.data.seed, content_hash([], cfg.to_dict())), paths


def _prepare_train_dir(out, force):
    checkpoint_dir = os.path.join(out, "checkpoints")
    if force:
        shutil.rmtree(checkpoint_dir, ignore_errors=True)
        for name in ("loss.csv", "gradient_check.csv"):
            if os.path.isfile(os.path.join(out, name)):
                os.remove(os.path.join(out, name))
        os.makedirs(out, exist_ok=True)
    elif not os.path.isdir(checkpoint_dir):
        prepare_output_dir(out, force)
    else:
        logger.info(f"Resuming from checkpoints in {checkpoint_dir}")


def cmd_train(args, cfg):
    from dataset import load_training_episodes, build_dataset
    from episodes import VOCAB
    from instructions import Vocab, build_vocab
    from model_dit import VideoActionDiT, gradient_check
    from tabletop import training_cells

    if not os.path.isdir(args.data):
        raise DataError(f"Invalid training dataset directory specified: {args.data}")
    _prepare_train_dir(args.out, args.force)
    configure_tensorflow(deterministic=True, threads=args.jobs)
    outputs = []

    if cfg.train.grad_check and not args.skip_gradient_check:
        report = gradient_check(cfg, seed=cfg.train.seed)
        path = os.path.join(args.out, "gradient_check.csv")
        report.to_frame().to_csv(path, index=False)
        outputs.append(path)
        logger.info(f"Gradient check: {len(report.probes)} probes, {report.excluded} excluded, "
                    f"max rel err {report.max_rel_err:.3e}")
        if not report.passed:
            raise NumericalError(f"Gradient check failed, worst probe {report.worst}")

    vocab_path = os.path.join(args.data, VOCAB)
    vocab = Vocab.load(vocab_path) if os.path.isfile(vocab_path) else build_vocab()
    cells = training_cells(cfg.train.skills, cfg.train.embodiments, cfg.train.embodiment_skills)
    episodes = load_training_episodes(args.data, vocab, cfg.model.l_text, cells,
                                      cache_path=os.path.join(args.out, "episode_cache.hdf5"))
    dataset = build_dataset(episodes, cfg.model.n_frames, cfg.model.k_actions, cfg.train.stride, cfg.model.patch)
    model = VideoActionDiT(cfg, vocab)
    outputs += [model.train(dataset, args.out), os.path.join(args.out, "loss.csv")]
    manifest = RunManifest("train", cfg.to_dict(), cfg.train.seed, content_hash([args.data], cfg.to_dict()))
    return manifest, outputs


def cmd_eval(args, cfg):
    from episodes import read_manifest
    from rollout import ModelPolicy, ExpertPolicy, RandomPolicy, evaluate, write_archive, check_split_hygiene
    from tabletop import split_spec

    prepare_output_dir(args.out, args.force)
    configure_tensorflow(deterministic=True, threads=args.jobs)
    inputs = []
    if args.policy == "model":
        from model_dit import VideoActionDiT

        if args.checkpoint is None:
            raise UsageError("The model policy needs --checkpoint")
        model = VideoActionDiT.from_checkpoint(args.checkpoint)
        infer_mode = args.infer_mode.replace("-", "_") if args.infer_mode else None
        policy = ModelPolicy(model, args.sample_steps, infer_mode)
        trained = model.cfg.train
        inputs.append(args.checkpoint)
    else:
        c = cfg.model
        policy = (ExpertPolicy if args.policy == "expert" else RandomPolicy)(c.k_actions, c.n_frames, c.patch)
        trained = cfg.train
    cfg.rollout.validate(policy.k_actions)

    split = split_spec(args.split, trained.skills, trained.embodiments, trained.embodiment_skills)
    if args.data is not None:
        check_split_hygiene(split, read_manifest(args.data))
        logger.info(f"Split {split.name} is disjoint from the training manifest")
    table, results = evaluate(policy, split, cfg.rollout, jobs=args.jobs)
    print(table.to_string(index=False))
    outputs = write_archive(args.out, table, results, args.policy)
    manifest = RunManifest("eval", cfg.to_dict(), cfg.rollout.seed,
                           content_hash(inputs, {"config": cfg.to_dict(), "split": split.name,
                                                 "policy": args.policy}))
    return manifest, outputs


def cmd_analyze(args, cfg):
    from analyzer import analyze_archive

    if not os.path.isdir(args.archive):
        raise DataError(f"Invalid trial archive specified: {args.archive}")
    prepare_output_dir(args.out, args.force)
    frames_dir = os.path.join(args.out, "frames") if args.frames else None
    analysis, outputs = analyze_archive(args.archive, args.out, cfg.rollout.similarity_cost, frames_dir)
    if frames_dir is not None:
        outputs.append(frames_dir)
    print(analysis.groupby("execution_success")["similarity"].describe().to_string())
    manifest = RunManifest("analyze", cfg.to_dict(), cfg.rollout.seed,
                           content_hash([args.archive], {"cost": cfg.rollout.similarity_cost}))
    return manifest, outputs


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze}


def main(argv=None):
    """
    :param argv: command-line arguments without the program name
    :return: exit code, 0 success, 1 usage, 2 data, 3 numerical abort
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(args.verbose)

    try:
        cfg = resolve_config(args)
        manifest, outputs = COMMANDS[args.command](args, cfg)
        manifest.finish(args.out, outputs)
    except NumericalError as err:
        logger.error(f"Numerical abort: {err}")
        return EXIT_NUMERICAL
    except DataError as err:
        logger.error(f"Data error: {err}")
        return EXIT_DATA
    except (UsageError, ValueError) as err:
        logger.error(f"Usage error: {err}")
        return EXIT_USAGE
    except OSError as err:
        logger.error(f"Data error: {err}")
        return EXIT_DATA
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
