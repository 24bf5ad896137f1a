"""Command line entry point: make-data, train, sample, edit, interpolate, eval, grid and attn."""
from data_generators import Stage1DataGenerator, Stage2DataGenerator, load_stage1, load_stage2
from training_manager import TrainingData, run_stage
from pipeline import WPlusPipeline
from sampler import (SamplerConfig, SampleResult, sample_identity, sample_with_edit, interpolate_wplus, save_sample,
                     attention_scores)
from evaluation import (eval_identity, make_eval_identities, make_eval_prompts, run_eval, write_report, sign_test)
from plotting import plot_grid, plot_attention_map
from toyworld import WPlusEmbedding, edit_direction, parse_caption
from settings import RunConfig
from errors import ConfigurationError
from utils import make_run_dir, setup_logging
from constants import *

from dataclasses import replace
from typing import Dict, List, Optional, Sequence
import argparse
import logging
import os
import sys


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wplus", description="W+ adapter toy world.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file, defaults to {}".format(DEFAULT_CONFIG_REL_PATH))
    common.add_argument("--seed", type=int)
    common.add_argument("--lambda", dest="lam", type=float, help="residual attention strength")
    common.add_argument("--alpha", type=float, help="edit strength, a single value instead of the sweep")
    common.add_argument("--kappa", type=float, help="interpolation weight, a single value instead of the sweep")
    common.add_argument("--prompt")
    common.add_argument("--out", help="output root, defaults to ${}".format(OUT_ROOT_ENV))
    common.add_argument("--checkpoint", help="adapter checkpoint (stage 1 checkpoint for train --stage 2)")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("make-data", parents=[common], help="write the stage 1 and stage 2 datasets")
    train = commands.add_parser("train", parents=[common], help="train one stage")
    train.add_argument("--stage", type=int, choices=(0, 1, 2),
                       help="required unless the config sets {}".format(STAGE_FIELD))
    commands.add_parser("sample", parents=[common], help="sample one identity with a prompt")
    commands.add_parser("edit", parents=[common], help="attribute edit sweep")
    commands.add_parser("interpolate", parents=[common], help="interpolate between two identities")
    evaluate = commands.add_parser("eval", parents=[common], help="identity / prompt / detection report")
    evaluate.add_argument("--baseline", action="store_true", help="also score a random adapter and sign-test")
    grid = commands.add_parser("grid", parents=[common], help="comparison grid, one row per identity")
    grid.add_argument("--sweep", choices=SWEEPS, help="columns, defaults to alpha")
    grid.add_argument("--rows", type=int, help="one identity per row, defaults to 4")
    commands.add_parser("attn", parents=[common], help="identity attention map of the last residual layer")
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    path = args.config
    if path is None and os.path.isfile(DEFAULT_CONFIG_REL_PATH):
        path = DEFAULT_CONFIG_REL_PATH
    overrides = {SEED_FIELD: args.seed, LAMBDA_FIELD: args.lam, ALPHA_FIELD: args.alpha, KAPPA_FIELD: args.kappa,
                 PROMPT_FIELD: args.prompt, OUT_FIELD: args.out, CHECKPOINT_FIELD: args.checkpoint,
                 STAGE_FIELD: getattr(args, "stage", None), SWEEP_FIELD: getattr(args, "sweep", None),
                 ROWS_FIELD: getattr(args, "rows", None)}
    return RunConfig(path, overrides)


def _out_root(config: RunConfig) -> str:
    return config.paths.out or os.environ.get(OUT_ROOT_ENV) or DEFAULT_OUT_ROOT


def _require_path(path: Optional[str], what: str) -> str:
    if not path:
        error_str = "No {} given.".format(what)
        logging.error("CLI: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    if not os.path.exists(path):
        error_str = "{} '{}' does not exist.".format(what.capitalize(), path)
        logging.error("CLI: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    return path


def _load_pipeline(config: RunConfig) -> WPlusPipeline:
    base = _require_path(config.paths.base_checkpoint, "base checkpoint ({})".format(BASE_CHECKPOINT_FIELD))
    pipe = WPlusPipeline.from_base_checkpoint(base, config.profile)
    pipe.load_adapter(_require_path(config.paths.checkpoint, "adapter checkpoint (--checkpoint)"))
    return pipe


def _identity(config: RunConfig, index: int) -> WPlusEmbedding:
    # index i is eval identity i
    return eval_identity(index, config.eval.seed, config.profile.profile)


def _record(config: RunConfig, **extra) -> Dict[str, object]:
    record = dict(prompt=config.sampler.prompt, seed=config.sampler.seed, steps=config.sampler.steps,
                  guidance_scale=config.sampler.guidance_scale, eta=config.sampler.eta, checkpoint=config.paths.checkpoint)
    record.update(extra)
    return record


# commands
# ====================================================

def cmd_make_data(config: RunConfig, run_dir: str, args: argparse.Namespace) -> List[str]:
    folders = [Stage1DataGenerator(config.data, config.profile.profile).write(run_dir),
               Stage2DataGenerator(config.data, config.profile.profile).write(run_dir)]
    logging.info("CLI: Datasets written, set {} = {} to train on them.".format(DATA_ROOT_FIELD, run_dir))
    return folders


def cmd_train(config: RunConfig, run_dir: str, args: argparse.Namespace) -> List[str]:
    stage = config.command.stage
    if stage is None:
        error_str = "No training stage given, pass --stage or set {} in the config.".format(STAGE_FIELD)
        logging.error("CLI: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    root = config.data.data_root
    profile = config.profile.profile
    if stage == 0:
        faces = load_stage1(root, profile) if os.path.isdir(os.path.join(root, STAGE1_FOLDER)) else None
        data = TrainingData(faces=faces, wild=load_stage2(root, profile))
        checkpoints = dict()
    elif stage == 1:
        data = TrainingData(faces=load_stage1(root, profile))
        checkpoints = dict(base=config.paths.base_checkpoint)
    else:
        data = TrainingData(wild=load_stage2(root, profile))
        checkpoints = dict(base=config.paths.base_checkpoint, stage1=config.paths.checkpoint)
    report = run_stage(stage, config, data, {k: v for k, v in checkpoints.items() if v}, run_dir)
    logging.info("CLI: Stage {} done, last checkpoint {}.".format(stage, report.last_checkpoint))
    return report.checkpoints


def cmd_sample(config: RunConfig, run_dir: str, args: argparse.Namespace) -> List[str]:
    pipe = _load_pipeline(config)
    sampler = SamplerConfig.from_params(config.sampler, config.profile.wild_size)
    identity = config.sampler.identity
    result = sample_identity(pipe, config.sampler.prompt, _identity(config, identity), sampler)
    path = os.path.join(run_dir, SAMPLE_NAME_FORMAT.format(identity, sampler.seed))
    return [save_sample(path, result, _record(config, identity=identity, lam=sampler.lam))]


def cmd_edit(config: RunConfig, run_dir: str, args: argparse.Namespace) -> List[str]:
    pipe = _load_pipeline(config)
    sampler = SamplerConfig.from_params(config.sampler, config.profile.wild_size)
    identity = config.sampler.identity
    w = _identity(config, identity)
    direction = edit_direction(config.sampler.attribute, config.profile.profile)
    alphas = ALPHA_SWEEP if config.sampler.alpha is None else (config.sampler.alpha,)
    paths, images = [], []
    for alpha in alphas:
        result = sample_with_edit(pipe, config.sampler.prompt, w, direction, alpha, sampler)
        path = os.path.join(run_dir, EDIT_NAME_FORMAT.format(direction.attribute_name, identity, alpha))
        paths.append(save_sample(path, result, _record(config, identity=identity, lam=sampler.lam,
                                                       attribute=direction.attribute_name, alpha=alpha)))
        images.append(result.image)
    plot_grid([images], os.path.join(run_dir, GRID_NAME_FORMAT.format("alpha")), ["id {}".format(identity)],
              ["{:+g}".format(a) for a in alphas])
    return paths


def cmd_interpolate(config: RunConfig, run_dir: str, args: argparse.Namespace) -> List[str]:
    pipe = _load_pipeline(config)
    sampler = SamplerConfig.from_params(config.sampler, config.profile.wild_size)
    first, second = config.sampler.identity, config.sampler.identity2
    w1 = _identity(config, first)
    w2 = _identity(config, second)
    kappas = KAPPA_SWEEP if config.sampler.kappa is None else (config.sampler.kappa,)
    paths, images = [], []
    for kappa in kappas:
        result = sample_identity(pipe, config.sampler.prompt, interpolate_wplus(w1, w2, kappa), sampler)
        path = os.path.join(run_dir, INTERP_NAME_FORMAT.format(first, second, kappa))
        paths.append(save_sample(path, result, _record(config, identity=first, identity2=second, lam=sampler.lam,
                                                       kappa=kappa)))
        images.append(result.image)
    plot_grid([images], os.path.join(run_dir, GRID_NAME_FORMAT.format("kappa")), ["{} -> {}".format(first, second)],
              ["{:g}".format(k) for k in kappas])
    return paths


def cmd_eval(config: RunConfig, run_dir: str, args: argparse.Namespace) -> List[str]:
    pipe = _load_pipeline(config)
    params = config.eval
    sampler = SamplerConfig.from_params(config.sampler, config.profile.wild_size)
    identities = make_eval_identities(params.n_identities, params.seed, config.profile.profile)
    prompts = make_eval_prompts(params.n_prompts, params.seed)
    name = os.path.splitext(os.path.basename(config.paths.checkpoint))[0]
    report = run_eval(pipe, identities, prompts, params, sampler)
    paths = [write_report(report, run_dir, name, params.seed)]
    logging.info("CLI: {}".format(", ".join("{} {:.4f}".format(k, v) for k, v in report.summary.items())))
    if args.baseline:
        pipe.detach()
        pipe.attach(pipe.new_adapter(params.seed, config.train.adapter_mode))
        baseline = run_eval(pipe, identities, prompts, params, sampler)
        paths.append(write_report(baseline, run_dir, "random", params.seed))
        wins, pairs, p_value = sign_test(report.rows["id_distance"], baseline.rows["id_distance"])
        logging.info("CLI: Identity distance below the random adapter on {}/{} samples, sign test p = {:.3g}.".format(
            wins, pairs, p_value))
    return paths


def _grid_rows(config: RunConfig, pipe: WPlusPipeline, sweep: str, rows: int, sampler: SamplerConfig):
    profile = config.profile.profile
    prompt = config.sampler.prompt
    if sweep == "prompt":
        columns = make_eval_prompts(config.eval.n_prompts, config.eval.seed)
        labels = ["{}, {}, {}".format(*parse_caption(c)) for c in columns]
    elif sweep == "alpha":
        columns, labels = ALPHA_SWEEP, ["{:+g}".format(a) for a in ALPHA_SWEEP]
    elif sweep == "kappa":
        columns, labels = KAPPA_SWEEP, ["{:g}".format(k) for k in KAPPA_SWEEP]
    else:
        columns, labels = LAMBDA_SWEEP, ["{:g}".format(x) for x in LAMBDA_SWEEP]
    direction = edit_direction(config.sampler.attribute, profile)
    grid = []
    for r in range(rows):
        w = _identity(config, r)
        row = []
        for value in columns:
            if sweep == "prompt":
                result = sample_identity(pipe, value, w, sampler)
            elif sweep == "alpha":
                result = sample_with_edit(pipe, prompt, w, direction, value, sampler)
            elif sweep == "kappa":
                result = sample_identity(pipe, prompt, interpolate_wplus(w, _identity(config, r + 1), value),
                                         sampler)
            else:
                result = sample_identity(pipe, prompt, w, replace(sampler, lam=value))
            row.append(result.image)
        grid.append(row)
    return grid, labels


def cmd_grid(config: RunConfig, run_dir: str, args: argparse.Namespace) -> List[str]:
    sweep, rows = config.command.sweep, config.command.rows
    if rows < 1:
        error_str = "--rows must be at least 1, got {}.".format(rows)
        logging.error("CLI: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    pipe = _load_pipeline(config)
    sampler = SamplerConfig.from_params(config.sampler, config.profile.wild_size)
    images, labels = _grid_rows(config, pipe, sweep, rows, sampler)
    path = os.path.join(run_dir, GRID_NAME_FORMAT.format(sweep))
    return [plot_grid(images, path, ["id {}".format(r) for r in range(rows)], labels)]


def cmd_attn(config: RunConfig, run_dir: str, args: argparse.Namespace) -> List[str]:
    pipe = _load_pipeline(config)
    sampler = SamplerConfig.from_params(config.sampler, config.profile.wild_size)
    identity = config.sampler.identity
    w = _identity(config, identity)
    result = sample_identity(pipe, config.sampler.prompt, w, sampler)   # type: SampleResult
    layer = len(pipe.adapter.layers) - 1
    scores = attention_scores(pipe, result.latent, config.sampler.prompt, pipe.identity_tokens(w).detach(),
                              layer_index=layer, t=1, lam=sampler.lam)
    path = os.path.join(run_dir, ATTN_NAME_FORMAT.format(identity, layer))
    return [plot_attention_map(result.image, scores, path, title="id {}".format(identity))]


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "interpolate": cmd_interpolate,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "attn": cmd_attn,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = _load_config(args)
        run_dir = make_run_dir(_out_root(config), args.command)
        setup_logging(run_dir)
        config.echo(run_dir, " ".join(sys.argv[1:] if argv is None else argv))
        logging.info("CLI: {} -> {}".format(args.command, run_dir))
        outputs = COMMANDS[args.command](config, run_dir, args)
    except (ValueError, RuntimeError, OSError) as e:
        logging.error("CLI: ERROR. {} failed: {}".format(args.command, e))
        print("wplus {}: error: {}".format(args.command, e), file=sys.stderr)
        return 1
    for path in outputs:
        print(path)
    return 0


if __name__ == '__main__':
    sys.exit(main())
