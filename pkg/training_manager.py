from pipeline import WPlusPipeline, parameters_of
from training import (LossWeights, AugmentationOp, NeutralPromptSampler, draw_noise, stage0_loss, stage1_loss,
                      stage2_losses)
from data_generators import FaceDataset, WildDataset
from plotting import plot_loss_curve, smoothed
from settings import RunConfig
from errors import ConfigurationError
from utils import make_generator, derive_seed, parameters_checksum
from constants import *

from dataclasses import dataclass, field
from typing import Dict, List, Optional
import logging
import time

import numpy as np
import pandas as pd
import torch

STAGES = (0, 1, 2)


@dataclass
class TrainingData:
    faces: Optional[FaceDataset] = None
    wild: Optional[WildDataset] = None


@dataclass
class TrainingReport:
    stage: int
    history: pd.DataFrame
    report_path: str
    checkpoints: List[str] = field(default_factory=list)
    checksum: str = ""
    base_checksum_before: str = ""
    base_checksum_after: str = ""
    mapping_checksum_before: str = ""
    mapping_checksum_after: str = ""

    @property
    def last_checkpoint(self) -> Optional[str]:
        return self.checkpoints[-1] if self.checkpoints else None

    def smoothed_loss(self, column: str = "total") -> pd.Series:
        return smoothed(self.history[column])

    @property
    def initial_smoothed(self) -> float:
        return float(self.smoothed_loss().iloc[min(LOSS_SMOOTHING_WINDOW, len(self.history)) - 1])

    @property
    def final_smoothed(self) -> float:
        return float(self.smoothed_loss().iloc[-1])


class BatchOrder:
    """Fixed data order: consecutive seeded permutations of the dataset."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self._n = n
        self._batch_size = batch_size
        self._seed = seed
        self._epoch = 0
        self._queue = []    # type: List[int]

    def next(self) -> np.ndarray:
        while len(self._queue) < self._batch_size:
            rng = np.random.default_rng(derive_seed(self._seed, self._epoch))
            self._queue.extend(rng.permutation(self._n).tolist())
            self._epoch += 1
        batch, self._queue = self._queue[:self._batch_size], self._queue[self._batch_size:]
        return np.array(batch)


class StageRunner:
    """Runs one training stage and writes its report, checkpoints and loss curve into a run directory."""

    def __init__(self, config: RunConfig, run_dir: str, dtype=torch.float32):
        self._config = config
        self._params = config.train
        self._run_dir = run_dir
        self._dtype = dtype
        self._pipe = None   # type: Optional[WPlusPipeline]

    def __enter__(self):
        os.makedirs(self._run_dir, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc_value, exc_tb):
        if exc_value is not None:
            logging.error("TRAINING: ERROR. Exception {} of type {}.".format(exc_value, exc_type))

    @property
    def pipeline(self) -> Optional[WPlusPipeline]:
        return self._pipe

    def _require(self, checkpoints: Dict[str, str], key: str, fallback: Optional[str], what: str) -> str:
        path = checkpoints.get(key) or fallback
        if not path or not os.path.exists(path):
            error_str = "{} needs {} checkpoint, none found{}.".format(
                what, key, "" if not path else " at '{}'".format(path))
            logging.error("TRAINING: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        return path

    def _prepare(self, stage: int, data: TrainingData, checkpoints: Dict[str, str]) -> List[torch.nn.Parameter]:
        profile = self._config.profile
        paths = self._config.paths
        if stage == 0:
            if data.faces is None and data.wild is None:
                error_str = "Stage 0 needs a face or wild dataset."
                logging.error("TRAINING: ERROR. {}".format(error_str))
                raise ConfigurationError(error_str)
            self._pipe = WPlusPipeline.build(profile, self._params.seed, self._dtype)
            return self._pipe.base_parameters()

        base = self._require(checkpoints, "base", paths.base_checkpoint, "Stage {}".format(stage))
        self._pipe = WPlusPipeline.from_base_checkpoint(base, profile, self._dtype)
        self._pipe.freeze_base()
        if stage == 1:
            if data.faces is None:
                error_str = "Stage 1 needs the aligned face dataset."
                logging.error("TRAINING: ERROR. {}".format(error_str))
                raise ConfigurationError(error_str)
            self._pipe.attach(self._pipe.new_adapter(self._params.seed, self._params.adapter_mode))
            return self._pipe.adapter.mapping_parameters() + self._pipe.adapter.attention_parameters()

        if data.wild is None:
            error_str = "Stage 2 needs the wild dataset."
            logging.error("TRAINING: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        if self._params.one_stage:
            self._pipe.attach(self._pipe.new_adapter(self._params.seed, self._params.adapter_mode))
            return self._pipe.adapter.mapping_parameters() + self._pipe.adapter.attention_parameters()
        stage1 = self._require(checkpoints, "stage1", paths.checkpoint, "Stage 2")
        adapter = self._pipe.load_adapter(stage1)
        adapter.set_mode(self._params.adapter_mode)
        for p in adapter.mapping_parameters():
            p.requires_grad_(False)
        return adapter.attention_parameters()

    def run(self, stage: int, data: TrainingData, checkpoints: Optional[Dict[str, str]] = None) -> TrainingReport:
        if stage not in STAGES:
            error_str = "Unknown stage {}, expected one of {}.".format(stage, STAGES)
            logging.error("TRAINING: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        checkpoints = checkpoints or dict()
        if getattr(self._params, "stage{}_steps".format(stage)) < 1 or self._params.checkpoint_every < 1:
            error_str = "Stage {} needs at least one step and checkpoint_every >= 1.".format(stage)
            logging.error("TRAINING: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        trainable = self._prepare(stage, data, checkpoints)
        for p in trainable:
            p.requires_grad_(True)
        pipe = self._pipe
        params = self._params
        steps = getattr(params, "stage{}_steps".format(stage))
        optimizer = torch.optim.AdamW(trainable, lr=params.base_lr if stage == 0 else params.lr,
                                      weight_decay=params.weight_decay)
        weights = LossWeights(params.gamma1, params.gamma2)
        aug = AugmentationOp(params.augmentation, params.aug_sigma)
        prompts = NeutralPromptSampler(derive_seed(params.seed, stage, 1))
        face_order = BatchOrder(len(data.faces), params.batch_size, derive_seed(params.seed, stage, 2)) \
            if data.faces is not None else None
        wild_order = BatchOrder(len(data.wild), params.batch_size, derive_seed(params.seed, stage, 3)) \
            if data.wild is not None else None

        base_before = parameters_checksum(parameters_of(pipe.base_modules())) if stage else ""
        mapping_before = parameters_checksum(pipe.adapter.mapping_parameters()) if pipe.adapter else ""
        report_path = os.path.join(self._run_dir, REPORT_FILE)
        report = TrainingReport(stage, pd.DataFrame(columns=REPORT_COLUMNS), report_path,
                                base_checksum_before=base_before, mapping_checksum_before=mapping_before)
        rows = []
        logging.info("TRAINING: Stage {} for {} steps, {} trainable tensors.".format(stage, steps, len(trainable)))

        for step in range(1, steps + 1):
            started = time.perf_counter()
            generator = make_generator(derive_seed(params.seed, stage, step))
            optimizer.zero_grad(set_to_none=True)
            l_disen = l_reg = float('nan')

            if stage == 0:
                use_wild = wild_order is not None and (face_order is None or step % 2 == 1)
                if use_wild:
                    idx = wild_order.next()
                    images, captions = data.wild.images[idx], [data.wild.captions[i] for i in idx]
                else:
                    idx = face_order.next()
                    images, captions = data.faces.images[idx], prompts.sample(len(idx))
                noise = draw_noise(len(idx), pipe.latent_shape(images.shape[1]), pipe.schedule, generator,
                                   self._dtype)
                loss = stage0_loss(pipe, images, captions, noise, params.cond_drop_prob, derive_seed(params.seed, step))
                l_rec = loss
            elif stage == 1:
                idx = face_order.next()
                images = data.faces.images[idx]
                noise = draw_noise(len(idx), pipe.latent_shape(images.shape[1]), pipe.schedule, generator,
                                   self._dtype)
                loss = stage1_loss(pipe, images, data.faces.wplus[idx], prompts.sample(len(idx)), noise,
                                   params.cond_drop_prob, derive_seed(params.seed, step))
                l_rec = loss
            else:
                idx = wild_order.next()
                images = data.wild.images[idx]
                noise = draw_noise(len(idx), pipe.latent_shape(images.shape[1]), pipe.schedule, generator,
                                   self._dtype)
                losses = stage2_losses(pipe, images, data.wild.masks[idx], data.wild.wplus[idx],
                                       [data.wild.captions[i] for i in idx], weights, aug,
                                       derive_seed(params.seed, stage, step, 4), noise, params.cond_drop_prob,
                                       params.detach_targets)
                loss, l_rec = losses.total, losses.L_rec
                l_disen, l_reg = float(losses.L_disen), float(losses.L_reg)

            loss.backward()
            optimizer.step()
            rows.append(dict(step=step, L_rec=float(l_rec), L_disen=l_disen, L_reg=l_reg, total=float(loss),
                             lr=optimizer.param_groups[0]['lr'],
                             wallclock_ms=round((time.perf_counter() - started) * 1000., 3)))

            if step % params.checkpoint_every == 0 or step == steps:
                self._flush(report, rows)
                rows = []
                report.checkpoints.append(self._save(stage, step))
                logging.info("TRAINING: Stage {} step {}/{} loss {:.5f}.".format(stage, step, steps, float(loss)))

        for p in trainable:
            p.requires_grad_(False)
        report.checksum = parameters_checksum(trainable)
        if stage:
            report.base_checksum_after = parameters_checksum(parameters_of(pipe.base_modules()))
            report.mapping_checksum_after = parameters_checksum(pipe.adapter.mapping_parameters())
            if report.base_checksum_after != report.base_checksum_before:
                logging.warning("TRAINING: WARNING. Base model parameters changed during stage {}.".format(stage))
        if len(report.history):
            plot_loss_curve(report.history, os.path.join(self._run_dir, LOSS_CURVE_FILE))
            logging.info("TRAINING: Stage {} smoothed loss {:.5f} -> {:.5f}.".format(
                stage, report.initial_smoothed, report.final_smoothed))
        return report

    def _flush(self, report: TrainingReport, rows: List[dict]):
        frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
        frame.to_csv(report.report_path, sep='\t', index=False, mode='a',
                     header=not os.path.exists(report.report_path))
        report.history = frame if report.history.empty else pd.concat([report.history, frame], ignore_index=True)

    def _save(self, stage: int, step: int) -> str:
        path = os.path.join(self._run_dir, CKPT_NAME_FORMAT.format(stage, step))
        if stage == 0:
            return self._pipe.save_base(path)
        return self._pipe.save_adapter(path)


def run_stage(stage: int, config: RunConfig, dataset: TrainingData, checkpoints: Optional[Dict[str, str]],
              run_dir: str, dtype=torch.float32) -> TrainingReport:
    """Trains one stage; stages 1 and 2 keep the base model frozen, stage 2 also keeps the mapping network."""
    with StageRunner(config, run_dir, dtype) as runner:
        return runner.run(stage, dataset, checkpoints)
