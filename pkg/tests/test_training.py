import logging
import os

import numpy as np
import pandas as pd
import pytest
import torch
import torch.nn.functional as F

from training import (LossWeights, AugmentationOp, NoiseDraw, NeutralPromptSampler, masked_mse, latent_masks,
                      drop_masks, drop_conditions, apply_augmentation, stage1_loss, stage2_losses, draw_noise,
                      IDENTITY_AUG, SHUFFLE_AUG, PERTURB_AUG, BOTH_AUG, DROP_STREAM, AUGMENT_STREAM)
from diffusion_core import NoiseSchedule, add_noise
from denoiser import denoise
from wplus_adapter import PARALLEL_MODE
from training_manager import TrainingData, BatchOrder, run_stage
from data_generators import make_face_dataset, make_wild_dataset
from settings import RunConfig
from errors import ConfigurationError, ValidationError
from utils import file_checksum, make_generator, derive_seed
from gradients import fd_relative_error
from constants import *


def _noise(batch, size, seed=0):
    g = torch.Generator().manual_seed(seed)
    return NoiseDraw(torch.randint(0, 1000, (batch,), generator=g),
                     torch.randn(batch, LATENT_CHANNELS, size // CODEC_FACTOR, size // CODEC_FACTOR, generator=g,
                                 dtype=torch.float64))


@pytest.fixture
def wild():
    return make_wild_dataset(2, seed=1)


def test_masked_mse_counts_only_masked_entries():
    a = torch.tensor([[1., 2.], [3., 4.]])
    b = torch.zeros(2, 2)
    mask = torch.tensor([[1., 0.], [0.5, 0.]])
    assert float(masked_mse(a, b, mask)) == pytest.approx((1. + 1.5 ** 2) / 2)
    assert float(masked_mse(a, b, torch.zeros(2, 2))) == 0.


def test_latent_masks_average_blocks():
    masks = np.zeros((1, 8, 8))
    masks[0, :4, :4] = 1.
    masks[0, 4:, 4:6] = 1.
    out = latent_masks(masks, torch.float64)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out[0, 0].numpy(), [[1., 0.], [0., 0.5]])


def test_shuffle_is_a_derangement():
    f_w = torch.arange(7, dtype=torch.float64)[:, None, None].expand(7, 4, 3).clone()
    for seed in range(20):
        out = apply_augmentation(f_w, AugmentationOp(SHUFFLE_AUG), seed)
        labels = out[:, 0, 0]
        assert sorted(labels.tolist()) == list(range(7))
        assert torch.all(labels != torch.arange(7, dtype=torch.float64))


def test_shuffle_of_single_sample_falls_back_to_perturbation(caplog):
    f_w = torch.ones(1, 4, 8, dtype=torch.float64)
    with caplog.at_level(logging.WARNING):
        out = apply_augmentation(f_w, AugmentationOp(BOTH_AUG), 0)
    assert "batch of 1" in caplog.text
    assert out.shape == f_w.shape
    assert not torch.equal(out, f_w)


def test_perturbation_scale():
    f_w = torch.full((64, 4, 32), 2., dtype=torch.float64)
    assert torch.equal(apply_augmentation(f_w, AugmentationOp(PERTURB_AUG, sigma=0.), 0), f_w)
    out = apply_augmentation(f_w, AugmentationOp(PERTURB_AUG), 0)
    assert float((out - f_w).std()) == pytest.approx(RELATIVE_PERTURB_SCALE * 2., rel=0.05)
    assert apply_augmentation(f_w, AugmentationOp(IDENTITY_AUG), 0) is f_w


def test_augmentation_is_seeded():
    f_w = torch.randn(4, 4, 8, dtype=torch.float64)
    a = apply_augmentation(f_w, AugmentationOp(BOTH_AUG), 3)
    b = apply_augmentation(f_w, AugmentationOp(BOTH_AUG), 3)
    assert torch.equal(a, b)


def test_invalid_loss_settings():
    with pytest.raises(ConfigurationError):
        LossWeights(gamma1=-1.)
    with pytest.raises(ConfigurationError):
        AugmentationOp("mixup")
    with pytest.raises(ConfigurationError):
        AugmentationOp(PERTURB_AUG, sigma=-0.1)
    with pytest.raises(ConfigurationError):
        drop_masks(4, 1., 0)


def test_drop_rate():
    drop_text, drop_id = drop_masks(20000, 0.3, 5)
    assert float(drop_text.double().mean()) == pytest.approx(0.3, abs=0.02)
    assert float(drop_id.double().mean()) == pytest.approx(0.3, abs=0.02)


def test_dropped_conditions_are_null_and_zero():
    text = torch.randn(50, TEXT_LENGTH, 32, dtype=torch.float64)
    tokens = torch.randn(50, NUM_ID_TOKENS, 32, dtype=torch.float64)
    null = torch.full((TEXT_LENGTH, 32), 7., dtype=torch.float64)
    new_text, new_tokens = drop_conditions(text, tokens, 0.5, 9, null)
    drop_text, drop_id = drop_masks(50, 0.5, 9)
    assert torch.all(new_text[drop_text] == 7.)
    assert torch.equal(new_text[~drop_text], text[~drop_text])
    assert torch.all(new_tokens[drop_id] == 0.)
    kept_text, kept_tokens = drop_conditions(text, tokens, 0., 9, null)
    assert kept_text is text and kept_tokens is tokens


def test_neutral_prompts_come_from_templates():
    prompts = NeutralPromptSampler(0).sample(20)
    assert set(prompts) <= set(NEUTRAL_TEMPLATES)
    assert prompts == NeutralPromptSampler(0).sample(20)


def test_draw_noise_is_seeded():
    a = draw_noise(3, (LATENT_CHANNELS, 8, 8), NoiseSchedule(), make_generator(1))
    b = draw_noise(3, (LATENT_CHANNELS, 8, 8), NoiseSchedule(), make_generator(1))
    assert torch.equal(a.t, b.t) and torch.equal(a.eps, b.eps)
    assert a.eps.dtype == torch.float32


def test_identity_augmentation_gives_zero_disentanglement(pipe64, wild):
    losses = stage2_losses(pipe64, wild.images, wild.masks, wild.wplus, wild.captions, LossWeights(),
                           AugmentationOp(IDENTITY_AUG), 0, _noise(2, WILD_SIZE))
    assert float(losses.L_disen) == 0.
    assert float(losses.L_reg) > 0.


def test_empty_mask_gives_zero_masked_terms(pipe64, wild):
    losses = stage2_losses(pipe64, wild.images, np.zeros_like(wild.masks), wild.wplus, wild.captions,
                           LossWeights(), AugmentationOp(BOTH_AUG), 0, _noise(2, WILD_SIZE))
    assert float(losses.L_disen) == 0. and float(losses.L_reg) == 0.
    assert float(losses.total) == float(losses.L_rec)


def test_total_is_the_weighted_sum(pipe64, wild):
    weights = LossWeights(gamma1=0.7, gamma2=2.)
    losses = stage2_losses(pipe64, wild.images, wild.masks, wild.wplus, wild.captions, weights,
                           AugmentationOp(BOTH_AUG), 4, _noise(2, WILD_SIZE), drop_prob=0.2)
    expected = losses.L_rec + 0.7 * losses.L_disen + 2. * losses.L_reg
    assert float(losses.total) == float(expected)


def test_zero_weights_leave_reconstruction(pipe64, wild):
    noise = _noise(2, WILD_SIZE, seed=3)
    args = (pipe64, wild.images, wild.masks, wild.wplus, wild.captions)
    plain = stage2_losses(*args, LossWeights(0., 0.), AugmentationOp(BOTH_AUG), 0, noise)
    assert float(plain.total) == float(plain.L_rec)


def test_drop_and_augmentation_draw_separate_streams(pipe64, wild):
    assert len({7, derive_seed(7, DROP_STREAM), derive_seed(7, AUGMENT_STREAM)}) == 3
    noise = _noise(2, WILD_SIZE, seed=5)
    aug = AugmentationOp(PERTURB_AUG)
    losses = stage2_losses(pipe64, wild.images, wild.masks, wild.wplus, wild.captions, LossWeights(), aug, 7, noise,
                           drop_prob=0.5)

    z_t = add_noise(pipe64.encode_images(wild.images), noise.t, noise.eps, pipe64.schedule)
    text = pipe64.encode_text(list(wild.captions))
    f_w = pipe64.identity_tokens(wild.wplus)
    eps_id = denoise(pipe64.denoiser, z_t, noise.t, text, f_w, 1.)
    text_rec, f_w_rec = drop_conditions(text, f_w, 0.5, derive_seed(7, DROP_STREAM), pipe64.null_text()[0])
    eps_rec = denoise(pipe64.denoiser, z_t, noise.t, text_rec, f_w_rec, 1.)
    f_w_aug = apply_augmentation(f_w, aug, derive_seed(7, AUGMENT_STREAM))
    eps_aug = denoise(pipe64.denoiser, z_t, noise.t, text, f_w_aug, 1.)
    torch.testing.assert_close(losses.L_rec, F.mse_loss(eps_rec, noise.eps))
    torch.testing.assert_close(losses.L_disen, masked_mse(eps_id, eps_aug, latent_masks(wild.masks, z_t.dtype)))


def test_stage2_batch_validation(pipe64, wild):
    noise = _noise(2, WILD_SIZE)
    with pytest.raises(ValidationError):
        stage2_losses(pipe64, wild.images, None, wild.wplus, wild.captions, LossWeights(), AugmentationOp(),
                      0, noise)
    with pytest.raises(ValidationError):
        stage2_losses(pipe64, wild.images, wild.masks[:1], wild.wplus, wild.captions, LossWeights(),
                      AugmentationOp(), 0, noise)
    with pytest.raises(ValidationError):
        stage1_loss(pipe64, wild.images, wild.wplus, ["a face"] * 2, noise)


@pytest.mark.parametrize("term", ["L_rec", "L_disen", "L_reg", "total"])
def test_stage2_gradients_match_finite_differences(pipe64, wild, term):
    noise = _noise(2, WILD_SIZE, seed=8)
    layers = pipe64.adapter.layers
    params = [layers[0].to_q.weight, layers[1].to_k.weight, layers[2].to_v.weight, layers[3].to_q.weight]

    def loss():
        return stage2_losses(pipe64, wild.images, wild.masks, wild.wplus, wild.captions, LossWeights(),
                             AugmentationOp(BOTH_AUG), 11, noise)._asdict()[term]

    assert fd_relative_error(loss, params) < 1e-4


def test_batch_order_covers_dataset():
    order = BatchOrder(5, 2, 0)
    seen = np.concatenate([order.next() for _ in range(5)])
    assert sorted(seen[:5].tolist()) == list(range(5))
    assert sorted(seen[5:10].tolist()) == list(range(5))


def _tiny_config(**extra) -> RunConfig:
    overrides = {BATCH_SIZE_FIELD: 2, CHECKPOINT_EVERY_FIELD: 1, STAGE0_STEPS_FIELD: 2, STAGE1_STEPS_FIELD: 2,
                 STAGE2_STEPS_FIELD: 2}
    overrides.update(extra)
    return RunConfig(overrides=overrides)


@pytest.fixture(scope="module")
def tiny_data():
    return TrainingData(make_face_dataset(4, seed=0), make_wild_dataset(4, seed=0))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_data):
    config = _tiny_config()
    dirs = [str(tmp_path_factory.mktemp("stage{}".format(s))) for s in range(3)]
    r0 = run_stage(0, config, tiny_data, {}, dirs[0])
    r1 = run_stage(1, config, tiny_data, {"base": r0.last_checkpoint}, dirs[1])
    r2 = run_stage(2, config, tiny_data, {"base": r0.last_checkpoint, "stage1": r1.last_checkpoint}, dirs[2])
    return r0, r1, r2


def _check_written(report):
    assert [os.path.basename(p) for p in report.checkpoints] == \
        [CKPT_NAME_FORMAT.format(report.stage, step) for step in (1, 2)]
    assert all(os.path.exists(p) for p in report.checkpoints)
    table = pd.read_csv(report.report_path, sep='\t')
    assert list(table.columns) == REPORT_COLUMNS
    assert list(table["step"]) == [1, 2]
    assert np.all(np.isfinite(table["total"]))
    assert os.path.exists(os.path.join(os.path.dirname(report.report_path), LOSS_CURVE_FILE))


def test_stage_runs_write_reports_and_checkpoints(trained):
    for report in trained:
        _check_written(report)


def test_later_stages_keep_frozen_parameters(trained):
    _, r1, r2 = trained
    assert r1.base_checksum_before == r1.base_checksum_after
    assert r2.base_checksum_before == r2.base_checksum_after
    assert r2.mapping_checksum_before == r2.mapping_checksum_after
    assert r1.mapping_checksum_before != r1.mapping_checksum_after


def test_stage2_reports_all_three_terms(trained):
    table = pd.read_csv(trained[2].report_path, sep='\t')
    assert np.all(np.isfinite(table[["L_rec", "L_disen", "L_reg"]].to_numpy()))
    stage1 = pd.read_csv(trained[1].report_path, sep='\t')
    assert stage1["L_disen"].isna().all()


def test_stage_run_is_reproducible(trained, tiny_data, tmp_path):
    r0, r1, _ = trained
    again = run_stage(1, _tiny_config(), tiny_data, {"base": r0.last_checkpoint}, str(tmp_path))
    assert file_checksum(again.last_checkpoint) == file_checksum(r1.last_checkpoint)
    assert again.checksum == r1.checksum


def test_later_stage_without_base_checkpoint(tiny_data, tmp_path):
    with pytest.raises(ConfigurationError):
        run_stage(1, _tiny_config(), tiny_data, {}, str(tmp_path))
    with pytest.raises(ConfigurationError):
        run_stage(2, _tiny_config(), tiny_data, {"base": str(tmp_path / "missing.ckpt")}, str(tmp_path))


def test_stage2_without_stage1_checkpoint(trained, tiny_data, tmp_path):
    with pytest.raises(ConfigurationError, match="stage1"):
        run_stage(2, _tiny_config(), tiny_data, {"base": trained[0].last_checkpoint}, str(tmp_path))


def test_one_stage_run_trains_the_mapping(trained, tiny_data, tmp_path):
    report = run_stage(2, _tiny_config(**{ONE_STAGE_FIELD: True}), tiny_data, {"base": trained[0].last_checkpoint},
                       str(tmp_path))
    _check_written(report)
    assert report.mapping_checksum_before != report.mapping_checksum_after
    assert report.base_checksum_before == report.base_checksum_after


def test_detached_targets_run(trained, tiny_data, tmp_path):
    r0, r1, _ = trained
    report = run_stage(2, _tiny_config(**{DETACH_TARGETS_FIELD: True}), tiny_data,
                       {"base": r0.last_checkpoint, "stage1": r1.last_checkpoint}, str(tmp_path))
    _check_written(report)
    assert report.mapping_checksum_before == report.mapping_checksum_after
    assert report.base_checksum_before == report.base_checksum_after


def test_parallel_adapter_runs(trained, tiny_data, tmp_path):
    config = _tiny_config(**{ADAPTER_MODE_FIELD: PARALLEL_MODE})
    r1 = run_stage(1, config, tiny_data, {"base": trained[0].last_checkpoint}, str(tmp_path / "stage1"))
    r2 = run_stage(2, config, tiny_data, {"base": trained[0].last_checkpoint, "stage1": r1.last_checkpoint},
                   str(tmp_path / "stage2"))
    for report in (r1, r2):
        _check_written(report)
    assert r2.mapping_checksum_before == r2.mapping_checksum_after


def test_stage_run_creates_missing_run_dir(tiny_data, tmp_path):
    run_dir = tmp_path / "nested" / "run"
    report = run_stage(0, _tiny_config(), tiny_data, {}, str(run_dir))
    assert os.path.dirname(report.report_path) == str(run_dir)
    _check_written(report)


def test_unknown_stage(tiny_data, tmp_path):
    with pytest.raises(ConfigurationError):
        run_stage(3, _tiny_config(), tiny_data, {}, str(tmp_path))
