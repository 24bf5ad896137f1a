"""Full-length training runs and the qualitative claims they should reproduce. Run with WPLUS_RUN_SLOW=1."""
from dataclasses import replace

import numpy as np
import pytest

from training_manager import TrainingData, run_stage
from pipeline import WPlusPipeline
from data_generators import make_face_dataset, make_wild_dataset
from sampler import SamplerConfig, sample_identity, sample_with_edit, interpolate_wplus
from evaluation import (run_eval, make_eval_identities, make_eval_prompts, extract_any, identity_distance,
                        background_change, face_mask, eval_identity, sign_test)
from toyworld import edit_direction, make_caption
from settings import RunConfig
from constants import *

pytestmark = pytest.mark.slow

PROMPT = make_caption("neutral", "blue", "center")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    config = RunConfig()
    data = TrainingData(make_face_dataset(config.data.n_stage1, config.data.seed),
                        make_wild_dataset(config.data.n_stage2, config.data.seed))
    runs = {}
    runs[0] = run_stage(0, config, data, {}, str(tmp_path_factory.mktemp("stage0")))
    base = runs[0].last_checkpoint
    runs[1] = run_stage(1, config, data, {"base": base}, str(tmp_path_factory.mktemp("stage1")))
    checkpoints = {"base": base, "stage1": runs[1].last_checkpoint}
    runs[2] = run_stage(2, config, data, checkpoints, str(tmp_path_factory.mktemp("stage2")))
    ablation = RunConfig(overrides={GAMMA1_FIELD: 0.})
    runs["ablation"] = run_stage(2, ablation, data, checkpoints, str(tmp_path_factory.mktemp("ablation")))
    return config, runs


def _pipeline(config, runs, key=2) -> WPlusPipeline:
    pipe = WPlusPipeline.from_base_checkpoint(runs[0].last_checkpoint, config.profile)
    pipe.load_adapter(runs[key].last_checkpoint)
    return pipe


def _sampler(config, seed=0) -> SamplerConfig:
    return replace(SamplerConfig.from_params(config.sampler, config.profile.wild_size), seed=seed)


def test_stage1_halves_the_smoothed_loss(trained):
    _, runs = trained
    assert runs[1].final_smoothed <= 0.5 * runs[1].initial_smoothed


def test_stage2_keeps_mapping_and_base(trained):
    _, runs = trained
    for key in (2, "ablation"):
        assert runs[key].mapping_checksum_before == runs[key].mapping_checksum_after
        assert runs[key].base_checksum_before == runs[key].base_checksum_after


def test_trained_adapter_beats_a_random_one_on_identity(trained):
    config, runs = trained
    pipe = _pipeline(config, runs)
    identities = make_eval_identities(config.eval.n_identities, config.eval.seed)
    prompts = make_eval_prompts(config.eval.n_prompts, config.eval.seed)
    sampler = _sampler(config)
    report = run_eval(pipe, identities, prompts, config.eval, sampler)
    pipe.detach()
    pipe.attach(pipe.new_adapter(seed=config.eval.seed))
    baseline = run_eval(pipe, identities, prompts, config.eval, sampler)
    assert report.id_distance < TAU_ID
    _, _, p_value = sign_test(report.rows["id_distance"].fillna(np.inf), baseline.rows["id_distance"].fillna(np.inf))
    assert p_value < 0.05


def test_smile_edit_is_monotone_and_keeps_identity(trained):
    config, runs = trained
    pipe = _pipeline(config, runs)
    direction = edit_direction("smile")
    monotone, distances = 0, []
    for seed in range(32):
        w = eval_identity(seed)
        images = [sample_with_edit(pipe, PROMPT, w, direction, alpha, _sampler(config, seed)).image
                  for alpha in (-3., 0., 3.)]
        smiles = [extract_any(image).smile for image in images]
        monotone += int(smiles[0] < smiles[1] < smiles[2])
        distances.append(identity_distance(images[1], images[2]))
    assert monotone >= 0.7 * 32
    assert np.nanmean(distances) < TAU_ID


def test_disentanglement_term_lowers_background_change(trained):
    config, runs = trained
    direction = edit_direction("smile")
    means = {}
    for key in (2, "ablation"):
        pipe = _pipeline(config, runs, key)
        changes = []
        for seed in range(32):
            w = eval_identity(seed)
            plain = sample_identity(pipe, PROMPT, w, _sampler(config, seed)).image
            edited = sample_with_edit(pipe, PROMPT, w, direction, config.eval.edit_alpha, _sampler(config, seed)).image
            changes.append(background_change(plain, edited, face_mask(plain)))
        means[key] = np.mean(changes)
    assert means[2] < means["ablation"]


def test_interpolation_keeps_the_background(trained):
    config, runs = trained
    pipe = _pipeline(config, runs)
    other_prompt = make_caption("neutral", "red", "center")
    interp, swapped = [], []
    for seed in range(16):
        w1, w2 = eval_identity(seed), eval_identity(seed + 16)
        start = sample_identity(pipe, PROMPT, interpolate_wplus(w1, w2, 0.), _sampler(config, seed)).image
        end = sample_identity(pipe, PROMPT, interpolate_wplus(w1, w2, 1.), _sampler(config, seed)).image
        recolored = sample_identity(pipe, other_prompt, w1, _sampler(config, seed)).image
        mask = face_mask(start)
        interp.append(background_change(start, end, mask))
        swapped.append(background_change(start, recolored, mask))
    assert np.mean(interp) < np.mean(swapped)
