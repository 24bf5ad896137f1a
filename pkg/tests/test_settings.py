import os

import pytest

from settings import RunConfig, ConfigFile
from errors import ConfigurationError
from constants import *

DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), SETTINGS_FOLDER,
                              DEFAULT_CONFIG_FILE)


def _write(tmp_path, text: str) -> str:
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


def test_defaults():
    config = RunConfig()
    assert config.seed == 0
    assert config.profile.profile == TOY_PROFILE and config.profile.d_ctx == 32
    assert (config.profile.n_w, config.profile.d_w) == (4, 16)
    assert config.train.gamma1 == 1.5 and config.train.gamma2 == 1.
    assert config.train.aug_sigma is None
    assert config.sampler.steps == 50 and config.sampler.guidance_scale == 7.5
    assert config.paths.checkpoint is None


def test_shipped_config_lists_the_defaults():
    assert RunConfig(DEFAULT_CONFIG).effective() == RunConfig().effective()
    keys = set(ConfigFile(DEFAULT_CONFIG).values())
    assert keys | {D_CTX_FIELD} == set(RunConfig().effective())


def test_file_values_and_comments(tmp_path):
    path = _write(tmp_path, "# comment\n\nseed = 7   # trailing\nlambda = 0.5\ncolor_jitter = yes\n"
                            "aug_sigma = 0.2\nprompt = a face with a smile expression on a red background at the left\n")
    config = RunConfig(path)
    assert config.seed == 7
    assert config.train.seed == 7 and config.data.seed == 7 and config.sampler.seed == 7
    assert config.sampler.lam == 0.5
    assert config.data.color_jitter is True
    assert config.train.aug_sigma == 0.2
    assert config.sampler.prompt.endswith("at the left")


def test_overrides_win_and_none_is_ignored(tmp_path):
    path = _write(tmp_path, "lambda = 0.5\nalpha = 1.0\n")
    config = RunConfig(path, {LAMBDA_FIELD: 0.25, ALPHA_FIELD: None})
    assert config.sampler.lam == 0.25
    assert config.sampler.alpha == 1.


def test_paper_profile_sets_context_width():
    config = RunConfig(overrides={PROFILE_FIELD: PAPER_PROFILE})
    assert config.profile.d_ctx == 768
    assert (config.profile.n_w, config.profile.d_w) == (18, 512)
    assert RunConfig(overrides={PROFILE_FIELD: PAPER_PROFILE, D_CTX_FIELD: 64}).profile.d_ctx == 64


@pytest.mark.parametrize("text", [
    "colour = red\n",
    "steps = many\n",
    "steps = 0\n",
    "cond_drop_prob = 1.0\n",
    "eta = 2\n",
    "gamma1 = -1\n",
    "attribute = hair\n",
    "adapter_mode = serial\n",
    "profile = huge\n",
    "color_jitter = maybe\n",
    "face_scale_min = 1.2\nface_scale_max = 1.0\n",
    "steps = 10\nsteps = 20\n",
    "just some words\n",
    "stage = 3\n",
    "stage = two\n",
    "sweep = beta\n",
    "rows = few\n",
    "alpha = strong\n",
])
def test_invalid_configs_are_rejected(tmp_path, text):
    with pytest.raises(ConfigurationError):
        RunConfig(_write(tmp_path, text))


@pytest.mark.parametrize("text", ["", "# only a comment\n\n"])
def test_empty_config_file_is_rejected(tmp_path, text):
    with pytest.raises(ConfigurationError, match="Empty"):
        ConfigFile(_write(tmp_path, text))


def test_command_choices_default_and_parse(tmp_path):
    config = RunConfig()
    assert config.command.stage is None and config.command.sweep == "alpha" and config.command.rows == 4
    assert config.sampler.alpha is None and config.sampler.kappa is None
    config = RunConfig(_write(tmp_path, "stage = 2\nsweep = lambda\nrows = 3\nkappa = 0.25\n"))
    assert (config.command.stage, config.command.sweep, config.command.rows) == (2, "lambda", 3)
    assert config.sampler.kappa == 0.25


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig(str(tmp_path / "nope.cfg"))


def test_echoed_config_replays(tmp_path):
    config = RunConfig(overrides={SEED_FIELD: 3, LAMBDA_FIELD: 0.75, CHECKPOINT_FIELD: "x.ckpt",
                                  AUG_SIGMA_FIELD: 0.3, DETACH_TARGETS_FIELD: True})
    path = config.echo(str(tmp_path), "sample --lambda 0.75")
    assert os.path.basename(path) == ECHOED_CONFIG_FILE
    with open(path) as f:
        assert "# command: sample --lambda 0.75" in f.read()
    assert RunConfig(path).effective() == config.effective()
