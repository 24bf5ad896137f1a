from errors import ConfigurationError
from utils import is_int_or_raise, is_float_or_raise, parse_bool
from constants import *

from typing import Dict, Optional
import logging


class ProfileParams:
    def __init__(self):
        self.profile = TOY_PROFILE
        self.face_size = FACE_SIZE
        self.wild_size = WILD_SIZE
        self.d_ctx = PROFILES[TOY_PROFILE]['d_ctx']
        self.mapping_hidden_ratio = 0.75
        self.num_timesteps = 1000
        self.beta_start = 1e-4
        self.beta_end = 0.02

    @property
    def n_w(self) -> int:
        return PROFILES[self.profile]['n_w']

    @property
    def d_w(self) -> int:
        return PROFILES[self.profile]['d_w']

    def __str__(self):
        return str(vars(self))


class DataParams:
    def __init__(self):
        self.data_root = "./data"
        self.n_stage1 = 2000
        self.n_stage2 = 2000
        self.face_scale_min = 1.
        self.face_scale_max = 1.
        self.color_jitter = False
        self.seed = 0

    def __str__(self):
        return str(vars(self))


class TrainParams:
    def __init__(self):
        self.batch_size = 16
        self.lr = 1e-4
        self.base_lr = 5e-4
        self.weight_decay = 0.01
        self.cond_drop_prob = 0.05
        self.stage0_steps = 6000
        self.stage1_steps = 2000
        self.stage2_steps = 6000
        self.checkpoint_every = 500
        self.gamma1 = 1.5
        self.gamma2 = 1.
        self.augmentation = "both"
        self.aug_sigma = None       # None: relative to per-token RMS
        self.detach_targets = False
        self.adapter_mode = "residual"
        self.one_stage = False
        self.seed = 0

    def __str__(self):
        return str(vars(self))


class SamplerParams:
    def __init__(self):
        self.steps = 50
        self.guidance_scale = 7.5
        self.eta = 0.
        self.lam = 1.
        self.alpha = None       # None: sweep
        self.kappa = None
        self.attribute = "smile"
        self.prompt = CAPTION_FORMAT.format("neutral", "blue", "center")
        self.identity = 0
        self.identity2 = 1
        self.seed = 0

    def __str__(self):
        return str(vars(self))


class EvalParams:
    def __init__(self):
        self.n_identities = 16
        self.n_prompts = 8
        self.edit_alpha = 3.
        self.seed = 0

    def __str__(self):
        return str(vars(self))


class CommandParams:
    def __init__(self):
        self.stage = None
        self.sweep = "alpha"
        self.rows = 4

    def __str__(self):
        return str(vars(self))


class PathParams:
    def __init__(self):
        self.out = None
        self.checkpoint = None
        self.base_checkpoint = None

    def __str__(self):
        return str(vars(self))


_INT, _FLOAT, _BOOL, _STR = "int", "float", "bool", "str"
_OPT_INT, _OPT_FLOAT, _OPT_STR = "opt_int", "opt_float", "opt_str"

# key -> (params group, attribute, kind)
_FIELDS = {
    PROFILE_FIELD: ("profile", "profile", _STR),
    FACE_SIZE_FIELD: ("profile", "face_size", _INT),
    WILD_SIZE_FIELD: ("profile", "wild_size", _INT),
    D_CTX_FIELD: ("profile", "d_ctx", _INT),
    MAPPING_HIDDEN_RATIO_FIELD: ("profile", "mapping_hidden_ratio", _FLOAT),
    T_FIELD: ("profile", "num_timesteps", _INT),
    BETA_START_FIELD: ("profile", "beta_start", _FLOAT),
    BETA_END_FIELD: ("profile", "beta_end", _FLOAT),

    DATA_ROOT_FIELD: ("data", "data_root", _STR),
    N_STAGE1_FIELD: ("data", "n_stage1", _INT),
    N_STAGE2_FIELD: ("data", "n_stage2", _INT),
    FACE_SCALE_MIN_FIELD: ("data", "face_scale_min", _FLOAT),
    FACE_SCALE_MAX_FIELD: ("data", "face_scale_max", _FLOAT),
    COLOR_JITTER_FIELD: ("data", "color_jitter", _BOOL),

    BATCH_SIZE_FIELD: ("train", "batch_size", _INT),
    LR_FIELD: ("train", "lr", _FLOAT),
    BASE_LR_FIELD: ("train", "base_lr", _FLOAT),
    WEIGHT_DECAY_FIELD: ("train", "weight_decay", _FLOAT),
    COND_DROP_PROB_FIELD: ("train", "cond_drop_prob", _FLOAT),
    STAGE0_STEPS_FIELD: ("train", "stage0_steps", _INT),
    STAGE1_STEPS_FIELD: ("train", "stage1_steps", _INT),
    STAGE2_STEPS_FIELD: ("train", "stage2_steps", _INT),
    CHECKPOINT_EVERY_FIELD: ("train", "checkpoint_every", _INT),
    GAMMA1_FIELD: ("train", "gamma1", _FLOAT),
    GAMMA2_FIELD: ("train", "gamma2", _FLOAT),
    AUGMENTATION_FIELD: ("train", "augmentation", _STR),
    AUG_SIGMA_FIELD: ("train", "aug_sigma", _OPT_FLOAT),
    DETACH_TARGETS_FIELD: ("train", "detach_targets", _BOOL),
    ADAPTER_MODE_FIELD: ("train", "adapter_mode", _STR),
    ONE_STAGE_FIELD: ("train", "one_stage", _BOOL),

    STEPS_FIELD: ("sampler", "steps", _INT),
    GUIDANCE_SCALE_FIELD: ("sampler", "guidance_scale", _FLOAT),
    ETA_FIELD: ("sampler", "eta", _FLOAT),
    LAMBDA_FIELD: ("sampler", "lam", _FLOAT),
    ALPHA_FIELD: ("sampler", "alpha", _OPT_FLOAT),
    KAPPA_FIELD: ("sampler", "kappa", _OPT_FLOAT),
    ATTRIBUTE_FIELD: ("sampler", "attribute", _STR),
    PROMPT_FIELD: ("sampler", "prompt", _STR),
    IDENTITY_FIELD: ("sampler", "identity", _INT),
    IDENTITY2_FIELD: ("sampler", "identity2", _INT),

    N_IDENTITIES_FIELD: ("eval", "n_identities", _INT),
    N_PROMPTS_FIELD: ("eval", "n_prompts", _INT),
    EDIT_ALPHA_FIELD: ("eval", "edit_alpha", _FLOAT),

    STAGE_FIELD: ("command", "stage", _OPT_INT),
    SWEEP_FIELD: ("command", "sweep", _STR),
    ROWS_FIELD: ("command", "rows", _INT),

    OUT_FIELD: ("paths", "out", _OPT_STR),
    CHECKPOINT_FIELD: ("paths", "checkpoint", _OPT_STR),
    BASE_CHECKPOINT_FIELD: ("paths", "base_checkpoint", _OPT_STR),
}


class ConfigFile:
    """Reads a flat `key = value` configuration file."""

    def __init__(self, path: str):
        """Reads all key-value pairs.

        Args:
            path: A string path to the config file.

        Raises:
            ConfigurationError if the file doesn't exist, is empty, has a malformed line or repeats a key.
        """
        self._values = dict()
        if not os.path.exists(path):
            error_str = "Config file '{}' doesn't exist.".format(path)
            logging.error("SETTINGS: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        with open(path, 'r') as f:
            for line_no, raw_line in enumerate(f, start=1):
                line = raw_line.split('#', 1)[0].strip()
                if not line:
                    continue
                if '=' not in line:
                    error_str = "Malformed line {} in '{}': {}".format(line_no, path, raw_line.strip())
                    logging.error("SETTINGS: ERROR. {}".format(error_str))
                    raise ConfigurationError(error_str)
                key, value = (part.strip() for part in line.split('=', 1))
                if key in self._values:
                    error_str = "Key '{}' repeated in '{}'.".format(key, path)
                    logging.error("SETTINGS: ERROR. {}".format(error_str))
                    raise ConfigurationError(error_str)
                self._values[key] = value
        if not self._values:
            error_str = "Empty config file '{}' defined.".format(path)
            logging.error("SETTINGS: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)

    def values(self) -> Dict[str, str]:
        """Provides access to the read key-value pairs."""
        return self._values


class RunConfig:
    """Parses a run configuration with all generation, training and evaluation parameters."""

    def __init__(self, path: Optional[str] = None, overrides: Optional[Dict[str, object]] = None):
        """Applies defaults, then the config file, then explicit overrides.

        Args:
            path: An optional path to a `key = value` file.
            overrides: Optional values (e.g. from command-line flags); None values are ignored.

        Raises:
            ConfigurationError if any key is unknown or any value is invalid.
        """
        self.profile = ProfileParams()
        self.data = DataParams()
        self.train = TrainParams()
        self.sampler = SamplerParams()
        self.eval = EvalParams()
        self.command = CommandParams()
        self.paths = PathParams()
        self._seed = 0
        self._explicit = dict()

        values = ConfigFile(path).values() if path is not None else dict()
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})

        self._invalid_fields = []
        self._unknown_fields = [key for key in values if key not in _FIELDS and key != SEED_FIELD]
        self._check_unknown_fields()

        # profile first, it decides the default context width
        if PROFILE_FIELD in values:
            self._set(PROFILE_FIELD, values[PROFILE_FIELD])
            if self.profile.profile not in PROFILES:
                error_str = "Unknown profile '{}'.".format(self.profile.profile)
                logging.error("SETTINGS: ERROR. {}".format(error_str))
                raise ConfigurationError(error_str)
            self.profile.d_ctx = PROFILES[self.profile.profile]['d_ctx']
        for key, value in values.items():
            if key == SEED_FIELD:
                self._parse_seed(value)
            elif key != PROFILE_FIELD:
                self._set(key, value)
        self._check_invalid_fields()
        self._check_ranges()

    @property
    def seed(self) -> int:
        return self._seed

    def _parse_seed(self, value):
        try:
            is_int_or_raise(value)
        except ValueError:
            self._invalid_fields.append(SEED_FIELD)
            return
        self._seed = int(value)
        self._explicit[SEED_FIELD] = self._seed
        for group in (self.data, self.train, self.sampler, self.eval):
            group.seed = self._seed

    def _set(self, key: str, value):
        group_name, attr, kind = _FIELDS[key]
        group = getattr(self, group_name)
        try:
            if kind == _INT:
                is_int_or_raise(value)
                parsed = int(value)
            elif kind == _FLOAT:
                is_float_or_raise(value)
                parsed = float(value)
            elif kind == _OPT_INT:
                parsed = None
                if str(value).lower() != "none":
                    is_int_or_raise(value)
                    parsed = int(value)
            elif kind == _OPT_FLOAT:
                parsed = None
                if str(value).lower() != "none":
                    is_float_or_raise(value)
                    parsed = float(value)
            elif kind == _BOOL:
                parsed = parse_bool(value)
            elif kind == _OPT_STR:
                parsed = None if str(value).lower() == "none" else str(value)
            else:
                parsed = str(value)
        except ValueError:
            self._invalid_fields.append(key)
            return
        setattr(group, attr, parsed)
        self._explicit[key] = parsed

    def _check_unknown_fields(self):
        if self._unknown_fields:
            error_str = "Unknown config keys: {}.".format(", ".join(sorted(self._unknown_fields)))
            logging.error("SETTINGS: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)

    def _check_invalid_fields(self):
        """Raises ConfigurationError if at least one value cannot be parsed."""
        if self._invalid_fields:
            error_str = "Invalid values for config keys: {}.".format(", ".join(self._invalid_fields))
            logging.error("SETTINGS: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)

    def _check_ranges(self):
        problems = []
        if not 0. <= self.train.cond_drop_prob < 1.:
            problems.append("{} must be in [0, 1)".format(COND_DROP_PROB_FIELD))
        if self.train.gamma1 < 0 or self.train.gamma2 < 0:
            problems.append("loss weights must be non-negative")
        if self.sampler.steps < 1:
            problems.append("{} must be >= 1".format(STEPS_FIELD))
        if not 0. <= self.sampler.eta <= 1.:
            problems.append("{} must be in [0, 1]".format(ETA_FIELD))
        if self.sampler.guidance_scale < 0:
            problems.append("{} must be >= 0".format(GUIDANCE_SCALE_FIELD))
        if self.sampler.attribute not in ATTRIBUTES:
            problems.append("{} must be one of {}".format(ATTRIBUTE_FIELD, ATTRIBUTES))
        if self.train.adapter_mode not in ("residual", "parallel"):
            problems.append("{} must be residual or parallel".format(ADAPTER_MODE_FIELD))
        if self.command.stage not in (None, 0, 1, 2):
            problems.append("{} must be 0, 1 or 2".format(STAGE_FIELD))
        if self.command.sweep not in SWEEPS:
            problems.append("{} must be one of {}".format(SWEEP_FIELD, SWEEPS))
        if self.data.face_scale_min > self.data.face_scale_max:
            problems.append("face scale range is empty")
        if problems:
            error_str = "Invalid config: {}.".format("; ".join(problems))
            logging.error("SETTINGS: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)

    def effective(self) -> Dict[str, object]:
        """All keys with their effective values, in documented order."""
        result = {SEED_FIELD: self._seed}
        for key, (group_name, attr, _) in _FIELDS.items():
            result[key] = getattr(getattr(self, group_name), attr)
        return result

    def echo(self, run_dir: str, command: str = "") -> str:
        """Writes the effective config into the run directory so the command can be replayed from it."""
        path = os.path.join(run_dir, ECHOED_CONFIG_FILE)
        with open(path, 'w') as f:
            f.write("# effective configuration\n")
            if command:
                f.write("# command: {}\n".format(command))
            for key, value in self.effective().items():
                f.write("{} = {}\n".format(key, value))
        return path
