import os

# Common constants
# =================================================================================
CONFIG_EXTENSION = ".cfg"
PNG_EXTENSION = ".png"
TSV_EXTENSION = ".tsv"
CKPT_EXTENSION = ".ckpt"

OUT_ROOT_ENV = "WPLUS_OUT_ROOT"
DEFAULT_OUT_ROOT = os.path.join(".", "runs")
RUN_SLOW_ENV = "WPLUS_RUN_SLOW"

# Logs constants
# =================================================================================
LOGS_FOLDER = "logs"
WPLUS_LOG_FILE = "wplus.log"
LOG_FORMAT = '%(asctime)s %(message)s'
LOG_DATE_FORMAT = '%m/%d/%Y %H:%M:%S'

# Settings constants
# =================================================================================
SETTINGS_FOLDER = "settings"
SETTINGS_FOLDER_REL_PATH = os.path.join(".", SETTINGS_FOLDER)
DEFAULT_CONFIG_FILE = "default.cfg"
DEFAULT_CONFIG_REL_PATH = os.path.join(SETTINGS_FOLDER_REL_PATH, DEFAULT_CONFIG_FILE)
ECHOED_CONFIG_FILE = "config.cfg"

# Config fields
PROFILE_FIELD = "profile"
FACE_SIZE_FIELD = "face_size"
WILD_SIZE_FIELD = "wild_size"
D_CTX_FIELD = "d_ctx"
MAPPING_HIDDEN_RATIO_FIELD = "mapping_hidden_ratio"
T_FIELD = "num_timesteps"
BETA_START_FIELD = "beta_start"
BETA_END_FIELD = "beta_end"

N_STAGE1_FIELD = "n_stage1"
N_STAGE2_FIELD = "n_stage2"
DATA_ROOT_FIELD = "data_root"
FACE_SCALE_MIN_FIELD = "face_scale_min"
FACE_SCALE_MAX_FIELD = "face_scale_max"
COLOR_JITTER_FIELD = "color_jitter"

BATCH_SIZE_FIELD = "batch_size"
LR_FIELD = "lr"
BASE_LR_FIELD = "base_lr"
WEIGHT_DECAY_FIELD = "weight_decay"
COND_DROP_PROB_FIELD = "cond_drop_prob"
STAGE0_STEPS_FIELD = "stage0_steps"
STAGE1_STEPS_FIELD = "stage1_steps"
STAGE2_STEPS_FIELD = "stage2_steps"
CHECKPOINT_EVERY_FIELD = "checkpoint_every"
GAMMA1_FIELD = "gamma1"
GAMMA2_FIELD = "gamma2"
AUGMENTATION_FIELD = "augmentation"
AUG_SIGMA_FIELD = "aug_sigma"
DETACH_TARGETS_FIELD = "detach_targets"
ADAPTER_MODE_FIELD = "adapter_mode"
ONE_STAGE_FIELD = "one_stage"

STEPS_FIELD = "steps"
GUIDANCE_SCALE_FIELD = "guidance_scale"
ETA_FIELD = "eta"
LAMBDA_FIELD = "lambda"
ALPHA_FIELD = "alpha"
KAPPA_FIELD = "kappa"
ATTRIBUTE_FIELD = "attribute"
PROMPT_FIELD = "prompt"
SEED_FIELD = "seed"
IDENTITY_FIELD = "identity"
IDENTITY2_FIELD = "identity2"

N_IDENTITIES_FIELD = "n_identities"
N_PROMPTS_FIELD = "n_prompts"
EDIT_ALPHA_FIELD = "edit_alpha"

STAGE_FIELD = "stage"
SWEEP_FIELD = "sweep"
ROWS_FIELD = "rows"

OUT_FIELD = "out"
CHECKPOINT_FIELD = "checkpoint"
BASE_CHECKPOINT_FIELD = "base_checkpoint"

# Profile constants
# =================================================================================
TOY_PROFILE = "toy"
PAPER_PROFILE = "paper"
PROFILES = {
    TOY_PROFILE: dict(n_w=4, d_w=16, d_ctx=32),
    PAPER_PROFILE: dict(n_w=18, d_w=512, d_ctx=768),
}
NUM_ID_TOKENS = 4

# Toy world constants
# =================================================================================
FACTOR_MATRIX_SEED = 20240101
WPLUS_SCALE = 1.5
FACE_SIZE = 32
WILD_SIZE = 64
BACKGROUND_GRAY = 0.5
FACE_SATURATION = 0.6
FACE_VALUE = 0.9

EYE_SPAN_PX = 10.           # eye separation at eye_spacing = 1
EYE_SIGMA_PX = 0.6
EYE_ROW_OFFSET_PX = 3.
MOUTH_HALF_WIDTH_PX = 4.5
MOUTH_ROW_OFFSET_PX = 5.5
MOUTH_MAX_CURVATURE = 0.1   # px^-1 at smile = 1
FEATURE_SIGMA_PX = 0.6
FEATURE_TRUNCATION = 4.     # in sigmas
FEATURE_DARKENING = 0.7
FACE_RADIUS_PX = 15.        # horizontal semi-axis at age_radius = 1
FACE_ASPECT = 1.1

MASK_EROSION = 2
MASK_BLUR = 3
PLACEMENT_JITTER_PX = 4
MAX_PLACEMENT_ATTEMPTS = 100
SMILE_CAPTION_THRESHOLD = 0.25

BACKGROUND_COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.9, 0.85, 0.1),
    "cyan": (0.1, 0.8, 0.85),
    "magenta": (0.8, 0.1, 0.75),
    "orange": (0.95, 0.55, 0.05),
    "purple": (0.45, 0.1, 0.6),
}
POSITIONS = ("left", "center", "right")
EXPRESSIONS = ("smile", "neutral")
ATTRIBUTES = ("smile", "age")

NEUTRAL_TEMPLATES = (
    "a face",
    "a photo of a face",
    "a close-up of a face",
    "a depiction of a face",
    "a good photo of a face",
    "a photography of a face",
    "a cropped photo of a face",
    "a good photography of a face",
    "a close-up photography of a face",
)
CAPTION_FORMAT = "a face with a {} expression on a {} background at the {}"

# Diffusion constants
# =================================================================================
CODEC_FACTOR = 4
LATENT_CHANNELS = 48
CODEC_SEED = 4242
TEXT_LENGTH = 8
PAD_ID = 0
PAD_TOKEN = "<pad>"
STOP_WORDS = ("a", "of", "with", "on", "at", "the")
UNET_CHANNELS = (32, 64)
TIME_EMBED_DIM = 64
NORM_GROUPS = 8

# Dataset constants
# =================================================================================
STAGE1_FOLDER = "stage1"
STAGE2_FOLDER = "stage2"
IMAGES_FOLDER = "images"
MASKS_FOLDER = "masks"
WPLUS_FILE = "wplus.bin"
INDEX_FILE = "index.tsv"
CAPTIONS_FILE = "captions.tsv"
WPLUS_MAGIC = b"WPLS"
WPLUS_VERSION = 1

# Checkpoint constants
# =================================================================================
CKPT_MAGIC = "WPCKPT"
CKPT_VERSION = 1
CKPT_END_MARKER = "END"
BASE_KIND = "base"
ADAPTER_KIND = "adapter"
CKPT_NAME_FORMAT = "stage{}-step{}.ckpt"

# Training constants
# =================================================================================
REPORT_FILE = "report.tsv"
LOSS_CURVE_FILE = "loss_curve.png"
REPORT_COLUMNS = ["step", "L_rec", "L_disen", "L_reg", "total", "lr", "wallclock_ms"]
RELATIVE_PERTURB_SCALE = 0.1
LOSS_SMOOTHING_WINDOW = 50

# Evaluation constants
# =================================================================================
TAU_ID = 0.1                # frozen from the same/distinct identity sweep in tests
EXTRACTION_TOLERANCE = 0.02
GRAY_TOLERANCE = 0.08
COLOR_MATCH_DISTANCE = 0.25
EVAL_FILE_FORMAT = "eval-{}-{}.tsv"
IDENTITY_SEED_TAG = 7

# Command line constants
# =================================================================================
ALPHA_SWEEP = (-3., -1., 0., 1., 3.)
KAPPA_SWEEP = (0., 0.25, 0.5, 0.75, 1.)
LAMBDA_SWEEP = (0., 0.25, 0.5, 0.75, 1.)
SWEEPS = ("prompt", "alpha", "kappa", "lambda")
SAMPLE_NAME_FORMAT = "sample-id{}-seed{}.png"
EDIT_NAME_FORMAT = "edit-{}-id{}-alpha{:+.2f}.png"
INTERP_NAME_FORMAT = "interp-id{}-id{}-kappa{:.2f}.png"
GRID_NAME_FORMAT = "grid-{}.png"
ATTN_NAME_FORMAT = "attn-id{}-layer{}.png"
