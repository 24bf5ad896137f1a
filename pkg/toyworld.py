"""Analytic toy face world.

A w+ embedding is a (N_w, D_w) matrix. Four semantic factors are read from it
through a fixed seeded row-orthonormal matrix A and squashed into their ranges:

    hue          in (0, 1)      identity
    eye_spacing  in (0.2, 0.8)  identity
    smile        in (-1, 1)     attribute
    age_radius   in (0.3, 0.9)  attribute

Faces are rendered from the factors alone, and `extract_factors` inverts the
rendering analytically, which makes it the oracle the evaluation metrics use.
"""
from constants import *
from errors import ConfigurationError, ShapeError, GenerationError

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Tuple
import colorsys
import logging
import re

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.special import expit, logit

HUE, EYE_SPACING, SMILE, AGE_RADIUS = range(4)
_ATTRIBUTE_INDEX = {"smile": SMILE, "age": AGE_RADIUS}
_CAPTION_RE = re.compile(r"^a face with a (\w+) expression on a (\w+) background at the (\w+)$")


def _check_profile(profile: str):
    if profile not in PROFILES:
        error_str = "Unknown profile '{}'.".format(profile)
        logging.error("TOYWORLD: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)


@dataclass(eq=False)
class WPlusEmbedding:
    vectors: np.ndarray
    profile: str = TOY_PROFILE

    def __post_init__(self):
        _check_profile(self.profile)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        expected = (PROFILES[self.profile]['n_w'], PROFILES[self.profile]['d_w'])
        if self.vectors.shape != expected:
            error_str = "w+ has shape {}, profile '{}' needs {}.".format(
                self.vectors.shape, self.profile, expected)
            logging.error("TOYWORLD: ERROR. {}".format(error_str))
            raise ShapeError(error_str)
        if not np.all(np.isfinite(self.vectors)):
            error_str = "w+ has non-finite entries."
            logging.error("TOYWORLD: ERROR. {}".format(error_str))
            raise ShapeError(error_str)

    def flatten(self) -> np.ndarray:
        return self.vectors.reshape(-1)

    def edited(self, direction: 'EditDirection', alpha: float) -> 'WPlusEmbedding':
        """w+ + alpha * delta."""
        if direction.delta.shape != self.vectors.shape:
            error_str = "Edit direction shape {} does not match w+ shape {}.".format(
                direction.delta.shape, self.vectors.shape)
            logging.error("TOYWORLD: ERROR. {}".format(error_str))
            raise ShapeError(error_str)
        return WPlusEmbedding(self.vectors + alpha * direction.delta, self.profile)


@dataclass
class FactorVector:
    hue: float
    eye_spacing: float
    smile: float
    age_radius: float
    detected: bool = True

    @classmethod
    def failed(cls) -> 'FactorVector':
        return cls(np.nan, np.nan, np.nan, np.nan, detected=False)

    @property
    def identity(self) -> Tuple[float, float]:
        return self.hue, self.eye_spacing

    def as_array(self) -> np.ndarray:
        return np.array([self.hue, self.eye_spacing, self.smile, self.age_radius])


@dataclass(eq=False)
class FaceImage:
    pixels: np.ndarray
    factors: Optional[FactorVector] = None
    wplus: Optional[WPlusEmbedding] = None


@dataclass(eq=False)
class WildSample:
    image: np.ndarray
    face_bbox: Tuple[int, int, int, int]    # top, left, height, width
    mask: np.ndarray
    caption: str
    wplus: Optional[WPlusEmbedding]
    face: np.ndarray = field(default=None)
    bg_spec: Tuple[str, str] = ("", "")


@dataclass(eq=False)
class EditDirection:
    delta: np.ndarray
    attribute_name: str


@lru_cache(maxsize=None)
def factor_matrix(profile: str = TOY_PROFILE) -> np.ndarray:
    """Row-orthonormal (4, N_w * D_w) matrix A, fixed by a seed per profile."""
    _check_profile(profile)
    n = PROFILES[profile]['n_w'] * PROFILES[profile]['d_w']
    rng = np.random.default_rng([FACTOR_MATRIX_SEED, n])
    q, _ = np.linalg.qr(rng.standard_normal((n, 4)))
    a = np.ascontiguousarray(q.T)
    a.setflags(write=False)
    return a


def squash(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.array([expit(u[HUE]),
                     0.2 + 0.6 * expit(u[EYE_SPACING]),
                     np.tanh(u[SMILE]),
                     0.3 + 0.6 * expit(u[AGE_RADIUS])])


def unsquash(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return np.array([logit(f[HUE]),
                     logit((f[EYE_SPACING] - 0.2) / 0.6),
                     np.arctanh(f[SMILE]),
                     logit((f[AGE_RADIUS] - 0.3) / 0.6)])


def factors_of(w: WPlusEmbedding) -> FactorVector:
    values = squash(factor_matrix(w.profile) @ w.flatten())
    return FactorVector(*values.tolist())


def factor_component(w: WPlusEmbedding) -> np.ndarray:
    """The part of w+ the factors depend on: pinv(A) A w, flattened."""
    a = factor_matrix(w.profile)
    return a.T @ (a @ w.flatten())


def sample_wplus(rng_seed: int, profile: str = TOY_PROFILE) -> WPlusEmbedding:
    _check_profile(profile)
    rng = np.random.default_rng(rng_seed)
    shape = (PROFILES[profile]['n_w'], PROFILES[profile]['d_w'])
    return WPlusEmbedding(rng.standard_normal(shape) * WPLUS_SCALE, profile)


def edit_direction(attribute: str, profile: str = TOY_PROFILE) -> EditDirection:
    if attribute not in _ATTRIBUTE_INDEX:
        error_str = "Unknown edit attribute '{}', expected one of {}.".format(attribute, ATTRIBUTES)
        logging.error("TOYWORLD: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    row = factor_matrix(profile)[_ATTRIBUTE_INDEX[attribute]]
    delta = row.reshape(PROFILES[profile]['n_w'], PROFILES[profile]['d_w']).copy()
    return EditDirection(delta, attribute)


# rendering
# ====================================================

def _face_color(hue: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1., FACE_SATURATION, FACE_VALUE))


def _face_coverage(size: int, cx: float, cy: float, a: float) -> np.ndarray:
    """Soft ellipse coverage; along the centre row the coverage sums to exactly 2a."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    b = FACE_ASPECT * a
    rho = np.sqrt(((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2)
    return np.clip((1. - rho) * a + 0.5, 0., 1.)


def _blob_axis(d: np.ndarray, sigma: float) -> np.ndarray:
    g = np.exp(-d ** 2 / (2. * sigma ** 2))
    g[np.abs(d) > FEATURE_TRUNCATION * sigma] = 0.
    return g


def _feature_field(f: FactorVector, size: int) -> np.ndarray:
    scale = size / FACE_SIZE
    cx, cy = size // 2, size // 2
    xs = np.arange(size, dtype=np.float64)
    ys = np.arange(size, dtype=np.float64)
    sigma = EYE_SIGMA_PX * scale

    field_ = np.zeros((size, size))
    half = 0.5 * EYE_SPAN_PX * scale * f.eye_spacing
    eye_y = _blob_axis(ys - (cy - EYE_ROW_OFFSET_PX * scale), sigma)
    for ex in (cx - half, cx + half):
        field_ += np.outer(eye_y, _blob_axis(xs - ex, sigma))

    # mouth: dense chain of blobs along y = y_m - k x^2, normalised to unit line density
    width = MOUTH_HALF_WIDTH_PX * scale
    step = 0.1 * scale
    offsets = np.linspace(-width, width, int(round(2 * width / step)) + 1)
    curvature = f.smile * MOUTH_MAX_CURVATURE / scale
    mouth_y = cy + MOUTH_ROW_OFFSET_PX * scale - curvature * offsets ** 2
    sigma_m = FEATURE_SIGMA_PX * scale
    gy = _blob_axis(ys[None, :] - mouth_y[:, None], sigma_m)         # (n, size)
    gx = _blob_axis(xs[None, :] - (cx + offsets)[:, None], sigma_m)   # (n, size)
    field_ += (step / (sigma_m * np.sqrt(2. * np.pi))) * gy.T @ gx
    return field_


def mouth_bbox(size: int = FACE_SIZE) -> Tuple[int, int, int, int]:
    """Pixel box (top, left, bottom, right; exclusive ends) that holds the mouth for every smile value."""
    scale = size / FACE_SIZE
    c = size // 2
    reach = FEATURE_TRUNCATION * FEATURE_SIGMA_PX * scale
    width = MOUTH_HALF_WIDTH_PX * scale
    bend = MOUTH_MAX_CURVATURE * scale * MOUTH_HALF_WIDTH_PX ** 2
    y0 = c + MOUTH_ROW_OFFSET_PX * scale
    return (int(np.ceil(y0 - bend - reach)), int(np.ceil(c - width - reach)),
            int(np.floor(y0 + bend + reach)) + 1, int(np.floor(c + width + reach)) + 1)


def render_factors(f: FactorVector, size: int = FACE_SIZE) -> np.ndarray:
    a = f.age_radius * FACE_RADIUS_PX * size / FACE_SIZE
    coverage = _face_coverage(size, size // 2, size // 2, a)[..., None]
    gray = np.full(3, BACKGROUND_GRAY)
    base = coverage * _face_color(f.hue) + (1. - coverage) * gray
    return base * (1. - FEATURE_DARKENING * _feature_field(f, size))[..., None]


def render_face(w: WPlusEmbedding, size: int = FACE_SIZE) -> FaceImage:
    factors = factors_of(w)
    return FaceImage(render_factors(factors, size), factors, w)


# extraction
# ====================================================

def _as_pixels(img) -> np.ndarray:
    pixels = img.pixels if isinstance(img, FaceImage) else img
    return np.asarray(pixels, dtype=np.float64)


def _row_coverage(row: np.ndarray, color: np.ndarray) -> np.ndarray:
    gray = np.full(3, BACKGROUND_GRAY)
    d = color - gray
    return np.clip((row - gray) @ d / (d @ d), 0., 1.)


def extract_factors(img) -> FactorVector:
    """Reads the four factors back from an aligned face tile.

    Hue comes from the fill colour on the centre row, age_radius from the centre-row
    coverage (which sums to the chord 2a), eye_spacing from the spread of the eye
    darkness around its centroid, smile from a parabola fit to the mouth darkness.
    Returns FactorVector.failed() when no face is found.
    """
    pixels = _as_pixels(img)
    size = pixels.shape[0]
    if pixels.ndim != 3 or pixels.shape[1] != size:
        return FactorVector.failed()
    scale = size / FACE_SIZE
    cy = size // 2
    gray = np.full(3, BACKGROUND_GRAY)

    color = pixels[cy, size // 2]
    if np.linalg.norm(color - gray) < 0.15 or colorsys.rgb_to_hsv(*np.clip(color, 0., 1.))[1] < 0.2:
        return FactorVector.failed()
    row = pixels[cy]
    coverage = _row_coverage(row, color)
    interior = coverage > 0.99
    if interior.any():
        color = row[interior].mean(axis=0)
        coverage = _row_coverage(row, color)
    a = coverage.sum() / 2.
    age_radius = a / (FACE_RADIUS_PX * scale)
    if not 0.25 <= age_radius <= 0.95:
        return FactorVector.failed()
    xs = np.arange(size, dtype=np.float64)
    cx = (xs * coverage).sum() / coverage.sum()

    base = _face_coverage(size, cx, cy, a)[..., None] * color
    base = base + (1. - _face_coverage(size, cx, cy, a)[..., None]) * gray
    darkness = (1. - pixels.sum(axis=-1) / base.sum(axis=-1)) / FEATURE_DARKENING
    darkness = np.clip(darkness, 0., None)

    eyes = darkness[:cy]
    eye_mass = eyes.sum()
    if eye_mass < 1.:
        return FactorVector.failed()
    column_mass = eyes.sum(axis=0)
    x_mean = (xs * column_mass).sum() / eye_mass
    variance = ((xs - x_mean) ** 2 * column_mass).sum() / eye_mass
    separation = 2. * np.sqrt(max(variance - (EYE_SIGMA_PX * scale) ** 2, 0.))
    eye_spacing = separation / (EYE_SPAN_PX * scale)

    mouth = darkness[cy + 1:]
    mouth_ys = np.arange(cy + 1, size, dtype=np.float64)
    offsets = xs - cx
    columns = np.abs(offsets) <= 2.5 * scale
    weight = mouth[:, columns].sum(axis=0)
    if np.any(weight <= 1e-6):
        return FactorVector.failed()
    y_mean = (mouth_ys[:, None] * mouth[:, columns]).sum(axis=0) / weight
    design = np.stack([np.ones(columns.sum()), offsets[columns] ** 2], axis=1)
    (_, quad), *_ = np.linalg.lstsq(design, y_mean, rcond=None)
    smile = float(np.clip(-quad / (MOUTH_MAX_CURVATURE / scale), -1., 1.))

    hue = colorsys.rgb_to_hsv(*np.clip(color, 0., 1.))[0]
    return FactorVector(float(hue), float(eye_spacing), smile, float(age_radius))


def locate_face(image: np.ndarray) -> Optional[Tuple[int, int, int, int]]:
    """Finds the mid-gray face tile in a wild image; returns (top, left, height, width) or None."""
    pixels = np.asarray(image, dtype=np.float64)
    gray_mask = np.all(np.abs(pixels - BACKGROUND_GRAY) < GRAY_TOLERANCE, axis=-1)
    rows = np.flatnonzero(gray_mask.sum(axis=1) >= 3)
    cols = np.flatnonzero(gray_mask.sum(axis=0) >= 3)
    if len(rows) == 0 or len(cols) == 0:
        return None
    top, bottom = rows[0], rows[-1] + 1
    left, right = cols[0], cols[-1] + 1
    height, width = bottom - top, right - left
    if min(height, width) < FACE_SIZE // 2 or abs(height - width) > 2:
        return None
    # the tile border is gray on a clean tile
    border = np.concatenate([gray_mask[top, left:right], gray_mask[bottom - 1, left:right],
                             gray_mask[top:bottom, left], gray_mask[top:bottom, right - 1]])
    if border.mean() < 0.5:
        return None
    return int(top), int(left), int(height), int(width)


def crop_face(image: np.ndarray, bbox: Tuple[int, int, int, int]) -> np.ndarray:
    top, left, height, width = bbox
    tile = np.asarray(image, dtype=np.float64)[top:top + height, left:left + width]
    if tile.shape[:2] != (FACE_SIZE, FACE_SIZE):
        tile = _resize(tile, FACE_SIZE)
    return tile


def extract_wild_factors(image: np.ndarray) -> FactorVector:
    bbox = locate_face(image)
    if bbox is None:
        return FactorVector.failed()
    return extract_factors(crop_face(image, bbox))


# composition
# ====================================================

def _resize(pixels: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray((np.clip(pixels, 0., 1.) * 255).round().astype(np.uint8))
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.


def expression_of(smile: float) -> str:
    return EXPRESSIONS[0] if smile >= SMILE_CAPTION_THRESHOLD else EXPRESSIONS[1]


def make_caption(expression: str, color: str, position: str) -> str:
    return CAPTION_FORMAT.format(expression, color, position)


def parse_caption(caption: str) -> Optional[Tuple[str, str, str]]:
    """(expression, color, position) if the caption follows the grammar, else None."""
    match = _CAPTION_RE.match(caption.strip())
    if match is None:
        return None
    expression, color, position = match.groups()
    if expression not in EXPRESSIONS or color not in BACKGROUND_COLORS or position not in POSITIONS:
        return None
    return expression, color, position


def build_mask(shape: Tuple[int, int], bbox: Tuple[int, int, int, int],
               erosion: int = MASK_EROSION, blur: int = MASK_BLUR) -> np.ndarray:
    """0 on the (eroded) face box, 1 elsewhere, box-blurred at the boundary."""
    top, left, height, width = bbox
    face = np.zeros(shape, dtype=bool)
    face[top:top + height, left:left + width] = True
    if erosion > 0:
        face = ndimage.binary_erosion(face, structure=np.ones((3, 3), dtype=bool), iterations=erosion)
    mask = 1. - face.astype(np.float64)
    if blur > 1:
        mask = ndimage.uniform_filter(mask, size=blur, mode='nearest')
    return np.clip(mask, 0., 1.)


def compose_wild(face: FaceImage, bg_spec: Tuple[str, str], rng_seed: int,
                 canvas_size: int = WILD_SIZE, scale_range: Tuple[float, float] = (1., 1.),
                 color_jitter: bool = False) -> WildSample:
    color, position = bg_spec
    if color not in BACKGROUND_COLORS or position not in POSITIONS:
        error_str = "Unknown background spec {}.".format(bg_spec)
        logging.error("TOYWORLD: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)

    rng = np.random.default_rng(rng_seed)
    centers = {"left": canvas_size / 4, "center": canvas_size / 2, "right": 3 * canvas_size / 4}
    tile_size = face.pixels.shape[0]
    for attempt in range(MAX_PLACEMENT_ATTEMPTS):
        scale = rng.uniform(*scale_range) if scale_range[1] > scale_range[0] else scale_range[0]
        size = int(round(tile_size * scale))
        cx = int(centers[position]) + int(rng.integers(-PLACEMENT_JITTER_PX, PLACEMENT_JITTER_PX + 1))
        cy = canvas_size // 2 + int(rng.integers(-PLACEMENT_JITTER_PX, PLACEMENT_JITTER_PX + 1))
        top, left = cy - size // 2, cx - size // 2
        if top >= 0 and left >= 0 and top + size <= canvas_size and left + size <= canvas_size:
            break
    else:
        error_str = "Could not place a face after {} attempts.".format(MAX_PLACEMENT_ATTEMPTS)
        logging.error("TOYWORLD: ERROR. {}".format(error_str))
        raise GenerationError(error_str)

    background = np.array(BACKGROUND_COLORS[color])
    if color_jitter:
        background = np.clip(background * rng.uniform(0.9, 1.1, size=3), 0., 1.)
    image = np.ones((canvas_size, canvas_size, 3)) * background
    tile = face.pixels if size == tile_size else _resize(face.pixels, size)
    image[top:top + size, left:left + size] = tile

    bbox = (top, left, size, size)
    mask = build_mask((canvas_size, canvas_size), bbox)
    smile = face.factors.smile if face.factors is not None else extract_factors(face).smile
    caption = make_caption(expression_of(smile), color, position)
    return WildSample(image=image, face_bbox=bbox, mask=mask, caption=caption, wplus=face.wplus,
                      face=face.pixels, bg_spec=(color, position))


def random_bg_spec(rng_seed: int) -> Tuple[str, str]:
    rng = np.random.default_rng(rng_seed)
    colors = sorted(BACKGROUND_COLORS)
    return colors[int(rng.integers(len(colors)))], POSITIONS[int(rng.integers(len(POSITIONS)))]
