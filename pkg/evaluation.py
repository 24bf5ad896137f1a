"""Analytic stand-ins for the identity, prompt and detection metrics, plus background change."""
from toyworld import (WPlusEmbedding, FactorVector, extract_factors, locate_face, crop_face, expression_of,
                      parse_caption, make_caption, build_mask, sample_wplus, edit_direction, render_face)
from pipeline import WPlusPipeline
from sampler import SamplerConfig, sample_identity, sample_with_edit
from settings import EvalParams
from errors import ValidationError
from utils import circular_difference, derive_seed
from constants import *

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
from scipy import stats

METRIC_COLUMNS = ["id_distance", "prompt_consistency", "detected", "background_change"]
_SUMMARY_PREFIX = "# "


def extract_any(img) -> FactorVector:
    """Factors of an aligned face tile or of the face found inside a wild image."""
    pixels = np.asarray(img, dtype=np.float64)
    if pixels.ndim != 3:
        return FactorVector.failed()
    if pixels.shape[0] == FACE_SIZE and pixels.shape[1] == FACE_SIZE:
        return extract_factors(pixels)
    bbox = locate_face(pixels)
    if bbox is None:
        return FactorVector.failed()
    return extract_factors(crop_face(pixels, bbox))


def identity_distance(img_a, img_b) -> float:
    """Distance of (hue, eye_spacing), hue on the circle. NaN when either face is not detected."""
    fa, fb = extract_any(img_a), extract_any(img_b)
    if not (fa.detected and fb.detected):
        return float('nan')
    return float(np.hypot(circular_difference(fa.hue, fb.hue), fa.eye_spacing - fb.eye_spacing))


def _background_pixels(pixels: np.ndarray, bbox: Optional[Tuple[int, int, int, int]]) -> np.ndarray:
    keep = np.ones(pixels.shape[:2], dtype=bool)
    if bbox is not None:
        top, left, height, width = bbox
        keep[top:top + height, left:left + width] = False
    return pixels[keep]


def classify_color(pixels: np.ndarray, bbox: Optional[Tuple[int, int, int, int]]) -> Optional[str]:
    median = np.median(_background_pixels(pixels, bbox), axis=0)
    names = sorted(BACKGROUND_COLORS)
    distances = [np.linalg.norm(median - np.array(BACKGROUND_COLORS[name])) for name in names]
    best = int(np.argmin(distances))
    return names[best] if distances[best] <= COLOR_MATCH_DISTANCE else None


def classify_position(bbox: Tuple[int, int, int, int], canvas_width: int) -> str:
    _, left, _, width = bbox
    center = left + width / 2.
    return POSITIONS[min(int(center / (canvas_width / 3.)), len(POSITIONS) - 1)]


def prompt_consistency(img, caption: str) -> float:
    """Fraction of the caption's facts (background colour, position, expression) found in the image."""
    facts = parse_caption(caption)
    if facts is None:
        error_str = "Caption '{}' does not follow the caption grammar.".format(caption)
        logging.error("EVAL: ERROR. {}".format(error_str))
        raise ValidationError(error_str)
    expression, color, position = facts
    pixels = np.asarray(img, dtype=np.float64)
    bbox = locate_face(pixels)
    matched = int(classify_color(pixels, bbox) == color)
    if bbox is not None:
        matched += int(classify_position(bbox, pixels.shape[1]) == position)
        factors = extract_factors(crop_face(pixels, bbox))
        if factors.detected:
            matched += int(expression_of(factors.smile) == expression)
    return matched / 3.


def detection_rate(images: Sequence[np.ndarray]) -> float:
    if len(images) == 0:
        error_str = "Detection rate of an empty image set."
        logging.error("EVAL: ERROR. {}".format(error_str))
        raise ValidationError(error_str)
    return float(np.mean([extract_any(img).detected for img in images]))


def background_change(img_a, img_b, mask) -> float:
    """Mean absolute pixel difference weighted by the mask (1 = background)."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if a.shape != b.shape or a.shape[:2] != m.shape:
        error_str = "Shapes differ: {}, {}, mask {}.".format(a.shape, b.shape, m.shape)
        logging.error("EVAL: ERROR. {}".format(error_str))
        raise ValidationError(error_str)
    total = m.sum()
    if total == 0.:
        return 0.
    return float((m[..., None] * np.abs(a - b)).sum() / (total * a.shape[-1]))


def face_mask(image: np.ndarray) -> np.ndarray:
    """Background mask around the face found in a generated image; all ones when no face is found."""
    bbox = locate_face(image)
    if bbox is None:
        return np.ones(image.shape[:2])
    return build_mask(image.shape[:2], bbox)


@dataclass
class EvalReport:
    rows: pd.DataFrame
    summary: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: pd.DataFrame) -> 'EvalReport':
        summary = dict(
            prompt_consistency=float(rows["prompt_consistency"].mean()),
            id_distance=float(rows["id_distance"].mean(skipna=True)),
            detection_rate=float(rows["detected"].mean()),
            background_change=float(rows["background_change"].mean()),
            samples=int(len(rows)))
        return cls(rows, summary)

    @property
    def prompt_consistency(self) -> float:
        return self.summary["prompt_consistency"]

    @property
    def id_distance(self) -> float:
        return self.summary["id_distance"]

    @property
    def detection_rate(self) -> float:
        return self.summary["detection_rate"]

    @property
    def background_change(self) -> float:
        return self.summary["background_change"]


def eval_identity(index: int, seed: int = 0, profile: str = TOY_PROFILE) -> WPlusEmbedding:
    return sample_wplus(derive_seed(seed, IDENTITY_SEED_TAG, index), profile)


def make_eval_identities(n: int, seed: int, profile: str = TOY_PROFILE) -> List[WPlusEmbedding]:
    return [eval_identity(i, seed, profile) for i in range(n)]


def make_eval_prompts(n: int, seed: int) -> List[str]:
    rng = np.random.default_rng(derive_seed(seed, 8))
    colors = sorted(BACKGROUND_COLORS)
    prompts = []
    for i in range(n):
        prompts.append(make_caption(EXPRESSIONS[i % len(EXPRESSIONS)], colors[int(rng.integers(len(colors)))],
                                    POSITIONS[int(rng.integers(len(POSITIONS)))]))
    return prompts


def run_eval(pipe: WPlusPipeline, identities: Sequence[WPlusEmbedding], prompts: Sequence[str],
             params: EvalParams, sampler_config: SamplerConfig) -> EvalReport:
    """Samples every (identity, prompt) pair, plus a smile edit of it, and scores both."""
    direction = edit_direction("smile", identities[0].profile)
    rows = []
    for i, w in enumerate(identities):
        reference = render_face(w).pixels
        for j, prompt in enumerate(prompts):
            config = replace(sampler_config, seed=derive_seed(params.seed, i, j))
            image = sample_identity(pipe, prompt, w, config).image
            edited = sample_with_edit(pipe, prompt, w, direction, params.edit_alpha, config).image
            factors, edited_factors = extract_any(image), extract_any(edited)
            rows.append(dict(identity=i, prompt=prompt, seed=config.seed,
                             id_distance=identity_distance(reference, image),
                             prompt_consistency=prompt_consistency(image, prompt),
                             detected=float(factors.detected),
                             background_change=background_change(image, edited, face_mask(image)),
                             edit_id_distance=identity_distance(image, edited),
                             smile=factors.smile, smile_edited=edited_factors.smile))
        logging.info("EVAL: Identity {}/{} done.".format(i + 1, len(identities)))
    return EvalReport.from_rows(pd.DataFrame(rows))


def write_report(report: EvalReport, out_dir: str, checkpoint_name: str, seed: int) -> str:
    """Tab-separated rows followed by `# key<TAB>value` summary lines."""
    path = os.path.join(out_dir, EVAL_FILE_FORMAT.format(checkpoint_name, seed))
    report.rows.to_csv(path, sep='\t', index=False, float_format='%.10g')
    with open(path, 'a') as f:
        for key, value in report.summary.items():
            f.write("{}{}\t{}\n".format(_SUMMARY_PREFIX, key, "{:.10g}".format(value)
                                        if isinstance(value, float) else value))
    logging.info("EVAL: Report written to {}.".format(path))
    return path


def read_report(path: str) -> EvalReport:
    rows = pd.read_csv(path, sep='\t', comment='#')
    return EvalReport.from_rows(rows)


def sign_test(trained: Sequence[float], baseline: Sequence[float]) -> Tuple[int, int, float]:
    """One-sided sign test that `trained` is smaller than `baseline` on paired samples.

    Pairs with a NaN or a tie are dropped. Returns (wins, pairs, p-value).
    """
    a = np.asarray(trained, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    keep = np.isfinite(a) & np.isfinite(b) & (a != b)
    wins, n = int((a[keep] < b[keep]).sum()), int(keep.sum())
    if n == 0:
        return 0, 0, 1.
    return wins, n, float(stats.binomtest(wins, n, 0.5, alternative='greater').pvalue)
