from toyworld import (WPlusEmbedding, sample_wplus, render_face, compose_wild, random_bg_spec, parse_caption)
from settings import DataParams
from errors import ConfigurationError, ShapeError, ValidationError
from utils import derive_seed
from constants import *

from dataclasses import dataclass
from typing import List
import logging
import os
import struct

import numpy as np
import pandas as pd
from PIL import Image

_HEADER = struct.Struct('<4sIII')


def write_wplus_bin(path: str, embeddings: List[WPlusEmbedding]):
    """Little-endian float32, row-major, after a 16-byte header (magic, version, N_w, D_w)."""
    if not embeddings:
        error_str = "No w+ embeddings to write."
        logging.error("DATA: ERROR. {}".format(error_str))
        raise ValidationError(error_str)
    n_w, d_w = embeddings[0].vectors.shape
    data = np.stack([w.vectors for w in embeddings]).astype('<f4')
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(WPLUS_MAGIC, WPLUS_VERSION, n_w, d_w))
        f.write(data.tobytes(order='C'))


def read_wplus_bin(path: str, profile: str = TOY_PROFILE) -> np.ndarray:
    """Returns a (count, N_w, D_w) float32 array."""
    with open(path, 'rb') as f:
        magic, version, n_w, d_w = _HEADER.unpack(f.read(_HEADER.size))
        payload = f.read()
    if magic != WPLUS_MAGIC or version != WPLUS_VERSION:
        error_str = "'{}' is not a w+ file (magic {!r}, version {}).".format(path, magic, version)
        logging.error("DATA: ERROR. {}".format(error_str))
        raise ValidationError(error_str)
    expected = (PROFILES[profile]['n_w'], PROFILES[profile]['d_w'])
    if (n_w, d_w) != expected:
        error_str = "'{}' holds {}x{} w+, profile '{}' needs {}x{}.".format(path, n_w, d_w, profile, *expected)
        logging.error("DATA: ERROR. {}".format(error_str))
        raise ShapeError(error_str)
    return np.frombuffer(payload, dtype='<f4').reshape(-1, n_w, d_w)


def save_png(path: str, pixels: np.ndarray):
    Image.fromarray((np.clip(pixels, 0., 1.) * 255).round().astype(np.uint8)).save(path)


def load_png(path: str) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.


class Stage1DataGenerator:
    # Aligned (face, w+) pairs: <root>/stage1/{images/*.png, wplus.bin, index.tsv}

    def __init__(self, params: DataParams, profile: str = TOY_PROFILE):
        self._params = params
        self._profile = profile

    def write(self, root: str) -> str:
        folder = os.path.join(root, STAGE1_FOLDER)
        os.makedirs(os.path.join(folder, IMAGES_FOLDER), exist_ok=True)
        embeddings, rows = [], []
        for i in range(self._params.n_stage1):
            seed = derive_seed(self._params.seed, 1, i)
            w = sample_wplus(seed, self._profile)
            name = "{:06d}{}".format(i, PNG_EXTENSION)
            save_png(os.path.join(folder, IMAGES_FOLDER, name), render_face(w).pixels)
            embeddings.append(w)
            rows.append(dict(index=i, image=name, seed=seed))
        write_wplus_bin(os.path.join(folder, WPLUS_FILE), embeddings)
        pd.DataFrame(rows).to_csv(os.path.join(folder, INDEX_FILE), sep='\t', index=False)
        logging.info("DATA: Stage 1 dataset with {} pairs written to {}.".format(len(rows), folder))
        return folder

    def __str__(self):
        return str(vars(self))


class Stage2DataGenerator:
    # Wild composites: <root>/stage2/{images/*.png, masks/*.png, wplus.bin, captions.tsv}

    def __init__(self, params: DataParams, profile: str = TOY_PROFILE):
        self._params = params
        self._profile = profile

    def write(self, root: str) -> str:
        folder = os.path.join(root, STAGE2_FOLDER)
        for sub in (IMAGES_FOLDER, MASKS_FOLDER):
            os.makedirs(os.path.join(folder, sub), exist_ok=True)
        embeddings, rows = [], []
        for i in range(self._params.n_stage2):
            seed = derive_seed(self._params.seed, 2, i)
            w = sample_wplus(seed, self._profile)
            sample = compose_wild(render_face(w), random_bg_spec(seed), seed,
                                  scale_range=(self._params.face_scale_min, self._params.face_scale_max),
                                  color_jitter=self._params.color_jitter)
            name = "{:06d}{}".format(i, PNG_EXTENSION)
            save_png(os.path.join(folder, IMAGES_FOLDER, name), sample.image)
            save_png(os.path.join(folder, MASKS_FOLDER, name), sample.mask)
            embeddings.append(w)
            top, left, height, width = sample.face_bbox
            rows.append(dict(index=i, image=name, caption=sample.caption, color=sample.bg_spec[0],
                             position=sample.bg_spec[1], top=top, left=left, height=height, width=width))
        write_wplus_bin(os.path.join(folder, WPLUS_FILE), embeddings)
        pd.DataFrame(rows).to_csv(os.path.join(folder, CAPTIONS_FILE), sep='\t', index=False)
        logging.info("DATA: Stage 2 dataset with {} wild samples written to {}.".format(len(rows), folder))
        return folder

    def __str__(self):
        return str(vars(self))


@dataclass
class FaceDataset:
    images: np.ndarray      # (n, H_f, W_f, 3)
    wplus: np.ndarray       # (n, N_w, D_w)

    def __len__(self):
        return len(self.images)


@dataclass
class WildDataset:
    images: np.ndarray      # (n, H, W, 3)
    masks: np.ndarray       # (n, H, W)
    wplus: np.ndarray
    captions: List[str]

    def __len__(self):
        return len(self.images)


def _require_file(path: str, what: str):
    if not os.path.isfile(path):
        error_str = "{} dataset not found: '{}' is missing, run make-data first.".format(what, path)
        logging.error("DATA: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)


def load_stage1(root: str, profile: str = TOY_PROFILE) -> FaceDataset:
    folder = os.path.join(root, STAGE1_FOLDER)
    _require_file(os.path.join(folder, INDEX_FILE), "Stage 1")
    index = pd.read_csv(os.path.join(folder, INDEX_FILE), sep='\t')
    images = np.stack([load_png(os.path.join(folder, IMAGES_FOLDER, name)) for name in index['image']])
    wplus = read_wplus_bin(os.path.join(folder, WPLUS_FILE), profile)
    if len(wplus) != len(images):
        error_str = "Stage 1 index lists {} images but wplus.bin holds {}.".format(len(images), len(wplus))
        logging.error("DATA: ERROR. {}".format(error_str))
        raise ValidationError(error_str)
    return FaceDataset(images, wplus)


def load_stage2(root: str, profile: str = TOY_PROFILE) -> WildDataset:
    folder = os.path.join(root, STAGE2_FOLDER)
    _require_file(os.path.join(folder, CAPTIONS_FILE), "Stage 2")
    table = pd.read_csv(os.path.join(folder, CAPTIONS_FILE), sep='\t')
    images = np.stack([load_png(os.path.join(folder, IMAGES_FOLDER, name)) for name in table['image']])
    masks = np.stack([load_png(os.path.join(folder, MASKS_FOLDER, name)) for name in table['image']])
    wplus = read_wplus_bin(os.path.join(folder, WPLUS_FILE), profile)
    captions = list(table['caption'])
    bad = [c for c in captions if parse_caption(c) is None]
    if bad:
        error_str = "Stage 2 captions outside the grammar: {}".format(bad[:3])
        logging.error("DATA: ERROR. {}".format(error_str))
        raise ValidationError(error_str)
    return WildDataset(images, masks, wplus, captions)


def make_face_dataset(n: int, seed: int, profile: str = TOY_PROFILE) -> FaceDataset:
    """In-memory stage 1 data, same records Stage1DataGenerator writes (before PNG quantisation)."""
    ws = [sample_wplus(derive_seed(seed, 1, i), profile) for i in range(n)]
    return FaceDataset(np.stack([render_face(w).pixels for w in ws]), np.stack([w.vectors for w in ws]))


def make_wild_dataset(n: int, seed: int, profile: str = TOY_PROFILE) -> WildDataset:
    samples = []
    for i in range(n):
        s = derive_seed(seed, 2, i)
        samples.append(compose_wild(render_face(sample_wplus(s, profile)), random_bg_spec(s), s))
    return WildDataset(np.stack([x.image for x in samples]), np.stack([x.mask for x in samples]),
                       np.stack([x.wplus.vectors for x in samples]), [x.caption for x in samples])
