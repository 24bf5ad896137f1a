from constants import LOGS_FOLDER, WPLUS_LOG_FILE, LOG_FORMAT, LOG_DATE_FORMAT

from contextlib import contextmanager
from datetime import datetime
from typing import Iterable
import hashlib
import logging
import os

import numpy as np
import torch


def is_int(key) -> bool:
    if isinstance(key, bool):
        return False
    if isinstance(key, int):
        return True
    return isinstance(key, str) and key.lstrip('-').isdigit()


def is_int_or_raise(key) -> bool:
    if is_int(key):
        return True
    raise ValueError("'{}' is not an integer value.".format(key))


def is_float(key) -> bool:
    try:
        float(key)
    except (TypeError, ValueError):
        return False
    return True


def is_float_or_raise(key) -> bool:
    if is_float(key):
        return True
    raise ValueError("'{}' is not a real value.".format(key))


def parse_bool(key) -> bool:
    if isinstance(key, bool):
        return key
    value = str(key).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError("'{}' is not a boolean value.".format(key))


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) % (2 ** 63))


def derive_seed(*parts: int) -> int:
    """Mixes several integers into one reproducible 63-bit seed."""
    digest = hashlib.sha256(",".join(str(int(p)) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def circular_difference(a, b):
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 1.
    return np.minimum(d, 1. - d)


def parameters_checksum(tensors: Iterable[torch.Tensor]) -> str:
    sha = hashlib.sha256()
    for tensor in tensors:
        sha.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return sha.hexdigest()


def file_checksum(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            sha.update(chunk)
    return sha.hexdigest()


def make_run_dir(out_root: str, command: str) -> str:
    """Creates a fresh timestamped directory; never reuses an existing one."""
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = os.path.join(out_root, "{}-{}".format(command, stamp))
    path = base
    index = 1
    while os.path.exists(path):
        path = "{}-{}".format(base, index)
        index += 1
    os.makedirs(path)
    return path


def setup_logging(run_dir: str):
    logs_dir = os.path.join(run_dir, LOGS_FOLDER)
    if not os.path.exists(logs_dir):
        os.makedirs(logs_dir)
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT, force=True,
                        handlers=[logging.FileHandler(os.path.join(logs_dir, WPLUS_LOG_FILE), encoding='utf-8'),
                                  logging.StreamHandler()])


@contextmanager
def torch_seed(seed: int):
    """Seeds torch's global generator for a block (module construction) and restores it afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % (2 ** 63))
        yield
