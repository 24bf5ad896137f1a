"""Named-tensor archives.

Layout (all text is utf-8, one item per line):

    WPCKPT <version>
    <key> = <value>             header, keys sorted
    tensors = <count>
    <name>\t<dtype>\t<shape>\t<offset>\t<nbytes>
    ...
    END
    <raw little-endian tensor bytes, concatenated in manifest order>

Nothing time-dependent is written, so identical parameters give identical files.
"""
from errors import ConfigurationError, ValidationError
from constants import CKPT_MAGIC, CKPT_VERSION, CKPT_END_MARKER, BASE_KIND, ADAPTER_KIND

from collections import OrderedDict
from typing import Dict, Tuple
import logging
import os

import numpy as np
import torch

_TENSORS_KEY = "tensors"


def _to_numpy(tensor: torch.Tensor) -> np.ndarray:
    array = tensor.detach().cpu().contiguous().numpy()
    return array.astype(array.dtype.newbyteorder('<'), copy=False)


def save_checkpoint(path: str, kind: str, tensors: Dict[str, torch.Tensor], header: Dict[str, object]) -> str:
    if kind not in (BASE_KIND, ADAPTER_KIND):
        error_str = "Unknown checkpoint kind '{}'.".format(kind)
        logging.error("CHECKPOINT: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    fields = dict(header)
    fields['kind'] = kind
    lines = ["{} {}".format(CKPT_MAGIC, CKPT_VERSION)]
    for key in sorted(fields):
        value = str(fields[key])
        if '\n' in value or '=' in key:
            error_str = "Header entry '{}' cannot be stored.".format(key)
            logging.error("CHECKPOINT: ERROR. {}".format(error_str))
            raise ValidationError(error_str)
        lines.append("{} = {}".format(key, value))
    lines.append("{} = {}".format(_TENSORS_KEY, len(tensors)))

    payload = []
    offset = 0
    for name in sorted(tensors):
        array = _to_numpy(tensors[name])
        raw = array.tobytes(order='C')
        shape = ",".join(str(s) for s in array.shape)
        lines.append("\t".join([name, array.dtype.str, shape, str(offset), str(len(raw))]))
        payload.append(raw)
        offset += len(raw)
    lines.append(CKPT_END_MARKER)

    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    with open(path, 'wb') as f:
        f.write(("\n".join(lines) + "\n").encode('utf-8'))
        for raw in payload:
            f.write(raw)
    logging.info("CHECKPOINT: Saved {} checkpoint with {} tensors to {}.".format(kind, len(tensors), path))
    return path


def load_checkpoint(path: str) -> Tuple[Dict[str, str], 'OrderedDict[str, torch.Tensor]']:
    """Returns (header, tensors). Header values are strings."""
    if not os.path.exists(path):
        error_str = "Checkpoint '{}' doesn't exist.".format(path)
        logging.error("CHECKPOINT: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    with open(path, 'rb') as f:
        data = f.read()
    marker = ("\n" + CKPT_END_MARKER + "\n").encode('utf-8')
    end = data.find(marker)
    if end < 0:
        error_str = "'{}' has no manifest end marker.".format(path)
        logging.error("CHECKPOINT: ERROR. {}".format(error_str))
        raise ValidationError(error_str)
    text = data[:end].decode('utf-8').split("\n")
    payload = memoryview(data)[end + len(marker):]

    magic = text[0].split()
    if len(magic) != 2 or magic[0] != CKPT_MAGIC or int(magic[1]) != CKPT_VERSION:
        error_str = "'{}' is not a checkpoint (first line '{}').".format(path, text[0])
        logging.error("CHECKPOINT: ERROR. {}".format(error_str))
        raise ValidationError(error_str)
    header = dict()
    index = 1
    while index < len(text) and ' = ' in text[index]:
        key, value = text[index].split(' = ', 1)
        header[key] = value
        index += 1
    count = int(header.pop(_TENSORS_KEY, -1))
    manifest = text[index:]
    if count != len(manifest):
        error_str = "'{}' declares {} tensors but lists {}.".format(path, count, len(manifest))
        logging.error("CHECKPOINT: ERROR. {}".format(error_str))
        raise ValidationError(error_str)

    tensors = OrderedDict()
    for line in manifest:
        name, dtype, shape, offset, nbytes = line.split("\t")
        offset, nbytes = int(offset), int(nbytes)
        if offset + nbytes > len(payload):
            error_str = "Tensor '{}' runs past the end of '{}'.".format(name, path)
            logging.error("CHECKPOINT: ERROR. {}".format(error_str))
            raise ValidationError(error_str)
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        array = np.frombuffer(payload[offset:offset + nbytes], dtype=np.dtype(dtype)).reshape(dims)
        tensors[name] = torch.from_numpy(array.astype(array.dtype.newbyteorder('='), copy=True))
    return header, tensors
