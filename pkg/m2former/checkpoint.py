"""
Versioned single-file checkpoints.

Layout (all integers little-endian):

    8 bytes   magic b'M2FCKPT\\0'
    uint32    format version
    uint64    header length N
    N bytes   UTF-8 JSON header: version, package version, config text, step, rng state,
              ordered parameter names and shapes
    float64   parameter data in header order
"""
import json
import struct
from pathlib import Path
from typing import Tuple, Union
import attr
import numpy as np
from atomicwrites import atomic_write
from m2former import __version__
from m2former.config import ExperimentConfig, dump_config, parse_config
from m2former.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from m2former.exc import CheckpointError
from m2former.model import M2Former
from m2former.utils import logger

_PREFIX = struct.Struct('<IQ')


@attr.s(auto_attribs=True, frozen=True)
class CheckpointInfo:
    step: int
    rng_state: dict
    package_version: str


def save_checkpoint(
    model: M2Former,
    cfg: ExperimentConfig,
    path: Union[str, Path],
    step: int = 0,
    rng_state: dict = None,
) -> Path:
    """ Write model parameters with the config that built them. The file is replaced atomically. """
    named = list(model.named_parameters())
    header = {
        'version': CHECKPOINT_VERSION,
        'package_version': __version__,
        'config': dump_config(cfg),
        'step': int(step),
        'rng_state': rng_state or {},
        'parameters': [{'name': name, 'shape': list(p.shape)} for name, p in named],
    }
    encoded = json.dumps(header, sort_keys=True).encode('utf-8')
    path = Path(path)
    with atomic_write(str(path), mode='wb', overwrite=True) as stream:
        stream.write(CHECKPOINT_MAGIC)
        stream.write(_PREFIX.pack(CHECKPOINT_VERSION, len(encoded)))
        stream.write(encoded)
        for _, p in named:
            stream.write(np.ascontiguousarray(p.data, dtype='<f8').tobytes())
    logger.info(f'Saved checkpoint at step {step} to {path}')
    return path


def read_header(path: Union[str, Path]) -> Tuple[dict, bytes]:
    """
    :return: (header, raw parameter bytes)
    :raises CheckpointError: on a bad magic number, version or truncated file
    """
    with open(path, 'rb') as stream:
        blob = stream.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f'{path} is not an m2former checkpoint')
    offset = len(CHECKPOINT_MAGIC)
    if len(blob) < offset + _PREFIX.size:
        raise CheckpointError(f'{path} is truncated')
    version, length = _PREFIX.unpack_from(blob, offset)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'Unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})')
    offset += _PREFIX.size
    header = json.loads(blob[offset : offset + length].decode('utf-8'))
    return header, blob[offset + length :]


def load_checkpoint(
    path: Union[str, Path], cfg: ExperimentConfig = None
) -> Tuple[M2Former, ExperimentConfig, CheckpointInfo]:
    """
    Rebuild the model from the stored config and fill in its parameters.

    :param cfg: If given, must equal the stored config
    :raises CheckpointError: if the stored parameters do not match the model built from the config
    """
    header, data = read_header(path)
    stored = parse_config(header['config'])
    if cfg is not None and dump_config(cfg) != dump_config(stored):
        raise CheckpointError(f'Config does not match the config stored in {path}')
    model = M2Former.from_config(stored)
    named = list(model.named_parameters())
    expected = [(name, list(p.shape)) for name, p in named]
    found = [(entry['name'], entry['shape']) for entry in header['parameters']]
    if expected != found:
        missing = sorted(set(n for n, _ in expected) ^ set(n for n, _ in found))
        raise CheckpointError(f'Checkpoint parameters do not match the model: {missing or "shapes differ"}')
    values = np.frombuffer(data, dtype='<f8')
    total = sum(p.size for _, p in named)
    if len(values) != total:
        raise CheckpointError(f'Checkpoint holds {len(values)} values, model needs {total}')
    offset = 0
    for _, p in named:
        p.assign(values[offset : offset + p.size].reshape(p.shape))
        offset += p.size
    info = CheckpointInfo(header['step'], header['rng_state'], header['package_version'])
    logger.info(f'Loaded checkpoint {path} (step {info.step})')
    return model, stored, info
