# /qsf/checkpoint.py

"""Binary checkpoint container.

Layout: magic b"QSFC", u32 version, u32 header length, a compact sorted-key
JSON header, then every tensor as raw little-endian float64 in header order.
The header holds the stage config, the tensor table (name, shape, dtype,
offset relative to the start of the payload), the frozen parameter names, the
optimizer step and free-form training metadata. Optimizer moments are stored as
tensors named ``adam.m/<param>`` and ``adam.v/<param>``.
"""

import dataclasses
import json
import logging
import struct

import numpy as np

from .autodiff import ParamStore
from .errors import FormatError
from .ml_models.qsf_model import QSFModel, StageConfig, parameter_shapes
from .utils.helpers import atomic_write

logger = logging.getLogger(__name__)

MAGIC = b"QSFC"
VERSION = 1
DTYPE = '<f8'
_PREAMBLE = struct.Struct('<4sII')


@dataclasses.dataclass
class Checkpoint:
    config: StageConfig
    params: ParamStore
    optimizer: dict | None = None
    metadata: dict = dataclasses.field(default_factory=dict)

    def model(self):
        return QSFModel(self.config, self.params)


def _tensor_table(checkpoint):
    tensors = [(name, data) for name, data in checkpoint.params.items()]
    if checkpoint.optimizer is not None:
        for kind in ('m', 'v'):
            for name in sorted(checkpoint.optimizer[kind]):
                tensors.append((f"adam.{kind}/{name}", checkpoint.optimizer[kind][name]))
    return tensors


def encode_checkpoint(checkpoint):
    table, payloads, offset = [], [], 0
    for name, data in _tensor_table(checkpoint):
        raw = np.ascontiguousarray(data, dtype=DTYPE).tobytes()
        table.append({'name': name, 'shape': list(np.shape(data)), 'dtype': 'f64', 'offset': offset})
        payloads.append(raw)
        offset += len(raw)
    optimizer = None if checkpoint.optimizer is None else {'step': int(checkpoint.optimizer['step'])}
    header = {
        'config': checkpoint.config.to_dict(),
        'tensors': table,
        'frozen': checkpoint.params.frozen_names(),
        'optimizer': optimizer,
        'metadata': checkpoint.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return _PREAMBLE.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b''.join(payloads)


def decode_checkpoint(blob, expected_config=None):
    """Parses checkpoint bytes and validates every parameter shape against the stored config.

    With ``expected_config`` the stored architecture must match it as well.
    """
    if len(blob) < _PREAMBLE.size:
        raise FormatError("file too short to be a checkpoint")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, not a QSF checkpoint")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _PREAMBLE.size
    try:
        header = json.loads(blob[start:start + header_len].decode('utf-8'))
        config = StageConfig.from_dict(header['config'])
        table = header['tensors']
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"corrupt checkpoint header: {e}")
    except ValueError as e:
        raise FormatError(f"checkpoint holds an invalid config: {e}")
    if expected_config is not None:
        for field in ('stage', 'd', 'n_layers', 'vocab_size', 'seq_len'):
            if getattr(expected_config, field) != getattr(config, field):
                raise FormatError(f"checkpoint {field}={getattr(config, field)} does not match "
                                  f"expected {getattr(expected_config, field)}")

    payload = memoryview(blob)[start + header_len:]
    tensors = {}
    for entry in table:
        shape = tuple(entry['shape'])
        count = int(np.prod(shape, dtype=np.int64))
        begin, end = entry['offset'], entry['offset'] + 8 * count
        if entry.get('dtype') != 'f64' or end > len(payload):
            raise FormatError(f"tensor {entry['name']!r} is truncated or has an unsupported dtype")
        tensors[entry['name']] = np.frombuffer(payload[begin:end], dtype=DTYPE).astype(np.float64).reshape(shape)

    expected = parameter_shapes(config)
    params = ParamStore()
    for name, shape in expected.items():
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != tuple(shape):
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, config requires {tuple(shape)}")
        params.create(name, tensors[name], frozen=name in set(header.get('frozen', ())))

    optimizer = None
    if header.get('optimizer') is not None:
        optimizer = {'step': int(header['optimizer']['step']), 'm': {}, 'v': {}}
        for name, data in tensors.items():
            kind, _, param = name.partition('/')
            if kind in ('adam.m', 'adam.v'):
                optimizer[kind[-1]][param] = data.copy()
    return Checkpoint(config, params, optimizer, header.get('metadata') or {})


def save_checkpoint(path, checkpoint):
    with atomic_write(path, 'wb') as f:
        f.write(encode_checkpoint(checkpoint))
    logger.debug("saved checkpoint %s", path)
    return path


def load_checkpoint(path, expected_config=None):
    with open(path, 'rb') as f:
        blob = f.read()
    return decode_checkpoint(blob, expected_config)
