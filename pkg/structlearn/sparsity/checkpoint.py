"""Model checkpoints: a YAML topology header followed by little-endian float64 blobs.

Layout::

    b'SSLCKPT\\n'                 magic
    <u64 little-endian>          header length in bytes
    <header>                     UTF-8 YAML: version, topology, blob offsets, metadata, plan
    <blobs>                      weights then bias of every weighted layer, '<f8'
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from .compactor import CompactPlan, pack_mask, unpack_mask
from .errors import CheckpointError, SparsityError
from .network import Layer, LayerKind, LayerSpec, NetworkModel, WeightTensor4D
from .util import utc_timestamp

logger = logging.getLogger(__name__)

MAGIC = b'SSLCKPT\n'
FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype('<f8')


@dataclass
class Checkpoint:
    model: NetworkModel
    metadata: dict = field(default_factory=dict)
    plan: Optional[CompactPlan] = None


def _layer_header(layer: Layer, offset: int) -> dict:
    spec = layer.spec
    entry = {
        'kind': spec.kind.value,
        'name': spec.name,
        'n_out': spec.n_out,
        'kernel': list(spec.kernel),
        'stride': list(spec.stride),
        'pad': list(spec.pad),
    }
    if spec.shortcut_id is not None:
        entry['shortcut_id'] = spec.shortcut_id
    if layer.params is not None:
        params = layer.params
        entry['weights'] = {'shape': list(params.values.shape), 'offset': offset}
        entry['bias'] = {'shape': list(params.bias.shape), 'offset': offset + params.values.size * BLOB_DTYPE.itemsize}
        if params.fiber_mask is not None:
            entry['fiber_mask'] = pack_mask(params.fiber_mask)
    return entry


def encode(checkpoint: Checkpoint) -> bytes:
    model = checkpoint.model
    metadata = dict(checkpoint.metadata)
    metadata.setdefault('created_at', utc_timestamp())

    layers, blobs, offset = [], [], 0
    for layer in model.layers:
        layers.append(_layer_header(layer, offset))
        if layer.params is not None:
            for array in (layer.params.values, layer.params.bias):
                blob = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
                blobs.append(blob)
                offset += len(blob)

    header = {
        'format_version': FORMAT_VERSION,
        'model': {'name': model.name, 'input_shape': list(model.input_shape), 'layers': layers},
        'metadata': metadata,
        'blob_bytes': offset,
    }
    if checkpoint.plan is not None:
        header['plan'] = checkpoint.plan.to_dict()

    text = yaml.safe_dump(header, sort_keys=True, default_flow_style=False).encode('utf-8')
    return MAGIC + struct.pack('<Q', len(text)) + text + b''.join(blobs)


def _read_array(blob: memoryview, entry: dict, name: str) -> np.ndarray:
    shape = tuple(entry['shape'])
    count = int(np.prod(shape))
    start = entry['offset']
    end = start + count * BLOB_DTYPE.itemsize
    if start < 0 or end > len(blob):
        raise CheckpointError(f"Blob of layer {name!r} runs past the end of the file",
                              offset=start, expected=end, found=len(blob))
    return np.frombuffer(blob[start:end], dtype=BLOB_DTYPE).astype(np.float64).reshape(shape)


def decode(data: bytes, path=None) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("Not a checkpoint file", path=path, offset=0, expected=MAGIC, found=data[:len(MAGIC)])
    prefix = len(MAGIC) + 8
    if len(data) < prefix:
        raise CheckpointError("Truncated checkpoint header", path=path, offset=len(data), expected=prefix)
    (length,) = struct.unpack('<Q', data[len(MAGIC):prefix])
    if len(data) < prefix + length:
        raise CheckpointError("Truncated checkpoint header", path=path, offset=len(data),
                              expected=prefix + length, found=len(data))

    try:
        header = yaml.safe_load(data[prefix:prefix + length].decode('utf-8'))
    except (yaml.YAMLError, UnicodeDecodeError) as e:
        raise CheckpointError(f"Unreadable checkpoint header: {e}", path=path, offset=prefix) from e
    if not isinstance(header, dict) or header.get('format_version') != FORMAT_VERSION:
        found = header.get('format_version') if isinstance(header, dict) else None
        raise CheckpointError("Unsupported checkpoint version", path=path, expected=FORMAT_VERSION, found=found)

    blob = memoryview(data)[prefix + length:]
    if len(blob) != header.get('blob_bytes'):
        raise CheckpointError("Blob section length does not match the header", path=path,
                              offset=prefix + length, expected=header.get('blob_bytes'), found=len(blob))

    try:
        layers = []
        for entry in header['model']['layers']:
            spec = LayerSpec(
                kind=LayerKind(entry['kind']),
                name=entry['name'],
                n_out=entry['n_out'],
                kernel=tuple(entry['kernel']),
                stride=tuple(entry['stride']),
                pad=tuple(entry['pad']),
                shortcut_id=entry.get('shortcut_id'),
            )
            params = None
            if 'weights' in entry:
                values = _read_array(blob, entry['weights'], spec.name)
                mask = None
                if 'fiber_mask' in entry:
                    mask = unpack_mask(entry['fiber_mask'], int(np.prod(values.shape[1:])))
                params = WeightTensor4D(values, _read_array(blob, entry['bias'], spec.name), mask)
            layers.append(Layer(spec, params))

        model = NetworkModel(tuple(header['model']['input_shape']), layers, name=header['model']['name'])
        plan = CompactPlan.from_dict(header['plan']) if 'plan' in header else None
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, SparsityError) as e:
        raise CheckpointError(f"Invalid checkpoint topology: {e}", path=path) from e

    return Checkpoint(model, header.get('metadata') or {}, plan)


def save_checkpoint(path: Union[str, Path], model: NetworkModel, metadata: dict = None,
                    plan: CompactPlan = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(Checkpoint(model, metadata or {}, plan)))
    logger.info({"message": "Checkpoint saved.", "path": str(path), "parameters": model.parameter_count})
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint: {e}", path=path) from e
    return decode(data, path)
