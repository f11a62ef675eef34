"""
Named-tensor checkpoint files.

Binary layout (little-endian):
    b"PTTS", version u32, tensor count u32, then per tensor:
    name length u16, UTF-8 name, rank u8, extents u64 * rank, float32 payload.

Tensors are written sorted by name. Metadata (seed, dims, vocab layout,
variant, featurizer seed) goes to a JSON sidecar next to the binary file.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from pilot_tts.exceptions import CheckpointError, DependencyError

logger = logging.getLogger(__name__)

MAGIC = b'PTTS'
FORMAT_VERSION = 1


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.json')


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    """Serialize name -> array into the checkpoint byte layout."""
    chunks = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(tensors))]
    for name in sorted(tensors):
        array = np.ascontiguousarray(np.asarray(tensors[name], dtype='<f4'))
        encoded = name.encode('utf-8')
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f'tensor name too long: {name[:40]}...')
        if array.ndim > 0xFF:
            raise CheckpointError(f'{name}: rank {array.ndim} not representable')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}Q', *array.shape))
        chunks.append(array.tobytes())
    return b''.join(chunks)


def decode_tensors(blob: bytes) -> Dict[str, np.ndarray]:
    """Inverse of encode_tensors; every array comes back as float32."""
    if blob[:4] != MAGIC:
        raise CheckpointError('not a PTTS checkpoint (bad magic)')
    try:
        version, count = struct.unpack_from('<II', blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f'unsupported checkpoint version {version}')
        offset = 12
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (rank,) = struct.unpack_from('<B', blob, offset)
            offset += 1
            shape = struct.unpack_from(f'<{rank}Q', blob, offset)
            offset += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            payload = blob[offset:offset + 4 * size]
            if len(payload) != 4 * size:
                raise CheckpointError(f'{name}: truncated payload')
            tensors[name] = np.frombuffer(payload, dtype='<f4').reshape(shape).astype(np.float32)
            offset += 4 * size
    except struct.error as e:
        raise CheckpointError(f'truncated checkpoint: {e}') from e
    if offset != len(blob):
        raise CheckpointError(f'{len(blob) - offset} trailing bytes after the last tensor')
    return tensors


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray],
                    meta: Optional[Dict] = None) -> Path:
    """
    Write ``tensors`` to ``path`` and ``meta`` to its JSON sidecar.

    Returns:
        Path of the binary file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + '\n',
                                      encoding='utf-8')
    logger.info('Saved %d tensors to %s', len(tensors), path)
    return path


def load_checkpoint(path: Union[str, Path], stage: str = '') -> Tuple[Dict[str, np.ndarray], Dict]:
    """
    Read a checkpoint and its sidecar.

    Args:
        path: Binary checkpoint path
        stage: Training stage that produces this file, for the missing-file error

    Returns:
        (tensors, meta); meta is {} when there is no sidecar
    """
    path = Path(path)
    if not path.exists():
        hint = f" (run 'ptts.py train --stage {stage}' first)" if stage else ''
        raise DependencyError(f'missing checkpoint: {path}{hint}', stage=stage)
    tensors = decode_tensors(path.read_bytes())
    meta: Dict = {}
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise CheckpointError(f'{side}: invalid JSON sidecar ({e})') from e
    return tensors, meta


def save_tensor_file(path: Union[str, Path], name: str, array: np.ndarray) -> Path:
    """Single-tensor file in the checkpoint format (used for mel outputs)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors({name: array}))
    return path


def load_tensor_file(path: Union[str, Path]) -> np.ndarray:
    tensors = decode_tensors(Path(path).read_bytes())
    if len(tensors) != 1:
        raise CheckpointError(f'{path}: expected one tensor, found {len(tensors)}')
    return next(iter(tensors.values()))
