import json
import struct

import numpy as np
import pytest

from pilot_tts.checkpoint import (MAGIC, decode_tensors, encode_tensors, load_checkpoint,
                                  load_tensor_file, save_checkpoint, save_tensor_file, sidecar_path)
from pilot_tts.exceptions import CheckpointError, DependencyError
from pilot_tts.layers import Linear


def test_layout_header_and_order():
    blob = encode_tensors({'b': np.zeros((2,)), 'a': np.ones((1, 3))})
    assert blob[:4] == MAGIC
    assert struct.unpack_from('<II', blob, 4) == (1, 2)
    (name_len,) = struct.unpack_from('<H', blob, 12)
    assert blob[14:14 + name_len] == b'a'


def test_decode_returns_float32_values():
    original = {'w': np.arange(6, dtype=np.float64).reshape(2, 3), 'scalar': np.array(2.5)}
    decoded = decode_tensors(encode_tensors(original))
    assert decoded['w'].dtype == np.float32
    np.testing.assert_array_equal(decoded['w'], original['w'])
    assert decoded['scalar'].shape == ()


def test_bad_magic():
    with pytest.raises(CheckpointError):
        decode_tensors(b'NOPE' + bytes(8))


def test_truncated_payload():
    blob = encode_tensors({'w': np.ones((4, 4))})
    with pytest.raises(CheckpointError):
        decode_tensors(blob[:-3])


def test_trailing_bytes():
    with pytest.raises(CheckpointError):
        decode_tensors(encode_tensors({'w': np.ones(2)}) + b'\0')


def test_save_writes_sidecar(tmp_path):
    path = save_checkpoint(tmp_path / 'ar.ptts', {'w': np.ones(3)}, {'seed': 3, 'variant': 'full'})
    tensors, meta = load_checkpoint(path)
    assert meta == {'seed': 3, 'variant': 'full'}
    assert json.loads(sidecar_path(path).read_text())['seed'] == 3
    np.testing.assert_array_equal(tensors['w'], np.ones(3))


def test_missing_checkpoint_names_stage(tmp_path):
    with pytest.raises(DependencyError) as info:
        load_checkpoint(tmp_path / 'tokenizer.ptts', stage='tokenizer')
    assert info.value.stage == 'tokenizer'
    assert '--stage tokenizer' in str(info.value)
    assert info.value.exit_code == 3


def test_module_state_round_trip(tmp_path, rng):
    layer = Linear(4, 3, rng)
    path = save_checkpoint(tmp_path / 'layer.ptts', layer.state_dict())
    fresh = Linear(4, 3, np.random.default_rng(99))
    fresh.load_state_dict(load_checkpoint(path)[0])
    np.testing.assert_array_equal(fresh.weight.data, layer.weight.data)


def test_load_state_dict_shape_mismatch(rng):
    with pytest.raises(CheckpointError):
        Linear(4, 3, rng).load_state_dict({'weight': np.zeros((3, 4)), 'bias': np.zeros(3)})


def test_tensor_file(tmp_path):
    mel = np.linspace(-1, 1, 80 * 4).reshape(4, 80).astype(np.float32)
    path = save_tensor_file(tmp_path / 'out.mel.ptts', 'mel', mel)
    np.testing.assert_array_equal(load_tensor_file(path), mel)
