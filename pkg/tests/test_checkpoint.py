import struct

import numpy as np
import pytest

from lengen_se import checkpoint
from lengen_se import model as M
from lengen_se.posemb import SCHEMES


@pytest.mark.parametrize("scheme", SCHEMES)
def test_round_trip_bit_identical(tmp_path, scheme):
    config = M.ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, n_bins=9, pe_scheme=scheme, pe_max_len=6)
    params = M.init_params(config, 3)
    path = tmp_path / "m.ckpt"
    checkpoint.save_model(path, config, params, {"step": 7})
    loaded_config, loaded, meta = checkpoint.load_model(path)
    assert loaded_config == config and meta == {"step": 7}
    assert list(loaded) == list(M.param_shapes(config))
    for k in params:
        assert loaded[k].tobytes() == params[k].tobytes()
    again = tmp_path / "again.ckpt"
    checkpoint.save_model(again, loaded_config, loaded, meta)
    assert again.read_bytes() == path.read_bytes()


def test_header_layout(tmp_path):
    config = M.ModelConfig(n_layers=1, n_heads=1, d_model=2, d_ff=2, n_bins=3)
    params = M.init_params(config, 0)
    path = tmp_path / "m.ckpt"
    checkpoint.save_model(path, config, params)
    raw = path.read_bytes()
    assert raw[:8] == b"LGSECKPT"
    assert struct.unpack_from("<I", raw, 8) == (1,)
    (cfg_len,) = struct.unpack_from("<I", raw, 12)
    assert b'"d_model":2' in raw[16 : 16 + cfg_len]
    # first tensor after meta and count is embed.ln.gain, 3 float64 ones
    pos = 16 + cfg_len
    (meta_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4 + meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    assert count == len(params)
    pos += 4
    (name_len,) = struct.unpack_from("<H", raw, pos)
    assert raw[pos + 2 : pos + 2 + name_len] == b"embed.ln.gain"
    pos += 2 + name_len
    assert struct.unpack_from("<BI", raw, pos) == (1, 3)
    assert struct.unpack_from("<3d", raw, pos + 5) == (1.0, 1.0, 1.0)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.read(path)


def test_truncated(tmp_path):
    config = M.ModelConfig(n_layers=1, n_heads=1, d_model=2, d_ff=2, n_bins=3)
    path = tmp_path / "m.ckpt"
    checkpoint.save_model(path, config, M.init_params(config, 0))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(Exception):
        checkpoint.load_model(path)


def test_shape_mismatch_rejected(tmp_path):
    config = M.ModelConfig(n_layers=1, n_heads=1, d_model=2, d_ff=2, n_bins=3)
    params = M.init_params(config, 0)
    params["head.fc.bias"] = np.zeros(4)
    with pytest.raises(ValueError):
        checkpoint.save_model(tmp_path / "m.ckpt", config, params)
