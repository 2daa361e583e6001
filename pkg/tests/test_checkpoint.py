import json

import numpy as np
import pytest

from simplihumon.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from simplihumon.model import init_params


def test_round_trip_and_manifest(tmp_path, tiny_cfg):
    params = init_params(tiny_cfg, 3)
    path = save_checkpoint(tmp_path / "ck", params, tiny_cfg, {"epoch": 2})
    manifest = json.loads(path.read_text())
    assert manifest["version"] == FORMAT_VERSION
    assert manifest["blob"] == "ck.bin"
    entry = manifest["params"][0]
    assert set(entry) == {"name", "shape", "dtype", "offset", "nbytes"} and entry["dtype"] == "<f8"
    loaded, cfg, meta = load_checkpoint(path)
    assert cfg == tiny_cfg and meta == {"epoch": 2}
    for k, v in params.items():
        assert np.array_equal(loaded[k].data, v.data)


def test_byte_identical(tmp_path, tiny_cfg):
    params = init_params(tiny_cfg, 3)
    save_checkpoint(tmp_path / "a", params, tiny_cfg)
    save_checkpoint(tmp_path / "b", params, tiny_cfg)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    a = json.loads((tmp_path / "a.json").read_text())
    b = json.loads((tmp_path / "b.json").read_text())
    a.pop("blob"), b.pop("blob")
    assert a == b


def test_float32_storage(tmp_path, tiny_cfg):
    params = init_params(tiny_cfg, 3)
    save_checkpoint(tmp_path / "c", params, tiny_cfg, dtype="<f4")
    loaded, _, _ = load_checkpoint(tmp_path / "c.json")
    k = "query_bank"
    np.testing.assert_allclose(loaded[k].data, params[k].data, rtol=1e-6)


def test_rejects_wrong_version(tmp_path, tiny_cfg):
    path = save_checkpoint(tmp_path / "d", init_params(tiny_cfg), tiny_cfg)
    m = json.loads(path.read_text())
    m["version"] = "other"
    path.write_text(json.dumps(m))
    with pytest.raises(ValueError):
        load_checkpoint(path)
