import struct

import numpy as np
import pytest

from ffreedg.checkpoint import (CheckpointError, dumps, load_benchmark, load_params, loads,
                                save_benchmark, save_params)
from ffreedg.model import init_params
from ffreedg.synthdata import make_benchmark


def test_params_round_trip_bit_identical(tmp_path):
    p = init_params(3)
    path = tmp_path / "w.frzn"
    save_params(path, p)
    q = load_params(path)
    assert q.equals(p)
    assert path.read_bytes() == dumps(q.as_dict())


def test_layout_header():
    raw = dumps({"a": np.arange(6.0).reshape(2, 3)})
    assert raw[:4] == b"FRZN"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<I", raw[12:16]) == (1,)
    assert raw[16:17] == b"a"
    assert struct.unpack("<IQQ", raw[17:37]) == (2, 2, 3)
    assert np.frombuffer(raw[37:], "<f8").tolist() == list(range(6))


def test_special_values_survive():
    a = {"x": np.array([np.inf, -0.0, 5e-324, np.nan]), "scalar": np.array(2.5)}
    b = loads(dumps(a))
    assert b["x"].tobytes() == a["x"].tobytes() and b["scalar"].shape == ()


@pytest.mark.parametrize("mutate, msg", [
    (lambda r: b"XXXX" + r[4:], "magic"),
    (lambda r: r[:4] + struct.pack("<I", 2) + r[8:], "version"),
    (lambda r: r[:-3], "truncated"),
    (lambda r: r + b"\0", "trailing"),
])
def test_corrupt_containers(mutate, msg):
    raw = dumps(init_params(0).as_dict())
    with pytest.raises(CheckpointError, match=msg):
        loads(mutate(raw))


def test_missing_array_rejected(tmp_path):
    d = init_params(0).as_dict()
    del d["T"]
    path = tmp_path / "bad.frzn"
    path.write_bytes(dumps(d))
    with pytest.raises(KeyError):
        load_params(path)


def test_benchmark_dump_round_trip(tmp_path):
    b = make_benchmark(2, n_source=5, n_eval=3, n_clients=3, imgs_per_client=4, h=4, w=4)
    save_benchmark(tmp_path / "d.frzn", b)
    c = load_benchmark(tmp_path / "d.frzn")
    assert (c.scenario, c.source_domain, c.eval_domain) == (b.scenario, b.source_domain, b.eval_domain)
    assert c.domains == b.domains
    for x, y in zip(b.source + b.eval_set, c.source + c.eval_set):
        assert np.array_equal(x.pixels, y.pixels) and np.array_equal(x.labels, y.labels)
    for x, y in zip(b.clients, c.clients):
        assert x.client_id == y.client_id and x.domains == y.domains
        assert all(np.array_equal(i.pixels, j.pixels) and j.labels is None for i, j in zip(x.images, y.images))
        assert all(np.array_equal(i, j) for i, j in zip(x.hidden_labels, y.hidden_labels))
