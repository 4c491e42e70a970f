import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from compactvae.checkpoint import (
    Checkpoint,
    export_raw,
    load_state,
    optimizer_from_arrays,
    optimizer_to_arrays,
    read_raw,
    state_to_arrays,
)
from compactvae.errors import DataError


def sample_ckpt():
    rng = np.random.default_rng(0)
    arrays = {"model.w": rng.normal(size=(3, 4)).astype(np.float32),
              "model.b": np.arange(4, dtype=np.int64),
              "rng.x": rng.integers(0, 255, 10).astype(np.uint8)}
    return Checkpoint(arrays, {"stage": "ae", "config": {"a": 1}, "step": 7})


def test_round_trip_byte_identical(tmp_path):
    ck = sample_ckpt()
    h = ck.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    assert back.content_hash() == h
    assert back.meta == ck.meta and back.stage == "ae"
    for k in ck.arrays:
        assert back.arrays[k].dtype == ck.arrays[k].dtype
        assert np.array_equal(back.arrays[k], ck.arrays[k])
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_hash_tracks_content():
    a, b = sample_ckpt(), sample_ckpt()
    assert a.content_hash() == b.content_hash()
    b.arrays["model.w"][0, 0] += 1e-3
    assert a.content_hash() != b.content_hash()
    c = sample_ckpt()
    c.meta["config"] = {"a": 2}
    assert a.content_hash() != c.content_hash()
    # metadata outside the config does not enter the hash
    d = sample_ckpt()
    d.meta["step"] = 8
    assert a.content_hash() == d.content_hash()


def test_big_endian_input_normalized():
    a = sample_ckpt()
    b = sample_ckpt()
    b.arrays["model.w"] = b.arrays["model.w"].astype(">f4")
    assert a.content_hash() == b.content_hash()
    assert a.to_bytes() == b.to_bytes()


@settings(max_examples=40, deadline=None)
@given(pos=st.integers(0, 10**6), delta=st.integers(1, 255))
def test_any_byte_flip_detected(pos, delta):
    data = bytearray(sample_ckpt().to_bytes())
    pos %= len(data)
    data[pos] = (data[pos] + delta) % 256
    with pytest.raises(DataError):
        Checkpoint.from_bytes(bytes(data))


def test_truncated_and_bad_magic(tmp_path):
    data = sample_ckpt().to_bytes()
    with pytest.raises(DataError):
        Checkpoint.from_bytes(data[:-5])
    with pytest.raises(DataError):
        Checkpoint.from_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(DataError):
        Checkpoint.load(tmp_path / "missing.ckpt")


def test_subset():
    assert set(sample_ckpt().subset("model.")) == {"w", "b"}


def test_module_state_round_trip():
    torch.manual_seed(0)
    a, b = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
    load_state(b, Checkpoint(state_to_arrays(a)).subset("model."))
    assert torch.equal(a.weight, b.weight)
    with pytest.raises(DataError):
        load_state(torch.nn.Linear(3, 2), {"weight": np.zeros((2, 3), np.float32)})


def test_optimizer_round_trip():
    torch.manual_seed(0)
    lin = torch.nn.Linear(3, 2)
    opt = torch.optim.AdamW(lin.parameters(), lr=0.1)
    lin(torch.randn(4, 3)).sum().backward()
    opt.step()
    arrays = optimizer_to_arrays(opt, ["w", "b"])
    assert set(arrays) == {f"optim.{n}.{k}" for n in "wb" for k in ("step", "exp_avg", "exp_avg_sq")}
    opt2 = torch.optim.AdamW(lin.parameters(), lr=0.1)
    optimizer_from_arrays(opt2, ["w", "b"], arrays)
    assert torch.equal(opt2.state[lin.weight]["exp_avg"], opt.state[lin.weight]["exp_avg"])


def test_raw_export(tmp_path):
    a = np.random.default_rng(0).normal(size=(3, 4, 5))
    sidecar = export_raw(tmp_path / "x.raw", a, kind="triplane")
    assert (tmp_path / "x.raw").stat().st_size == a.size * 4
    back, meta = read_raw(tmp_path / "x.raw")
    assert meta["shape"] == [3, 4, 5] and meta["kind"] == "triplane" and meta["byteorder"] == "little"
    assert np.array_equal(back, a.astype(np.float32))
    assert sidecar.name == "x.raw.json"
