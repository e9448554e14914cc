import numpy as np
import pytest

from cgls.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from cgls.errors import CorruptHeaderError, TruncatedBlobError, VersionMismatchError
from cgls.growth import FULL_TUNING, expand_copy_stack, expand_random, freeze_mask
from cgls.model import ModelConfig, loss_and_grad, new_model
from cgls.optim import adamw_step, init_state

from .conftest import TINY, random_batch


@pytest.fixture
def trained(tiny_params):
    st = init_state(tiny_params)
    _, g = loss_and_grad(tiny_params, random_batch(0))
    return adamw_step(tiny_params, g, st, freeze_mask(tiny_params, FULL_TUNING), {"base": 1e-3})


def test_round_trip_is_bitwise(tmp_path, trained):
    params, state = trained
    meta = {"sampler": {"seed": 1, "stream": 0, "counter": 42}, "note": "x"}
    path = save_checkpoint(tmp_path / "a.ckpt", params, state, meta)
    p2, s2, m2 = load_checkpoint(path)
    assert m2 == meta and p2.config == params.config and p2.origins == params.origins
    for k, v in params.named().items():
        assert np.array_equal(p2.named()[k], v) and p2.named()[k].dtype == v.dtype
        assert np.array_equal(s2.m[k], state.m[k]) and np.array_equal(s2.v[k], state.v[k])
    assert s2.steps == state.steps and s2.step_count == state.step_count and s2.hyper == state.hyper
    again = save_checkpoint(tmp_path / "b.ckpt", p2, s2, m2)
    assert path.read_bytes() == again.read_bytes()
    assert [f.name for f in tmp_path.iterdir() if f.name.startswith(".")] == []


def test_header_layout(tmp_path, tiny_params):
    raw = save_checkpoint(tmp_path / "c.ckpt", tiny_params).read_bytes()
    assert raw[:4] == MAGIC
    assert int.from_bytes(raw[4:8], "little") == 1


def test_truncation_is_detected(tmp_path, trained):
    path = save_checkpoint(tmp_path / "t.ckpt", *trained)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(TruncatedBlobError):
        load_checkpoint(path)


def test_corrupt_and_version_errors(tmp_path, tiny_params):
    raw = save_checkpoint(tmp_path / "v.ckpt", tiny_params).read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptHeaderError):
        load_checkpoint(tmp_path / "bad_magic")
    (tmp_path / "bad_version").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "bad_version")
    (tmp_path / "bad_json").write_bytes(raw[:16] + b"#" + raw[17:])
    with pytest.raises(CorruptHeaderError):
        load_checkpoint(tmp_path / "bad_json")


def test_origins_recorded_for_expanded_model(tmp_path):
    p = new_model(ModelConfig(**{**TINY, "depth": 4}))
    p = expand_copy_stack(expand_random(p, 8, 0), 2)
    q, state, _ = load_checkpoint(save_checkpoint(tmp_path / "o.ckpt", p))
    assert state is None
    assert q.config.depth == 10
    assert [str(o) for o in q.origins] == (["transferred"] * 8 + ["copied_from(6)", "copied_from(7)"])
