import numpy as np
import pytest

from spanhtr.checkpoint import MAGIC, Checkpoint, CheckpointError
from spanhtr.ctc import Charset
from spanhtr.data import NormStats
from spanhtr.model import build_model, reduced_config

TINY = dict(cb_channels=(4, 4, 6, 6, 8, 8), dscb_count=1, dscb_channels=8)
CHARSET = Charset(tuple("abc "))


@pytest.fixture
def ckpt():
    model = build_model("span", reduced_config(len(CHARSET), **TINY), seed=4)
    return Checkpoint.from_model(model, CHARSET, NormStats((200.0,) * 3, (40.0,) * 3),
                                 {"lr": 1e-4, "step": 7})


def test_save_load_save_byte_identical(ckpt, tmp_path):
    first = ckpt.save(tmp_path / "a.ckpt").read_bytes()
    again = Checkpoint.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt").read_bytes()
    assert first == again
    assert first.startswith(MAGIC)


def test_round_trip_restores_model(ckpt, tmp_path):
    ckpt.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    assert back.kind == "span" and back.charset == CHARSET and back.config == ckpt.config
    assert back.stats == ckpt.stats and back.metadata == {"lr": 1e-4, "step": 7}
    model = back.build()
    x = np.random.default_rng(0).normal(size=(1, 3, 64, 32)).astype(np.float32)
    np.testing.assert_array_equal(model.eval()(x).flat.data, ckpt.build().eval()(x).flat.data)


def test_header_lists_parameters(ckpt):
    head = ckpt.header()
    assert head["blank_index"] == 4
    assert [e["name"] for e in head["params"]] == list(ckpt.params)
    offsets = [e["offset"] for e in head["params"]]
    assert offsets == sorted(offsets) and offsets[0] == 0


@pytest.mark.parametrize("mutate,message", [
    (lambda b: b"NOTACKPT" + b[8:], "magic"),
    (lambda b: b[:20], "truncated"),
    (lambda b: b[:-4], "bytes"),
    (lambda b: b[:12] + b"X" + b[13:], "header"),
])
def test_corruption_detected(ckpt, mutate, message):
    with pytest.raises(CheckpointError, match=message):
        Checkpoint.from_bytes(mutate(ckpt.to_bytes()))


def test_charset_size_must_match_model():
    model = build_model("span", reduced_config(3, **TINY))
    with pytest.raises(CheckpointError):
        Checkpoint.from_model(model, CHARSET)
