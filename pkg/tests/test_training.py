import logging

import numpy as np
import pytest

from spanhtr import autodiff as ad
from spanhtr.checkpoint import Checkpoint
from spanhtr.data import SyntheticSpec, generate_synthetic
from spanhtr.training import (Adam, REGIMES, TrainRunConfig, adam_step, evaluate, get_regime,
                              read_metrics, train)

TINY = dict(cb_channels=(4, 4, 8, 8, 8, 8), dscb_count=1, dscb_channels=8)
SMALL_SPEC = SyntheticSpec(glyphs="abc", line_count=(1, 2), chars_per_line=(2, 3), glyph_scale=2,
                           char_spacing=10, line_spacing=(36, 36), margin=(25, 6), fixed_width_chars=4)


def param(values):
    return ad.Tensor(np.array(values, dtype=np.float64), requires_grad=True)


# -- Adam -------------------------------------------------------------------------

def test_adam_zero_gradient_is_fixpoint():
    p = param([1.0, -2.0])
    opt = Adam([p])
    adam_step([p], [np.zeros(2)], opt)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude():
    p = param([0.5])
    opt = Adam([p], lr=1e-4)
    adam_step([p], [np.ones(1)], opt)
    assert p.data[0] == pytest.approx(0.5 - 1e-4, abs=1e-11)


def test_adam_order_independence():
    rng = np.random.default_rng(0)
    init = [rng.normal(size=3), rng.normal(size=(2, 2))]
    grads = [[rng.normal(size=3), rng.normal(size=(2, 2))] for _ in range(5)]
    a = [param(v) for v in init]
    b = [param(v) for v in init][::-1]
    opt_a, opt_b = Adam(a, lr=0.01), Adam(b, lr=0.01)
    for g in grads:
        adam_step(a, g, opt_a)
        adam_step(b, g[::-1], opt_b)
    for x, y in zip(a, b[::-1]):
        np.testing.assert_array_equal(x.data, y.data)


def test_adam_skips_non_finite(caplog):
    p = param([1.0])
    opt = Adam([p])
    with caplog.at_level(logging.WARNING):
        assert adam_step([p], [np.array([np.nan])], opt) is False
    assert p.data[0] == 1.0 and opt.state.skipped_steps == 1 and opt.state.step == 0
    assert "non-finite" in caplog.text


def test_adam_clip_norm():
    p = param([0.0, 0.0])
    opt = Adam([p], lr=1.0, clip_norm=1.0)
    p.grad = np.array([30.0, 40.0])
    opt.step()
    # clipping rescales uniformly, so the bias-corrected ratio stays sign(g)
    np.testing.assert_allclose(p.data, [-1.0, -1.0], rtol=1e-6)


# -- regimes ------------------------------------------------------------------------

def test_regime_names_and_aliases():
    assert set(REGIMES) == {"pool-line-r", "span-line-ra", "span-scratch", "span-pt-r", "span-pt-ra"}
    assert get_regime("SPAN-PT-R&A").name == "span-pt-ra"
    with pytest.raises(ValueError, match="span-scratch"):
        get_regime("bogus")


def test_pt_regime_requires_init():
    with pytest.raises(ValueError, match="init"):
        TrainRunConfig(regime="span-pt-r", data="x", out_dir="y")


def test_default_batch_sizes():
    assert TrainRunConfig(regime="pool-line-r", data="x", out_dir="y").batch_size == 16
    assert TrainRunConfig(regime="span-scratch", data="x", out_dir="y").batch_size == 4


# -- training loop ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    train_m = generate_synthetic(SMALL_SPEC, 4, root / "train", seed=1)
    line_spec = SyntheticSpec(**{**SMALL_SPEC.to_dict(), "line_count": [1, 1]})
    lines_m = generate_synthetic(line_spec, 4, root / "lines", seed=2)
    return root, train_m, lines_m


def run(tiny_data, name, **kw):
    root, train_m, _ = tiny_data
    cfg = dict(regime="span-scratch", data=str(train_m), out_dir=str(root / name), max_steps=6,
               eval_every=0, augment=False, lr=1e-3, model=TINY, charset="abc ")
    cfg.update(kw)
    return train(TrainRunConfig(**cfg))


def test_same_seed_same_losses(tiny_data):
    a = run(tiny_data, "det_a", augment=True)
    b = run(tiny_data, "det_b", augment=True)
    assert a.losses == b.losses
    assert a.last.read_bytes() == b.last.read_bytes()


def test_overfit_loss_decreases(tiny_data):
    res = run(tiny_data, "overfit", max_steps=50, model={**TINY, "dropout_elem_p": 0.0,
                                                         "dropout_chan_p": 0.0})
    assert min(res.losses[-5:]) < res.losses[0]


def test_metrics_log_and_best_checkpoint(tiny_data):
    root, train_m, _ = tiny_data
    res = run(tiny_data, "logged", val_data=str(train_m), eval_every=3)
    rows = read_metrics(res.metrics)
    assert [r["step"] for r in rows if r["ctc_loss"] != ""] == [str(i) for i in range(1, 7)]
    assert [r["step"] for r in rows if r["val_cer"] != ""] == ["3", "6"]
    assert res.best.exists() and res.last.exists()
    assert Checkpoint.load(res.last).metadata["step"] == 6


def test_pretrained_transfer_with_zero_steps(tiny_data):
    root, train_m, lines_m = tiny_data
    pre = run(tiny_data, "pool", regime="pool-line-r", data=str(lines_m), max_steps=3)
    source = Checkpoint.load(pre.last)
    res = run(tiny_data, "pt0", regime="span-pt-r", init=str(pre.last), max_steps=0)
    assert res.transfer.fresh == []
    target = Checkpoint.load(res.last)
    assert target.kind == "span"
    assert all(np.array_equal(source.params[k], target.params[k]) for k in source.params)


def test_pretrained_charset_mismatch(tiny_data, tmp_path):
    root, train_m, _ = tiny_data
    other = generate_synthetic(SyntheticSpec(glyphs="xyz", line_count=(1, 1), chars_per_line=(2, 3),
                                             glyph_scale=2, char_spacing=10, margin=(25, 6),
                                             fixed_width_chars=4), 2, tmp_path / "xyz")
    pre = run(tiny_data, "pool_xyz", regime="pool-line-r", data=str(other), max_steps=1,
              charset=None)
    with pytest.raises(ValueError):
        run(tiny_data, "pt_bad", regime="span-pt-r", init=str(pre.last), max_steps=1, charset=None)


def test_evaluate_reports(tiny_data, tmp_path, caplog):
    root, train_m, _ = tiny_data
    res = run(tiny_data, "eval", max_steps=1)
    report = evaluate(res.last, train_m)
    assert report.summary()["samples"] == 4
    assert all("\n" not in s.prediction for s in report.samples)
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    with caplog.at_level(logging.WARNING):
        assert evaluate(res.last, empty).summary()["samples"] == 0
    assert "empty" in caplog.text


@pytest.mark.parametrize("budget", ["max_cpu_time", "max_wall_time"])
def test_time_budget_stops_before_first_step(tiny_data, budget):
    res = run(tiny_data, f"budget_{budget}", **{budget: 0.0})
    assert res.losses == []
    assert Checkpoint.load(res.last).metadata["step"] == 0
