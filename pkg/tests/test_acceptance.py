"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The learning criteria (5, 6, 10) share one module-scoped set of training
runs, about an hour of single-core CPU in total. Run just this file with

    pytest tests/test_acceptance.py -v

and the per-criterion lines are printed in the terminal summary.
"""
import itertools
import math
import time

import numpy as np
import pytest

from spanhtr import autodiff as ad
from spanhtr import cli
from spanhtr.autodiff import Tensor
from spanhtr.checkpoint import Checkpoint
from spanhtr.ctc import best_path_decode, ctc_loss, ctc_sample
from spanhtr.data import (EXCLUSIVE, TECHNIQUES, SyntheticSpec, draw_plan, generate_synthetic,
                          load_image, load_manifest, preprocess, read_manifest, write_manifest)
from spanhtr.metrics import EvalReport, cer, levenshtein, wer, words
from spanhtr.model import (HEIGHT_REDUCTION, ModelConfig, build_model, collapse_rows,
                           parameter_census, parameter_count, reduced_config, uncollapse_rows)
from spanhtr.training import TrainRunConfig, evaluate, predict_lattice, train
from acceptance_log import record
from oracles import (brute_force_ctc_prob, central_difference, edit_distance_table, rel_error,
                     smooth_central_difference)

F64 = np.float64
TINY = dict(cb_channels=(4, 4, 6, 6, 8, 8), dscb_count=1, dscb_channels=8)

# desk-scale learning setup
CHARSET = "abcdefghi "
TRAIN_COUNT, TEST_COUNT = 500, 50
CPU_BUDGET_S = 30 * 60
LINE_COUNT, LINE_STEPS = 2000, 400
LR = 1e-3
# regularization buys nothing inside a 30-minute budget; see the ledger
MODEL = dict(cb_channels=(16, 32, 64, 128, 128, 128), dscb_count=1, dscb_channels=128,
             dropout_elem_p=0.0, dropout_chan_p=0.0)


def t64(arr):
    return Tensor(np.asarray(arr, dtype=F64), requires_grad=True)


# -- 1 ------------------------------------------------------------------------------

def test_c1_ctc_matches_path_enumeration():
    rng = np.random.default_rng(101)
    start = time.monotonic()
    worst = 0.0
    for _ in range(1000):
        n_sym = int(rng.integers(1, 4))
        T = int(rng.integers(1, 7))
        label = list(rng.integers(0, n_sym, size=int(rng.integers(0, 4))))
        probs = rng.random((T, n_sym + 1))
        probs /= probs.sum(-1, keepdims=True)
        nll, _ = ctc_sample(np.log(probs), label, n_sym)
        got = 0.0 if math.isinf(nll) else math.exp(-nll)
        worst = max(worst, abs(got - brute_force_ctc_prob(probs, label, n_sym)))
    elapsed = time.monotonic() - start
    ok = worst < 1e-10 and elapsed < 60
    record(1, ok, f"1000 instances, max |diff| {worst:.2e} (< 1e-10), {elapsed:.1f}s (< 60s)")
    assert ok


# -- 2 ------------------------------------------------------------------------------

def _primitive_errors(rng):
    errors = {}

    def check(name, fn, tensors):
        out = fn()
        w = rng.normal(size=out.shape)
        for t in tensors:
            t.grad = None
        (out * Tensor(w)).sum().backward()
        worst = 0.0
        for t in tensors:
            numeric = central_difference(lambda: float((fn().data * w).sum()), t.data, 1e-6)
            worst = max(worst, rel_error(t.grad, numeric))
        errors[name] = worst

    logits = t64(rng.normal(size=(2, 7, 4)))
    labels = [[0, 2], [1, 1, 0]]
    check("ctc", lambda: ctc_loss(ad.log_softmax_lastdim(logits), labels), [logits])
    x, w, b = t64(rng.normal(size=(2, 3, 7, 6))), t64(rng.normal(size=(4, 3, 3, 3))), t64(rng.normal(size=4))
    check("conv2d", lambda: ad.conv2d(x, w, b, (2, 1), (1, 1)), [x, w, b])
    dw, pw, pb = t64(rng.normal(size=(3, 1, 3, 3))), t64(rng.normal(size=(5, 3, 1, 1))), t64(rng.normal(size=5))
    check("separable", lambda: ad.depthwise_separable_conv(x, dw, pw, pb), [x, dw, pw, pb])
    g, beta = t64(rng.normal(size=3)), t64(rng.normal(size=3))
    check("instance_norm", lambda: ad.instance_norm(x, g, beta), [x, g, beta])
    check("vertical_max_pool", lambda: ad.adaptive_max_pool_vertical(x), [x])
    return errors


def _end_to_end_error(rng):
    model = build_model("span", reduced_config(5, **TINY), seed=3, dtype=F64).eval()
    for name, p in model.named_parameters():
        if name.endswith("bias"):  # keep pre-activations off the ReLU kink
            p.data += rng.normal(scale=0.1, size=p.shape)
    x = Tensor(rng.normal(size=(1, 3, 64, 64)))

    def loss():
        return ctc_loss(model(x).log_probs(), [[0, 3, 1]])

    model.zero_grad()
    loss().backward()
    worst = 0.0
    for _, p in model.named_parameters():
        coords, numeric = smooth_central_difference(lambda: float(loss().data), p.data, 5, rng)
        worst = max(worst, rel_error(p.grad.reshape(-1)[coords], numeric))
    return worst


def test_c2_gradient_suite():
    rng = np.random.default_rng(202)
    start = time.monotonic()
    errors = _primitive_errors(rng)
    e2e = _end_to_end_error(rng)
    elapsed = time.monotonic() - start
    ok = max(errors.values()) < 1e-5 and e2e < 1e-4 and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    record(2, ok, f"{detail} (< 1e-5); end-to-end {e2e:.1e} (< 1e-4); {elapsed:.0f}s (< 300s)")
    assert ok


# -- 3 ------------------------------------------------------------------------------

def test_c3_shape_contract():
    model = build_model("span", ModelConfig(charset_size=100)).eval()
    with ad.no_grad():
        feats = model.encoder(Tensor(np.zeros((1, 3, 480, 320), dtype=np.float32)))
        lat = model.decoder(feats)
        flat = collapse_rows(lat)
    ok = feats.shape == (1, 512, 15, 40) and lat.shape == (1, 101, 15, 40) and flat.shape[1] == 600
    rng = np.random.default_rng(303)
    bad = []
    for _ in range(50):
        h, w = 32 * int(rng.integers(1, 6)), 8 * int(rng.integers(1, 21))
        with ad.no_grad():
            out = model(np.zeros((1, 3, h, w), dtype=np.float32))
        if out.grid.shape != (1, 101, h // 32, w // 8) or out.flat.shape[1] != (h // 32) * (w // 8):
            bad.append((h, w))
    ok = ok and not bad
    record(3, ok, f"480x320 -> features {feats.shape}, grid {lat.shape}, flat {flat.shape[1]}; "
                  f"{50 - len(bad)}/50 random sizes exact")
    assert ok


# -- 4 ------------------------------------------------------------------------------

def test_c4_parameter_census():
    cfg = ModelConfig(charset_size=100)
    census = parameter_census(build_model("span", cfg))
    closed = parameter_count(cfg)
    dev = (census - 19.2e6) / 19.2e6
    ok = census == closed and abs(dev) <= 0.15
    record(4, ok, f"census {census:,} == closed form {closed:,}; {dev:+.1%} vs 19.2M (within 15%)")
    assert ok


# -- 5, 6, 10: trained models -------------------------------------------------------------

@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    spec = SyntheticSpec(glyphs=CHARSET)  # 2-4 lines of 5-8 symbols
    train_m = generate_synthetic(spec, TRAIN_COUNT, root / "train", seed=500)
    test_m = generate_synthetic(spec, TEST_COUNT, root / "test", seed=501)
    lines_m = generate_synthetic(spec, LINE_COUNT, root / "lines", seed=502, lines=True)
    common = dict(augment=False, lr=LR, model=MODEL, charset=CHARSET, eval_every=0, seed=0)

    scratch_cpu = time.process_time()
    scratch = train(TrainRunConfig(regime="span-scratch", data=str(train_m), out_dir=str(root / "scratch"),
                                   max_steps=10**6, max_cpu_time=CPU_BUDGET_S, **common))
    scratch_cpu = time.process_time() - scratch_cpu
    steps = len(scratch.losses)

    pool = train(TrainRunConfig(regime="pool-line-r", data=str(lines_m), out_dir=str(root / "pool"),
                                max_steps=LINE_STEPS, **common))
    pt = train(TrainRunConfig(regime="span-pt-r", data=str(train_m), out_dir=str(root / "pt"),
                              init=str(pool.last), max_steps=steps, **common))
    return dict(root=root, spec=spec, test=test_m, scratch=scratch, pt=pt, steps=steps,
                scratch_cpu=scratch_cpu,
                scratch_report=evaluate(scratch.last, test_m), pt_report=evaluate(pt.last, test_m))


def test_c5_desk_scale_learning(runs):
    s_cer, p_cer = runs["scratch_report"].cer, runs["pt_report"].cer
    ok_scratch = s_cer <= 0.05 and runs["scratch_cpu"] <= CPU_BUDGET_S * 1.02
    ok_order = p_cer <= s_cer
    record(5, ok_scratch and ok_order,
           f"SPAN-Scratch test CER {s_cer:.2%} (<= 5%) after {runs['steps']} steps, "
           f"{runs['scratch_cpu'] / 60:.1f} CPU-min; SPAN-PT-R {p_cer:.2%} at equal steps "
           f"({'<=' if ok_order else '>'} scratch)")
    assert ok_scratch and ok_order


def _lattice_rows_with_ink(raw: np.ndarray) -> set[int]:
    # raw rows map to lattice rows through the 2x downscale and the 32-row reduction
    ink = np.nonzero((raw < 128).any(axis=1))[0]
    return {int(r) // (2 * HEIGHT_REDUCTION) for r in ink}


def test_c6_blank_rows_between_lines(runs):
    spec3 = SyntheticSpec(**{**runs["spec"].to_dict(), "line_count": [3, 3]})
    manifest = generate_synthetic(spec3, 20, runs["root"] / "three", seed=600)
    ckpt = Checkpoint.load(runs["scratch"].last)
    model = ckpt.build()
    blank = ckpt.charset.blank_index
    gap_cells = gap_blank = 0
    exact, mismatched = 0, 0
    for path, text in load_manifest(manifest):
        raw = load_image(path)
        lattice = predict_lattice(model, preprocess(raw, ckpt.stats))
        classes = np.argmax(lattice.grid.data[0], axis=0)
        text_rows = _lattice_rows_with_ink(raw)
        gaps = [r for r in range(min(text_rows), max(text_rows)) if r not in text_rows]
        assert len(gaps) == 2, "each gap between the three lines should span a lattice row"
        gap_cells += classes[gaps].size
        gap_blank += int((classes[gaps] == blank).sum())
        pred = best_path_decode(lattice, ckpt.charset)[0]
        if cer(text, pred) == 0:
            exact += 1
            mismatched += pred != text
    frac = gap_blank / gap_cells
    ok = frac >= 0.9 and mismatched == 0
    record(6, ok, f"gap rows {frac:.1%} blank-argmax (>= 90%) over 20 3-line images; "
                  f"{exact} CER-0 samples, {mismatched} differ from the line-break-free text")
    assert ok


def test_c10_visualize_matches_predict(runs, tmp_path, capsys):
    ckpt = str(runs["scratch"].last)
    stats = Checkpoint.load(ckpt).stats
    mismatches, bad_dims = [], []
    records = load_manifest(runs["test"])[:20]
    for i, (path, _) in enumerate(records):
        assert cli.main(["predict", "--ckpt", ckpt, "--image", str(path), "--verbosity", "0"]) == 0
        predicted = capsys.readouterr().out.rstrip("\n")
        out = tmp_path / f"v{i}.png"
        assert cli.main(["visualize", "--ckpt", ckpt, "--image", str(path), "--out", str(out),
                         "--verbosity", "0"]) == 0
        capsys.readouterr()
        rows = (tmp_path / f"v{i}.rows.txt").read_text(encoding="utf-8").splitlines()
        if "".join(rows) != predicted:
            mismatches.append(path.name)
        overlay = load_image(out)
        if overlay.shape[:2] != preprocess(load_image(path), stats).shape[1:]:
            bad_dims.append(path.name)
    ok = not mismatches and not bad_dims
    record(10, ok, f"{len(records) - len(mismatches)}/{len(records)} row texts equal predict; "
                   f"{len(records) - len(bad_dims)}/{len(records)} overlays match input size")
    assert ok


# -- 7 ------------------------------------------------------------------------------

def test_c7_metrics_oracle():
    rng = np.random.default_rng(707)
    alphabet = list("ab c")
    bad = 0
    for _ in range(1000):
        a = "".join(rng.choice(alphabet, size=int(rng.integers(1, 15))))
        b = "".join(rng.choice(alphabet, size=int(rng.integers(0, 15))))
        ref_c = edit_distance_table(a, b) / len(a)
        ref_words = words(a)
        ref_w = edit_distance_table(ref_words, words(b)) / len(ref_words) if ref_words else None
        if cer(a, b) != ref_c or (ref_w is not None and wer(a, b) != ref_w):
            bad += 1
    kitten = levenshtein("kitten", "sitting")
    rep = EvalReport()
    pairs = [("".join(rng.choice(alphabet, size=8)), "".join(rng.choice(alphabet, size=6)))
             for _ in range(20)]
    for gt, pred in pairs:
        rep.add(gt, pred)
    micro = sum(edit_distance_table(g, p) for g, p in pairs) / sum(len(g) for g, _ in pairs)
    ok = bad == 0 and kitten == 3 and rep.cer == micro
    record(7, ok, f"{1000 - bad}/1000 pairs match the reference DP; kitten/sitting -> {kitten}; "
                  f"micro-average {'holds' if rep.cer == micro else 'broken'}")
    assert ok


# -- 8 ------------------------------------------------------------------------------

def test_c8_augmentation_statistics():
    rng = np.random.default_rng(808)
    n = 100_000
    counts = dict.fromkeys(TECHNIQUES, 0)
    collisions = 0
    for _ in range(n):
        plan = draw_plan(rng)
        collisions += sum(plan.active[k] for k in EXCLUSIVE) > 1
        for k, v in plan.active.items():
            counts[k] += v
    freqs = {k: c / n for k, c in counts.items()}
    worst = max(abs(f - 0.2) for f in freqs.values())
    ok = worst <= 0.01 and collisions == 0
    record(8, ok, f"max |freq - 0.2| {worst:.4f} (<= 0.01) over {len(freqs)} techniques; "
                  f"{collisions} exclusive-group collisions")
    assert ok


# -- 9 ------------------------------------------------------------------------------

def test_c9_round_trips(tmp_path, capsys):
    model = build_model("span", reduced_config(4, **TINY), seed=9)
    from spanhtr.ctc import Charset
    ck = Checkpoint.from_model(model, Charset(tuple("abc ")), metadata={"step": 1})
    first = ck.save(tmp_path / "a.ckpt").read_bytes()
    second = Checkpoint.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt").read_bytes()
    ckpt_ok = first == second

    grid = Tensor(np.random.default_rng(9).normal(size=(2, 5, 3, 7)))
    collapse_ok = np.array_equal(uncollapse_rows(collapse_rows(grid), 3, 7).data, grid.data)

    records = [("a.png", "two\nlines"), ("b/c.png", "tab\tand \\ slash"), ("d.png", "")]
    write_manifest(tmp_path / "m.tsv", records)
    manifest_ok = read_manifest(tmp_path / "m.tsv") == records

    outs = []
    for name in ("g1", "g2"):
        assert cli.main(["--seed", "9", "generate", "--count", "3", "--out", str(tmp_path / name),
                         "--verbosity", "0"]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
    capsys.readouterr()
    generate_ok = outs[0] == outs[1] and len(outs[0]) == 5

    ok = ckpt_ok and collapse_ok and manifest_ok and generate_ok
    flags = dict(checkpoint=ckpt_ok, collapse=collapse_ok, manifest=manifest_ok, generate=generate_ok)
    record(9, ok, "; ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in flags.items()))
    assert ok
