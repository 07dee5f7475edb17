"""Train the reduced model on a small synthetic set and look at the result.

Generates 120 paragraphs, trains SPAN from scratch for a few hundred
steps (roughly 5-10 minutes on one core), reports test CER and writes an
overlay of the predicted characters. 400 steps is only where the model
starts to separate characters, so expect a CER around 0.6; the
acceptance suite trains about 1300 steps to get below 0.05.

    python demos/train_small.py [out_dir]
"""
import sys
from pathlib import Path

from spanhtr import cli
from spanhtr.data import SyntheticSpec, generate_synthetic
from spanhtr.training import TrainRunConfig, evaluate, read_metrics, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
spec = SyntheticSpec(line_count=(2, 3))
train_m = generate_synthetic(spec, 120, out / "train", seed=1)
test_m = generate_synthetic(spec, 20, out / "test", seed=2)

result = train(TrainRunConfig(
    regime="span-scratch", data=str(train_m), val_data=str(test_m), out_dir=str(out / "run"),
    max_steps=400, eval_every=100, augment=False, lr=1e-3, charset=spec.glyphs,
    model=dict(cb_channels=(16, 32, 64, 128, 128, 128), dscb_count=1, dscb_channels=128,
               dropout_elem_p=0.0, dropout_chan_p=0.0)))

for row in read_metrics(result.metrics):
    if row["val_cer"]:
        print(f"step {row['step']:>4}  val CER {float(row['val_cer']):.3f}")
report = evaluate(result.last, test_m)
print(f"test CER {report.cer:.2%}  WER {report.wer:.2%}")
for s in report.samples[:3]:
    print(f"  gt   {s.ground_truth!r}\n  pred {s.prediction!r}")

first = sorted((out / "test").glob("*.png"))[0]
cli.main(["visualize", "--ckpt", str(result.last), "--image", str(first),
          "--out", str(out / "overlay.png"), "--verbosity", "0"])
print("overlay and per-row text written next to", out / "overlay.png")
