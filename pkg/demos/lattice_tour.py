"""How a paragraph becomes one CTC sequence.

Builds an untrained tiny model, runs a synthetic three-line paragraph
through it and prints the shapes at each stage, then hand-builds a
lattice whose blank rows separate two lines and decodes it.

    python demos/lattice_tour.py
"""
import numpy as np

from spanhtr.ctc import Charset, best_path_decode, ctc_loss
from spanhtr.data import SyntheticSpec, preprocess, synthesize
from spanhtr.model import build_model, reduced_config
from spanhtr.autodiff import Tensor, log_softmax_lastdim

spec = SyntheticSpec(line_count=(3, 3))
para = synthesize(spec, np.random.default_rng(0))
image = preprocess(para.image)
print("text:", para.lines)
print("raw image", para.image.shape, "-> preprocessed", image.shape)

charset = Charset(tuple(spec.glyphs))
model = build_model("span", reduced_config(len(charset), cb_channels=(8, 8, 16, 16, 32, 32),
                                           dscb_channels=32)).eval()
lattice = model(image[None])
print("lattice grid (n, classes, rows, cols):", lattice.grid.shape)
print("flattened sequence (n, steps, classes):", lattice.flat.shape)
loss = ctc_loss(lattice.log_probs(), [charset.encode(para.transcription)])
print(f"untrained CTC loss: {float(loss.data):.2f}")

# two text rows with a blank row between them, read top to bottom; the blank
# row keeps the b that ends line one apart from the b that starts line two
ab = Charset(("a", "b", " "))
B = ab.blank_index
rows = [[0, 0, B, 1],
        [B, B, B, B],
        [1, B, 2, 0]]
scores = np.full((1, 12, ab.num_classes), -10.0)
for t, k in enumerate(np.array(rows).ravel()):
    scores[0, t, k] = 0.0
print("hand-made lattice decodes to:", repr(best_path_decode(scores, ab)[0]))
probs = log_softmax_lastdim(Tensor(scores))
print(f"its CTC loss for 'abb a': {float(ctc_loss(probs, [ab.encode('abb a')]).data):.4f}")
