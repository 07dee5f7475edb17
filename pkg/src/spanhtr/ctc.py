"""Connectionist temporal classification: loss, label collapse, best-path decoding.

The blank class is always the last one (index ``N`` for a charset of ``N``
symbols). All dynamic programming runs in log space in float64.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, _make

logger = logging.getLogger(__name__)

LINE_BREAKS = "\r\n\v\f\x1c\x1d\x1e\x85\u2028\u2029"


class InfeasibleAlignmentWarning(RuntimeWarning):
    """A label needs more time steps than the prediction sequence offers."""


@dataclass(frozen=True)
class Charset:
    """Ordered symbol set. Class ``len(symbols)`` is the CTC blank."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(set(symbols)) != len(symbols):
            dupes = sorted({s for s in symbols if symbols.count(s) > 1})
            raise ValueError(f"duplicate charset symbols: {dupes}")
        for s in symbols:
            if len(s) != 1:
                raise ValueError(f"charset symbols must be single characters, got {s!r}")
            if s in LINE_BREAKS:
                raise ValueError("line-break characters cannot be charset symbols")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(symbols)})

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Charset":
        return cls(tuple(sorted(set("".join(texts)))))

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, ch) -> bool:
        return ch in self._index

    @property
    def blank_index(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        return len(self.symbols) + 1

    def unknown(self, text: str) -> list[str]:
        return sorted({ch for ch in text if ch not in self._index})

    def encode(self, text: str) -> list[int]:
        missing = self.unknown(text)
        if missing:
            raise ValueError(f"characters outside the charset: {missing}")
        return [self._index[ch] for ch in text]

    def decode(self, indices: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in indices)


# ---------------------------------------------------------------------------
# collapse and decoding
# ---------------------------------------------------------------------------

def collapse_indices(path: Sequence[int], blank: int) -> list[int]:
    """Merge runs of repeated classes, then drop blanks."""
    out = []
    prev = None
    for k in path:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def collapse_alignment(path: Sequence[int], charset: Charset) -> str:
    blank = charset.blank_index
    if any(int(k) > blank or int(k) < 0 for k in path):
        raise ValueError(f"path contains a class outside 0..{blank}")
    return charset.decode(collapse_indices(path, blank))


def _scores(lattice) -> np.ndarray:
    if isinstance(lattice, Tensor):
        return lattice.data
    if isinstance(lattice, (np.ndarray, list, tuple)):
        return np.asarray(lattice)
    flat = getattr(lattice, "flat", None)
    if flat is not None:
        return flat.data
    return np.asarray(lattice)


def best_path_decode(lattice, charset: Charset, valid_lengths=None):
    """Greedy decoding on the row-concatenated sequence.

    Accepts a :class:`~spanhtr.model.PredictionLattice`, a tensor or an
    array of shape (T, classes) or (n, T, classes); logits and
    log-probabilities give identical results. Ties go to the lowest class
    index. Returns a string, or a list of strings for batched input.
    """
    scores = _scores(lattice)
    if valid_lengths is None:
        valid_lengths = getattr(lattice, "valid_lengths", None)
    if scores.ndim == 2:
        t = scores.shape[0] if not valid_lengths else int(np.atleast_1d(valid_lengths)[0])
        return collapse_alignment(np.argmax(scores[:t], axis=-1), charset)
    n = scores.shape[0]
    lengths = valid_lengths if valid_lengths else [scores.shape[1]] * n
    return [collapse_alignment(np.argmax(scores[i, : lengths[i]], axis=-1), charset)
            for i in range(n)]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def extend_label(label: Sequence[int], blank: int) -> np.ndarray:
    """Interleave blanks: [b, l1, b, l2, ..., b], length 2L + 1."""
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def min_steps(label: Sequence[int]) -> int:
    """Shortest sequence that can emit ``label`` (repeats need a blank between)."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _lse(*arrays: np.ndarray) -> np.ndarray:
    stacked = np.stack(arrays)
    m = stacked.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(np.exp(stacked - safe).sum(axis=0)), -np.inf)


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    allowed = np.zeros(len(ext), dtype=bool)
    allowed[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allowed


def ctc_alpha(log_probs: np.ndarray, label: Sequence[int], blank: int) -> tuple[float, np.ndarray]:
    """Forward variables; returns (log P(label), log alpha of shape (T, 2L+1))."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T = lp.shape[0]
    ext = extend_label(label, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    neg = np.full(2, -np.inf)
    for t in range(1, T):
        prev = alpha[t - 1]
        shift1 = np.concatenate((neg[:1], prev[:-1]))
        shift2 = np.where(skip, np.concatenate((neg, prev))[:S], -np.inf)
        alpha[t] = _lse(prev, shift1, shift2) + lp[t, ext]
    ends = alpha[T - 1, S - 2 :] if S > 1 else alpha[T - 1, :1]
    return float(_lse(*ends)), alpha


def ctc_beta(log_probs: np.ndarray, label: Sequence[int], blank: int) -> np.ndarray:
    """Backward variables excluding the emission at step t, shape (T, 2L+1)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T = lp.shape[0]
    ext = extend_label(label, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    beta = np.full((T, S), -np.inf)
    beta[T - 1, max(S - 2, 0) :] = 0.0
    neg = np.full(2, -np.inf)
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        from1 = np.concatenate((nxt[1:], neg[:1]))
        from2 = np.where(np.concatenate((skip, [False, False]))[2:],
                         np.concatenate((nxt, neg))[2:], -np.inf)
        beta[t] = _lse(nxt, from1, from2)
    return beta


def ctc_sample(log_probs: np.ndarray, label: Sequence[int], blank: int) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of one sample and its gradient w.r.t. ``log_probs``.

    The gradient is minus the posterior occupancy of each class at each step.
    Infeasible labels give ``(inf, zeros)``.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T, C = lp.shape
    if T < 1:
        raise ValueError("CTC needs at least one time step")
    if T < min_steps(label):
        return float("inf"), np.zeros_like(lp)
    log_p, alpha = ctc_alpha(lp, label, blank)
    if not np.isfinite(log_p):
        return float("inf"), np.zeros_like(lp)
    beta = ctc_beta(lp, label, blank)
    ext = extend_label(label, blank)
    occupancy = np.exp(alpha + beta - log_p)  # (T, S)
    grad = np.zeros((T, C))
    for s, k in enumerate(ext):
        grad[:, k] -= occupancy[:, s]
    return -log_p, grad


def ctc_loss(log_probs: Tensor, labels, input_lengths=None, blank: int | None = None,
             reduction: str = "mean") -> Tensor:
    """CTC negative log-likelihood as a differentiable scalar.

    ``log_probs`` is (n, T, classes) or (T, classes) and should be
    normalized per step (e.g. the output of ``log_softmax_lastdim``).
    ``labels`` is a list of index sequences (or a single sequence for 2D
    input). Samples whose label cannot fit in their input length are left
    out of the mean and trigger :class:`InfeasibleAlignmentWarning`.

    The returned tensor carries ``per_sample`` (array, ``inf`` for skipped
    samples) and ``skipped`` (list of sample indices).
    """
    single = log_probs.ndim == 2
    data = log_probs.data[None] if single else log_probs.data
    if single:
        labels = [labels]
    n, T, C = data.shape
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for a batch of {n}")
    blank = C - 1 if blank is None else blank
    lengths = [T] * n if input_lengths is None else [int(v) for v in np.atleast_1d(input_lengths)]
    if any(k >= C or k < 0 or k == blank for lab in labels for k in lab):
        raise ValueError("label indices must be non-blank classes below the class count")

    per_sample = np.zeros(n)
    grad = np.zeros((n, T, C))
    skipped = []
    for i in range(n):
        t_i = lengths[i]
        loss_i, g_i = ctc_sample(data[i, :t_i], labels[i], blank)
        per_sample[i] = loss_i
        if np.isinf(loss_i):
            skipped.append(i)
            continue
        grad[i, :t_i] = g_i
    if skipped:
        msg = (f"skipping {len(skipped)} sample(s) whose label cannot be aligned "
               f"within the available steps: {skipped}")
        warnings.warn(msg, InfeasibleAlignmentWarning, stacklevel=2)
        logger.warning(msg)
    kept = n - len(skipped)
    total = float(per_sample[np.isfinite(per_sample)].sum())
    if reduction == "mean":
        value = total / kept if kept else 0.0
        scale = 1.0 / kept if kept else 0.0
    elif reduction == "sum":
        value, scale = total, 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    grad *= scale
    if single:
        grad = grad[0]
    grad = grad.astype(log_probs.dtype)

    out = _make(np.asarray(value, dtype=log_probs.dtype), (log_probs,),
                lambda g: (grad * g,), "ctc_loss")
    out.per_sample = per_sample
    out.skipped = skipped
    return out
