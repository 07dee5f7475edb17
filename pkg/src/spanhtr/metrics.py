"""Character and word error rates on line-break-free paragraph text."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

_LINE_BREAK = re.compile("\r\n|[\r\n\v\f\x1c\x1d\x1e\x85\u2028\u2029]")


def strip_line_breaks(text: str) -> str:
    """Join the lines of ``text`` with single spaces.

    Blanks around each break and empty lines are dropped; text without line
    breaks is returned unchanged.
    """
    if not _LINE_BREAK.search(text):
        return text
    parts = (part.strip(" \t") for part in _LINE_BREAK.split(text))
    return " ".join(part for part in parts if part)


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance, two-row dynamic program."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        current = [i]
        for j, y in enumerate(b, 1):
            current.append(min(previous[j] + 1, current[j - 1] + 1,
                               previous[j - 1] + (x != y)))
        previous = current
    return previous[-1]


def words(text: str) -> list[str]:
    return text.split()


def _rate(edits: int, gt_len: int) -> float:
    # empty reference: any prediction counts as edits over one symbol
    return edits / gt_len if gt_len else float(edits)


def cer(gt: str, pred: str) -> float:
    gt, pred = strip_line_breaks(gt), strip_line_breaks(pred)
    return _rate(levenshtein(gt, pred), len(gt))


def wer(gt: str, pred: str) -> float:
    g, p = words(strip_line_breaks(gt)), words(strip_line_breaks(pred))
    return _rate(levenshtein(g, p), len(g))


@dataclass
class SampleScore:
    source_id: str
    ground_truth: str
    prediction: str
    char_edits: int
    gt_chars: int
    word_edits: int
    gt_words: int

    @property
    def cer(self) -> float:
        return _rate(self.char_edits, self.gt_chars)

    @property
    def wer(self) -> float:
        return _rate(self.word_edits, self.gt_words)


def score_sample(gt: str, pred: str, source_id: str = "") -> SampleScore:
    gt, pred = strip_line_breaks(gt), strip_line_breaks(pred)
    g, p = words(gt), words(pred)
    return SampleScore(source_id, gt, pred, levenshtein(gt, pred), len(gt),
                       levenshtein(g, p), len(g))


@dataclass
class EvalReport:
    samples: list[SampleScore] = field(default_factory=list)

    @property
    def total_edit_chars(self) -> int:
        return sum(s.char_edits for s in self.samples)

    @property
    def total_gt_chars(self) -> int:
        return sum(s.gt_chars for s in self.samples)

    @property
    def total_edit_words(self) -> int:
        return sum(s.word_edits for s in self.samples)

    @property
    def total_gt_words(self) -> int:
        return sum(s.gt_words for s in self.samples)

    @property
    def cer(self) -> float:
        """Micro-average: summed edits over summed reference lengths."""
        if not self.samples:
            return 0.0
        return _rate(self.total_edit_chars, self.total_gt_chars)

    @property
    def wer(self) -> float:
        if not self.samples:
            return 0.0
        return _rate(self.total_edit_words, self.total_gt_words)

    @property
    def mean_sample_cer(self) -> float:
        return sum(s.cer for s in self.samples) / len(self.samples) if self.samples else 0.0

    @property
    def mean_sample_wer(self) -> float:
        return sum(s.wer for s in self.samples) / len(self.samples) if self.samples else 0.0

    def add(self, gt: str, pred: str, source_id: str = "") -> SampleScore:
        score = score_sample(gt, pred, source_id)
        self.samples.append(score)
        return score

    def summary(self) -> dict:
        return {
            "type": "summary",
            "samples": len(self.samples),
            "cer": self.cer,
            "wer": self.wer,
            "mean_sample_cer": self.mean_sample_cer,
            "mean_sample_wer": self.mean_sample_wer,
            "total_edit_chars": self.total_edit_chars,
            "total_gt_chars": self.total_gt_chars,
            "total_edit_words": self.total_edit_words,
            "total_gt_words": self.total_gt_words,
        }

    def to_jsonl(self) -> str:
        """One JSON record per sample followed by the corpus summary."""
        lines = []
        for s in self.samples:
            rec = {"type": "sample", **asdict(s), "cer": s.cer, "wer": s.wer}
            lines.append(json.dumps(rec, ensure_ascii=False, sort_keys=True))
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalReport":
        report = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("type") != "sample":
                continue
            report.samples.append(SampleScore(
                rec["source_id"], rec["ground_truth"], rec["prediction"], rec["char_edits"],
                rec["gt_chars"], rec["word_edits"], rec["gt_words"]))
        return report
