"""ROUGE-N and ROUGE-L (precision, recall, F1) over token sequences."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .data import tokenize


class Score(NamedTuple):
    precision: float
    recall: float
    f1: float
    empty: bool = False


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int = 1) -> Score:
    """Clipped n-gram overlap.  Empty input scores (0, 0, 0) with ``empty`` set."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not candidate or not reference:
        return Score(0.0, 0.0, 0.0, True)
    c, r = ngrams(candidate, n), ngrams(reference, n)
    nc, nr = sum(c.values()), sum(r.values())
    if nc == 0 or nr == 0:
        return Score(0.0, 0.0, 0.0)
    overlap = sum((c & r).values())
    p, rec = overlap / nc, overlap / nr
    return Score(p, rec, _f1(p, rec))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> Score:
    """LCS-based score on the flat token sequences (no sentence splitting)."""
    if not candidate or not reference:
        return Score(0.0, 0.0, 0.0, True)
    ell = lcs_length(candidate, reference)
    p, r = ell / len(candidate), ell / len(reference)
    return Score(p, r, _f1(p, r))


METRICS = ("rouge-1", "rouge-2", "rouge-l")


@dataclass
class ScoreReport:
    per_example: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    warnings: int = 0

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean, "per_example": self.per_example, "warnings": self.warnings},
                          sort_keys=True, separators=(",", ":"))

    def table(self) -> str:
        lines = [f"{'metric':<10}{'P':>10}{'R':>10}{'F1':>10}"]
        for m in METRICS:
            s = self.mean[m]
            lines.append(f"{m:<10}{s['p']:>10.4f}{s['r']:>10.4f}{s['f']:>10.4f}")
        return "\n".join(lines)


def score_texts(candidates: Sequence[str], references: Sequence[str]) -> ScoreReport:
    """Per-example and corpus-mean ROUGE-1/2/L with the built-in tokenizer."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    report = ScoreReport()
    sums = {m: [0.0, 0.0, 0.0] for m in METRICS}
    for cand, ref in zip(candidates, references):
        c, r = tokenize(cand), tokenize(ref)
        scores = {"rouge-1": rouge_n(c, r, 1), "rouge-2": rouge_n(c, r, 2), "rouge-l": rouge_l(c, r)}
        if any(s.empty for s in scores.values()):
            report.warnings += 1
        report.per_example.append({m: {"p": s.precision, "r": s.recall, "f": s.f1} for m, s in scores.items()})
        for m, s in scores.items():
            acc = sums[m]
            acc[0] += s.precision
            acc[1] += s.recall
            acc[2] += s.f1
    n = max(1, len(candidates))
    report.mean = {m: {"p": v[0] / n, "r": v[1] / n, "f": v[2] / n} for m, v in sums.items()}
    return report
