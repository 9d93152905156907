"""Corpus ingestion, word-level vocabulary and padded batches."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import BOS, EOS, PAD, UNK

RESERVED = ("<pad>", "</s>", "<unk>", "<s>")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class DataError(ValueError):
    """Malformed or unusable corpus / vocabulary input."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, with punctuation as separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


@dataclass
class CorpusExample:
    document: str
    summary: str


def read_corpus(path) -> list[CorpusExample]:
    """Read JSON-lines ``{"document": ..., "summary": ...}`` records."""
    examples = []
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: cannot read corpus ({e})") from e
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{n}: invalid JSON ({e.msg})") from e
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{n}: expected an object")
        for key in ("document", "summary"):
            if not isinstance(obj.get(key), str) or not tokenize(obj[key]):
                raise DataError(f"{path}:{n}: field '{key}' missing or empty")
        examples.append(CorpusExample(obj["document"], obj["summary"]))
    if not examples:
        raise DataError(f"{path}: empty corpus")
    return examples


def write_corpus(path, examples: Iterable[CorpusExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({"document": ex.document, "summary": ex.summary}, ensure_ascii=False) + "\n")


class Vocabulary:
    """Token ↔ id map with PAD=0, EOS=1, UNK=2, BOS=3 reserved."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise DataError(f"{path}: cannot read vocabulary ({e})") from e
        return cls(text.splitlines())


def build_vocab_from_texts(texts: Iterable[str], size: int) -> Vocabulary:
    if size <= len(RESERVED):
        raise DataError(f"vocabulary size must exceed {len(RESERVED)}, got {size}")
    counts = Counter()
    for t in texts:
        counts.update(tokenize(t))
    for r in RESERVED:
        counts.pop(r, None)
    if not counts:
        raise DataError("empty corpus: no tokens to build a vocabulary from")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ranked[: size - len(RESERVED)]])


def build_vocab(corpus_path, size: int) -> Vocabulary:
    """Frequency-ranked vocabulary over documents and summaries (ties lexicographic)."""
    examples = read_corpus(corpus_path)
    return build_vocab_from_texts((t for ex in examples for t in (ex.document, ex.summary)), size)


def encode_text(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """Token ids truncated to ``max_len - 1`` and terminated by EOS."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.id(t) for t in tokenize(text)][: max_len - 1]
    return ids + [EOS]


def decode_ids(ids: Iterable[int], vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise DataError(f"id {i} out of vocabulary range [0, {len(vocab)})")
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(vocab.itos[i])
    return " ".join(out)


# --- batches -------------------------------------------------------------------

@dataclass
class Batch:
    """Padded id matrices for teacher forcing; ``tgt_in`` is BOS + target[:-1]."""
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]


def pad(seqs: Sequence[Sequence[int]], length: Optional[int] = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(pairs: Sequence[tuple]) -> Batch:
    """Build a batch from ``(source ids, target ids)`` pairs (both EOS-terminated)."""
    if not pairs:
        raise DataError("empty batch")
    src = pad([p[0] for p in pairs])
    tgt_out = pad([p[1] for p in pairs])
    tgt_in = np.full_like(tgt_out, PAD)
    tgt_in[:, 0] = BOS
    tgt_in[:, 1:] = tgt_out[:, :-1]
    tgt_in[tgt_out == PAD] = PAD
    return Batch(src, tgt_in, tgt_out)


def encode_corpus(examples: Sequence[CorpusExample], vocab: Vocabulary,
                  src_len: int = 256, tgt_len: int = 64) -> list[tuple]:
    return [(encode_text(ex.document, vocab, src_len), encode_text(ex.summary, vocab, tgt_len))
            for ex in examples]


# --- synthetic corpora ---------------------------------------------------------

def copy_task(rng, n: int, vocab_size: int = 20, max_len: int = 10, reverse: bool = False) -> list[tuple]:
    """Random content-token sequences; the target copies (or reverses) the source."""
    pairs = []
    for _ in range(n):
        k = int(rng.integers(1, max_len + 1))
        seq = [int(t) for t in rng.integers(BOS + 1, vocab_size, size=k)]
        tgt = seq[::-1] if reverse else seq
        pairs.append((seq + [EOS], tgt + [EOS]))
    return pairs


_SUBJECTS = ["the council", "a local school", "the police", "the company", "a charity", "the minister",
             "residents", "the club", "scientists", "the hospital", "farmers", "the museum"]
_VERBS = ["announced", "rejected", "approved", "delayed", "funded", "criticised", "launched", "reviewed"]
_OBJECTS = ["a new plan", "the housing scheme", "a safety report", "the budget", "a bridge project",
            "the festival", "a recycling trial", "the merger", "a research grant", "the road closure"]
_PLACES = ["in leeds", "in cardiff", "near the river", "on monday", "after a long debate", "this week",
           "in the north", "at the harbour"]
_FILLER = ["officials said the decision followed months of talks .",
           "critics warned the cost could rise .",
           "a spokesperson declined to comment further .",
           "the move was welcomed by many local people .",
           "further details are expected later this year ."]


def synthetic_summaries(rng, n: int = 32) -> list[CorpusExample]:
    """Short news-like document/summary pairs for memorisation experiments."""
    out = []
    for _ in range(n):
        s = _SUBJECTS[int(rng.integers(0, len(_SUBJECTS)))]
        v = _VERBS[int(rng.integers(0, len(_VERBS)))]
        o = _OBJECTS[int(rng.integers(0, len(_OBJECTS)))]
        p = _PLACES[int(rng.integers(0, len(_PLACES)))]
        f1 = _FILLER[int(rng.integers(0, len(_FILLER)))]
        f2 = _FILLER[int(rng.integers(0, len(_FILLER)))]
        doc = f"{s} {v} {o} {p} . {f1} {f2}"
        summ = f"{s} {v} {o} ."
        out.append(CorpusExample(doc, summ))
    return out
