"""Decoder probing and role-attention discreteness analysis.

Representations are read from a frozen model under teacher forcing.  The
decoder's ``i``-th position (input: BOS plus the first ``i`` tokens) is
paired with the label of token ``i``, i.e. the token that position predicts.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import read_table, write_table
from .data import DataError, Vocabulary, pad
from .model import BOS, EOS, PAD, TPTransformer
from .rng import Rng
from .tensor import Tensor
from .training import Adafactor, lr_schedule

SITES = ("role", "filler", "tpr", "final")
BINDINGS = ("enc.self", "dec.self", "dec.cross")


@dataclass
class ProbeItem:
    """One labelled example: a token task (``labels``) or a span task (``label``)."""
    tokens: list
    labels: Optional[list] = None
    span1: Optional[tuple] = None
    span2: Optional[tuple] = None
    label: Optional[str] = None
    document: Optional[list] = None

    @property
    def is_token_task(self) -> bool:
        return self.labels is not None


@dataclass
class ProbeRecord:
    example_id: int
    layer: int
    site: str
    span1: tuple
    span2: Optional[tuple]
    label: str
    vectors1: np.ndarray
    vectors2: Optional[np.ndarray] = None


# --- probe data ----------------------------------------------------------------

def _span(v, n, where):
    if (not isinstance(v, (list, tuple)) or len(v) != 2
            or not all(isinstance(x, int) for x in v) or not 0 <= v[0] < v[1] <= n):
        raise DataError(f"{where}: span {v!r} is not a half-open range within [0, {n}]")
    return (int(v[0]), int(v[1]))


def parse_probe_item(obj, where: str = "record") -> ProbeItem:
    if not isinstance(obj, dict) or not isinstance(obj.get("tokens"), list) or not obj["tokens"]:
        raise DataError(f"{where}: expected an object with a non-empty 'tokens' list")
    tokens = [str(t) for t in obj["tokens"]]
    doc = obj.get("document")
    if doc is not None:
        if isinstance(doc, str):
            doc = doc.split()
        if not isinstance(doc, list) or not doc:
            raise DataError(f"{where}: 'document' must be a non-empty string or token list")
        doc = [str(t) for t in doc]
    if "labels" in obj:
        labels = obj["labels"]
        if not isinstance(labels, list) or len(labels) != len(tokens):
            raise DataError(f"{where}: 'labels' must be a list as long as 'tokens'")
        return ProbeItem(tokens, labels=[str(x) for x in labels], document=doc)
    if "span1" not in obj or "label" not in obj:
        raise DataError(f"{where}: need 'labels' (token task) or 'span1' and 'label' (span task)")
    s1 = _span(obj["span1"], len(tokens), where)
    s2 = None if obj.get("span2") is None else _span(obj["span2"], len(tokens), where)
    return ProbeItem(tokens, span1=s1, span2=s2, label=str(obj["label"]), document=doc)


def load_probe_data(path) -> list[ProbeItem]:
    """Read probing JSON-lines (token or span task records)."""
    items = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: cannot read probe data ({e})") from e
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{n}: invalid JSON ({e.msg})") from e
        items.append(parse_probe_item(obj, f"{path}:{n}"))
    if not items:
        raise DataError(f"{path}: no probe records")
    return items


def items_from_ids(seqs: Sequence[Sequence[int]], label_fn, vocab: Optional[Vocabulary] = None) -> list[ProbeItem]:
    """Token-task items over id sequences; ``label_fn(seq, i)`` labels position ``i``."""
    out = []
    for seq in seqs:
        toks = [vocab.itos[t] for t in seq] if vocab else [str(t) for t in seq]
        out.append(ProbeItem(toks, labels=[str(label_fn(seq, i)) for i in range(len(seq))]))
    return out


# --- extraction ----------------------------------------------------------------

def _ids(tokens, vocab: Optional[Vocabulary]):
    if vocab is None:
        return [int(t) for t in tokens]
    return [vocab.id(t.lower()) for t in tokens]


def _site_key(layer: int, binding: str, config) -> tuple:
    if not 1 <= layer <= config.layers:
        raise ValueError(f"layer must be in 1..{config.layers}, got {layer}")
    stack, kind = binding.split(".")
    return (stack, layer, kind)


def record_stack(model: TPTransformer, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
                 batch_size: int = 32):
    """Teacher-forced forward passes yielding ``(batch offset, record dict, tgt lengths, src lengths)``."""
    for start in range(0, len(targets), batch_size):
        src = pad([list(s) for s in sources[start:start + batch_size]])
        tg = [list(t) for t in targets[start:start + batch_size]]
        tgt_in = pad([[BOS] + t[:-1] for t in tg])
        rec: dict = {}
        with T.no_grad():
            model.forward(src, tgt_in, training=False, record=rec)
        yield start, rec, [len(t) for t in tg], [len(s) for s in sources[start:start + batch_size]]


def site_array(rec: dict, layer: int, site: str, binding: str, config) -> np.ndarray:
    key = _site_key(layer, binding, config)
    if site == "final":
        return rec[(key[0], layer, "final")]
    entry = rec[key]
    if site == "role":
        if entry["role"] is None:
            raise ValueError("site 'role' is undefined for the baseline variant")
        return entry["role"]
    return entry[site]


def extract_representations(model: TPTransformer, items: Sequence[ProbeItem], layer: int, site: str,
                            binding: str = "dec.cross", vocab: Optional[Vocabulary] = None,
                            batch_size: int = 32) -> list[ProbeRecord]:
    """Per-position decoder representations aligned with the token each position predicts.

    ``site``: ``filler`` (attention output), ``role`` (role vectors), ``tpr``
    (bound output ``R ⊙ F + F``; the filler itself for the baseline) or
    ``final`` (layer output after the feed-forward).  ``binding`` picks the
    decoder attention site for the first three; the cross-attention binding is
    the last one before the feed-forward.
    """
    if site not in SITES:
        raise ValueError(f"site must be one of {SITES}")
    if binding not in BINDINGS:
        raise ValueError(f"binding must be one of {BINDINGS}")
    if site == "role" and model.config.variant == "baseline":
        raise ValueError("site 'role' is undefined for the baseline variant")
    targets = [_ids(it.tokens, vocab) for it in items]
    sources = [(_ids(it.document, vocab) if it.document else list(t)) + [EOS] for it, t in zip(items, targets)]
    records = []
    for start, rec, tlens, _ in record_stack(model, sources, targets, batch_size):
        arr = site_array(rec, layer, site, binding, model.config)
        for b, n in enumerate(tlens):
            idx = start + b
            it = items[idx]
            reps = arr[b, :n]
            if it.is_token_task:
                for i in range(n):
                    records.append(ProbeRecord(idx, layer, site, (i, i + 1), None, it.labels[i],
                                               reps[i:i + 1].copy()))
            else:
                s1, s2 = it.span1, it.span2
                records.append(ProbeRecord(idx, layer, site, s1, s2, it.label, reps[s1[0]:s1[1]].copy(),
                                           None if s2 is None else reps[s2[0]:s2[1]].copy()))
    return records


def save_records(path, records: Sequence[ProbeRecord], meta: Optional[dict] = None) -> None:
    """Dump records in the tensor-table format, one tensor per record."""
    header = {"kind": "probe-dump", "meta": meta or {}, "records": []}
    tensors = {}
    for k, r in enumerate(records):
        header["records"].append({"id": r.example_id, "layer": r.layer, "site": r.site, "label": r.label,
                                  "span1": list(r.span1), "span2": None if r.span2 is None else list(r.span2)})
        parts = [r.vectors1] if r.vectors2 is None else [r.vectors1, r.vectors2]
        tensors[f"record/{k}"] = np.concatenate(parts, axis=0)
    write_table(path, header, tensors)


def load_records(path) -> list[ProbeRecord]:
    header, tensors = read_table(path)
    if header.get("kind") != "probe-dump":
        raise DataError(f"{path}: not a probe dump")
    out = []
    for k, h in enumerate(header["records"]):
        arr = tensors[f"record/{k}"]
        s1 = tuple(h["span1"])
        s2 = None if h["span2"] is None else tuple(h["span2"])
        n1 = s1[1] - s1[0]
        out.append(ProbeRecord(h["id"], h["layer"], h["site"], s1, s2, h["label"], arr[:n1],
                               None if s2 is None else arr[n1:]))
    return out


# --- probe heads ---------------------------------------------------------------

class ProbeHead:
    """Span convolution (width 3) + mean pool + 2-layer MLP, or a single linear layer.

    Spans are convolved over their own positions with zero padding at the edges.
    """

    def __init__(self, d_in: int, labels: Sequence[str], n_spans: int = 1, d_hidden: int = 256,
                 kind: str = "mlp", seed: int = 0):
        if kind not in ("mlp", "linear"):
            raise ValueError("probe head kind must be 'mlp' or 'linear'")
        self.labels = list(labels)
        self.index = {l: i for i, l in enumerate(self.labels)}
        self.kind, self.n_spans, self.d_in = kind, n_spans, d_in
        rng = Rng(seed)
        K = len(self.labels)
        std = lambda fan_in: 1.0 / math.sqrt(fan_in)  # noqa: E731
        p = {}
        if kind == "mlp":
            p["conv"] = rng.normal((3, d_in, d_hidden), std(3 * d_in))
            p["conv_b"] = np.zeros(d_hidden)
            p["w1"] = rng.normal((n_spans * d_hidden, d_hidden), std(n_spans * d_hidden))
            p["b1"] = np.zeros(d_hidden)
            p["w2"] = rng.normal((d_hidden, K), std(d_hidden))
            p["b2"] = np.zeros(K)
        else:
            p["w"] = rng.normal((n_spans * d_in, K), std(n_spans * d_in))
            p["b"] = np.zeros(K)
        dtype = T.get_default_dtype()
        self.params = {k: Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in p.items()}

    def _pool(self, spans: Sequence[np.ndarray]) -> Tensor:
        lens = np.array([len(s) for s in spans])
        L = int(lens.max())
        X = np.zeros((len(spans), L, self.d_in), dtype=T.get_default_dtype())
        for i, s in enumerate(spans):
            X[i, :len(s)] = s
        mask = (np.arange(L)[None, :] < lens[:, None]).astype(X.dtype)[:, :, None]
        if self.kind == "linear":
            return Tensor(X.sum(axis=1) / lens[:, None], dtype=X.dtype)
        prev = np.zeros_like(X)
        prev[:, 1:] = X[:, :-1]
        nxt = np.zeros_like(X)
        nxt[:, :-1] = X[:, 1:]
        nxt *= mask  # a span's last position sees zero padding, not batch padding
        w = self.params["conv"]
        h = (Tensor(prev, dtype=X.dtype) @ w[0] + Tensor(X, dtype=X.dtype) @ w[1]
             + Tensor(nxt, dtype=X.dtype) @ w[2] + self.params["conv_b"])
        return (h * Tensor(mask / lens[:, None, None], dtype=X.dtype)).sum(axis=1)

    def logits(self, records: Sequence[ProbeRecord]) -> Tensor:
        pooled = [self._pool([r.vectors1 for r in records])]
        if self.n_spans == 2:
            pooled.append(self._pool([r.vectors2 for r in records]))
        z = T.concat_lastdim(pooled) if len(pooled) > 1 else pooled[0]
        if self.kind == "linear":
            return z @ self.params["w"] + self.params["b"]
        h = T.relu(z @ self.params["w1"] + self.params["b1"])
        return h @ self.params["w2"] + self.params["b2"]

    def predict(self, records: Sequence[ProbeRecord], batch_size: int = 256) -> list[str]:
        out = []
        with T.no_grad():
            for i in range(0, len(records), batch_size):
                z = self.logits(records[i:i + batch_size]).data
                out.extend(self.labels[j] for j in np.argmax(z, axis=-1))
        return out


def micro_f1(pred: Sequence[str], gold: Sequence[str]) -> float:
    """Micro-averaged F1 over labelled records (one prediction per record)."""
    if not gold:
        return 0.0
    tp = sum(p == g for p, g in zip(pred, gold))
    fp = fn = len(gold) - tp
    return 2 * tp / (2 * tp + fp + fn)


@dataclass
class ProbeResult:
    head: ProbeHead
    dev_f1: float
    train_f1: float
    history: list = field(default_factory=list)


def train_probe(train: Sequence[ProbeRecord], dev: Sequence[ProbeRecord], kind: str = "mlp",
                epochs: int = 10, batch_size: int = 64, warmup: int = 100, lr_scale: float = 0.1,
                d_hidden: int = 256, patience: int = 3, seed: int = 0) -> ProbeResult:
    """Fit a probe head on frozen representations; early-stops on dev micro-F1."""
    labels = sorted({r.label for r in train})
    if len(labels) < 2:
        raise ValueError("probe training needs at least two distinct labels")
    n_spans = 2 if train[0].vectors2 is not None else 1
    head = ProbeHead(train[0].vectors1.shape[-1], labels, n_spans, d_hidden, kind, seed)
    opt = Adafactor(head.params)
    rng = Rng(seed + 1)
    dev_gold = [r.label for r in dev]
    best = (-1.0, None)
    history, stale, step = [], 0, 0
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), batch_size):
            chunk = [train[j] for j in order[i:i + batch_size]]
            y = np.array([head.index[r.label] for r in chunk])
            opt.zero_grad()
            loss = T.cross_entropy(head.logits(chunk), y, ignore_index=None)
            T.backward(loss)
            step += 1
            opt.step(lr_schedule(step, warmup, lr_scale))
        f1 = micro_f1(head.predict(dev), dev_gold)
        history.append(f1)
        if f1 > best[0]:
            best = (f1, {k: p.data.copy() for k, p in head.params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    for k, v in best[1].items():
        head.params[k].data[...] = v
    train_f1 = micro_f1(head.predict(train), [r.label for r in train])
    return ProbeResult(head, best[0], train_f1, history)


def parameter_checksum(model: TPTransformer) -> str:
    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def probe(model: TPTransformer, train_items: Sequence[ProbeItem], dev_items: Sequence[ProbeItem],
          layer: int, site: str, binding: str = "dec.cross", vocab: Optional[Vocabulary] = None,
          **kw) -> ProbeResult:
    """Extract, train and evaluate a probe while asserting the backbone stays frozen."""
    before = parameter_checksum(model)
    model.zero_grad()
    tr = extract_representations(model, train_items, layer, site, binding, vocab)
    dv = extract_representations(model, dev_items, layer, site, binding, vocab)
    result = train_probe(tr, dv, **kw)
    if parameter_checksum(model) != before:
        raise AssertionError("backbone parameters changed during probing")
    if any(p.grad is not None for p in model.params.values()):
        raise AssertionError("backbone received gradients during probing")
    return result


# --- role discreteness ---------------------------------------------------------

@dataclass
class DiscretenessReport:
    threshold: float
    n_tokens: int
    heads: int
    n_roles: int
    fraction_above: float
    histogram: list
    bin_edges: list
    distinct_codes: int
    code_bound: int
    top_codes: list

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def role_attention(model: TPTransformer, pairs: Sequence[tuple], layer: int, binding: str = "dec.cross",
                   batch_size: int = 32) -> np.ndarray:
    """Role-attention rows at one binding site for every non-pad position: ``(tokens, H, N_r)``."""
    if model.config.variant != "tpt-d":
        raise ValueError("role discreteness needs the tpt-d variant")
    if binding not in BINDINGS:
        raise ValueError(f"binding must be one of {BINDINGS}")
    key = _site_key(layer, binding, model.config)
    sources = [p[0] for p in pairs]
    targets = [p[1] for p in pairs]
    rows = []
    for _, rec, tlens, slens in record_stack(model, sources, targets, batch_size):
        attn = rec[key]["attn"]  # (B, H, T, N_r)
        lens = slens if key[0] == "enc" else tlens
        for b, n in enumerate(lens):
            rows.append(attn[b, :, :n].transpose(1, 0, 2))
    return np.concatenate(rows, axis=0)


def discreteness_from_attention(attn: np.ndarray, threshold: float = 0.98, bins: int = 20,
                                top: int = 10) -> DiscretenessReport:
    n_tokens, H, N = attn.shape
    mx = attn.max(axis=-1)
    hist, edges = np.histogram(mx, bins=bins, range=(0.0, 1.0))
    codes = Counter(map(tuple, np.argmax(attn, axis=-1).tolist()))
    return DiscretenessReport(
        threshold=float(threshold), n_tokens=int(n_tokens), heads=int(H), n_roles=int(N),
        fraction_above=float((mx > threshold).mean()) if mx.size else 0.0,
        histogram=[int(h) for h in hist], bin_edges=[float(e) for e in edges],
        distinct_codes=len(codes), code_bound=int(N) ** int(H),
        top_codes=[[list(c), n] for c, n in codes.most_common(top)],
    )


def role_discreteness(model: TPTransformer, pairs: Sequence[tuple], layer: int, binding: str = "dec.cross",
                      threshold: float = 0.98, bins: int = 20) -> DiscretenessReport:
    """Share of (token, head) role-attention rows whose maximum exceeds ``threshold``,
    plus a census of realised argmax codes (H-tuples of role indices)."""
    return discreteness_from_attention(role_attention(model, pairs, layer, binding), threshold, bins)


# --- synthetic probing corpora -------------------------------------------------

def parity_items(seqs: Sequence[Sequence[int]]) -> list[ProbeItem]:
    """Tag each position by the parity of its index."""
    return items_from_ids(seqs, lambda s, i: "even" if i % 2 == 0 else "odd")


def token_class_items(seqs: Sequence[Sequence[int]], classes: int = 3, shift: int = 0) -> list[ProbeItem]:
    """Tag position ``i`` with ``token[i + shift] mod classes`` (``none`` past the end)."""
    def fn(s, i):
        j = i + shift
        return f"c{int(s[j]) % classes}" if 0 <= j < len(s) else "none"
    return items_from_ids(seqs, fn)
