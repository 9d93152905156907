"""Greedy and beam-search generation over the incremental decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import BOS, EOS, TPTransformer


@dataclass
class Hypothesis:
    tokens: list = field(default_factory=list)
    logprob: float = 0.0
    finished: bool = False

    def score(self, alpha: float) -> float:
        """Length-normalised score; EOS counts towards the length."""
        return self.logprob / (max(1, len(self.tokens)) ** alpha)

    @property
    def ids(self) -> list:
        """Generated ids without the terminating EOS."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


def _source(src) -> np.ndarray:
    return np.asarray(src, dtype=np.int64).reshape(1, -1)


def greedy_decode(model: TPTransformer, src, max_len: int = 64, use_cache: bool = True) -> list:
    """Repeated argmax from BOS (ties go to the lowest id) until EOS or ``max_len``."""
    return greedy_hypothesis(model, src, max_len, use_cache).ids


def greedy_hypothesis(model: TPTransformer, src, max_len: int = 64, use_cache: bool = True) -> Hypothesis:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    src = _source(src)
    hyp = Hypothesis()
    step = _stepper(model, src, use_cache)
    state = step.start()
    last = BOS
    for _ in range(max_len):
        logp, state = step(state, [last], [hyp.tokens])
        tok = int(np.argmax(logp[0]))
        hyp.tokens.append(tok)
        hyp.logprob += float(logp[0, tok])
        if tok == EOS:
            hyp.finished = True
            break
        last = tok
    return hyp


def beam_search(model: TPTransformer, src, beam: int = 4, max_len: int = 64, alpha: float = 1.0,
                use_cache: bool = True) -> list:
    """Best hypothesis ids from a width-``beam`` search."""
    return beam_hypotheses(model, src, beam, max_len, alpha, use_cache)[0].ids


def beam_hypotheses(model: TPTransformer, src, beam: int = 4, max_len: int = 64, alpha: float = 1.0,
                    use_cache: bool = True) -> list:
    """All completed hypotheses, best first by ``logprob / len**alpha``.

    Each live hypothesis is expanded by its top-``beam`` tokens and the global
    top-``beam`` candidates by cumulative log-probability survive; candidates
    ending in EOS move to the finished set.  Hypotheses still live at
    ``max_len`` are finished as truncated.
    """
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    src = _source(src)
    step = _stepper(model, src, use_cache)
    state = step.start()
    live = [Hypothesis()]
    finished: list[Hypothesis] = []
    for t in range(max_len):
        last = [h.tokens[-1] if h.tokens else BOS for h in live]
        logp, state = step(state, last, [h.tokens for h in live])
        k = min(beam, logp.shape[1])
        cands = []
        for i, h in enumerate(live):
            order = np.argsort(-logp[i], kind="stable")[:k]
            for tok in order:
                cands.append((h.logprob + float(logp[i, tok]), i, int(tok)))
        # highest score first; ties by parent rank then token id
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        keep, parents = [], []
        for lp, i, tok in cands[:beam]:
            h = Hypothesis(live[i].tokens + [tok], lp, tok == EOS)
            if h.finished:
                finished.append(h)
            else:
                keep.append(h)
                parents.append(i)
        if not keep:
            live = []
            break
        live = keep
        state = step.reorder(state, parents)
        if alpha == 0.0 and finished and max(f.logprob for f in finished) >= live[0].logprob:
            break  # log-probabilities only decrease, nothing live can win
    finished.extend(live)
    return sorted(finished, key=lambda h: -h.score(alpha))


def sequence_logprob(model: TPTransformer, src, tokens) -> float:
    """Sum of per-step log-softmax values of ``tokens`` under one full forward."""
    src = _source(src)
    tokens = [int(t) for t in tokens]
    tgt_in = np.array([[BOS] + tokens[:-1]], dtype=np.int64)
    with T.no_grad():
        logp = T.log_softmax_lastdim(model.forward(src, tgt_in)).data[0]
    return float(sum(logp[i, t] for i, t in enumerate(tokens)))


class _stepper:
    """Uniform interface over cached and naive re-forward decoding."""

    def __init__(self, model, src, use_cache):
        self.model, self.src, self.use_cache = model, src, use_cache

    def start(self):
        return self.model.start(self.src) if self.use_cache else None

    def __call__(self, state, last_tokens, prefixes):
        if self.use_cache:
            return self.model.step(state, last_tokens)
        tgt = np.array([[BOS] + list(p) for p in prefixes], dtype=np.int64)
        src = np.repeat(self.src, len(prefixes), axis=0)
        with T.no_grad():
            logp = T.log_softmax_lastdim(self.model.forward(src, tgt)).data[:, -1, :]
        return logp, None

    def reorder(self, state, parents):
        return state.reorder(parents) if self.use_cache else None
