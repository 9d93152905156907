"""Adafactor with inverse-square-root decay and the teacher-forced training loop."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, make_batch
from .model import ConfigError, TPTransformer
from .rng import Rng


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.name = name


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 1000
    warmup: int = 1000
    lr_scale: float = 1.0
    accum: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    label_smoothing: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("batch_size", "accum"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.warmup < 1:
            raise ConfigError("warmup", "must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps", "must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")
        if not self.lr_scale > 0:
            raise ConfigError("lr_scale", "must be positive")
        if not 0.0 <= self.label_smoothing <= 0.3:
            raise ConfigError("label_smoothing", "must be in [0, 0.3]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown train config field")
        return cls(**d)


def lr_schedule(t: int, warmup: int, scale: float = 1.0) -> float:
    """``scale / sqrt(max(t, warmup))``: constant through warm-up, then 1/√t decay."""
    if t < 1:
        raise ValueError("step t must be >= 1")
    return scale / math.sqrt(max(t, warmup))


# --- Adafactor -------------------------------------------------------------------

def adafactor_update(param: np.ndarray, grad: np.ndarray, slots: dict, t: int, lr: float,
                     decay_exponent: float = -0.8, eps: float = 1e-30, clip: float = 1.0) -> None:
    """One in-place Adafactor update (no momentum, no relative step size).

    ``slots`` holds ``row``/``col`` accumulators for parameters with two or
    more axes (factored over the last two) and ``v`` otherwise.
    """
    c = 1.0 - t ** decay_exponent
    g2 = grad.astype(np.float64) ** 2 + eps
    if param.ndim >= 2:
        slots["row"] = c * slots["row"] + (1.0 - c) * g2.mean(axis=-1)
        slots["col"] = c * slots["col"] + (1.0 - c) * g2.mean(axis=-2)
        v = factored_second_moment(slots["row"], slots["col"])
    else:
        slots["v"] = c * slots["v"] + (1.0 - c) * g2
        v = slots["v"]
    u = grad / np.sqrt(v)
    rms = math.sqrt(float(np.mean(u * u))) if u.size else 0.0
    u = u / max(1.0, rms / clip)
    param -= (lr * u).astype(param.dtype)


def factored_second_moment(row: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Rank-1 reconstruction ``R Cᵀ / mean(R)`` of the second-moment matrix."""
    return (row[..., :, None] * col[..., None, :]) / row.mean(axis=-1, keepdims=True)[..., None]


def init_slots(shape: tuple) -> dict:
    if len(shape) >= 2:
        return {"row": np.zeros(shape[:-1]), "col": np.zeros(shape[:-2] + shape[-1:])}
    return {"v": np.zeros(shape)}


class Adafactor:
    """Factored second-moment optimiser over a name → Tensor parameter map."""

    def __init__(self, params: dict, decay_exponent: float = -0.8, eps: float = 1e-30, clip: float = 1.0):
        self.params = params
        self.decay_exponent = decay_exponent
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.slots = {k: init_slots(p.shape) for k, p in params.items()}

    def step(self, lr: float) -> None:
        grads = {}
        for name, p in self.params.items():
            g = None if p.grad is None else p.grad.data
            if g is not None and not np.isfinite(g).all():
                raise NonFiniteGradient(name)
            grads[name] = g
        self.t += 1
        for name, p in self.params.items():
            g = grads[name]
            if g is None:
                g = np.zeros_like(p.data)
            adafactor_update(p.data, g, self.slots[name], self.t, lr,
                             self.decay_exponent, self.eps, self.clip)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        out = {}
        for name, s in self.slots.items():
            for k, v in s.items():
                out[f"optim/{name}/{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        for name, s in self.slots.items():
            for k in s:
                key = f"optim/{name}/{k}"
                if key not in arrays:
                    raise KeyError(f"optimizer state missing {key}")
                if arrays[key].shape != s[k].shape:
                    raise ValueError(f"optimizer state shape mismatch for {key}")
                s[k] = np.array(arrays[key], dtype=np.float64)
        self.t = int(t)


# --- training loop ------------------------------------------------------------------

def batch_loss(model: TPTransformer, batch: Batch, training: bool = False, rng: Optional[Rng] = None,
               label_smoothing: float = 0.0) -> T.Tensor:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if not (batch.tgt_out != 0).any():
        raise ValueError("batch targets are all padding")
    logits = model.forward(batch.src, batch.tgt_in, training=training, rng=rng)
    return T.cross_entropy(logits, batch.tgt_out, ignore_index=0, label_smoothing=label_smoothing)


def train_step(model: TPTransformer, batches: Sequence[Batch] | Batch, optimizer: Adafactor, lr: float,
               rng: Optional[Rng] = None, label_smoothing: float = 0.0) -> float:
    """Forward/backward over one or more micro-batches, then one optimiser step.

    Returns the mean cross-entropy over micro-batches.
    """
    if isinstance(batches, Batch):
        batches = [batches]
    optimizer.zero_grad()
    total = 0.0
    k = len(batches)
    for b in batches:
        loss = batch_loss(model, b, training=True, rng=rng, label_smoothing=label_smoothing)
        total += float(loss.data)
        T.backward(T.scale(loss, 1.0 / k) if k > 1 else loss)
    optimizer.step(lr)
    return total / k


class Trainer:
    """Owns model, optimiser and random stream; batch order is drawn from the stream."""

    def __init__(self, model: TPTransformer, pairs: Sequence[tuple], config: TrainConfig,
                 rng: Optional[Rng] = None, optimizer: Optional[Adafactor] = None, step: int = 0):
        if not pairs:
            raise ValueError("no training examples")
        self.model = model
        self.pairs = list(pairs)
        self.config = config
        self.rng = rng if rng is not None else Rng(config.seed)
        self.optimizer = optimizer if optimizer is not None else Adafactor(model.params)
        self.step = step
        self.losses: list[float] = []

    def next_batches(self) -> list[Batch]:
        n, b = len(self.pairs), self.config.batch_size
        out = []
        for _ in range(self.config.accum):
            if n >= b:
                idx = self.rng.permutation(n)[:b]
            else:
                idx = self.rng.integers(0, n, size=b)
            out.append(make_batch([self.pairs[i] for i in idx]))
        return out

    def train(self, steps: int, callback=None) -> list[float]:
        losses = []
        for _ in range(steps):
            lr = lr_schedule(self.step + 1, self.config.warmup, self.config.lr_scale)
            loss = train_step(self.model, self.next_batches(), self.optimizer, lr, self.rng,
                              self.config.label_smoothing)
            self.step += 1
            losses.append(loss)
            if callback is not None:
                callback(self)
        self.losses.extend(losses)
        return losses
