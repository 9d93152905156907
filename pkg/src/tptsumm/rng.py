"""Seeded, counter-based random stream (Philox) with a JSON-serialisable state."""
from __future__ import annotations

import numpy as np


class Rng:
    """Deterministic sample stream backed by numpy's Philox bit generator.

    Philox is counter based, so the full state is a handful of integers that
    round-trip through JSON; this is what lets dropout masks and batch order
    resume exactly from a checkpoint.
    """

    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._bitgen = np.random.Philox(self.seed)
        self._gen = np.random.Generator(self._bitgen)

    def normal(self, size, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(size) * std).astype(dtype)

    def truncated_normal(self, size, std: float = 1.0, bound: float = 2.0, dtype=np.float64) -> np.ndarray:
        """Normal(0, std) samples redrawn until they fall within ±bound·std."""
        x = self._gen.standard_normal(size)
        bad = np.abs(x) > bound
        while bad.any():
            x[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(x) > bound
        return (x * std).astype(dtype)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self._gen.random(size) < p

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, offset: int) -> "Rng":
        """Independent stream derived from this seed (used for data generation)."""
        return Rng((self.seed * 1_000_003 + offset + 1) % 2**64)

    # --- serialisation ----------------------------------------------------
    def state(self) -> dict:
        s = self._bitgen.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in s["state"]["counter"]],
            "key": [int(v) for v in s["state"]["key"]],
            "buffer": [int(v) for v in s["buffer"]],
            "buffer_pos": int(s["buffer_pos"]),
            "has_uint32": int(s["has_uint32"]),
            "uinteger": int(s["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(int(state["seed"]))
        rng.set_state(state)
        return rng
