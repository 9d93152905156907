"""Central-difference check of the full encoder/decoder + cross-entropy gradient."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import copy_task, make_batch
from .model import ModelConfig, TPTransformer
from .rng import Rng


def toy_config(variant: str) -> ModelConfig:
    return ModelConfig(variant=variant, layers=2, heads=2, d_model=16, d_k=8, d_ff=32, n_roles=5,
                       d_role=8, vocab_size=12, max_positions=16, dropout=0.0, init_std=0.15)


def model_grad_check(variant: str, seed: int = 0, coords_per_tensor: int = 12,
                     h: float = 1e-4) -> T.GradCheckResult:
    """Relative-error check of every parameter tensor at float64.

    ``coords_per_tensor <= 0`` checks every coordinate.  Coordinates whose
    stencil crosses a relu kink are skipped and counted.  Key biases add the
    same amount to every score of a query, so their true gradient is zero and
    a relative error is undefined; their analytic gradient must instead be
    below 1e-10 in absolute value (``AssertionError`` otherwise).
    """
    rng = Rng(seed)
    with T.default_dtype(np.float64):
        model = TPTransformer(toy_config(variant), rng=rng.spawn(0))
        # non-zero biases and gains so every path carries signal
        for name, p in model.params.items():
            if p.ndim == 1:
                p.data[...] += rng.normal(p.shape, 0.2)
        batch = make_batch(copy_task(rng.spawn(1), 3, vocab_size=12, max_len=5))

        def f(_):
            logits = model.forward(batch.src, batch.tgt_in)
            return T.cross_entropy(logits, batch.tgt_out)

        worst, checked, skipped = 0.0, 0, 0
        for name, p in model.params.items():
            n = p.size
            if coords_per_tensor <= 0 or coords_per_tensor >= n:
                idx = None
            else:
                idx = [int(i) for i in rng.permutation(n)[:coords_per_tensor]]
            model.zero_grad()
            if name.endswith(".attn.b_k"):
                T.backward(f(None))
                g = np.abs(p.grad.data).max()
                if g > 1e-10:
                    raise AssertionError(f"{name}: gradient {g:.3g} should vanish")
                continue
            r = T.grad_check_result(f, p, h=h, indices=idx, skip_kinks=True)
            worst, checked, skipped = max(worst, r.max_error), checked + r.checked, skipped + r.skipped
        model.zero_grad()
    return T.GradCheckResult(worst, checked, skipped)
