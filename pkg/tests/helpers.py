import numpy as np

from tptsumm.model import ModelConfig


def tiny_config(variant="tpt-d", **kw):
    base = dict(variant=variant, layers=2, heads=2, d_model=8, d_k=4, d_ff=16, n_roles=3, d_role=4,
                vocab_size=11, max_positions=24, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def rig_one_hot(m, choice):
    """Force every role-attention row of every site onto role ``choice[h]`` for head h."""
    c = m.config
    for name, p in m.params.items():
        if name.endswith(".role.w_r"):
            p.data[...] = 0.0
        elif name.endswith(".role.b_r"):
            b = np.full((c.heads, c.n_roles), -1e4)
            for h, n in enumerate(choice):
                b[h, n] = 1e4
            p.data[...] = b.reshape(-1)


CRITERIA = {
    1: "parameter deltas", 2: "gradient check", 3: "binding identities", 4: "copy task",
    5: "tiny-corpus overfit", 6: "rouge oracles", 7: "decoding contracts", 8: "discreteness analysis",
    9: "probing validity", 10: "determinism and resume",
}
DETAILS: dict = {}


def note(criterion, text):
    """Attach a measured value to the criterion's summary line."""
    DETAILS.setdefault(criterion, []).append(text)
