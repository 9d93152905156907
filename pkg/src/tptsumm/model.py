"""TP-Transformer encoder/decoder with baseline, continuous-role and discrete-role cells.

Each attention site of a cell computes ``F = MHAttn(X, Y)``.  The baseline
passes ``F`` straight to the feed-forward layer; the role variants compute a
role vector ``R`` per token and bind it as ``R ⊙ F + F``:

* ``tpt-c``: ``R = F W + b`` (a continuous projection);
* ``tpt-d``: per head, attention over a learned dictionary of unit-normalised
  role embeddings, ``R^h = softmax(F W_r^h + b_r^h) r̂``, concatenated over heads.

Every binding site (encoder self, decoder self and decoder cross, per layer)
owns its own role machinery.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

VARIANTS = ("baseline", "tpt-c", "tpt-d")
POSITIONAL_KINDS = ("sinusoidal", "none")

PAD, EOS, UNK, BOS = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ModelConfig:
    variant: str = "tpt-d"
    layers: int = 6
    heads: int = 8
    d_model: int = 512
    d_k: int = 64
    d_ff: int = 2048
    n_roles: int = 50
    d_role: int = 64
    vocab_size: int = 32000
    max_positions: int = 512
    dropout: float = 0.1
    positional: str = "sinusoidal"
    scale_embeddings: bool = True
    final_norm: bool = False
    ff_norm: bool = False
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("layers", "heads", "d_model", "d_k", "d_ff", "n_roles", "d_role",
                     "vocab_size", "max_positions"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.d_k * self.heads != self.d_model:
            raise ConfigError("d_k", f"d_k*heads ({self.d_k}*{self.heads}) must equal d_model ({self.d_model})")
        if self.variant == "tpt-d" and self.d_role * self.heads != self.d_model:
            raise ConfigError("d_role", f"d_role*heads ({self.d_role}*{self.heads}) must equal d_model ({self.d_model})")
        if self.vocab_size <= BOS:
            raise ConfigError("vocab_size", "must exceed the 4 reserved ids")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", f"must be in [0, 1), got {self.dropout}")
        if self.positional not in POSITIONAL_KINDS:
            raise ConfigError("positional", f"must be one of {POSITIONAL_KINDS}")
        if not self.init_std > 0:
            raise ConfigError("init_std", "must be positive")
        if not self.ln_eps > 0:
            raise ConfigError("ln_eps", "must be positive")

    @classmethod
    def full_scale(cls, variant: str = "tpt-d", vocab_size: int = 32000) -> "ModelConfig":
        """The 6-layer, 8-head, 512-dim setting used for the summarisation runs."""
        return cls(variant=variant, layers=6, heads=8, d_model=512, d_k=64, d_ff=2048,
                   n_roles=50, d_role=64, vocab_size=vocab_size)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown model config field")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# --- cell components ----------------------------------------------------------

def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, D = x.shape
    return x.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dk)


def project_kv(y: Tensor, p: dict, heads: int):
    """Per-head key and value projections of the attention targets ``y``."""
    k = _split_heads(y @ p["w_k"] + p["b_k"], heads)
    v = _split_heads(y @ p["w_v"] + p["b_v"], heads)
    return k, v


def mh_attention(x: Tensor, y: Optional[Tensor], p: dict, heads: int, mask=None, *,
                 kv=None, dropout: float = 0.0, rng: Optional[Rng] = None,
                 training: bool = False, eps: float = 1e-6) -> Tensor:
    """Multi-head attention of layer-normalised ``x`` over targets ``y``.

    Returns ``X̂ + concat_h(softmax(Q_h K_hᵀ/√d_k) V_h) W_o``; the residual
    is the normalised input.  ``mask`` is a boolean array broadcastable to
    ``(B, H, k_x, k_y)`` (True = attend).  ``kv`` supplies precomputed
    ``(K, V)`` head tensors instead of projecting ``y``.

    Accepts ``(k, d_m)`` or ``(B, k, d_m)`` inputs.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
        if y is not None:
            y = y.reshape(1, *y.shape)
    d_m = x.shape[-1]
    if p["w_q"].shape[1] != d_m or d_m % heads:
        raise ValueError(f"d_k*heads must equal d_model ({d_m}) for {heads} heads")
    d_k = d_m // heads
    x_hat = T.layer_norm(x, p["ln_gain"], p["ln_bias"], eps)
    q = _split_heads(x_hat @ p["w_q"] + p["b_q"], heads)
    k, v = kv if kv is not None else project_kv(y, p, heads)
    scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, scores.shape)
        except ValueError:
            raise ValueError(f"mask shape {mask.shape} incompatible with scores {scores.shape}") from None
    attn = T.softmax_lastdim(scores, mask)
    attn = T.dropout(attn, dropout, rng, training)
    branch = _merge_heads(attn @ v) @ p["w_o"]
    out = x_hat + T.dropout(branch, dropout, rng, training)
    return out.reshape(out.shape[1:]) if squeeze else out


def normalize_roles(r: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every role embedding (row) to unit L2 norm."""
    norm = T.sqrt((r * r).sum(axis=-1, keepdims=True))
    return r / (norm + eps)


def compute_roles_discrete(F: Tensor, r: Tensor, w_r: Tensor, b_r: Tensor, heads: int):
    """Role vectors as per-head attention over the normalised role dictionary.

    ``w_r`` stacks the per-head score projections, shape ``(d_m, heads·N_r)``.
    Returns ``(R, attn)`` with ``R`` shaped like ``F`` and ``attn`` of shape
    ``(..., heads, k_x, N_r)``.
    """
    n_roles, d_r = r.shape
    if d_r * heads != F.shape[-1]:
        raise ValueError(f"d_role*heads ({d_r}*{heads}) must equal d_model ({F.shape[-1]})")
    lead = F.shape[:-1]
    scores = (F @ w_r + b_r).reshape(*lead, heads, n_roles)
    attn = T.softmax_lastdim(scores)
    R = (attn @ normalize_roles(r)).reshape(*lead, heads * d_r)
    perm = tuple(range(len(lead) - 1)) + (len(lead), len(lead) - 1, len(lead) + 1)
    return R, attn.transpose(perm)


def compute_roles_continuous(F: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return F @ w + b


def tpr_bind(R: Tensor, F: Tensor) -> Tensor:
    """Hadamard binding with the unbound filler added back: ``R ⊙ F + F``."""
    if R.shape != F.shape:
        raise ValueError(f"role/filler shape mismatch: {R.shape} vs {F.shape}")
    return R * F + F


def feed_forward(x: Tensor, w_g: Tensor, b_g: Tensor, w_f: Tensor, b_f: Tensor, *,
                 dropout: float = 0.0, rng: Optional[Rng] = None, training: bool = False) -> Tensor:
    if x.shape[-1] != w_g.shape[0] or w_g.shape[1] != w_f.shape[0] or w_f.shape[1] != x.shape[-1]:
        raise ValueError("feed-forward shape mismatch")
    branch = T.relu(x @ w_g + b_g) @ w_f + b_f
    return x + T.dropout(branch, dropout, rng, training)


def output_logits(y: Tensor, E: Tensor) -> Tensor:
    """Scores against the tied embedding table: ``Y_L Eᵀ``."""
    return y @ E.transpose()


def tpr_outer(roles: np.ndarray, fillers: np.ndarray) -> np.ndarray:
    """Full tensor-product representation ``Σ_i role_i ⊗ filler_i``.

    The textbook construction the Hadamard binding approximates.  A
    three-digit number binds place roles to digit fillers; with orthonormal
    roles each digit is recovered by contracting with its role.

    >>> import numpy as np
    >>> places = np.eye(3)                   # ones, tens, hundreds
    >>> digits = np.eye(10)
    >>> tpr = tpr_outer(places, digits[[5, 8, 9]])   # 985
    >>> [int(np.argmax(places[k] @ tpr)) for k in range(3)]
    [5, 8, 9]
    """
    roles = np.asarray(roles, dtype=float)
    fillers = np.asarray(fillers, dtype=float)
    return np.einsum("nr,nf->rf", roles, fillers)


# --- the network ---------------------------------------------------------------

class DecoderState:
    """Incremental decoding cache: per-layer self-attention K/V and cross K/V."""

    def __init__(self, self_kv, cross_kv, src_mask, position):
        self.self_kv = self_kv
        self.cross_kv = cross_kv
        self.src_mask = src_mask
        self.position = position

    def reorder(self, index) -> "DecoderState":
        index = np.asarray(index)
        sel = lambda t: Tensor(t.data[index], dtype=t.dtype)  # noqa: E731
        return DecoderState(
            [(sel(k), sel(v)) for k, v in self.self_kv],
            [(sel(k), sel(v)) for k, v in self.cross_kv],
            self.src_mask[index],
            self.position,
        )


class TPTransformer:
    """Encoder/decoder stack for one of the three cell variants.

    Parameters live in :attr:`params`, an insertion-ordered name → Tensor map;
    the order is the checkpoint order.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, rng: Optional[Rng] = None):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = rng if rng is not None else Rng(seed)
        c = config
        self._std = c.init_std
        self.E = self._param("embed.E", rng, (c.vocab_size, c.d_model))
        self.enc = [{"self": self._site(f"enc.{i}.self", rng), "ff": self._ff(f"enc.{i}.ff", rng)}
                    for i in range(c.layers)]
        self.dec = [{"self": self._site(f"dec.{i}.self", rng), "cross": self._site(f"dec.{i}.cross", rng),
                     "ff": self._ff(f"dec.{i}.ff", rng)} for i in range(c.layers)]
        if c.final_norm:
            self.enc_norm = self._norm("enc.final_ln")
            self.dec_norm = self._norm("dec.final_ln")
        self._pos = sinusoidal_positions(c.max_positions, c.d_model)

    # --- construction -----------------------------------------------------
    def _param(self, name, rng, shape, kind="normal"):
        dtype = T.get_default_dtype()
        if kind == "normal":
            data = rng.truncated_normal(shape, std=self._std, dtype=dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        t = Tensor(data, requires_grad=True, name=name, dtype=dtype)
        self.params[name] = t
        return t

    def _norm(self, prefix):
        return {"ln_gain": self._param(f"{prefix}.gain", None, (self.config.d_model,), "ones"),
                "ln_bias": self._param(f"{prefix}.bias", None, (self.config.d_model,), "zeros")}

    def _site(self, prefix, rng):
        c = self.config
        hd = c.heads * c.d_k
        attn = {
            "ln_gain": self._param(f"{prefix}.ln.gain", rng, (c.d_model,), "ones"),
            "ln_bias": self._param(f"{prefix}.ln.bias", rng, (c.d_model,), "zeros"),
            "w_q": self._param(f"{prefix}.attn.w_q", rng, (c.d_model, hd)),
            "b_q": self._param(f"{prefix}.attn.b_q", rng, (hd,), "zeros"),
            "w_k": self._param(f"{prefix}.attn.w_k", rng, (c.d_model, hd)),
            "b_k": self._param(f"{prefix}.attn.b_k", rng, (hd,), "zeros"),
            "w_v": self._param(f"{prefix}.attn.w_v", rng, (c.d_model, hd)),
            "b_v": self._param(f"{prefix}.attn.b_v", rng, (hd,), "zeros"),
            "w_o": self._param(f"{prefix}.attn.w_o", rng, (hd, c.d_model)),
        }
        role = {}
        if c.variant == "tpt-d":
            role = {
                "embed": self._param(f"{prefix}.role.embed", rng, (c.n_roles, c.d_role)),
                "w_r": self._param(f"{prefix}.role.w_r", rng, (c.d_model, c.heads * c.n_roles)),
                "b_r": self._param(f"{prefix}.role.b_r", rng, (c.heads * c.n_roles,), "zeros"),
            }
        elif c.variant == "tpt-c":
            role = {
                "w": self._param(f"{prefix}.role.w", rng, (c.d_model, c.d_model)),
                "b": self._param(f"{prefix}.role.b", rng, (c.d_model,), "zeros"),
            }
        return {"attn": attn, "role": role}

    def _ff(self, prefix, rng):
        c = self.config
        return {
            "w_g": self._param(f"{prefix}.w_g", rng, (c.d_model, c.d_ff)),
            "b_g": self._param(f"{prefix}.b_g", rng, (c.d_ff,), "zeros"),
            "w_f": self._param(f"{prefix}.w_f", rng, (c.d_ff, c.d_model)),
            "b_f": self._param(f"{prefix}.b_f", rng, (c.d_model,), "zeros"),
            **({"ln_gain": self._param(f"{prefix}.ln.gain", None, (c.d_model,), "ones"),
                "ln_bias": self._param(f"{prefix}.ln.bias", None, (c.d_model,), "zeros")} if c.ff_norm else {}),
        }

    # --- state ------------------------------------------------------------
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch; missing={sorted(missing)[:3]} unexpected={sorted(extra)[:3]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # --- forward pieces ---------------------------------------------------
    def embed(self, ids: np.ndarray, offset: int = 0, training=False, rng=None) -> Tensor:
        c = self.config
        ids = np.asarray(ids)
        n = ids.shape[-1]
        if offset + n > c.max_positions:
            raise ValueError(f"sequence length {offset + n} exceeds max_positions={c.max_positions}")
        x = T.embedding_lookup(self.E, ids)
        if c.scale_embeddings:
            x = T.scale(x, math.sqrt(c.d_model))
        if c.positional == "sinusoidal":
            x = x + self._pos[offset:offset + n].astype(x.dtype)
        return T.dropout(x, c.dropout, rng, training)

    def _bind(self, F: Tensor, role: dict):
        """Returns ``(out, R, attn)`` for the configured variant."""
        v = self.config.variant
        if v == "baseline":
            return F, None, None
        if v == "tpt-c":
            R = compute_roles_continuous(F, role["w"], role["b"])
            return tpr_bind(R, F), R, None
        R, attn = compute_roles_discrete(F, role["embed"], role["w_r"], role["b_r"], self.config.heads)
        return tpr_bind(R, F), R, attn

    def _site_forward(self, x, y, site, mask, training, rng, record, key, kv=None):
        c = self.config
        F = mh_attention(x, y, site["attn"], c.heads, mask, kv=kv, dropout=c.dropout,
                         rng=rng, training=training, eps=c.ln_eps)
        out, R, attn = self._bind(F, site["role"])
        if record is not None:
            record[key] = {
                "filler": F.data.copy(),
                "role": None if R is None else R.data.copy(),
                "tpr": out.data.copy(),
                "attn": None if attn is None else attn.data.copy(),
            }
        return out

    def _ff_forward(self, x, ff, training, rng):
        if "ln_gain" in ff:
            # pre-norm branch, raw residual
            h = T.layer_norm(x, ff["ln_gain"], ff["ln_bias"], self.config.ln_eps)
            branch = T.relu(h @ ff["w_g"] + ff["b_g"]) @ ff["w_f"] + ff["b_f"]
            return x + T.dropout(branch, self.config.dropout, rng, training)
        return feed_forward(x, ff["w_g"], ff["b_g"], ff["w_f"], ff["b_f"],
                            dropout=self.config.dropout, rng=rng, training=training)

    def encode(self, src: np.ndarray, training: bool = False, rng: Optional[Rng] = None,
               record: Optional[dict] = None) -> Tensor:
        """Encoder output ``H`` of shape ``(B, k_x, d_m)`` for ids ``(B, k_x)``."""
        src = np.atleast_2d(src)
        x = self.embed(src, training=training, rng=rng)
        mask = (src != PAD)[:, None, None, :]
        for i, layer in enumerate(self.enc):
            x = self._site_forward(x, x, layer["self"], mask, training, rng, record, ("enc", i + 1, "self"))
            x = self._ff_forward(x, layer["ff"], training, rng)
            if record is not None:
                record[("enc", i + 1, "final")] = x.data.copy()
        if self.config.final_norm:
            x = T.layer_norm(x, self.enc_norm["ln_gain"], self.enc_norm["ln_bias"], self.config.ln_eps)
        return x

    def decode(self, H: Tensor, src: np.ndarray, tgt_in: np.ndarray, training: bool = False,
               rng: Optional[Rng] = None, record: Optional[dict] = None) -> Tensor:
        """Decoder output states ``Y_L`` for teacher-forced inputs ``(B, k_y)``."""
        src, tgt_in = np.atleast_2d(src), np.atleast_2d(tgt_in)
        k_y = tgt_in.shape[1]
        y = self.embed(tgt_in, training=training, rng=rng)
        causal = np.tril(np.ones((k_y, k_y), dtype=bool))[None, None]
        src_mask = (src != PAD)[:, None, None, :]
        for i, layer in enumerate(self.dec):
            y = self._site_forward(y, y, layer["self"], causal, training, rng, record, ("dec", i + 1, "self"))
            y = self._site_forward(y, H, layer["cross"], src_mask, training, rng, record, ("dec", i + 1, "cross"))
            y = self._ff_forward(y, layer["ff"], training, rng)
            if record is not None:
                record[("dec", i + 1, "final")] = y.data.copy()
        if self.config.final_norm:
            y = T.layer_norm(y, self.dec_norm["ln_gain"], self.dec_norm["ln_bias"], self.config.ln_eps)
        return y

    def forward(self, src, tgt_in, training: bool = False, rng: Optional[Rng] = None,
                record: Optional[dict] = None) -> Tensor:
        """Logits ``(B, k_y, V)`` for source ids and shifted target ids."""
        H = self.encode(src, training, rng, record)
        return output_logits(self.decode(H, src, tgt_in, training, rng, record), self.E)

    __call__ = forward

    # --- incremental decoding -----------------------------------------------
    def start(self, src: np.ndarray) -> DecoderState:
        """Encode ``src`` and prepare an empty decoder cache (eval mode)."""
        src = np.atleast_2d(src)
        with T.no_grad():
            H = self.encode(src)
            cross = [project_kv(H, layer["cross"]["attn"], self.config.heads) for layer in self.dec]
        B = src.shape[0]
        empty = np.zeros((B, self.config.heads, 0, self.config.d_k), dtype=H.dtype)
        self_kv = [(Tensor(empty, dtype=H.dtype), Tensor(empty, dtype=H.dtype)) for _ in self.dec]
        return DecoderState(self_kv, cross, (src != PAD)[:, None, None, :], 0)

    def step(self, state: DecoderState, tokens) -> tuple:
        """Feed one token per row; returns ``(log-probs (B, V), new state)``."""
        tokens = np.asarray(tokens).reshape(-1, 1)
        c = self.config
        new_kv = []
        with T.no_grad():
            y = self.embed(tokens, offset=state.position)
            for layer, (k_old, v_old), kv_cross in zip(self.dec, state.self_kv, state.cross_kv):
                k_new, v_new = project_kv(y, layer["self"]["attn"], c.heads)
                k = Tensor(np.concatenate([k_old.data, k_new.data], axis=2), dtype=y.dtype)
                v = Tensor(np.concatenate([v_old.data, v_new.data], axis=2), dtype=y.dtype)
                new_kv.append((k, v))
                y = self._site_forward(y, None, layer["self"], None, False, None, None, None, kv=(k, v))
                y = self._site_forward(y, None, layer["cross"], state.src_mask, False, None, None, None,
                                       kv=kv_cross)
                y = self._ff_forward(y, layer["ff"], False, None)
            if c.final_norm:
                y = T.layer_norm(y, self.dec_norm["ln_gain"], self.dec_norm["ln_bias"], c.ln_eps)
            logp = T.log_softmax_lastdim(output_logits(y, self.E)).data[:, -1, :]
        return logp, DecoderState(new_kv, state.cross_kv, state.src_mask, state.position + 1)


# --- parameter accounting -------------------------------------------------------

PARAM_GROUPS = ("embeddings", "attention", "feed_forward", "roles", "norms")


def param_group(name: str) -> str:
    if name.startswith("embed."):
        return "embeddings"
    if ".role." in name:
        return "roles"
    if ".ln." in name or "final_ln" in name:
        return "norms"
    if ".attn." in name:
        return "attention"
    if ".ff." in name:
        return "feed_forward"
    raise KeyError(name)


def count_parameters(config: ModelConfig) -> dict:
    """Closed-form count of learnable scalars, grouped, without building tensors."""
    c = config
    hd = c.heads * c.d_k
    sites = 3 * c.layers
    attn_per_site = 3 * (c.d_model * hd + hd) + hd * c.d_model
    if c.variant == "tpt-d":
        role_per_site = c.heads * (c.d_model * c.n_roles + c.n_roles) + c.n_roles * c.d_role
    elif c.variant == "tpt-c":
        role_per_site = c.d_model * c.d_model + c.d_model
    else:
        role_per_site = 0
    groups = {
        "embeddings": c.vocab_size * c.d_model,
        "attention": sites * attn_per_site,
        "feed_forward": 2 * c.layers * (c.d_model * c.d_ff + c.d_ff + c.d_ff * c.d_model + c.d_model),
        "roles": sites * role_per_site,
        "norms": sites * 2 * c.d_model + (4 * c.d_model if c.final_norm else 0)
                 + (4 * c.layers * c.d_model if c.ff_norm else 0),
    }
    return {"total": sum(groups.values()), "groups": groups}


def enumerate_parameters(model: TPTransformer) -> dict:
    """Brute-force count over the registered tensors, grouped like :func:`count_parameters`."""
    groups = {g: 0 for g in PARAM_GROUPS}
    for name, p in model.params.items():
        groups[param_group(name)] += p.size
    return {"total": sum(groups.values()), "groups": groups}
