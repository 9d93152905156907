import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from helpers import tiny_config
from tptsumm import tensor as T
from tptsumm.checkpoint import (CheckpointError, load_checkpoint, read_table, restore, save_checkpoint,
                                write_table)
from tptsumm.data import copy_task, make_batch
from tptsumm.model import ConfigError, TPTransformer
from tptsumm.rng import Rng
from tptsumm.tensor import Tensor
from tptsumm.training import (Adafactor, NonFiniteGradient, TrainConfig, Trainer, adafactor_update,
                              factored_second_moment, init_slots, lr_schedule, train_step)


# --- schedule ---------------------------------------------------------------------

def test_lr_schedule_examples():
    w, s = 400, 2.0
    assert lr_schedule(w, w, s) == pytest.approx(s / math.sqrt(w))
    assert lr_schedule(4 * w, w, s) == pytest.approx(s / (2 * math.sqrt(w)))
    assert lr_schedule(1, w, s) == lr_schedule(w, w, s)
    with pytest.raises(ValueError):
        lr_schedule(0, w)


@given(st.integers(1, 10_000), st.integers(1, 5000))
def test_lr_non_increasing_after_warmup(w, dt):
    assert lr_schedule(w + dt, w) <= lr_schedule(w + dt - 1, w)


# --- Adafactor ----------------------------------------------------------------------

def oracle_vector(p, grads, lr, d=1.0):
    """Step-by-step unfactored recurrence for a 1-D parameter."""
    p = np.array(p, dtype=float)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        g = np.asarray(g, dtype=float)
        c = 1.0 - t ** -0.8
        v = c * v + (1 - c) * (g * g + 1e-30)
        u = g / np.sqrt(v)
        rms = math.sqrt((u * u).mean())
        p = p - lr * u / max(1.0, rms / d)
    return p


def test_vector_parameter_matches_hand_stepped_oracle():
    grads = [[1.0, 0.5], [1.0, 2.0], [-0.3, 0.1]]
    p = np.array([0.2, -0.4])
    slots = init_slots(p.shape)
    for t, g in enumerate(grads, 1):
        adafactor_update(p, np.array(g), slots, t, 0.1)
    np.testing.assert_allclose(p, oracle_vector([0.2, -0.4], grads, 0.1), rtol=1e-12)


def test_scalar_two_unit_steps_by_hand():
    # c_1 = 0 so v = 1 and u = 1; c_2 = 1 - 2**-0.8 keeps v = 1 for g = 1
    p = np.array([1.0])
    slots = init_slots(p.shape)
    adafactor_update(p, np.array([1.0]), slots, 1, 0.01)
    adafactor_update(p, np.array([1.0]), slots, 2, 0.01)
    assert p[0] == pytest.approx(0.98, abs=1e-12)
    assert slots["v"][0] == pytest.approx(1.0, abs=1e-12)


def test_rank_one_gradient_factored_estimate_is_exact():
    a, b = Rng(1).normal(5) + 2.0, Rng(2).normal(3) - 2.0
    g = np.outer(a, b)
    slots = init_slots(g.shape)
    adafactor_update(np.zeros_like(g), g, slots, 1, 0.0)
    np.testing.assert_allclose(factored_second_moment(slots["row"], slots["col"]), g * g, rtol=1e-10)


def test_zero_gradient_leaves_parameter_unchanged():
    p = Rng(3).normal((4, 3))
    before = p.copy()
    slots = init_slots(p.shape)
    adafactor_update(p, np.zeros_like(p), slots, 1, 0.5)
    np.testing.assert_array_equal(p, before)


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)), st.integers(1, 50))
def test_accumulators_nonnegative(g, t):
    slots = init_slots(g.shape)
    adafactor_update(np.zeros_like(g), g, slots, t, 0.1)
    assert (slots["row"] >= 0).all() and (slots["col"] >= 0).all()


def test_update_rms_is_clipped():
    p = np.zeros((6, 6))
    g = Rng(4).normal((6, 6))
    g[0, 0] = 1e4
    slots = init_slots(p.shape)
    adafactor_update(p, g, slots, 5, 1.0)
    assert math.sqrt((p * p).mean()) <= 1.0 + 1e-9


def test_factoring_only_for_matrices():
    assert set(init_slots((3,))) == {"v"}
    assert set(init_slots((3, 4))) == {"row", "col"}


def test_non_finite_gradient_aborts_with_name():
    w = Tensor(np.ones((2, 2)), requires_grad=True, name="w")
    b = Tensor(np.ones(2), requires_grad=True, name="b")
    opt = Adafactor({"w": w, "b": b})
    w.grad = Tensor(np.ones((2, 2)))
    b.grad = Tensor(np.ones(2))
    b.grad.data[1] = np.inf
    with pytest.raises(NonFiniteGradient) as e:
        opt.step(0.1)
    assert e.value.name == "b"
    np.testing.assert_array_equal(w.data, np.ones((2, 2)))
    assert opt.t == 0


# --- training loop ---------------------------------------------------------------------

def small_model(variant="tpt-d", seed=0, **kw):
    return TPTransformer(tiny_config(variant, vocab_size=12, **kw), seed=seed)


def test_uniform_logits_give_log_v():
    m = small_model()
    m.params["embed.E"].data[...] = 0.0
    b = make_batch(copy_task(Rng(0), 4, vocab_size=12, max_len=4))
    logits = m.forward(b.src, b.tgt_in)
    assert float(T.cross_entropy(logits, b.tgt_out).data) == pytest.approx(math.log(12), abs=1e-5)


def test_repeated_batch_loss_decreases():
    m = small_model()
    b = make_batch(copy_task(Rng(1), 8, vocab_size=12, max_len=5))
    opt = Adafactor(m.params)
    losses = [train_step(m, b, opt, 0.05) for _ in range(50)]
    assert losses[-1] < losses[0]


def test_empty_and_all_pad_batches_rejected():
    m = small_model()
    b = make_batch(copy_task(Rng(1), 2, vocab_size=12, max_len=3))
    b.tgt_out[...] = 0
    with pytest.raises(ValueError):
        train_step(m, b, Adafactor(m.params), 0.1)
    with pytest.raises(ValueError):
        make_batch([])


class Capture:
    """Optimiser stand-in that records the gradients it is handed."""

    def __init__(self, params):
        self.params = params
        self.grads = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        self.grads = {k: p.grad.data.copy() for k, p in self.params.items() if p.grad is not None}


def test_train_step_gradient_matches_finite_differences():
    with T.default_dtype(np.float64):
        m = small_model(init_std=0.3, seed=2)
        pairs = copy_task(Rng(3), 4, vocab_size=12, max_len=4)
        batches = [make_batch(pairs[:2]), make_batch(pairs[2:])]
        cap = Capture(m.params)
        train_step(m, batches, cap, 0.0, label_smoothing=0.1)
        for name in ("dec.1.cross.role.w_r", "enc.0.ff.w_g", "embed.E"):
            p = m.params[name]
            idx = [int(i) for i in Rng(4).permutation(p.size)[:15]]
            flat = p.data.reshape(-1)
            for i in idx:
                o = flat[i]
                vals = []
                for x in (o + 1e-5, o - 1e-5):
                    flat[i] = x
                    vals.append(np.mean([float(T.cross_entropy(m.forward(b.src, b.tgt_in), b.tgt_out,
                                                               label_smoothing=0.1).data) for b in batches]))
                flat[i] = o
                num = (vals[0] - vals[1]) / 2e-5
                a = cap.grads[name].reshape(-1)[i]
                assert abs(a - num) / max(1e-8, abs(a) + abs(num)) < 1e-4


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup=0)
    with pytest.raises(ConfigError):
        TrainConfig(label_smoothing=0.5)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})
    assert TrainConfig.from_dict(TrainConfig(seed=4).to_dict()).seed == 4


def make_trainer(seed=0, dropout=0.1):
    rng = Rng(seed)
    m = TPTransformer(tiny_config("tpt-d", vocab_size=12, dropout=dropout), rng=rng.spawn(0))
    pairs = copy_task(rng.spawn(1), 40, vocab_size=12, max_len=5)
    return Trainer(m, pairs, TrainConfig(batch_size=8, warmup=10, lr_scale=0.1), rng=rng.spawn(2))


def test_trainer_deterministic():
    assert make_trainer().train(5) == make_trainer().train(5)


# --- checkpoints --------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise_logits(tmp_path):
    tr = make_trainer()
    tr.train(3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tr.model, tr.optimizer, tr.rng, tr.step, tr.config)
    model, opt, rng = restore(load_checkpoint(path))
    b = make_batch(tr.pairs[:5])
    assert model.forward(b.src, b.tgt_in).data.tobytes() == tr.model.forward(b.src, b.tgt_in).data.tobytes()
    assert opt.t == 3


def test_save_load_save_byte_identical(tmp_path):
    tr = make_trainer()
    tr.train(2)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, tr.model, tr.optimizer, tr.rng, tr.step, tr.config)
    ck = load_checkpoint(a)
    model, opt, rng = restore(ck)
    save_checkpoint(b, model, opt, rng, ck.step, TrainConfig.from_dict(ck.train_config))
    assert a.read_bytes() == b.read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    full = make_trainer()
    stream = full.train(15)
    part = make_trainer()
    part.train(5)
    path = tmp_path / "r.ckpt"
    save_checkpoint(path, part.model, part.optimizer, part.rng, part.step, part.config)
    ck = load_checkpoint(path)
    model, opt, rng = restore(ck)
    resumed = Trainer(model, part.pairs, TrainConfig.from_dict(ck.train_config), rng=rng, optimizer=opt,
                      step=ck.step)
    assert resumed.train(10) == stream[5:]


def test_truncated_and_corrupt_files(tmp_path):
    tr = make_trainer()
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, tr.model, tr.optimizer, tr.rng, 0, tr.config)
    raw = path.read_bytes()
    cases = {"trunc": raw[:-7], "magic": b"XXXX" + raw[4:], "version": raw[:4] + b"\x09\x00\x00\x00" + raw[8:],
             "trailing": raw + b"\x00", "header": raw[:16] + b"\xff" + raw[17:]}
    for name, data in cases.items():
        p = tmp_path / f"{name}.ckpt"
        p.write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_shape_mismatch_against_config(tmp_path):
    tr = make_trainer()
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, tr.model)
    ck = load_checkpoint(path)
    ck.config["d_ff"] = 32
    with pytest.raises(CheckpointError):
        restore(ck)


def test_table_layout_little_endian(tmp_path):
    path = tmp_path / "t.bin"
    write_table(path, {"b": 1, "a": [2]}, {"x": np.arange(3, dtype=np.int64)})
    raw = path.read_bytes()
    assert raw[:4] == b"TPTS"
    assert int.from_bytes(raw[4:8], "little") == 1
    hlen = int.from_bytes(raw[8:16], "little")
    assert raw[16:16 + hlen] == b'{"a":[2],"b":1}'
    header, tensors = read_table(path)
    np.testing.assert_array_equal(tensors["x"], [0, 1, 2])


def test_rng_state_roundtrip_through_json():
    import json
    r = Rng(5)
    r.normal((4,))
    s = json.loads(json.dumps(r.state()))
    np.testing.assert_array_equal(Rng.from_state(s).normal((3,)), r.normal((3,)))
