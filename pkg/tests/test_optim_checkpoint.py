import struct

import numpy as np
import pytest

from interkd import nn
from interkd import tensor as T
from interkd.checkpoint import CheckpointError, load_checkpoint, restore, save_checkpoint
from interkd.optim import NonFiniteGradientError, OptimizerState, optimizer_step, warmup_inverse_sqrt
from interkd.tensor import Tensor


class Tiny(nn.Module):
    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.inp = nn.Linear(rng, 3, 4)
        self.blocks = [nn.FeedForward(rng, 4, 8), nn.FeedForward(rng, 4, 8)]
        self.norm = nn.LayerNorm(4)


def test_parameter_names_follow_attribute_paths():
    names = [n for n, _ in Tiny().named_parameters()]
    assert names[:2] == ["inp.weight", "inp.bias"]
    assert "blocks.1.w2.weight" in names
    assert names[-2:] == ["norm.gain", "norm.bias"]
    assert len(names) == len(set(names))


def test_state_dict_round_trip_and_errors():
    a, b = Tiny(0), Tiny(1)
    b.load_state_dict(a.state_dict())
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    state = a.state_dict()
    state["extra"] = np.zeros(1)
    with pytest.raises(KeyError, match="extra"):
        b.load_state_dict(state)
    state = a.state_dict()
    state["inp.bias"] = np.zeros(5)
    with pytest.raises(ValueError, match="inp.bias"):
        b.load_state_dict(state)


def test_schedule_boundaries():
    assert warmup_inverse_sqrt(0, 1e-3, 400) == 0.0
    assert warmup_inverse_sqrt(400, 1e-3, 400) == pytest.approx(1e-3)
    assert warmup_inverse_sqrt(1600, 1e-3, 400) == pytest.approx(5e-4)
    rates = [warmup_inverse_sqrt(s, 1e-3, 400) for s in range(401)]
    assert all(x < y for x, y in zip(rates, rates[1:]))


def test_zero_gradients_leave_parameters_unchanged():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = OptimizerState(warmup=1)
    optimizer_step(state, {"w": w})
    np.testing.assert_array_equal(w.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_step_matches_hand_computation():
    w = Tensor(np.array([0.5]), requires_grad=True)
    w.grad = np.array([2.0])
    state = OptimizerState(peak_lr=0.1, warmup=1, clip_norm=None)
    lr = optimizer_step(state, {"w": w})
    m = 0.1 * 2.0 / (1 - 0.9)
    v = 0.02 * 4.0 / (1 - 0.98)
    assert lr == pytest.approx(0.1)
    assert w.data[0] == pytest.approx(0.5 - 0.1 * m / (np.sqrt(v) + 1e-9))
    np.testing.assert_array_equal(w.grad, [0.0])


def test_clipping_scales_to_max_norm():
    # Adam is scale-invariant, so compare moments instead of parameters
    w = Tensor(np.zeros(2), requires_grad=True)
    w.grad = np.array([30.0, 40.0])
    state = OptimizerState(warmup=1, clip_norm=5.0)
    optimizer_step(state, {"w": w})
    np.testing.assert_allclose(state.m["w"], 0.1 * np.array([3.0, 4.0]))


def test_quadratic_converges():
    w = Tensor(np.array([0.0]), requires_grad=True)
    state = OptimizerState(peak_lr=0.1, warmup=10)
    for _ in range(2000):
        ((w - 3.0) * (w - 3.0)).sum().backward()
        optimizer_step(state, {"w": w})
    assert abs(w.data[0] - 3.0) < 1e-3


def test_nan_gradient_aborts_step_and_names_parameter():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    b.grad = np.array([1.0, np.nan])
    state = OptimizerState(warmup=1)
    with pytest.raises(NonFiniteGradientError, match="'enc.b'"):
        optimizer_step(state, {"enc.a": a, "enc.b": b})
    assert state.step == 0
    np.testing.assert_array_equal(b.data, [1.0, 1.0])


def test_training_is_bit_deterministic():
    def run():
        model = Tiny(0)
        params = dict(model.named_parameters())
        state = OptimizerState(warmup=5)
        rng = np.random.default_rng(9)
        x = np.random.default_rng(1).normal(size=(5, 3))
        for _ in range(5):
            h = model.norm(model.blocks[1](model.blocks[0](model.inp(Tensor(x)), rng), rng))
            (h * h).mean().backward()
            optimizer_step(state, params)
        return model.state_dict()

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = {"a.weight": np.random.default_rng(0).normal(size=(3, 4)),
              "scalar": np.array(2.5), "b": np.arange(5.0)}
    path = tmp_path / "x.ckpt"
    save_checkpoint(params, path, {"epoch": 3})
    back, meta = load_checkpoint(path, with_metadata=True)
    assert meta == {"epoch": 3}
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint({"w": np.ones(4)}, path)
    raw = path.read_bytes()

    empty = tmp_path / "empty.ckpt"
    empty.write_bytes(b"")
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(empty)

    (tmp_path / "cut.ckpt").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ckpt")

    (tmp_path / "v.ckpt").write_bytes(raw[:4] + struct.pack("<H", 99) + raw[6:])
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "v.ckpt")

    (tmp_path / "m.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "m.ckpt")

    (tmp_path / "t.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_restore_rejects_unknown_names(tmp_path):
    model = Tiny()
    state = model.state_dict()
    state["ghost.weight"] = np.zeros(2)
    save_checkpoint(state, tmp_path / "x.ckpt")
    with pytest.raises(CheckpointError, match="ghost.weight"):
        restore(Tiny(), tmp_path / "x.ckpt")


def test_checkpoint_reproduces_eval_loss(tmp_path):
    model = Tiny(4)
    x = Tensor(np.random.default_rng(2).normal(size=(6, 3)))

    def loss(m):
        with T.no_grad():
            h = m.norm(m.blocks[1](m.blocks[0](m.inp(x))))
            return float((h * h).mean().data)

    save_checkpoint(model.state_dict(), tmp_path / "m.ckpt")
    fresh = Tiny(5)
    restore(fresh, tmp_path / "m.ckpt")
    assert loss(fresh) == loss(model)


def test_dropout_mask_none_in_eval():
    assert nn.draw_mask(None, (3, 3), 0.1) is None
    assert nn.draw_mask(np.random.default_rng(0), (3, 3), 0.0) is None
    mask = nn.draw_mask(np.random.default_rng(0), (1000,), 0.1)
    assert 0.05 < 1 - mask.mean() < 0.15
