import math

import numpy as np
import pytest

from interkd import tensor as T
from interkd.conformer import EncoderConfig
from interkd.distill import (AttentionDecoder, DecoderConfig, DistillWeights, aed_greedy_decode,
                             distill_loss, kl_loss, soft_label_batch, total_loss)
from interkd.model import AsrModel
from interkd.teacher import SoftLabelSet
from interkd.tensor import Tensor

from oracles import central_difference, kl_direct, log_softmax_rows, rel_error

ENC = EncoderConfig(num_layers=4, dim=8, heads=2, ff_dim=8, conv_kernel=3, dropout=0.0)
DEC = DecoderConfig(layers=1, heads=2, ff_dim=8, dropout=0.0)


def random_pair(rng, u=4, v=7, k=3):
    logp = log_softmax_rows(rng.normal(scale=2.0, size=(u, v)))
    ids = np.stack([rng.choice(v, size=k, replace=False) for _ in range(u)])
    probs = rng.dirichlet(np.ones(k), size=u)
    return logp, ids, probs


@pytest.mark.parametrize("reverse", [True, False])
def test_kl_matches_direct_summation(reverse):
    rng = np.random.default_rng(0)
    for _ in range(100):
        logp, ids, probs = random_pair(rng)
        got = kl_loss(Tensor(logp), ids, probs, reverse=reverse).item()
        assert got >= 0.0
        assert got == pytest.approx(kl_direct(logp, ids, probs, reverse), abs=1e-12)


def test_two_point_closed_form():
    # student restricted to {0, 1} gives (q, 1-q); teacher (t, 1-t)
    q, t = 0.3, 0.8
    logp = np.log(np.array([[q * 0.5, (1 - q) * 0.5, 0.5]]))
    expected = q * math.log(q / t) + (1 - q) * math.log((1 - q) / (1 - t))
    got = kl_loss(Tensor(logp), [[0, 1]], [[t, 1 - t]]).item()
    assert got == pytest.approx(expected, abs=1e-14)
    forward = t * math.log(t / q) + (1 - t) * math.log((1 - t) / (1 - q))
    assert kl_loss(Tensor(logp), [[0, 1]], [[t, 1 - t]], reverse=False).item() == pytest.approx(
        forward, abs=1e-14)


def test_zero_exactly_when_restricted_distributions_match():
    rng = np.random.default_rng(1)
    logp, ids, _ = random_pair(rng)
    restricted = np.exp(np.take_along_axis(logp, ids, axis=1))
    restricted /= restricted.sum(1, keepdims=True)
    assert kl_loss(Tensor(logp), ids, restricted).item() == pytest.approx(0.0, abs=1e-15)
    # mass outside the support does not matter
    shifted = logp.copy()
    mask = np.ones_like(logp, dtype=bool)
    np.put_along_axis(mask, ids, False, axis=1)
    shifted[mask] -= 3.0
    assert kl_loss(Tensor(shifted), ids, restricted).item() == pytest.approx(0.0, abs=1e-15)


def test_teacher_floor_and_renormalisation():
    logp = np.log(np.array([[0.5, 0.25, 0.25]]))
    got = kl_loss(Tensor(logp), [[0, 1]], [[1.0, 0.0]]).item()
    assert math.isfinite(got)
    assert got == pytest.approx(kl_direct(logp, np.array([[0, 1]]), np.array([[1.0, 0.0]])), abs=1e-12)


@pytest.mark.parametrize("reverse", [True, False])
def test_kl_gradient_matches_finite_differences(reverse):
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(2, 3, 6))
    ids = rng.integers(0, 6, size=(2, 3, 3))
    ids[..., 1] = (ids[..., 0] + 1) % 6
    ids[..., 2] = (ids[..., 0] + 2) % 6
    probs = rng.dirichlet(np.ones(3), size=(2, 3))
    mask = np.array([[1, 1, 0], [1, 1, 1.0]])

    def f():
        with T.no_grad():
            return kl_loss(T.log_softmax(Tensor(logits)), ids, probs, mask, reverse=reverse).item()

    x = Tensor(logits.copy(), requires_grad=True)
    kl_loss(T.log_softmax(x), ids, probs, mask, reverse=reverse).backward()
    np.testing.assert_allclose(x.grad, central_difference(f, logits), rtol=1e-5, atol=1e-9)
    np.testing.assert_array_equal(x.grad[0, 2], 0.0)


def test_position_mask_and_batch_mean():
    rng = np.random.default_rng(3)
    a, b = random_pair(rng), random_pair(rng)
    logp = np.stack([a[0], b[0]])
    ids, probs = np.stack([a[1], b[1]]), np.stack([a[2], b[2]])
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0.0]])
    got = kl_loss(Tensor(logp), ids, probs, mask).item()
    expected = 0.5 * (kl_direct(*a) + kl_direct(b[0][:2], b[1][:2], b[2][:2]))
    assert got == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError, match="position mismatch"):
        kl_loss(Tensor(logp), ids[:, :3], probs[:, :3])


def test_soft_label_batch_pads():
    labels = [SoftLabelSet(np.array([[1, 2]]), np.array([[0.75, 0.25]])),
              SoftLabelSet(np.array([[3, 0], [2, 1]]), np.array([[0.5, 0.5], [0.9, 0.1]]))]
    ids, probs, mask = soft_label_batch(labels, 3, 2)
    assert ids.shape == (2, 3, 2)
    np.testing.assert_array_equal(mask, [[1, 0, 0], [1, 1, 0]])
    np.testing.assert_array_equal(probs[1, 1], [0.9, 0.1])


def test_combiners_reproduce_hand_computed_sums():
    w = DistillWeights(alpha=0.7, beta=0.5, m=1)
    assert distill_loss(2.0, [4.0], w) == 3.0
    assert total_loss(10.0, 3.0, 0.7) == (1 - 0.7) * 10.0 + 0.7 * 3.0
    w2 = DistillWeights(beta=0.25, m=2)
    assert distill_loss(1.0, [2.0, 6.0], w2) == 0.75 * 1.0 + 0.125 * 8.0
    assert distill_loss(5.0, [], DistillWeights(m=0)) == 5.0
    assert total_loss(2.0, 9.0, 0.0) == 2.0 and total_loss(2.0, 9.0, 1.0) == 9.0
    with pytest.raises(ValueError):
        distill_loss(1.0, [1.0], DistillWeights(m=2))
    with pytest.raises(ValueError):
        DistillWeights(alpha=1.5)
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.1)


def make_decoder(seed=0, v=5):
    return AttentionDecoder(np.random.default_rng(seed), v, 8, DEC)


def test_teacher_forcing_input():
    dec = make_decoder()
    ids, lengths = dec.teacher_forcing_input([[1, 2, 3], [4]])
    np.testing.assert_array_equal(ids, [[dec.cls_id, 1, 2], [dec.cls_id, dec.pad_id, dec.pad_id]])
    np.testing.assert_array_equal(lengths, [3, 1])


def test_decoder_is_causal():
    dec = make_decoder()
    mem = Tensor(np.random.default_rng(1).normal(size=(1, 6, 8)))
    a = dec(np.array([[dec.cls_id, 1, 2, 3]]), [4], mem, [6]).data
    b = dec(np.array([[dec.cls_id, 1, 4, 0]]), [4], mem, [6]).data
    np.testing.assert_array_equal(a[0, :2], b[0, :2])
    assert not np.allclose(a[0, 2], b[0, 2])


def test_decoder_ignores_padded_memory():
    dec = make_decoder()
    mem = np.random.default_rng(1).normal(size=(1, 6, 8))
    hist = np.array([[dec.cls_id, 1]])
    a = dec(hist, [2], Tensor(mem), [4]).data
    mem[0, 4:] = 100.0
    np.testing.assert_allclose(dec(hist, [2], Tensor(mem), [4]).data, a, atol=1e-12)


def test_decoder_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    dec = make_decoder()
    mem = rng.normal(size=(2, 5, 8))
    hist, lens = dec.teacher_forcing_input([[1, 2, 0], [3, 3]])
    weights = rng.normal(size=(2, 3, 9))
    m = Tensor(mem.copy(), requires_grad=True)
    (dec(hist, lens, m, [5, 3]) * weights).sum().backward()

    def f():
        with T.no_grad():
            return float((dec(hist, lens, Tensor(mem), [5, 3]).data * weights).sum())

    assert rel_error(m.grad, central_difference(f, mem)) < 1e-5
    for name, p in list(dec.named_parameters())[::5]:
        idx = [tuple(int(j) for j in np.unravel_index(rng.integers(p.data.size), p.shape))]
        num = central_difference(f, p.data, indices=idx)
        assert rel_error(p.grad[idx[0]], num[idx[0]]) < 1e-4, name


def test_aed_greedy_decode_limits_and_sep():
    dec = make_decoder()
    h = Tensor(np.random.default_rng(0).normal(size=(4, 8)))
    assert aed_greedy_decode(dec, h, 0) == []
    dec.classifier.bias.data[:] = 0.0
    dec.classifier.weight.data[:] = 0.0
    dec.classifier.bias.data[2] = 10.0
    assert aed_greedy_decode(dec, h, 3) == [2, 2, 2]
    dec.classifier.bias.data[dec.sep_id] = 20.0
    assert aed_greedy_decode(dec, h, 3) == []


def test_decoder_parameters_are_shared_across_taps():
    plain = AsrModel(5, 4, ENC, DEC, seed=0)
    names = [n for n, _ in plain.named_parameters() if n.startswith("decoder.")]
    assert names and len(names) == len(set(names))
    # one decoder serves every tap, so M never changes the parameter count
    assert plain.num_parameters() == AsrModel(5, 4, ENC, DEC, seed=1).num_parameters()


def test_removing_decoder_leaves_ctc_output_byte_identical():
    with_dec = AsrModel(5, 4, ENC, DEC, seed=3)
    without = AsrModel(5, 4, ENC, None, seed=3)
    feats = np.random.default_rng(0).normal(size=(7, 4))
    assert with_dec.frame_logprobs(feats).tobytes() == without.frame_logprobs(feats).tobytes()
    fresh = AsrModel(5, 4, ENC, None, seed=9)
    fresh.load_state_dict(with_dec.inference_parameters())
    assert fresh.frame_logprobs(feats).tobytes() == with_dec.frame_logprobs(feats).tobytes()
