import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aogplan.nn import (
    MAGIC,
    CheckpointError,
    InvariantError,
    LstmParams,
    LstmState,
    NetConfig,
    Network,
    OptimizerState,
    SeqBatch,
    clip_global_norm,
    cross_entropy,
    finite_difference_grads,
    init_params,
    load_params,
    lstm_step,
    relative_error,
    save_params,
    sgd_momentum_step,
    softmax,
    train_epochs,
)


def scalar_lstm(W, b, x, h, c):
    """Reference cell written entry by entry, gates in the order i, f, o, g."""
    H = len(h)
    xh = list(x) + list(h)
    z = [sum(W[r][k] * xh[k] for k in range(len(xh))) + b[r] for r in range(4 * H)]
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    h_new, c_new = [], []
    for j in range(H):
        i, f, o = sig(z[j]), sig(z[H + j]), sig(z[2 * H + j])
        g = math.tanh(z[3 * H + j])
        cj = f * c[j] + i * g
        c_new.append(cj)
        h_new.append(o * math.tanh(cj))
    return h_new, c_new


def test_lstm_matches_scalar_reference():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        I, H = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        W = rng.normal(size=(4 * H, I + H))
        b = rng.normal(size=4 * H)
        x, h, c = rng.normal(size=I), rng.uniform(-1, 1, H), rng.normal(size=H)
        s = lstm_step(LstmParams(W, b), x, LstmState(h, c))
        rh, rc = scalar_lstm(W, b, x, h, c)
        worst = max(worst, np.abs(s.h - rh).max(), np.abs(s.c - rc).max())
    assert worst < 1e-12


def test_lstm_batch_rows_match_single_steps():
    rng = np.random.default_rng(1)
    p = LstmParams(rng.normal(size=(12, 5)), rng.normal(size=12))
    x, h, c = rng.normal(size=(4, 2)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    batched = lstm_step(p, x, LstmState(h, c))
    for r in range(4):
        one = lstm_step(p, x[r], LstmState(h[r], c[r]))
        assert np.allclose(batched.h[r], one.h, atol=1e-15)


def test_zero_params_give_half_gates():
    H = 3
    p = LstmParams(np.zeros((4 * H, 2 + H)), np.zeros(4 * H))
    s = lstm_step(p, np.ones(2), LstmState(np.zeros(H), np.full(H, 2.0)))
    # i = f = o = 0.5, g = 0: c = 0.5 * 2, h = 0.5 * tanh(1)
    assert np.allclose(s.c, 1.0) and np.allclose(s.h, 0.5 * math.tanh(1.0))


def test_hidden_stays_inside_unit_interval():
    rng = np.random.default_rng(2)
    H, I = 8, 4
    p = LstmParams(rng.normal(scale=3.0, size=(4 * H, I + H)), rng.normal(scale=3.0, size=4 * H))
    s = LstmState.zeros(H)
    for _ in range(10_000):
        s = lstm_step(p, rng.normal(scale=3.0, size=I), s)
        assert (np.abs(s.h) < 1).all()


def test_lstm_rejects_bad_shapes():
    p = LstmParams(np.zeros((8, 5)), np.zeros(8))
    with pytest.raises(ValueError):
        lstm_step(p, np.zeros(4), LstmState.zeros(2))
    with pytest.raises(ValueError):
        lstm_step(p, np.zeros(3), LstmState.zeros(3))


def test_gate_views():
    W = np.arange(4 * 2 * 3, dtype=float).reshape(8, 3)
    p = LstmParams(W, np.arange(8.0))
    assert np.array_equal(p.W_f, W[2:4]) and np.array_equal(p.W_g, W[6:8])
    assert p.b_o.tolist() == [4.0, 5.0] and p.hidden == 2 and p.input_size == 1


# -- softmax / cross-entropy ------------------------------------------------------

def test_softmax_values():
    p = softmax(np.array([0.0, math.log(3.0)]))
    assert np.allclose(p, [0.25, 0.75])
    assert np.allclose(softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])


def test_masked_softmax_zeroes_excluded_entries():
    p = softmax(np.array([5.0, 1.0, 1.0, 9.0]), np.array([False, True, True, False]))
    assert p.tolist() == [0.0, 0.5, 0.5, 0.0]
    with pytest.raises(ValueError):
        softmax(np.zeros(3), np.zeros(3, dtype=bool))
    with pytest.raises(ValueError):
        softmax(np.zeros(3), np.ones(2, dtype=bool))


def test_cross_entropy_value_and_gradient():
    p = np.array([0.2, 0.8])
    loss, g = cross_entropy(p, 1)
    assert loss == pytest.approx(-math.log(0.8))
    assert np.allclose(g, [0.2, -0.2])
    with pytest.raises(ValueError):
        cross_entropy(np.array([1.0, 0.0]), 1, np.array([True, False]))
    with pytest.raises(IndexError):
        cross_entropy(p, 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.data())
def test_softmax_is_a_distribution(z, data):
    mask = data.draw(st.lists(st.booleans(), min_size=len(z), max_size=len(z)))
    if not any(mask):
        mask[0] = True
    p = softmax(np.array(z), np.array(mask))
    assert p.sum() == pytest.approx(1.0) and (p[~np.array(mask)] == 0).all()


# -- network / BPTT -------------------------------------------------------------

def tiny_batch(rng, B=3, T=4, C=5, I=6, K=(3, 4), masked=True):
    step_mask = np.ones((B, T), dtype=bool)
    step_mask[0, T - 1] = False  # one padded step
    targets, allowed = [], []
    for k in K:
        tgt = rng.integers(0, k, size=(B, T))
        if masked:
            a = rng.random((B, T, k)) < 0.7
            a[np.arange(B)[:, None], np.arange(T)[None, :], tgt] = True
            allowed.append(a)
        else:
            allowed.append(None)
        targets.append(tgt)
    return SeqBatch(rng.normal(size=(B, C)), rng.normal(size=(B, T, I)), step_mask,
                    targets, allowed)


def tiny_net(seed=0, C=5, I=6, H=8, K=(3, 4)):
    net = Network.create(C, I, H, [(f"W{k}", f"b{k}", n) for k, n in enumerate(K)], seed)
    rng = np.random.default_rng(seed + 100)
    for v in net.params.values():
        v += rng.normal(scale=0.3, size=v.shape)  # leave the init's symmetric zeros
    return net


@pytest.mark.parametrize("masked", [True, False])
def test_bptt_matches_finite_differences(masked):
    rng = np.random.default_rng(3)
    net = tiny_net()
    batch = tiny_batch(rng, masked=masked)
    _, grads = net.loss_and_grads(batch)
    numeric = finite_difference_grads(lambda: net.loss(batch), net.params)
    for name in net.params:
        assert relative_error(grads[name], numeric[name]) < 1e-5, name


def test_loss_is_mean_over_samples():
    rng = np.random.default_rng(4)
    net = tiny_net()
    batch = tiny_batch(rng, masked=False)
    rows = []
    for r in range(batch.size):
        one = SeqBatch(batch.context[r:r + 1], batch.inputs[r:r + 1], batch.step_mask[r:r + 1],
                       [t[r:r + 1] for t in batch.targets], [None, None])
        rows.append(net.loss(one))
    assert net.loss(batch) == pytest.approx(np.mean(rows), rel=1e-12)


def test_padding_does_not_change_the_loss():
    rng = np.random.default_rng(5)
    net = tiny_net()
    b = tiny_batch(rng, B=1, masked=False)
    b.step_mask[:] = True
    b.step_mask[0, -1] = False
    cut = SeqBatch(b.context, b.inputs[:, :-1], b.step_mask[:, :-1],
                   [t[:, :-1] for t in b.targets], [None, None])
    assert net.loss(b) == pytest.approx(net.loss(cut), rel=1e-13)


def test_zero_weights_give_uniform_loss():
    net = tiny_net()
    for v in net.params.values():
        v[...] = 0.0
    b = tiny_batch(np.random.default_rng(6), B=2, masked=False)
    b.step_mask[:] = True
    assert net.loss(b) == pytest.approx(4 * (math.log(3) + math.log(4)))


def test_check_mode_passes_on_a_sane_network():
    net = tiny_net()
    loss, _ = net.loss_and_grads(tiny_batch(np.random.default_rng(7)), check=True)
    assert np.isfinite(loss)


def test_check_mode_flags_saturated_gates():
    net = tiny_net()
    net.params["b_lstm"][:] = 1e4  # sigmoid rounds to exactly 1
    with pytest.raises(InvariantError):
        net.loss_and_grads(tiny_batch(np.random.default_rng(7)), check=True)


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-9])) == pytest.approx(1e-9)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


# -- init / optimiser -----------------------------------------------------------

def test_init_bounds_and_biases():
    p = init_params({"W_hf": (16, 40), "W_lstm": (64, 30), "b_lstm": (64,), "b": (5,)}, 0)
    assert np.abs(p["W_hf"]).max() <= math.sqrt(6 / 56)
    assert np.abs(p["W_lstm"]).max() <= math.sqrt(6 / (30 + 16))
    assert p["b_lstm"][16:32].tolist() == [1.0] * 16
    assert not p["b_lstm"][:16].any() and not p["b_lstm"][32:].any() and not p["b"].any()
    q = init_params({"W_hf": (16, 40)}, 0)
    assert np.array_equal(p["W_hf"], q["W_hf"])


def test_plain_sgd_step():
    params = {"t": np.array([1.0])}
    sgd_momentum_step(params, {"t": np.array([1.0])}, OptimizerState(0.1, 0.0, 0.0))
    assert params["t"][0] == pytest.approx(0.9)


def test_momentum_trace():
    params = {"t": np.array([1.0])}
    opt = OptimizerState(lr=0.1, momentum=0.5, weight_decay=0.0)
    trace = []
    for _ in range(3):
        sgd_momentum_step(params, {"t": np.array([1.0])}, opt)
        trace.append(params["t"][0])
    # v: -0.1, -0.15, -0.175
    assert np.allclose(trace, [0.9, 0.75, 0.575])


def test_weight_decay_pulls_towards_zero():
    params = {"t": np.array([2.0])}
    sgd_momentum_step(params, {"t": np.array([0.0])}, OptimizerState(0.1, 0.0, 0.5))
    assert params["t"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=5))
def test_zero_lr_leaves_parameters_unchanged(values):
    params = {"t": np.array(values)}
    before = params["t"].copy()
    opt = OptimizerState(lr=0.0)
    for _ in range(3):
        sgd_momentum_step(params, {"t": np.array(values) * 7 + 1}, opt)
    assert np.array_equal(params["t"], before)


def test_gradient_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_momentum_step({"t": np.zeros(2)}, {"t": np.zeros(3)}, OptimizerState())


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == pytest.approx(5.0)
    assert g["a"][0] == pytest.approx(0.6) and g["b"][0] == pytest.approx(0.8)


def test_training_reduces_loss_and_counts_steps():
    rng = np.random.default_rng(8)
    net = tiny_net()
    batch = tiny_batch(rng, B=10, masked=False)
    losses = []

    def make(idx):
        return SeqBatch(batch.context[idx], batch.inputs[idx], batch.step_mask[idx],
                        [t[idx] for t in batch.targets], [None, None])

    steps = train_epochs(net, 10, make, NetConfig(lr=0.1, batch_size=4, epochs=30), 0,
                         lambda e, l: losses.append(l))
    assert steps == 30 * 3 and losses[-1] < losses[0]


def test_early_stop_callback():
    net = tiny_net()
    batch = tiny_batch(np.random.default_rng(9), masked=False)
    steps = train_epochs(net, 3, lambda idx: batch, NetConfig(batch_size=3, epochs=50), 0,
                         lambda e, l: e == 4)
    assert steps == 5


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = init_params({"W_hf": (3, 4), "b_lstm": (12,)}, 1)
    save_params(tmp_path / "m.ckpt", params, {"kind": "x", "n": 3})
    loaded, meta = load_params(tmp_path / "m.ckpt")
    assert meta == {"kind": "x", "n": 3}
    assert all(np.array_equal(params[k], loaded[k]) for k in params)
    assert list(loaded) == list(params)


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_params(path, {"w": np.arange(6.0).reshape(2, 3)}, {})
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_params(path)
    path.write_bytes(b"junk" + bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_params(path)
    path.write_bytes(MAGIC + b"\x01")
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(path)
