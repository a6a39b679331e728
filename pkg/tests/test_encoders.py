import math

import numpy as np
import pytest

from sensorppo import autodiff as ad
from sensorppo.autodiff import Tape, Tensor
from sensorppo.encoders import (
    ConfigurationError,
    EncoderConfig,
    GRUEncoder,
    HistoryBuffer,
    LRUEncoder,
    LRULayer,
    MLPEncoder,
    TransformerEncoder,
    build_encoder,
    burn_in_unroll,
    diagonal_recurrence,
    lru_init,
    reset_on_done,
    sinusoidal_encoding,
)

SMALL = EncoderConfig(d_model=8, rnn_layers=2, tf_layers=2, n_heads=2, seq_len=6)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------- MLP

def test_mlp_zero_weights_give_zero_features():
    enc = MLPEncoder(4, EncoderConfig(), np.random.default_rng(0))
    for p in enc.named_parameters().values():
        p.data[...] = 0.0
    assert np.array_equal(enc(np.ones((3, 4))).data, np.zeros((3, 128)))


def test_all_encoders_emit_same_width():
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(2, 6))
    for name in ("mlp", "gru", "lru", "transformer"):
        enc = build_encoder(name, 6, EncoderConfig(), rng)
        if name == "mlp":
            z = enc(obs)
        elif name == "transformer":
            window = np.zeros((2, 16, 6))
            invalid = np.ones((2, 16), dtype=bool)
            invalid[:, 0] = False
            z = enc(window, invalid)
        else:
            _, z = enc.step(enc.initial_state(2), obs)
        assert z.shape == (2, 128)


def test_unknown_encoder():
    with pytest.raises(ConfigurationError):
        build_encoder("ssm", 3, SMALL, np.random.default_rng(0))


def test_mlp_grad_check():
    enc = MLPEncoder(5, SMALL, np.random.default_rng(1))
    assert ad.grad_check(enc, np.random.default_rng(2).normal(size=(3, 5))) < 1e-5


# ---------------------------------------------------------------------- GRU

def numpy_gru_cell(cell, h, x):
    H = cell.hidden
    W, b = cell.wx.weight.data, cell.wx.bias.data
    gx = x @ W + b
    gh = h @ cell.u_ru.data
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    u = _sigmoid(gx[:, H:2 * H] + gh[:, H:])
    cand = np.tanh(gx[:, 2 * H:] + (r * h) @ cell.u_h.data)
    return (1 - u) * h + u * cand, u, cand


def test_gru_cell_matches_reference_equations():
    enc = GRUEncoder(4, SMALL, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    h, x = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    cell = enc.cells[0]
    ref, _, _ = numpy_gru_cell(cell, h, x)
    assert np.max(np.abs(cell(Tensor(h), Tensor(x)).data - ref)) < 1e-12


def test_gru_update_gate_endpoints():
    enc = GRUEncoder(4, SMALL, np.random.default_rng(3))
    cell = enc.cells[0]
    H = cell.hidden
    rng = np.random.default_rng(5)
    h, x = rng.normal(size=(2, H)) * 0.5, rng.normal(size=(2, H))
    cell.wx.bias.data[H:2 * H] = -1e3
    assert np.max(np.abs(cell(Tensor(h), Tensor(x)).data - h)) < 1e-6
    cell.wx.bias.data[H:2 * H] = 1e3
    _, _, cand = numpy_gru_cell(cell, h, x)
    assert np.max(np.abs(cell(Tensor(h), Tensor(x)).data - cand)) < 1e-6


def _unroll_fn(enc, B, T, dones=None):
    dones = np.zeros((T, B)) if dones is None else dones

    def f(x):
        seq = ad.reshape(x, (T, B, enc.obs_dim))
        state = enc.initial_state(B)
        state = enc.unpack(state)
        outs = []
        for t in range(T):
            state = reset_on_done(state, dones[t])
            state, z = enc.step(state, seq[t])
            outs.append(z)
        return ad.stack(outs)

    return f


@pytest.mark.parametrize("cls", [GRUEncoder, LRUEncoder])
def test_recurrent_grad_check_through_eight_steps(cls):
    enc = cls(3, SMALL, np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(8 * 2 * 3,))
    dones = np.zeros((8, 2))
    dones[4, 1] = 1.0
    assert ad.grad_check(_unroll_fn(enc, 2, 8, dones), x) < 1e-4


@pytest.mark.parametrize("name", ["mlp", "gru", "lru", "transformer"])
def test_parameter_gradients(name):
    rng = np.random.default_rng(8)
    enc = build_encoder(name, 3, SMALL, rng)
    if name == "mlp":
        obs = rng.normal(size=(4, 3))
        loss = lambda: enc(obs) * weights
    elif name == "transformer":
        window = rng.normal(size=(2, SMALL.seq_len, 3))
        invalid = np.zeros((2, SMALL.seq_len), dtype=bool)
        invalid[0, 4:] = True
        loss = lambda: enc(window, invalid) * weights[:2]
    else:
        obs = rng.normal(size=(5, 4, 3))
        dones = np.zeros((5, 4))
        dones[2, 0] = 1
        loss = lambda: enc.unroll(enc.initial_state(4), obs, dones)[1][-1] * weights
    weights = rng.normal(size=(4, 8))
    err = ad.param_grad_check(loss, enc.named_parameters(), 6, np.random.default_rng(9))
    assert err < 1e-5


# ---------------------------------------------------------------------- LRU

def test_lru_init_ring_and_phase():
    nu_log, theta_log = lru_init(10_000, 0.9, 0.999, 6.28, np.random.default_rng(0))
    mod = np.exp(-np.exp(nu_log))
    phase = np.exp(theta_log)
    assert mod.min() >= 0.9 - 1e-12 and mod.max() <= 0.999 + 1e-12
    assert phase.min() >= 0.0 and phase.max() <= 6.28
    with pytest.raises(ConfigurationError):
        lru_init(4, 0.9, 1.0, 6.28, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        lru_init(4, 0.0, 0.5, 6.28, np.random.default_rng(0))


def test_lru_encoder_moduli_after_construction():
    enc = LRUEncoder(3, EncoderConfig(), np.random.default_rng(1))
    for block in enc.blocks:
        re, im = block.eigenvalues()
        mod = np.hypot(re.data, im.data)
        assert np.all((mod >= 0.9 - 1e-12) & (mod <= 0.999 + 1e-12))


def test_lru_scalar_geometric_recursion():
    cfg = EncoderConfig(d_model=1)
    layer = LRULayer(1, cfg, np.random.default_rng(0))
    layer.nu_log.data[:] = math.log(-math.log(0.5))
    layer.theta_log.data[:] = -np.inf  # phase 0: real eigenvalue 0.5
    layer.gamma_log.data[:] = 0.0
    layer.b_re.data[:] = 1.0
    layer.b_im.data[:] = 0.0
    h_re, h_im = Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1)))
    seen = []
    for x in [1.0, 0.0, 0.0, 0.0]:
        h_re, h_im, _ = layer(h_re, h_im, Tensor(np.array([[x]])))
        seen.append(h_re.item())
        assert h_im.item() == 0.0
    assert seen == [1.0, 0.5, 0.25, 0.125]


def test_lru_layer_matches_complex_reference():
    dim = 6
    layer = LRULayer(dim, EncoderConfig(d_model=dim), np.random.default_rng(2))
    re, im = layer.eigenvalues()
    lam = re.data + 1j * im.data
    gamma = np.exp(layer.gamma_log.data)
    B = (layer.b_re.data + 1j * layer.b_im.data).T * gamma[:, None]
    xs = np.random.default_rng(3).normal(size=(7, dim))
    ref = diagonal_recurrence(lam, B, xs)
    h_re, h_im = Tensor(np.zeros((1, dim))), Tensor(np.zeros((1, dim)))
    for t, x in enumerate(xs):
        h_re, h_im, _ = layer(h_re, h_im, Tensor(x[None]))
        assert np.max(np.abs(h_re.data[0] + 1j * h_im.data[0] - ref[t])) < 1e-12


def test_lru_zero_input_decays():
    dim = 8
    layer = LRULayer(dim, EncoderConfig(d_model=dim), np.random.default_rng(4))
    rng = np.random.default_rng(5)
    h_re, h_im = Tensor(rng.normal(size=(1, dim))), Tensor(rng.normal(size=(1, dim)))
    n0 = math.hypot(np.linalg.norm(h_re.data), np.linalg.norm(h_im.data))
    for t in range(1, 30):
        h_re, h_im, _ = layer(h_re, h_im, Tensor(np.zeros((1, dim))))
        n = math.hypot(np.linalg.norm(h_re.data), np.linalg.norm(h_im.data))
        assert n <= 0.999 ** t * n0 + 1e-12


# ------------------------------------------------------------------- resets

def test_reset_on_done_cases():
    state = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(reset_on_done(state, [0, 0, 0]), state)
    assert np.array_equal(reset_on_done(state, [1, 1, 1]), np.zeros((3, 4)))
    mixed = reset_on_done(state, [0, 1, 0])
    assert np.array_equal(mixed[[0, 2]], state[[0, 2]]) and np.all(mixed[1] == 0)
    tensors = reset_on_done([Tensor(state), Tensor(state * 2)], [1, 0, 0])
    assert np.all(tensors[1].data[0] == 0) and np.array_equal(tensors[1].data[1:], state[1:] * 2)


def test_burn_in_zero_length_returns_state():
    enc = GRUEncoder(3, SMALL, np.random.default_rng(0))
    s0 = np.random.default_rng(1).normal(size=(2, enc.state_size))
    out = burn_in_unroll(enc, s0, np.zeros((0, 2, 3)), np.zeros((0, 2)))
    assert np.array_equal(out, s0)


@pytest.mark.parametrize("cls", [GRUEncoder, LRUEncoder])
def test_burn_in_matches_recorded_unroll(cls):
    enc = cls(3, SMALL, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    s0 = rng.normal(size=(2, enc.state_size)) * 0.1
    obs = rng.normal(size=(8, 2, 3))
    dones = np.zeros((8, 2))
    dones[3, 0] = 1
    with Tape() as tape:
        warmed = burn_in_unroll(enc, s0, obs, dones)
    assert len(tape) == 0
    with Tape():
        state, _ = enc.unroll(s0, obs, dones)
    assert np.array_equal(warmed, enc.pack(state))


def test_burn_in_state_is_constant_for_downstream_loss():
    enc = GRUEncoder(3, SMALL, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    obs = rng.normal(size=(4, 1, 3))
    x_burn = Tensor(rng.normal(size=(4, 1, 3)), requires_grad=True)
    warmed = burn_in_unroll(enc, enc.initial_state(1), x_burn.data, np.zeros((4, 1)))
    with Tape() as tape:
        _, zs = enc.unroll(warmed, obs, np.zeros((4, 1)))
        loss = ad.tsum(zs[-1])
    tape.backward(loss)
    # the burn-in inputs never entered the tape
    assert x_burn.grad is None


@pytest.mark.parametrize("cls", [GRUEncoder, LRUEncoder])
def test_recurrent_causality(cls):
    enc = cls(3, SMALL, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    obs = rng.normal(size=(6, 1, 3))
    other = obs.copy()
    other[4:] = rng.normal(size=(2, 1, 3))
    _, za = enc.unroll(enc.initial_state(1), obs, np.zeros((6, 1)))
    _, zb = enc.unroll(enc.initial_state(1), other, np.zeros((6, 1)))
    for t in range(4):
        assert np.array_equal(za[t].data, zb[t].data)
    assert not np.array_equal(za[4].data, zb[4].data)


# -------------------------------------------------------------- Transformer

def test_history_buffer_rolling_view():
    buf = HistoryBuffer(4, 1)
    window, invalid = buf.view()
    assert invalid.all()
    for v in [1.0, 2.0, 3.0]:
        buf.push(np.array([v]))
    window, invalid = buf.view()
    assert window[:3, 0].tolist() == [1.0, 2.0, 3.0] and invalid.tolist() == [False, False, False, True]
    for v in [4.0, 5.0]:
        buf.push(np.array([v]))
    window, invalid = buf.view()
    assert window[:, 0].tolist() == [2.0, 3.0, 4.0, 5.0] and not invalid.any()
    buf.reset()
    assert buf.view()[1].all()


def test_sinusoidal_encoding_properties():
    pe = sinusoidal_encoding(16, 128)
    assert np.array_equal(pe[0, 0::2], np.zeros(64)) and np.array_equal(pe[0, 1::2], np.ones(64))
    assert np.all(np.abs(pe) <= 1.0)
    pos, i = 5, 3
    assert pe[pos, 2 * i] == pytest.approx(math.sin(pos / 10000 ** (2 * i / 128)))
    assert pe[pos, 2 * i + 1] == pytest.approx(math.cos(pos / 10000 ** (2 * i / 128)))


def _tf(seed=0, obs_dim=3, cfg=SMALL):
    enc = TransformerEncoder(obs_dim, cfg, np.random.default_rng(seed))
    enc.eval()
    return enc


def test_transformer_single_valid_position_pools_all_weight():
    enc = _tf()
    window = np.random.default_rng(1).normal(size=(1, SMALL.seq_len, 3))
    invalid = np.ones((1, SMALL.seq_len), dtype=bool)
    invalid[0, 0] = False
    h, inv = enc.encode_sequence(window, invalid)
    alpha = enc.pooling_weights(h, inv).data
    assert alpha[0, 0] == 1.0 and np.all(alpha[0, 1:] == 0.0)


def test_transformer_pooling_weights_sum_to_one():
    enc = _tf()
    rng = np.random.default_rng(2)
    window = rng.normal(size=(5, SMALL.seq_len, 3))
    invalid = rng.random((5, SMALL.seq_len)) < 0.4
    invalid[:, 0] = False
    h, inv = enc.encode_sequence(window, invalid)
    alpha = enc.pooling_weights(h, inv).data
    assert np.all(alpha[invalid] == 0.0)
    assert np.max(np.abs(alpha.sum(axis=1) - 1)) < 1e-12


def test_transformer_invariant_to_invalid_slot_contents():
    enc = _tf()
    rng = np.random.default_rng(3)
    window = rng.normal(size=(1, SMALL.seq_len, 3))
    invalid = np.zeros((1, SMALL.seq_len), dtype=bool)
    invalid[0, 3:] = True
    base = enc(window, invalid).data
    swapped = window.copy()
    swapped[0, [3, 4]] = swapped[0, [4, 3]]
    assert base.tobytes() == enc(swapped, invalid).data.tobytes()
    fuzzed = window.copy()
    fuzzed[0, 3:] = rng.normal(scale=1e3, size=(SMALL.seq_len - 3, 3))
    assert base.tobytes() == enc(fuzzed, invalid).data.tobytes()


def test_transformer_empty_context_error():
    enc = _tf()
    with pytest.raises(ad.EmptyContextError):
        enc(np.zeros((1, SMALL.seq_len, 3)), np.ones((1, SMALL.seq_len), dtype=bool))


def test_transformer_grad_check_with_padding():
    enc = _tf(obs_dim=2)
    invalid = np.zeros((1, SMALL.seq_len), dtype=bool)
    invalid[0, 4:] = True
    x = np.random.default_rng(4).normal(size=(1, SMALL.seq_len, 2))
    assert ad.grad_check(lambda w: enc(w, invalid), x) < 1e-5


def test_transformer_dropout_only_in_training():
    enc = _tf()
    enc.set_dropout_rng(np.random.default_rng(0))
    window = np.random.default_rng(5).normal(size=(2, SMALL.seq_len, 3))
    invalid = np.zeros((2, SMALL.seq_len), dtype=bool)
    a, b = enc(window, invalid).data, enc(window, invalid).data
    assert np.array_equal(a, b)
    enc.train()
    c = enc(window, invalid).data
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("name", ["mlp", "gru", "lru", "transformer"])
def test_encoders_deterministic(name):
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(11)
        enc = build_encoder(name, 3, SMALL, rng)
        x = rng.normal(size=(2, 3))
        if name == "transformer":
            window = np.repeat(x[:, None, :], SMALL.seq_len, axis=1)
            outs.append(enc(window, np.zeros((2, SMALL.seq_len), dtype=bool)).data)
        elif name == "mlp":
            outs.append(enc(x).data)
        else:
            outs.append(enc.step(enc.initial_state(2), x)[1].data)
    assert outs[0].tobytes() == outs[1].tobytes()
