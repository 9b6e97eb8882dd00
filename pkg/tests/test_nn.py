import math

import numpy as np
import pytest
import torch

from reactplan.nn import (DTYPE, MLP, AdamState, Dense, GRUCell, LayerNorm, MultiHeadAttention, TransformerLayer,
                          adam_step, as_tensor, attention, check_finite, gru_cell, layer_norm, load_checkpoint,
                          numerical_gradient_check, save_checkpoint, seed_rng, smooth_l1)


def rand(rng, *shape):
    return as_tensor(rng.normal(size=shape))


def test_dense_init_bounds_and_zero_bias():
    layer = Dense(16, 8, seed_rng(0))
    assert layer.weight.shape == (8, 16)
    assert float(layer.weight.detach().abs().max()) <= 1 / math.sqrt(16)
    assert torch.count_nonzero(layer.bias) == 0
    assert layer.weight.dtype == DTYPE


def test_layer_norm_matches_numpy():
    rng = seed_rng(1)
    x = rng.normal(size=(4, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b
    out = layer_norm(as_tensor(x), as_tensor(g), as_tensor(b)).numpy()
    assert np.allclose(out, ref, atol=1e-12)


def _attention_oracle(q, k, v, mask, heads):
    """Per-head loop reference."""
    lq, d = q.shape
    dh = d // heads
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(lq):
            keys = [j for j in range(k.shape[0]) if mask[i, j]]
            if not keys:
                continue
            s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in keys])
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, sl] = sum(wj * v[j, sl] for wj, j in zip(w, keys))
    return out


def test_attention_matches_loop_oracle_with_mask():
    rng = seed_rng(2)
    q, k, v = rng.normal(size=(5, 8)), rng.normal(size=(7, 8)), rng.normal(size=(7, 8))
    mask = rng.random((5, 7)) < 0.6
    mask[3] = False
    out = attention(as_tensor(q), as_tensor(k), as_tensor(v), torch.as_tensor(mask), heads=2).numpy()
    assert np.allclose(out, _attention_oracle(q, k, v, mask, 2), atol=1e-12)
    assert np.all(out[3] == 0)


def test_attention_masked_keys_get_exactly_zero_weight():
    rng = seed_rng(3)
    q, k = rand(rng, 2, 3, 8), rand(rng, 2, 6, 8)
    mask = torch.ones(2, 3, 6, dtype=torch.bool)
    mask[..., 4:] = False
    _, w = attention(q, k, k, mask, heads=4, return_weights=True)
    assert torch.all(w[..., 4:] == 0)
    assert torch.allclose(w.sum(-1), torch.ones(2, 4, 3, dtype=DTYPE))


def test_attention_shape_errors():
    rng = seed_rng(4)
    with pytest.raises(ValueError):
        attention(rand(rng, 3, 8), rand(rng, 4, 6), rand(rng, 4, 6), None, 2)
    with pytest.raises(ValueError):
        attention(rand(rng, 3, 8), rand(rng, 4, 8), rand(rng, 4, 8), torch.ones(3, 5, dtype=torch.bool), 2)
    with pytest.raises(ValueError):
        attention(rand(rng, 3, 9), rand(rng, 4, 9), rand(rng, 4, 9), None, 2)


def test_gru_cell_matches_scalar_reference():
    rng = seed_rng(5)
    d_in, d_h = 3, 4
    x, h = rng.normal(size=d_in), rng.normal(size=d_h)
    w_ih, w_hh = rng.normal(size=(3 * d_h, d_in)), rng.normal(size=(3 * d_h, d_h))
    b_ih, b_hh = rng.normal(size=3 * d_h), rng.normal(size=3 * d_h)
    sig = lambda a: 1 / (1 + math.exp(-a))  # noqa: E731
    ref = np.zeros(d_h)
    for j in range(d_h):
        pre = lambda g, vec, w, b: sum(w[g * d_h + j, i] * vec[i] for i in range(len(vec))) + b[g * d_h + j]  # noqa: E731
        r = sig(pre(0, x, w_ih, b_ih) + pre(0, h, w_hh, b_hh))
        z = sig(pre(1, x, w_ih, b_ih) + pre(1, h, w_hh, b_hh))
        n = math.tanh(pre(2, x, w_ih, b_ih) + r * pre(2, h, w_hh, b_hh))
        ref[j] = (1 - z) * h[j] + z * n
    out = gru_cell(*(as_tensor(a) for a in (x, h, w_ih, w_hh, b_ih, b_hh))).numpy()
    assert np.allclose(out, ref, atol=1e-12)


def test_gru_shape_error():
    rng = seed_rng(6)
    with pytest.raises(ValueError):
        gru_cell(rand(rng, 3), rand(rng, 4), rand(rng, 12, 2), rand(rng, 12, 4), rand(rng, 12), rand(rng, 12))


def test_smooth_l1_values_and_shape_check():
    pred = as_tensor([0.0, 0.5, 3.0])
    assert float(smooth_l1(pred, torch.zeros(3, dtype=DTYPE))) == pytest.approx((0 + 0.125 + 2.5) / 3)
    with pytest.raises(ValueError):
        smooth_l1(pred, torch.zeros(4, dtype=DTYPE))


def test_check_finite_raises():
    with pytest.raises(FloatingPointError):
        check_finite("x", as_tensor([1.0, float("nan")]))


# -- gradients ---------------------------------------------------------------


def _module_check(module, make_inputs, seed=0):
    params = list(module.parameters())
    inputs = make_inputs()
    n_in = len(inputs)

    def fn_functional(leaves):
        xs, ps = leaves[:n_in], leaves[n_in:]
        names = [n for n, _ in module.named_parameters()]
        out = torch.func.functional_call(module, dict(zip(names, ps)), tuple(xs))
        w = torch.linspace(0.5, 1.5, out.numel(), dtype=DTYPE).reshape(out.shape)
        return (out * w).sum()

    return numerical_gradient_check(fn_functional, inputs + [p.detach() for p in params], rng=seed_rng(seed))


@pytest.mark.parametrize("name", ["dense", "layernorm", "attention", "transformer", "gru", "mlp"])
def test_layer_gradients_match_finite_differences(name):
    rng = seed_rng(10)
    if name == "dense":
        m, mk = Dense(5, 4, rng), lambda: [rand(rng, 3, 5)]
    elif name == "layernorm":
        m, mk = LayerNorm(6), lambda: [rand(rng, 3, 6)]
        with torch.no_grad():
            m.gamma.add_(rand(rng, 6) * 0.1)
    elif name == "attention":
        mask = torch.ones(2, 3, 4, dtype=torch.bool)
        mask[0, :, 3] = False

        class Wrap(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.inner = MultiHeadAttention(8, 2, rng)

            def forward(self, q, k):
                return self.inner(q, k, mask)
        m, mk = Wrap(), lambda: [rand(rng, 2, 3, 8), rand(rng, 2, 4, 8)]
    elif name == "transformer":
        mask = torch.ones(2, 3, 3, dtype=torch.bool)
        mask[1, :, 2] = False

        class Wrap(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.inner = TransformerLayer(8, 2, rng)

            def forward(self, x):
                return self.inner(x, x, mask)
        m, mk = Wrap(), lambda: [rand(rng, 2, 3, 8)]
    elif name == "gru":
        m, mk = GRUCell(3, 4, rng), lambda: [rand(rng, 2, 3), rand(rng, 2, 4)]
    else:
        m, mk = MLP([4, 6, 2], rng), lambda: [rand(rng, 3, 4)]
    assert _module_check(m, mk) < 1e-4


# -- optimizer -----------------------------------------------------------------


def test_lr_schedule_exact():
    st = AdamState()
    assert st.lr(0) == 2e-4
    assert st.lr(4999) == 2e-4
    assert st.lr(5000) == 1.6e-4
    assert st.lr(10000) == 1.28e-4


def test_adam_matches_reference_update():
    rng = seed_rng(7)
    p0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(3)]
    params = {"w": as_tensor(p0.copy())}
    st = AdamState.for_params(params, base_lr=0.01)
    m = v = np.zeros(5)
    ref = p0.copy()
    for t, g in enumerate(grads, start=1):
        adam_step(params, {"w": as_tensor(g)}, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(params["w"].numpy(), ref, atol=1e-14)
    assert st.step == 3


def test_adam_missing_gradient():
    params = {"w": as_tensor([1.0]), "b": as_tensor([0.0])}
    st = AdamState.for_params(params)
    with pytest.raises(KeyError):
        adam_step(params, {"w": as_tensor([1.0])}, st)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    rng = seed_rng(8)
    params = {"a": rand(rng, 3, 4), "b": rand(rng, 2)}
    st = AdamState.for_params(params)
    adam_step(params, {"a": rand(rng, 3, 4), "b": rand(rng, 2)}, st)
    p1 = tmp_path / "one.ckpt"
    save_checkpoint(p1, params, st, {"episode": 5})
    loaded, st2, meta = load_checkpoint(p1)
    assert meta == {"episode": 5}
    assert st2.step == 1
    assert all(torch.equal(loaded[k], params[k]) for k in params)
    p2 = tmp_path / "two.ckpt"
    save_checkpoint(p2, loaded, st2, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)
