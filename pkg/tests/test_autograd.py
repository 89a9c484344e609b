import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ovground.autograd import (
    ContractError,
    ShapeError,
    Tape,
    Tensor,
    add,
    affine,
    as_tensor,
    attention,
    backward,
    bce,
    block_attention,
    clip,
    concat_rows,
    convex_mix,
    cross_attn_conv_layer,
    div,
    encoder_layer,
    exp,
    kl_divergence,
    layer_norm,
    log,
    matmul,
    mul,
    neg,
    parameter,
    powc,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_cols,
    softmax,
    stack_rows,
    sub,
    take_per_row,
    take_rows,
    temporal_conv,
    transpose,
    tmean,
    tsum,
)
from fd_oracles import check_grads, fd_grads, max_rel_err, tape_grads

RNG = np.random.default_rng


# ---------------------------------------------------------------------------
# forward values against hand-computed results

def test_matmul_hand_computed():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_softmax_hand_computed():
    out = softmax(Tensor([0.0, math.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)


def test_sigmoid_hand_computed():
    out = sigmoid(Tensor([0.0, math.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.5, 0.75], atol=1e-15)


def test_square_gradient_hand_computed():
    x = parameter([3.0])
    with Tape() as tape:
        loss = tsum(mul(x, x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0], atol=1e-12)


def test_kl_hand_computed():
    # the zero entry contributes exactly 0 * log(clamp/0.5) = 0
    val = kl_divergence(Tensor([1.0, 0.0]), Tensor([0.5, 0.5]))
    np.testing.assert_allclose(val.item(), math.log(2.0), atol=1e-12)


def test_kl_two_dim_is_mean_over_rows():
    p = np.array([[1.0, 0.0], [0.5, 0.5]])
    q = np.array([[0.5, 0.5], [0.5, 0.5]])
    val = kl_divergence(Tensor(p), Tensor(q))
    np.testing.assert_allclose(val.item(), 0.5 * math.log(2.0), atol=1e-12)


def test_bce_hand_computed():
    val = bce(Tensor([0.5, 0.5]), Tensor([1.0, 0.0]))
    np.testing.assert_allclose(val.item(), math.log(2.0), atol=1e-12)


def test_layer_norm_hand_computed():
    # (x - mean) / sqrt(var) with mean 2, var 2/3: +-sqrt(1.5) at the ends
    out = layer_norm(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    r = math.sqrt(1.5)
    np.testing.assert_allclose(out.data, [-r, 0.0, r], atol=1e-12)


def test_temporal_conv_hand_computed():
    # weights chosen so output digits show which neighbors contributed:
    # prev*10 + current*1 + next*100, zero pad at both ends
    x = Tensor([[1.0], [2.0], [3.0]])
    w = Tensor(np.array([[[10.0]], [[1.0]], [[100.0]]]))
    b = Tensor(np.zeros(1))
    out = temporal_conv(x, w, b, frames=3)
    np.testing.assert_allclose(out.data, [[201.0], [312.0], [23.0]], atol=1e-12)


def test_temporal_conv_samples_do_not_leak():
    rng = RNG(0)
    xa = rng.normal(size=(5, 3))
    xb = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 3, 2))
    b = rng.normal(size=2)
    both = temporal_conv(Tensor(np.vstack([xa, xb])), Tensor(w), Tensor(b), frames=5)
    one = temporal_conv(Tensor(xa), Tensor(w), Tensor(b), frames=5)
    two = temporal_conv(Tensor(xb), Tensor(w), Tensor(b), frames=5)
    np.testing.assert_array_equal(both.data[:5], one.data)
    np.testing.assert_array_equal(both.data[5:], two.data)


def attention_loop(Q, K, V, heads, bias=None):
    """Element-by-element reference implementation."""
    d = Q.shape[1]
    dh = d // heads
    out = np.zeros((Q.shape[0], d))
    for h in range(heads):
        lo = h * dh
        for i in range(Q.shape[0]):
            scores = []
            for j in range(K.shape[0]):
                s = sum(Q[i, lo + t] * K[j, lo + t] for t in range(dh)) / math.sqrt(dh)
                if bias is not None:
                    s = s + bias[i, j]
                scores.append(s)
            m = max(scores)
            es = [math.exp(s - m) for s in scores]
            z = sum(es)
            for j in range(K.shape[0]):
                a = es[j] / z
                for t in range(dh):
                    out[i, lo + t] += a * V[j, lo + t]
    return out


def test_attention_matches_explicit_loop():
    rng = RNG(1)
    Q = rng.normal(size=(4, 6))
    K = rng.normal(size=(7, 6))
    V = rng.normal(size=(7, 6))
    for heads in (1, 2, 3):
        got = attention(Tensor(Q), Tensor(K), Tensor(V), heads).data
        want = attention_loop(Q, K, V, heads)
        assert np.max(np.abs(got - want)) < 1e-12


def test_attention_block_bias_equals_per_block_runs():
    rng = RNG(2)
    Q = rng.normal(size=(6, 4))
    K = rng.normal(size=(6, 4))
    V = rng.normal(size=(6, 4))
    bias = np.full((6, 6), -np.inf)
    bias[:3, :3] = 0.0
    bias[3:, 3:] = 0.0
    whole = attention(Tensor(Q), Tensor(K), Tensor(V), 2, bias=bias).data
    top = attention(Tensor(Q[:3]), Tensor(K[:3]), Tensor(V[:3]), 2).data
    bot = attention(Tensor(Q[3:]), Tensor(K[3:]), Tensor(V[3:]), 2).data
    np.testing.assert_allclose(whole, np.vstack([top, bot]), atol=1e-12)


def test_masked_attention_weights_are_exactly_zero():
    # a -inf bias entry must zero the value's contribution, not just shrink it
    Q = np.array([[1.0, 0.0]])
    K = np.array([[1.0, 0.0], [0.9, 0.1]])
    V = np.array([[2.0, 2.0], [1e6, 1e6]])
    bias = np.array([[0.0, -np.inf]])
    out = attention(Tensor(Q), Tensor(K), Tensor(V), 1, bias=bias).data
    np.testing.assert_array_equal(out, [[2.0, 2.0]])


# ---------------------------------------------------------------------------
# gradients against central finite differences

def test_grad_add_sub_mul_div_broadcast():
    rng = RNG(3)
    x = rng.normal(size=(2, 3))
    b = rng.normal(size=3)
    c = rng.normal(size=(2, 1)) + 3.0

    def f(x, b, c):
        return tsum(div(mul(add(x, b), sub(x, b)), c))

    check_grads(f, [x, b, c])


def test_grad_matmul_transpose_reshape():
    rng = RNG(4)
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))

    def f(a, w):
        y = matmul(a, w)
        return tsum(mul(reshape(transpose(y), (1, 6)), np.arange(1.0, 7.0)))

    check_grads(f, [a, w])


def test_grad_softmax():
    rng = RNG(5)
    x = rng.normal(size=(2, 4))
    c = rng.normal(size=(2, 4))

    def f(x):
        return tsum(mul(softmax(x), c))

    check_grads(f, [x])


def test_grad_sigmoid_exp_log_powc():
    rng = RNG(6)
    x = rng.uniform(0.5, 2.0, size=(2, 3))

    def f(x):
        return tsum(add(mul(sigmoid(x), exp(neg(x))), add(log(x), powc(x, 1.7))))

    check_grads(f, [x])


def test_grad_relu_away_from_kink():
    rng = RNG(7)
    x = np.where(rng.normal(size=(3, 3)) > 0, 1.0, -1.0) * rng.uniform(0.3, 1.0, size=(3, 3))
    c = rng.normal(size=(3, 3))

    def f(x):
        return tsum(mul(relu(x), c))

    check_grads(f, [x])


def test_grad_clip_interior_and_saturated():
    x = parameter([0.5, 1.5, -0.5])
    with Tape() as tape:
        loss = tsum(clip(x, 0.0, 1.0))
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])


def test_grad_scale_neg_mean():
    rng = RNG(8)
    x = rng.normal(size=(4,))

    def f(x):
        return tmean(scale(neg(x), 2.5))

    check_grads(f, [x])


def test_grad_sum_axis_keepdims():
    rng = RNG(9)
    x = rng.normal(size=(3, 4))
    c = rng.normal(size=(3, 1))

    def f(x):
        return tsum(mul(tsum(x, axis=1, keepdims=True), c))

    check_grads(f, [x])


def test_grad_take_rows_with_repeats():
    rng = RNG(10)
    table = rng.normal(size=(5, 3))
    c = rng.normal(size=(4, 3))
    idx = np.array([0, 2, 2, 4])

    def f(t):
        return tsum(mul(take_rows(t, idx), c))

    check_grads(f, [table])


def test_grad_take_per_row():
    rng = RNG(11)
    a = rng.normal(size=(3, 4))
    idx = np.array([1, 0, 3])
    c = rng.normal(size=3)

    def f(a):
        return tsum(mul(take_per_row(a, idx), c))

    check_grads(f, [a])


def test_grad_stack_rows_and_slice_cols():
    rng = RNG(12)
    u = rng.normal(size=4)
    v = rng.normal(size=4)
    c = rng.normal(size=(2, 2))

    def f(u, v):
        m = stack_rows([u, v])
        return tsum(mul(slice_cols(m, 1, 3), c))

    check_grads(f, [u, v])


def test_grad_layer_norm():
    rng = RNG(13)
    x = rng.normal(size=(3, 4))
    gamma = rng.uniform(0.5, 1.5, size=4)
    beta = rng.normal(size=4)
    c = rng.normal(size=(3, 4))

    def f(x, gamma, beta):
        return tsum(mul(layer_norm(x, gamma, beta), c))

    check_grads(f, [x, gamma, beta])


def test_grad_attention_all_inputs():
    rng = RNG(14)
    q = rng.normal(size=(3, 4))
    k = rng.normal(size=(5, 4))
    v = rng.normal(size=(5, 4))
    c = rng.normal(size=(3, 4))

    def f(q, k, v):
        return tsum(mul(attention(q, k, v, 2), c))

    check_grads(f, [q, k, v])


def test_grad_attention_with_block_bias():
    rng = RNG(15)
    x = rng.normal(size=(4, 4))
    c = rng.normal(size=(4, 4))
    bias = np.full((4, 4), -np.inf)
    bias[:2, :2] = 0.0
    bias[2:, 2:] = 0.0

    def f(x):
        return tsum(mul(attention(x, x, x, 2, bias=bias), c))

    check_grads(f, [x])


def test_grad_attention_shared_key_value():
    rng = RNG(16)
    v = rng.normal(size=(3, 4))
    q = rng.normal(size=(2, 4))
    c = rng.normal(size=(3, 4))

    def f(v, q):
        # same tensor as both key and value exercises gradient accumulation
        return tsum(mul(attention(v, q, q, 1), c))

    check_grads(f, [v, q])


def test_grad_temporal_conv():
    rng = RNG(17)
    x = rng.normal(size=(6, 2))
    w = rng.normal(size=(3, 2, 3))
    b = rng.normal(size=3)
    c = rng.normal(size=(6, 3))

    def f(x, w, b):
        return tsum(mul(temporal_conv(x, w, b, frames=3), c))

    check_grads(f, [x, w, b])


def test_grad_affine():
    rng = RNG(40)
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=2)
    c = rng.normal(size=(3, 2))

    def f(a, w, b):
        return tsum(mul(affine(a, w, b), c))

    check_grads(f, [a, w, b])


def test_affine_equals_matmul_plus_bias():
    rng = RNG(41)
    a, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    got = affine(Tensor(a), Tensor(w), Tensor(b)).data
    assert got.tobytes() == (a @ w + b).tobytes()


def test_grad_convex_mix_parts_and_weights():
    rng = RNG(42)
    parts = [rng.normal(size=(2, 3)) for _ in range(3)]
    w = rng.uniform(0.1, 1.0, size=3)
    c = rng.normal(size=(2, 3))

    def f(p0, p1, p2, w):
        return tsum(mul(convex_mix([p0, p1, p2], w), c))

    check_grads(f, parts + [w])


def test_grad_concat_rows():
    rng = RNG(43)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(4, 3))
    c = rng.normal(size=(6, 3))

    def f(a, b):
        return tsum(mul(concat_rows([a, b]), c))

    check_grads(f, [a, b])


def test_grad_block_attention():
    rng = RNG(44)
    q = rng.normal(size=(6, 4))  # 2 blocks x 3 query rows
    k = rng.normal(size=(4, 4))  # 2 blocks x 2 key rows
    v = rng.normal(size=(4, 4))
    c = rng.normal(size=(6, 4))

    def f(q, k, v):
        return tsum(mul(block_attention(q, k, v, 2, 2), c))

    check_grads(f, [q, k, v])


def test_grad_block_attention_with_key_pad():
    rng = RNG(45)
    q = rng.normal(size=(4, 4))
    k = rng.normal(size=(6, 4))
    v = rng.normal(size=(6, 4))
    c = rng.normal(size=(4, 4))
    pad = np.array([False, False, True, False, True, True])

    def f(q, k, v):
        return tsum(mul(block_attention(q, k, v, 2, 2, key_pad=pad), c))

    check_grads(f, [q, k, v])


def test_block_attention_matches_dense_bias_attention():
    rng = RNG(46)
    q = parameter(rng.normal(size=(6, 4)))
    kv = rng.normal(size=(6, 4))
    pad = np.array([False, False, True, False, False, False])
    bias = np.full((6, 6), -np.inf)
    bias[:3, :3] = 0.0
    bias[3:, 3:] = 0.0
    bias[:, pad] = -np.inf
    blocked = block_attention(q, Tensor(kv), Tensor(kv), 2, 2, key_pad=pad)
    dense = attention(q, Tensor(kv), Tensor(kv), 2, bias=bias)
    np.testing.assert_allclose(blocked.data, dense.data, atol=1e-12)


def test_block_attention_rejects_fully_padded_block():
    rng = RNG(47)
    q = Tensor(rng.normal(size=(4, 4)))
    kv = Tensor(rng.normal(size=(4, 4)))
    pad = np.array([False, False, True, True])  # second block has no live key
    with pytest.raises(ContractError):
        block_attention(q, kv, kv, 2, 2, key_pad=pad)


def test_grad_kl_through_softmax():
    rng = RNG(18)
    z1 = rng.normal(size=(2, 4))
    z2 = rng.normal(size=(2, 4))

    def f(z1, z2):
        return kl_divergence(softmax(z1), softmax(z2))

    check_grads(f, [z1, z2])


def test_grad_bce():
    pred = np.array([0.2, 0.4, 0.6, 0.8])
    target = np.array([1.0, 0.0, 0.0, 1.0])

    def f(p):
        return bce(p, target)

    check_grads(f, [pred])


def test_grad_composite_graph():
    """Attention into layer norm into gated elementwise ops into softmax."""
    rng = RNG(19)
    v = rng.uniform(0.1, 0.9, size=(4, 4))
    q = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 4))
    gamma = rng.uniform(0.8, 1.2, size=4)
    beta = rng.normal(size=4) * 0.1

    def f(v, q, w, gamma, beta):
        a = attention(v, q, q, 2)
        h = layer_norm(a, gamma, beta)
        m = mul(sigmoid(h), relu(add(v, 0.3)))
        s = softmax(matmul(m, w))
        return tmean(tsum(mul(s, s), axis=-1))

    worst = check_grads(f, [v, q, w, gamma, beta])
    assert worst <= 1e-4


# ---------------------------------------------------------------------------
# tape mechanics

def test_fanout_accumulates():
    x = parameter([1.0, -2.0, 0.5])
    with Tape() as tape:
        loss = tsum(add(mul(x, x), x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0, atol=1e-12)


def test_repeated_backward_accumulates():
    x = parameter([2.0])
    with Tape() as tape:
        loss = mul(x, x)
        tape.backward(loss)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [8.0], atol=1e-12)


def test_registered_but_unused_leaf_gets_zero_grad():
    x = parameter([1.0, 2.0])
    unused = parameter(np.ones((2, 2)))
    with Tape() as tape:
        tape.register([x, unused])
        loss = tsum(x)
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def test_constants_do_not_record():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0])
    with Tape() as tape:
        add(mul(a, b), 1.0)
        assert len(tape) == 0


def test_no_grad_outside_tape():
    x = parameter([1.0])
    y = mul(x, x)
    assert y.node is None and y.tape is None


def test_nested_tapes_restore_outer():
    x = parameter([1.0])
    with Tape() as outer:
        with Tape() as inner:
            mul(x, x)
        assert len(inner) == 1
        loss = tsum(mul(x, x))
        outer.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0])


def test_module_level_backward_requires_tape():
    x = parameter([1.0])
    with pytest.raises(ContractError):
        backward(mul(x, x))


def test_backward_rejects_nonscalar():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        y = mul(x, x)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_rejects_foreign_loss():
    x = parameter([1.0])
    with Tape():
        loss = tsum(mul(x, x))
    with Tape() as other:
        with pytest.raises(ContractError):
            other.backward(loss)


def test_zero_grad_clears():
    x = parameter([3.0])
    with Tape() as tape:
        tape.backward(tsum(mul(x, x)))
    x.zero_grad()
    assert x.grad is None


# ---------------------------------------------------------------------------
# shape and contract errors

def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_transpose_requires_matrix():
    with pytest.raises(ShapeError):
        transpose(Tensor(np.ones(3)))

def test_take_rows_out_of_range():
    with pytest.raises(ContractError):
        take_rows(Tensor(np.ones((2, 3))), [0, 2])


def test_take_per_row_out_of_range():
    with pytest.raises(ContractError):
        take_per_row(Tensor(np.ones((2, 3))), [0, 3])


def test_slice_cols_bounds():
    with pytest.raises(ShapeError):
        slice_cols(Tensor(np.ones((2, 3))), 2, 2)


def test_attention_head_divisibility():
    with pytest.raises(ShapeError):
        attention(Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), 4)


def test_attention_bias_shape():
    with pytest.raises(ShapeError):
        attention(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))), 2,
                  bias=np.zeros((2, 2)))


def test_layer_norm_affine_shape():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


def test_temporal_conv_frame_mismatch():
    with pytest.raises(ShapeError):
        temporal_conv(Tensor(np.ones((5, 2))), Tensor(np.ones((3, 2, 2))), Tensor(np.zeros(2)), frames=3)


def test_kl_rejects_non_distribution():
    with pytest.raises(ContractError):
        kl_divergence(Tensor([0.5, 0.6]), Tensor([0.5, 0.5]))
    with pytest.raises(ContractError):
        kl_divergence(Tensor([1.5, -0.5]), Tensor([0.5, 0.5]))


def test_bce_rejects_soft_targets():
    with pytest.raises(ContractError):
        bce(Tensor([0.5]), Tensor([0.3]))


def test_item_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


# ---------------------------------------------------------------------------
# property tests

@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(x):
    y = softmax(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@given(arrays(np.float64, (7,), elements=st.floats(-30, 30)))
def test_sigmoid_symmetry_and_range(x):
    y = sigmoid(Tensor(x)).data
    yneg = sigmoid(Tensor(-x)).data
    assert np.all((y > 0) & (y < 1))
    np.testing.assert_allclose(y + yneg, 1.0, atol=1e-12)


@given(arrays(np.float64, (2, 4), elements=st.floats(-10, 10)),
       arrays(np.float64, (2, 4), elements=st.floats(-10, 10)))
def test_kl_nonnegative_and_zero_on_self(za, zb):
    p = softmax(Tensor(za))
    q = softmax(Tensor(zb))
    assert kl_divergence(p, q).item() >= -1e-12
    assert abs(kl_divergence(p, p).item()) < 1e-12


@given(arrays(np.float64, (2, 6), elements=st.floats(-5, 5)))
def test_layer_norm_normalizes_rows(x):
    y = layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-12).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    # unit variance unless the row is constant (then the output is zero)
    for row_in, row_out in zip(x, y):
        if np.ptp(row_in) > 1e-6:
            np.testing.assert_allclose(row_out.var(), 1.0, rtol=1e-5)


@settings(max_examples=10)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_smooth_graph_matches_fd(seed):
    rng = RNG(seed)
    x = rng.uniform(-2.0, 2.0, size=(3, 4))
    w = rng.normal(size=(4, 3))

    def f(x, w):
        h = matmul(sigmoid(x), w)
        return tmean(mul(softmax(h), exp(scale(h, 0.1))))

    check_grads(f, [x, w])


@given(arrays(np.float64, (8,), elements=st.floats(0.05, 0.95)))
def test_bce_matches_direct_formula(p):
    t = (np.arange(8) % 2).astype(np.float64)
    got = bce(Tensor(p), Tensor(t)).item()
    want = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_forward_and_backward_are_bitwise_deterministic():
    rng = RNG(42)
    x = rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 4))
    g = rng.uniform(0.5, 1.5, size=4)
    b = rng.normal(size=4)

    def run():
        px, pw, pg, pb = parameter(x.copy()), parameter(w.copy()), parameter(g.copy()), parameter(b.copy())
        with Tape() as tape:
            out = attention(layer_norm(px, pg, pb), px, px, 2)
            loss = tmean(mul(softmax(matmul(out, pw)), out))
            tape.backward(loss)
        return loss.data.tobytes(), [t.grad.tobytes() for t in (px, pw, pg, pb)]

    assert run() == run()


# ---------------------------------------------------------------------------
# fused residual blocks: gradcheck, and equivalence with the composed graph


def _encoder_layer_arrays(rng, d=4, f=6, rows=6):
    def lin(*shape):
        return rng.normal(size=shape) / np.sqrt(shape[0])

    return [rng.normal(size=(rows, d)),
            rng.uniform(0.8, 1.2, size=d), 0.1 * rng.normal(size=d),
            lin(d, d), 0.1 * rng.normal(size=d), lin(d, d), 0.1 * rng.normal(size=d),
            lin(d, d), 0.1 * rng.normal(size=d), lin(d, d), 0.1 * rng.normal(size=d),
            rng.uniform(0.8, 1.2, size=d), 0.1 * rng.normal(size=d),
            lin(d, f), 0.1 * rng.normal(size=f), lin(f, d), 0.1 * rng.normal(size=d)]


def _composed_encoder_layer(x, g1, b1, wq, bq, wk, bk, wv, bv, wo, bo,
                            g2, b2, w1, c1, w2, c2, heads, blocks, key_pad):
    h = layer_norm(x, g1, b1)
    a = block_attention(affine(h, wq, bq), affine(h, wk, bk), affine(h, wv, bv),
                        heads, blocks, key_pad)
    r = add(x, affine(a, wo, bo))
    h2 = layer_norm(r, g2, b2)
    return add(r, affine(relu(affine(h2, w1, c1)), w2, c2))


def test_grad_encoder_layer_all_inputs():
    rng = RNG(50)
    arrs = _encoder_layer_arrays(rng)
    c = rng.normal(size=(6, 4))

    def f(*ts):
        return tsum(mul(encoder_layer(*ts, n_heads=2, blocks=2), c))

    check_grads(f, arrs)


def test_encoder_layer_matches_composed_graph():
    rng = RNG(51)
    arrs = _encoder_layer_arrays(rng, d=8, f=12, rows=9)
    pad = np.zeros(9, dtype=bool)
    pad[[2, 5]] = True

    def run(f):
        params = [parameter(a.copy()) for a in arrs]
        c = arrs[0] * 0.3
        with Tape() as tape:
            tape.register(params)
            out = f(*params)
            tape.backward(tsum(mul(out, c)))
        return out.data, [p.grad for p in params]

    y_f, g_f = run(lambda *ts: encoder_layer(*ts, n_heads=2, blocks=3, key_pad=pad))
    y_c, g_c = run(lambda *ts: _composed_encoder_layer(*ts, 2, 3, pad))
    assert y_f.tobytes() == y_c.tobytes()  # same primitive op order forward
    for gf, gc in zip(g_f, g_c):
        np.testing.assert_allclose(gf, gc, rtol=1e-12, atol=1e-14)


def test_encoder_layer_rejects_fully_padded_block():
    rng = RNG(52)
    arrs = _encoder_layer_arrays(rng)
    pad = np.array([False, False, False, True, True, True])
    with pytest.raises(ContractError):
        encoder_layer(*[Tensor(a) for a in arrs], n_heads=2, blocks=2, key_pad=pad)


def test_encoder_layer_shape_checks():
    rng = RNG(53)
    arrs = _encoder_layer_arrays(rng)
    arrs[3] = rng.normal(size=(4, 5))  # wq must be square
    with pytest.raises(ShapeError):
        encoder_layer(*[Tensor(a) for a in arrs], n_heads=2, blocks=2)


def _cross_layer_arrays(rng, d=4, blocks=2, frames=3, tq=2):
    def lin(*shape):
        return rng.normal(size=shape) / np.sqrt(shape[0])

    return [rng.normal(size=(blocks * frames, d)),
            rng.normal(size=(blocks * tq, d)),
            rng.uniform(0.8, 1.2, size=d), 0.1 * rng.normal(size=d),
            lin(d, d), 0.1 * rng.normal(size=d), lin(d, d), 0.1 * rng.normal(size=d),
            lin(d, d), 0.1 * rng.normal(size=d), lin(d, d), 0.1 * rng.normal(size=d),
            rng.uniform(0.8, 1.2, size=d), 0.1 * rng.normal(size=d),
            rng.normal(size=(3, d, d)) / np.sqrt(3 * d), 0.1 * rng.normal(size=d),
            rng.uniform(0.8, 1.2, size=d), 0.1 * rng.normal(size=d)]


def _composed_cross_layer(x, q, g1, b1, wq, bq, wk, bk, wv, bv, wo, bo,
                          gc, bc, cw, cb, g2, b2, heads, blocks, frames, key_pad):
    h = layer_norm(x, g1, b1)
    a = block_attention(affine(h, wq, bq), affine(q, wk, bk), affine(q, wv, bv),
                        heads, blocks, key_pad)
    r = add(x, affine(a, wo, bo))
    cn = layer_norm(r, gc, bc)
    s = add(r, relu(temporal_conv(cn, cw, cb, frames)))
    return layer_norm(s, g2, b2)


def test_grad_cross_attn_conv_layer_all_inputs():
    rng = RNG(54)
    arrs = _cross_layer_arrays(rng)
    c = rng.normal(size=(6, 4))

    def f(*ts):
        return tsum(mul(cross_attn_conv_layer(*ts, n_heads=2, blocks=2, frames=3), c))

    check_grads(f, arrs)


def test_cross_attn_conv_layer_matches_composed_graph():
    rng = RNG(55)
    arrs = _cross_layer_arrays(rng, d=8, blocks=3, frames=4, tq=3)
    pad = np.zeros(9, dtype=bool)
    pad[[1, 7]] = True

    def run(f):
        params = [parameter(a.copy()) for a in arrs]
        c = arrs[0] * 0.3
        with Tape() as tape:
            tape.register(params)
            out = f(*params)
            tape.backward(tsum(mul(out, c)))
        return out.data, [p.grad for p in params]

    y_f, g_f = run(lambda *ts: cross_attn_conv_layer(
        *ts, n_heads=2, blocks=3, frames=4, key_pad=pad))
    y_c, g_c = run(lambda *ts: _composed_cross_layer(*ts, 2, 3, 4, pad))
    assert y_f.tobytes() == y_c.tobytes()
    for gf, gc in zip(g_f, g_c):
        np.testing.assert_allclose(gf, gc, rtol=1e-12, atol=1e-14)


def test_cross_attn_conv_layer_row_count_check():
    rng = RNG(56)
    arrs = _cross_layer_arrays(rng)
    with pytest.raises(ShapeError):
        cross_attn_conv_layer(*[Tensor(a) for a in arrs],
                              n_heads=2, blocks=2, frames=4)


def test_fused_blocks_forward_only_outside_tape():
    rng = RNG(57)
    arrs = _encoder_layer_arrays(rng)
    out = encoder_layer(*[Tensor(a) for a in arrs], n_heads=2, blocks=2)
    assert out.grad is None and np.all(np.isfinite(out.data))
