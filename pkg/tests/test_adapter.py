"""Tests for the gated adapter block and the fused dual-pathway projector.

Derived expectations use inline oracles: explicit channel-pair loops for the
Gram matrix, a straight-line single-loop reference for the full forward pass,
central finite differences for gradients, and Monte-Carlo frequency bounds
for the pathway dropout.
"""

import numpy as np
import pytest
from scipy.special import ndtr

from ibkit.adapter import (
    FusedParams,
    IBAdapterParams,
    MlpProjector,
    StateError,
    covariance_gram,
    fused_backward,
    fused_forward,
    ib_adapter_backward,
    ib_adapter_forward,
    load_into,
    merge_heads,
    partition_heads,
    read_slots,
    sigmoid_gate,
    value_transform,
    write_slots,
)
from ibkit.linalg import DimensionError, ParamSlot, finite_diff_gradcheck

LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# head partitioning

def test_partition_contiguous_blocks():
    x = np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]])
    heads = partition_heads(x, 2)
    assert np.array_equal(heads[0], [[1.0, 2.0], [5.0, 6.0]])
    assert np.array_equal(heads[1], [[3.0, 4.0], [7.0, 8.0]])


def test_partition_single_head_is_identity():
    x = np.arange(12.0).reshape(3, 4)
    heads = partition_heads(x, 1)
    assert len(heads) == 1 and np.array_equal(heads[0], x)


def test_merge_partition_round_trip_bit_exact():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 32))
    assert np.array_equal(merge_heads(partition_heads(x, 4)), x)


def test_partition_requires_divisibility():
    with pytest.raises(DimensionError):
        partition_heads(np.zeros((2, 5)), 2)


# ---------------------------------------------------------------------------
# covariance gram

def test_gram_orthonormal_columns():
    assert np.allclose(covariance_gram(np.eye(2), np.eye(2)), np.eye(2),
                       atol=1e-15)


def test_gram_single_channel_hand_case():
    g = covariance_gram(np.array([[1.0], [1.0]]), np.array([[2.0]]))
    assert np.allclose(g, [[4.0]], atol=1e-15)


def test_gram_matches_channel_pair_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(64, 8))
    w = rng.normal(size=(8, 8))
    q = x @ w
    want = np.empty((8, 8))
    for a in range(8):  # oracle: explicit dot product per channel pair
        for b in range(8):
            want[a, b] = float(np.dot(q[:, a], x[:, b]))
    assert np.max(np.abs(covariance_gram(x, w) - want)) < 1e-12


# ---------------------------------------------------------------------------
# gate

def test_gate_zero_gram_zero_bias():
    assert np.allclose(sigmoid_gate(np.zeros((3, 3)), 1.0, 0.0), 0.5,
                       atol=1e-15)


def test_gate_identity_gram():
    a = sigmoid_gate(np.eye(2), 1.0, 0.0)
    s1 = 1.0 / (1.0 + np.exp(-1.0))
    assert np.allclose(a, [[s1, 0.5], [0.5, s1]], atol=1e-5)


def test_gate_large_bias_suppresses():
    a = sigmoid_gate(np.random.default_rng(0).normal(size=(4, 4)), 1.0, 60.0)
    assert np.max(a) < 1e-20


def test_gate_entries_strictly_inside_unit_interval():
    g = np.random.default_rng(2).normal(size=(6, 6)) * 3
    a = sigmoid_gate(g, 0.7, 1.0)
    assert np.all(a > 0.0) and np.all(a < 1.0)


def test_gate_is_not_symmetrized():
    # W_q breaks symmetry; an accidentally symmetrized gate would be a bug
    rng = np.random.default_rng(4)
    x = rng.normal(size=(16, 4))
    g = covariance_gram(x, rng.normal(size=(4, 4)))
    a = sigmoid_gate(g, 1.0, 1.0)
    assert np.max(np.abs(a - a.T)) > 1e-3


def test_gate_monotone_in_gram_entries():
    rng = np.random.default_rng(5)
    g = rng.normal(size=(4, 4))
    a0 = sigmoid_gate(g, 0.9, 1.3)
    g2 = g.copy()
    g2[1, 2] += 0.5
    a1 = sigmoid_gate(g2, 0.9, 1.3)
    assert a1[1, 2] > a0[1, 2]
    mask = np.ones_like(g, dtype=bool)
    mask[1, 2] = False
    assert np.array_equal(a0[mask], a1[mask])


def test_gate_noise_channel_suppression():
    """Correlated channels gate each other; an independent noise channel
    couples weakly (statistical property over 50 seeds)."""
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        latent = rng.normal(size=256)
        x = np.empty((256, 4))
        for c in range(3):
            x[:, c] = (0.5 + 0.5 * rng.random()) * latent \
                + 0.05 * rng.normal(size=256)
        x[:, 3] = rng.normal(size=256)
        a = sigmoid_gate(covariance_gram(x, np.eye(4)), 1.0, 0.0)
        noise_coupling = np.concatenate([a[3, :3], a[:3, 3]]).mean()
        off = [a[i, j] for i in range(3) for j in range(3) if i != j]
        if noise_coupling < np.mean(off):
            hits += 1
    assert hits >= 45


# ---------------------------------------------------------------------------
# value transform

def test_value_transform_zero_input_broadcasts_beta():
    beta = np.array([0.3, -0.7, 1.1])
    v = value_transform(np.zeros((4, 3)), np.eye(3), np.eye(3),
                        np.ones(3), beta)
    assert np.allclose(v, np.tile(beta, (4, 1)), atol=1e-12)


def test_value_transform_composes_verified_kernels():
    row = np.array([[1.0, -1.0]])
    # oracle: exact GELU then layer norm, composed from first principles
    g = row * ndtr(row)
    mean = g.mean()
    var = ((g - mean) ** 2).mean()
    want = (g - mean) / np.sqrt(var + LN_EPS)
    got = value_transform(row, np.eye(2), np.eye(2), np.ones(2), np.zeros(2))
    assert np.max(np.abs(got - want)) < 1e-12


def test_value_transform_gradient_vs_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 4))
    params = IBAdapterParams(4, 1, seed=5)

    def loss():
        v = value_transform(x, params.w_v1[0].value, params.w_v2[0].value,
                            params.gamma[0].value, params.beta[0].value)
        return float(v.mean())

    params.zero_grad()
    z, cache = ib_adapter_forward(x, params)
    # isolate the value pathway: push gradient through V only by forcing the
    # gate pathway to contribute via a fresh forward of the value alone
    slot = params.w_v1[0]
    fd = np.zeros_like(slot.value)
    h = 1e-5
    flat = slot.value.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss()
        flat[i] = orig - h
        dn = loss()
        flat[i] = orig
        fd_flat[i] = (up - dn) / (2 * h)
    # analytic gradient via the recorded backward with dZ chosen so that the
    # loss equals mean(V): dV = 1/V.size requires dZ = (1/size) * A^{-1} on the
    # right; simpler and exact: rebuild the analytic gradient directly
    params.zero_grad()
    from ibkit.adapter import _layer_norm_bwd, _layer_norm_fwd
    from ibkit.linalg import gelu, gelu_grad, matmul
    u = matmul(x, params.w_v1[0].value)
    hg = gelu(u)
    p = matmul(hg, params.w_v2[0].value)
    _, ln_cache = _layer_norm_fwd(p, params.gamma[0].value.reshape(-1),
                                  params.beta[0].value.reshape(-1))
    dv = np.full_like(p, 1.0 / p.size)
    dp, _, _ = _layer_norm_bwd(dv, params.gamma[0].value.reshape(-1), ln_cache)
    dhg = matmul(dp, params.w_v2[0].value.T)
    du = dhg * gelu_grad(u)
    analytic = matmul(x.T, du)
    rel = np.abs(analytic - fd) / max(1.0, np.abs(fd).max())
    assert rel.max() < 1e-5


# ---------------------------------------------------------------------------
# full forward

def test_forward_identity_gate_limit():
    # X = I rows, W_q = I gives G = I; a huge temperature with matched bias
    # saturates the gate to the identity, so Z equals V exactly
    d = 4
    x = np.eye(d)
    params = IBAdapterParams(d, 1, seed=0)
    params.w_q[0].value[...] = np.eye(d)
    params.tau[0].value[...] = 1e4
    params.bias[0].value[...] = 5e3
    z, _ = ib_adapter_forward(x, params)
    v = value_transform(x, params.w_v1[0].value, params.w_v2[0].value,
                        params.gamma[0].value, params.beta[0].value)
    assert np.array_equal(z, v)


def test_forward_zero_input_closed_form():
    d = 6
    params = IBAdapterParams(d, 2, seed=1)
    x = np.zeros((5, d))
    z, _ = ib_adapter_forward(x, params)
    outs = []
    for h in range(2):
        a = 1.0 / (1.0 + np.exp(params.bias[h].scalar))  # sigmoid(-b)
        v = np.tile(params.beta[h].value.reshape(-1), (5, 1))
        outs.append(v @ np.full((3, 3), a))
    want = np.concatenate(outs, axis=1)
    assert np.max(np.abs(z - want)) < 1e-12


def test_forward_matches_straight_line_reference():
    """Independent single-loop reference implementation (plain numpy ops)."""
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 16))
    params = IBAdapterParams(16, 4, seed=0)
    z, _ = ib_adapter_forward(x, params)

    d = 4
    ref_heads = []
    for h in range(4):
        xh = x[:, h * d:(h + 1) * d]
        q = xh @ params.w_q[h].value
        g = q.T @ xh
        a = 1.0 / (1.0 + np.exp(-(params.tau[h].scalar * g
                                  - params.bias[h].scalar)))
        u = xh @ params.w_v1[h].value
        hg = u * ndtr(u)
        p = hg @ params.w_v2[h].value
        mean = p.mean(axis=1, keepdims=True)
        var = p.var(axis=1, keepdims=True)
        v = params.gamma[h].value.reshape(-1) * (p - mean) \
            / np.sqrt(var + LN_EPS) + params.beta[h].value.reshape(-1)
        ref_heads.append(v @ a)
    want = np.concatenate(ref_heads, axis=1)
    assert np.max(np.abs(z - want)) < 1e-12


def test_forward_rejects_wrong_width():
    with pytest.raises(DimensionError):
        ib_adapter_forward(np.zeros((2, 10)), IBAdapterParams(16, 4))


def test_backward_without_forward_raises():
    with pytest.raises(StateError):
        ib_adapter_backward(np.zeros((2, 4)), IBAdapterParams(4, 1), None)
    with pytest.raises(StateError):
        fused_backward(np.zeros((2, 4)), FusedParams(4, 1), None)


# ---------------------------------------------------------------------------
# fused pathway

def test_fused_lambda_zero_equals_mlp_pathway():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 8))
    params = FusedParams(8, 2, seed=2, lambda_init=0.0)
    z, _ = fused_forward(x, params, mode="infer")
    from ibkit.adapter import _mlp_fwd
    mlp_out, _ = _mlp_fwd(x, params.mlp_w1.value, params.mlp_w2.value)
    assert np.array_equal(z, mlp_out)  # tanh(0) = 0, bit-exact


def test_fused_forced_drop_equals_scaled_ib_pathway():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 8))
    params = FusedParams(8, 2, seed=3, p_drop=1.0)
    z, _ = fused_forward(x, params, mode="train", drop_mlp=True)
    ib_out, _ = ib_adapter_forward(x, params.ib)
    assert np.array_equal(z, np.tanh(params.lam.scalar) * ib_out)


def test_fused_drop_frequency():
    params = FusedParams(4, 1, seed=0, p_drop=0.3)
    x = np.zeros((2, 4))
    rng = np.random.default_rng(0)
    drops = 0
    for _ in range(10_000):
        _, cache = fused_forward(x, params, mode="train", rng=rng)
        drops += int(not cache["keep"])
    assert 0.28 <= drops / 10_000 <= 0.32


def test_fused_infer_is_deterministic():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 8))
    params = FusedParams(8, 2, seed=4)
    z1, _ = fused_forward(x, params, mode="infer")
    z2, _ = fused_forward(x, params, mode="infer")
    assert np.array_equal(z1, z2)


def test_fused_train_requires_rng_or_decision():
    with pytest.raises(ValueError):
        fused_forward(np.zeros((2, 4)), FusedParams(4, 1), mode="train")
    with pytest.raises(ValueError):
        fused_forward(np.zeros((2, 4)), FusedParams(4, 1), mode="test")


def test_fused_zero_loss_grad_gives_zero_gradients():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 8))
    params = FusedParams(8, 2, seed=5)
    params.zero_grad()
    z, cache = fused_forward(x, params, mode="infer")
    dx = fused_backward(np.zeros_like(z), params, cache)
    assert np.array_equal(dx, np.zeros_like(x))
    for s in params.slots():
        assert np.array_equal(s.grad, np.zeros_like(s.grad))


def test_fused_lambda_gradient_formula_and_fd():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 8))
    params = FusedParams(8, 2, seed=6, lambda_init=0.3)
    dz_seed = rng.normal(size=(4, 8))

    params.zero_grad()
    z, cache = fused_forward(x, params, mode="infer")
    fused_backward(dz_seed, params, cache)
    ib_out, _ = ib_adapter_forward(x, params.ib)
    lam = params.lam.scalar
    want = (1 - np.tanh(lam) ** 2) * float(np.sum(dz_seed * ib_out))
    assert abs(params.lam.grad[0, 0] - want) < 1e-12

    h = 1e-6

    def loss_at(l):
        params.lam.value[...] = l
        zz, _ = fused_forward(x, params, mode="infer")
        return float(np.sum(dz_seed * zz))

    fd = (loss_at(lam + h) - loss_at(lam - h)) / (2 * h)
    params.lam.value[...] = lam
    assert abs(want - fd) / max(1.0, abs(fd)) < 1e-5


def test_fused_rejects_bad_p_drop():
    with pytest.raises(ValueError):
        FusedParams(8, 2, p_drop=1.5)


def test_mlp_projector_gradcheck():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 8))
    proj = MlpProjector(8, hidden=16, seed=7)

    def loss():
        y, _ = proj.forward(x)
        return float(y.mean())

    proj.zero_grad()
    y, cache = proj.forward(x)
    proj.backward(np.full_like(y, 1.0 / y.size), cache)
    report = finite_diff_gradcheck(loss, proj.slots(), h=1e-5)
    assert max(report.values()) < 1e-6


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip(tmp_path):
    params = FusedParams(8, 2, seed=9)
    ckpt = tmp_path / "ckpt"
    write_slots(str(ckpt), params.slots(), meta={"note": "x"})
    values, meta = read_slots(str(ckpt))
    assert meta == {"note": "x"}
    fresh = FusedParams(8, 2, seed=123)
    load_into(fresh.slots(), values)
    for a, b in zip(params.slots(), fresh.slots()):
        assert np.array_equal(a.value, b.value)


def test_checkpoint_missing_slot_and_shape_mismatch(tmp_path):
    params = FusedParams(8, 2, seed=9)
    ckpt = tmp_path / "ckpt"
    write_slots(str(ckpt), params.slots())
    values, _ = read_slots(str(ckpt))
    with pytest.raises(KeyError):
        load_into([ParamSlot("nope", np.zeros((1, 1)))], values)
    bad = dict(values)
    bad["lambda"] = np.zeros((2, 2))
    with pytest.raises(DimensionError):
        load_into(params.slots(), bad)
