"""Channel-covariance gated adapter: forward and exact reverse passes.

The block partitions tokens X (N x D) into H contiguous channel groups.  Per
group it builds a d x d Gram matrix between projected queries and the raw
input (identity key), squashes it through a temperature/bias sigmoid gate, and
uses the gate to remix a nonlinearly transformed copy of the input.  The fused
variant adds a plain two-layer MLP pathway scaled against the gated pathway by
tanh(lambda), with the MLP pathway stochastically dropped during training.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .linalg import (
    DimensionError,
    NumericError,
    ParamSlot,
    fast_matmul as _mm,
    gelu,
    gelu_grad,
    matmul,
    matrix_from_bytes,
    matrix_to_bytes,
    sigmoid,
)

__all__ = [
    "IBAdapterParams",
    "FusedParams",
    "MlpProjector",
    "partition_heads",
    "merge_heads",
    "covariance_gram",
    "sigmoid_gate",
    "value_transform",
    "ib_adapter_forward",
    "ib_adapter_backward",
    "fused_forward",
    "fused_backward",
    "write_slots",
    "read_slots",
]

LN_EPS = 1e-5
INIT_STD = 0.02


class StateError(RuntimeError):
    """Backward invoked without a matching recorded forward."""


# ---------------------------------------------------------------------------
# head partitioning

def partition_heads(x: np.ndarray, n_heads: int) -> list[np.ndarray]:
    """Split channels into contiguous blocks, one per head."""
    x = np.asarray(x, dtype=np.float64)
    n, dim = x.shape
    if dim % n_heads != 0:
        raise DimensionError(f"D={dim} not divisible by H={n_heads}")
    d = dim // n_heads
    return [np.ascontiguousarray(x[:, h * d:(h + 1) * d]) for h in range(n_heads)]

def merge_heads(heads: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(heads, axis=1)


# ---------------------------------------------------------------------------
# per-head building blocks

def covariance_gram(x_h: np.ndarray, w_q: np.ndarray) -> np.ndarray:
    """G = (X_h W_q)^T X_h; the key is the raw input (identity mapping)."""
    q = _mm(x_h, w_q)
    return matmul(q.T, x_h)

def sigmoid_gate(g: np.ndarray, tau: float, bias_b: float) -> np.ndarray:
    """Elementwise sigmoid(tau * G - b); entries lie strictly in (0, 1)."""
    return sigmoid(tau * np.asarray(g, dtype=np.float64) - bias_b)


def _layer_norm_fwd(x, gamma, beta):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    return gamma * xhat + beta, (xhat, inv)

def _layer_norm_bwd(dy, gamma, cache):
    xhat, inv = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def value_transform(x_h, w_v1, w_v2, norm_gamma, norm_beta):
    """V = LayerNorm(GELU(X_h W_v1) W_v2) with the affine (gamma, beta)."""
    u = matmul(x_h, w_v1)
    p = matmul(gelu(u), w_v2)
    v, _ = _layer_norm_fwd(p, np.asarray(norm_gamma, float).reshape(-1),
                           np.asarray(norm_beta, float).reshape(-1))
    return v


# ---------------------------------------------------------------------------
# parameter containers

class IBAdapterParams:
    """All learnable state of the gated adapter, with per-slot gradients."""

    def __init__(self, dim: int, n_heads: int, seed: int = 0):
        if dim % n_heads != 0:
            raise DimensionError(f"D={dim} must be divisible by H={n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.d = dim // n_heads
        rng = np.random.default_rng(seed)
        d = self.d
        self.w_q, self.tau, self.bias = [], [], []
        self.w_v1, self.w_v2, self.gamma, self.beta = [], [], [], []
        for h in range(n_heads):
            self.w_q.append(ParamSlot(f"head{h}/W_q", rng.normal(0, INIT_STD, (d, d))))
            self.tau.append(ParamSlot(f"head{h}/tau", np.array([[1.0 / np.sqrt(d)]])))
            self.bias.append(ParamSlot(f"head{h}/b", np.array([[1.0]])))
            self.w_v1.append(ParamSlot(f"head{h}/W_v1", rng.normal(0, INIT_STD, (d, d))))
            self.w_v2.append(ParamSlot(f"head{h}/W_v2", rng.normal(0, INIT_STD, (d, d))))
            self.gamma.append(ParamSlot(f"head{h}/norm_gamma", np.ones((1, d))))
            self.beta.append(ParamSlot(f"head{h}/norm_beta", np.zeros((1, d))))

    def slots(self) -> list[ParamSlot]:
        out = []
        for h in range(self.n_heads):
            out += [self.w_q[h], self.tau[h], self.bias[h], self.w_v1[h],
                    self.w_v2[h], self.gamma[h], self.beta[h]]
        return out

    def zero_grad(self):
        for s in self.slots():
            s.zero_grad()


class FusedParams:
    """Dual-pathway parameters: MLP pathway plus the gated adapter pathway."""

    def __init__(self, dim: int, n_heads: int, hidden: int | None = None,
                 seed: int = 0, lambda_init: float = 0.3, p_drop: float = 0.3):
        if not 0.0 <= p_drop <= 1.0:
            raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
        self.dim = dim
        self.hidden = 4 * dim if hidden is None else hidden
        self.p_drop = p_drop
        rng = np.random.default_rng(seed)
        self.ib = IBAdapterParams(dim, n_heads, seed=seed + 1)
        self.mlp_w1 = ParamSlot("mlp/W1", rng.normal(0, INIT_STD, (dim, self.hidden)))
        self.mlp_w2 = ParamSlot("mlp/W2", rng.normal(0, INIT_STD, (self.hidden, dim)))
        self.lam = ParamSlot("lambda", np.array([[float(lambda_init)]]))

    def slots(self) -> list[ParamSlot]:
        return self.ib.slots() + [self.mlp_w1, self.mlp_w2, self.lam]

    def zero_grad(self):
        for s in self.slots():
            s.zero_grad()


class MlpProjector:
    """The plain two-layer GELU pathway on its own (the baseline projector)."""

    def __init__(self, dim: int, hidden: int | None = None, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.hidden = 4 * dim if hidden is None else hidden
        self.w1 = ParamSlot("mlp/W1", rng.normal(0, INIT_STD, (dim, self.hidden)))
        self.w2 = ParamSlot("mlp/W2", rng.normal(0, INIT_STD, (self.hidden, dim)))

    def slots(self):
        return [self.w1, self.w2]

    def zero_grad(self):
        for s in self.slots():
            s.zero_grad()

    def forward(self, x):
        y, cache = _mlp_fwd(x, self.w1.value, self.w2.value)
        return y, cache

    def backward(self, dy, cache):
        return _mlp_bwd(dy, self.w1, self.w2, cache)


# ---------------------------------------------------------------------------
# forward / backward

def _check_stage(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values at stage {name!r}")


def ib_adapter_forward(x: np.ndarray, params: IBAdapterParams):
    """Per-head G -> A -> V -> Z_h = V A, heads merged in channel order.

    Returns (Z, cache); the cache holds every intermediate needed for an
    exact backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != params.dim:
        raise DimensionError(f"input has D={x.shape[1]}, params expect {params.dim}")
    heads = partition_heads(x, params.n_heads)
    outs, caches = [], []
    for h, x_h in enumerate(heads):
        w_q = params.w_q[h].value
        tau = params.tau[h].scalar
        b = params.bias[h].scalar
        q = _mm(x_h, w_q)
        g = _mm(q.T, x_h)
        _check_stage("gram", g)
        a = sigmoid(tau * g - b)
        u = _mm(x_h, params.w_v1[h].value)
        hg = gelu(u)
        p = _mm(hg, params.w_v2[h].value)
        gamma = params.gamma[h].value.reshape(-1)
        beta = params.beta[h].value.reshape(-1)
        v, ln_cache = _layer_norm_fwd(p, gamma, beta)
        _check_stage("value", v)
        z_h = _mm(v, a)
        outs.append(z_h)
        caches.append({"x_h": x_h, "q": q, "g": g, "a": a, "u": u, "hg": hg,
                       "v": v, "ln": ln_cache})
    z = merge_heads(outs)
    _check_stage("output", z)
    return z, caches


def ib_adapter_backward(dz: np.ndarray, params: IBAdapterParams, caches) -> np.ndarray:
    """Accumulate gradients into every slot; returns dL/dX."""
    if caches is None:
        raise StateError("ib_adapter_backward called without a recorded forward")
    d = params.d
    dx_heads = []
    for h in range(params.n_heads):
        c = caches[h]
        dz_h = dz[:, h * d:(h + 1) * d]
        x_h, q, g, a, v = c["x_h"], c["q"], c["g"], c["a"], c["v"]
        tau = params.tau[h].scalar

        # Z_h = V A
        dv = _mm(dz_h, a.T)
        da = _mm(v.T, dz_h)

        # A = sigmoid(tau * G - b)
        dpre = da * a * (1.0 - a)
        params.tau[h].grad += (dpre * g).sum()
        params.bias[h].grad += -dpre.sum()
        dg = tau * dpre

        # G = Q^T X_h, Q = X_h W_q
        dq = _mm(x_h, dg.T)
        dx_h = _mm(q, dg)
        params.w_q[h].grad += _mm(x_h.T, dq)
        dx_h += _mm(dq, params.w_q[h].value.T)

        # V = LN(GELU(X_h W_v1) W_v2)
        gamma = params.gamma[h].value.reshape(-1)
        dp, dgamma, dbeta = _layer_norm_bwd(dv, gamma, c["ln"])
        params.gamma[h].grad += dgamma.reshape(1, -1)
        params.beta[h].grad += dbeta.reshape(1, -1)
        dhg = _mm(dp, params.w_v2[h].value.T)
        params.w_v2[h].grad += _mm(c["hg"].T, dp)
        du = dhg * gelu_grad(c["u"])
        params.w_v1[h].grad += _mm(x_h.T, du)
        dx_h += _mm(du, params.w_v1[h].value.T)

        dx_heads.append(dx_h)
    return merge_heads(dx_heads)


def _mlp_fwd(x, w1, w2):
    u = _mm(x, w1)
    hg = gelu(u)
    y = _mm(hg, w2)
    return y, {"x": x, "u": u, "hg": hg}

def _mlp_bwd(dy, w1_slot, w2_slot, cache):
    dhg = _mm(dy, w2_slot.value.T)
    w2_slot.grad += _mm(cache["hg"].T, dy)
    du = dhg * gelu_grad(cache["u"])
    w1_slot.grad += _mm(cache["x"].T, du)
    return _mm(du, w1_slot.value.T)


def fused_forward(x: np.ndarray, params: FusedParams, mode: str = "infer",
                  rng: np.random.Generator | None = None,
                  drop_mlp: bool | None = None):
    """Z = keep * MLP(X) + tanh(lambda) * IB(X).

    In train mode the MLP pathway is dropped with probability p_drop (one
    Bernoulli draw per call, taken from ``rng`` unless ``drop_mlp`` forces the
    decision).  Inference always keeps both pathways and no rescaling is
    applied.  Returns (Z, cache).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if mode == "train" and drop_mlp is None:
        if rng is None:
            raise ValueError("train mode needs an rng (or an explicit drop_mlp)")
        drop_mlp = bool(rng.random() < params.p_drop)
    keep = not (mode == "train" and drop_mlp)

    ib_out, ib_cache = ib_adapter_forward(x, params.ib)
    scale = np.tanh(params.lam.scalar)
    cache = {"keep": keep, "ib_out": ib_out, "ib_cache": ib_cache, "scale": scale}
    if keep:
        mlp_out, mlp_cache = _mlp_fwd(x, params.mlp_w1.value, params.mlp_w2.value)
        cache["mlp_cache"] = mlp_cache
        z = mlp_out + scale * ib_out
    else:
        z = scale * ib_out
    return z, cache


def fused_backward(dz: np.ndarray, params: FusedParams, cache) -> np.ndarray:
    """Exact reverse pass; a dropped pathway contributes zero gradient."""
    if cache is None:
        raise StateError("fused_backward called without a recorded forward")
    lam = params.lam.scalar
    scale = cache["scale"]
    params.lam.grad += (1.0 - np.tanh(lam) ** 2) * float(np.sum(dz * cache["ib_out"]))
    dx = ib_adapter_backward(scale * dz, params.ib, cache["ib_cache"])
    if cache["keep"]:
        dx = dx + _mlp_bwd(dz, params.mlp_w1, params.mlp_w2, cache["mlp_cache"])
    return dx


# ---------------------------------------------------------------------------
# checkpoint I/O: JSON manifest + concatenated IBMAT blocks

def write_slots(ckpt_dir: str, slots: list[ParamSlot], meta: dict | None = None):
    """Write slot values as IBMAT blocks in params.bin, indexed by manifest.json."""
    os.makedirs(ckpt_dir, exist_ok=True)
    entries, offset = [], 0
    blocks = []
    for s in slots:
        blob = matrix_to_bytes(s.value)
        entries.append({"name": s.name, "rows": s.value.shape[0],
                        "cols": s.value.shape[1], "offset": offset})
        blocks.append(blob)
        offset += len(blob)
    manifest = {"format": "ibkit-checkpoint", "version": 1,
                "meta": meta or {}, "slots": entries}
    with open(os.path.join(ckpt_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(ckpt_dir, "params.bin"), "wb") as fh:
        for blob in blocks:
            fh.write(blob)


def read_slots(ckpt_dir: str):
    """Return ({slot name: matrix}, meta) from a checkpoint directory."""
    with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "ibkit-checkpoint":
        raise ValueError(f"{ckpt_dir}: not an ibkit checkpoint")
    with open(os.path.join(ckpt_dir, "params.bin"), "rb") as fh:
        blob = fh.read()
    values = {}
    for entry in manifest["slots"]:
        m = matrix_from_bytes(blob[entry["offset"]:])
        if m.shape != (entry["rows"], entry["cols"]):
            raise ValueError(f"slot {entry['name']!r}: manifest/blob shape mismatch")
        values[entry["name"]] = m
    return values, manifest.get("meta", {})


def load_into(slots: list[ParamSlot], values: dict) -> None:
    for s in slots:
        if s.name not in values:
            raise KeyError(f"checkpoint missing slot {s.name!r}")
        v = values[s.name]
        if v.shape != s.value.shape:
            raise DimensionError(
                f"slot {s.name!r}: checkpoint shape {v.shape} != {s.value.shape}")
        s.value[...] = v
