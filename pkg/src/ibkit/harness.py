"""Desk-scale robustness harness.

A synthetic 4-class scene task (colored shapes on textured backgrounds) is
encoded by a frozen random patch embedding, projected by one of three models
(plain MLP, gated adapter, or the fused dual pathway), and classified by a
linear head.  Training sees clean images plus mild crop/color jitter only;
corruptions enter exclusively at evaluation time, and an instrumentation
counter proves it.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import corruptions
from .adapter import (
    FusedParams,
    MlpProjector,
    IBAdapterParams,
    fused_backward,
    fused_forward,
    ib_adapter_backward,
    ib_adapter_forward,
)
from .corruptions import CorruptionSpec, corrupt
from .linalg import DimensionError, NumericError, ParamSlot, matmul, softmax_rows

__all__ = [
    "ToyScene",
    "TrainConfig",
    "PolicyModel",
    "make_toy_dataset",
    "encode",
    "train_policy",
    "evaluate_grid",
    "feature_consistency",
    "kmeans2_grouping",
    "REPORT_SCHEMA_VERSION",
]

IMG_SIZE = 32
PATCH = 4
GRID = IMG_SIZE // PATCH          # 8 x 8 patches
N_TOKENS = GRID * GRID            # 64
PATCH_DIM = PATCH * PATCH * 3     # 48
N_CLASSES = 4
DEFAULT_DIM = 32
FROZEN_ENCODER_SEED = 1234

REPORT_SCHEMA_VERSION = 1

_CLASS_SHAPES = [("circle", (0.90, 0.12, 0.12)),
                 ("square", (0.10, 0.80, 0.15)),
                 ("triangle", (0.15, 0.25, 0.92)),
                 ("cross", (0.92, 0.88, 0.10))]


@dataclass
class ToyScene:
    image: np.ndarray        # 32 x 32 x 3 in [0, 1]
    label: int               # class index 0..3
    token_mask: np.ndarray   # (64,) bool, True where a patch overlaps a shape


@dataclass
class TrainConfig:
    model_kind: str = "fused"          # mlp | ib | fused
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    p_drop: float = 0.3
    lambda_init: float = 0.3
    crop_jitter: int = 4
    color_jitter: float = 0.1
    dim: int = DEFAULT_DIM
    heads: int = 4
    n_train: int = 4096

    def __post_init__(self):
        if self.model_kind not in ("mlp", "ib", "fused"):
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.lr <= 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("lr must be > 0, steps >= 0, batch_size >= 1")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must lie in [0, 1], got {self.p_drop}")


# ---------------------------------------------------------------------------
# scene generation

def _draw_shape(img, cover, shape, color, cy, cx, r):
    y, x = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE].astype(np.float64)
    if shape == "circle":
        m = (y - cy) ** 2 + (x - cx) ** 2 <= r * r
    elif shape == "square":
        m = (np.abs(y - cy) <= r) & (np.abs(x - cx) <= r)
    elif shape == "triangle":
        m = (y >= cy - r) & (y <= cy + r) & (np.abs(x - cx) <= (y - (cy - r)) / 2.0)
    elif shape == "cross":
        m = ((np.abs(y - cy) <= r / 3.0) & (np.abs(x - cx) <= r)) | \
            ((np.abs(x - cx) <= r / 3.0) & (np.abs(y - cy) <= r))
    else:
        raise ValueError(shape)
    img[m] = color
    cover |= m


def make_toy_dataset(seed: int, n_scenes: int) -> list[ToyScene]:
    """Deterministic, class-balanced scenes (label i is ``i mod 4``)."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n_scenes):
        label = i % N_CLASSES
        base = rng.uniform(0.2, 0.5, size=3)
        y, x = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE].astype(np.float64) / (IMG_SIZE - 1)
        grad = 0.1 * (rng.uniform(-1, 1) * x + rng.uniform(-1, 1) * y)
        img = np.clip(base[None, None, :] + grad[:, :, None]
                      + 0.01 * rng.normal(size=(IMG_SIZE, IMG_SIZE, 3)), 0, 1)
        cover = np.zeros((IMG_SIZE, IMG_SIZE), dtype=bool)
        # gray distractors first so the class shape is never occluded
        for _ in range(rng.integers(0, 3)):
            kind = _CLASS_SHAPES[rng.integers(0, N_CLASSES)][0]
            r = rng.uniform(2.5, 4.5)
            cy, cx = rng.uniform(r + 1, IMG_SIZE - r - 2, size=2)
            _draw_shape(img, cover, kind, (0.55, 0.55, 0.55), cy, cx, r)
        shape, color = _CLASS_SHAPES[label]
        r = rng.uniform(4.0, 6.5)
        cy, cx = rng.uniform(r + 1, IMG_SIZE - r - 2, size=2)
        _draw_shape(img, cover, shape, color, cy, cx, r)
        mask = cover.reshape(GRID, PATCH, GRID, PATCH).any(axis=(1, 3)).reshape(-1)
        scenes.append(ToyScene(np.clip(img, 0, 1), label, mask))
    return scenes


_ENCODER_CACHE: dict[int, np.ndarray] = {}

def _encoder_matrix(frozen_seed: int) -> np.ndarray:
    """Structured frozen patch embedding (48 pixel values -> 32 channels).

    The channels span a spectrum of spatial frequencies, so they respond very
    differently to pixel noise:
      0-2    patch-mean RGB               (16-pixel average, most robust)
      3-14   2x2 block-mean RGB           (4-pixel averages)
      15-20  left/right and top/bottom gradient means per RGB
      21-31  zero-mean high-frequency probes (pixel-level sign patterns,
             noise-sensitive, carry texture and edge detail)
    Every feature is linear in the pixels, so the encoder stays one matrix.
    """
    if frozen_seed in _ENCODER_CACHE:
        return _ENCODER_CACHE[frozen_seed]
    m = np.zeros((PATCH_DIM, DEFAULT_DIM))

    def pix(py, px, ch):
        # flattening order of the patch vector: (py, px, ch)
        return (py * PATCH + px) * 3 + ch

    col = 0
    for ch in range(3):  # patch means
        for py in range(PATCH):
            for px in range(PATCH):
                m[pix(py, px, ch), col] = 1.0 / 16.0
        col += 1
    for by in range(2):  # 2x2 block means
        for bx in range(2):
            for ch in range(3):
                for py in range(2 * by, 2 * by + 2):
                    for px in range(2 * bx, 2 * bx + 2):
                        m[pix(py, px, ch), col] = 1.0 / 4.0
                col += 1
    for ch in range(3):  # left-right gradient
        for py in range(PATCH):
            for px in range(PATCH):
                m[pix(py, px, ch), col] = (1.0 if px >= 2 else -1.0) / 8.0
        col += 1
    for ch in range(3):  # top-bottom gradient
        for py in range(PATCH):
            for px in range(PATCH):
                m[pix(py, px, ch), col] = (1.0 if py >= 2 else -1.0) / 8.0
        col += 1
    rng = np.random.default_rng(frozen_seed)
    while col < DEFAULT_DIM:  # high-frequency probes
        signs = rng.choice([-1.0, 1.0], size=PATCH_DIM)
        signs -= signs.mean()  # ignore the patch mean component
        m[:, col] = signs / np.sqrt(PATCH_DIM)
        col += 1
    # deal the channels round-robin across the contiguous head blocks so every
    # head mixes robust and fragile channels (a head of pure high-frequency
    # channels would have nothing stable to anchor its normalization)
    heads: list[list[int]] = [[] for _ in range(4)]
    for i in range(DEFAULT_DIM):
        heads[i % 4].append(i)
    order = [c for block in heads for c in block]
    m = m[:, order]
    _ENCODER_CACHE[frozen_seed] = m
    return m


def encode(image: np.ndarray, frozen_seed: int = FROZEN_ENCODER_SEED) -> np.ndarray:
    """Frozen, bias-free structured patch embedding: 64 tokens x 32 channels."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (IMG_SIZE, IMG_SIZE, 3):
        raise DimensionError(f"expected a {IMG_SIZE}x{IMG_SIZE}x3 image, "
                             f"got {image.shape}")
    patches = (image.reshape(GRID, PATCH, GRID, PATCH, 3)
               .transpose(0, 2, 1, 3, 4).reshape(N_TOKENS, PATCH_DIM))
    return matmul(patches, _encoder_matrix(frozen_seed))


# ---------------------------------------------------------------------------
# models

class PolicyModel:
    """Projector (mlp | ib | fused) plus a linear classification head."""

    def __init__(self, kind: str, dim: int = DEFAULT_DIM, heads: int = 4,
                 seed: int = 0, lambda_init: float = 0.3, p_drop: float = 0.3):
        self.kind = kind
        self.dim = dim
        rng = np.random.default_rng(seed + 7)
        if kind == "mlp":
            self.proj = MlpProjector(dim, seed=seed)
        elif kind == "ib":
            self.proj = IBAdapterParams(dim, heads, seed=seed)
        elif kind == "fused":
            self.proj = FusedParams(dim, heads, seed=seed,
                                    lambda_init=lambda_init, p_drop=p_drop)
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        self.head_w = ParamSlot("head/W", rng.normal(0, 0.02, (dim, N_CLASSES)))
        self.head_b = ParamSlot("head/b", np.zeros((1, N_CLASSES)))

    def slots(self):
        return self.proj.slots() + [self.head_w, self.head_b]

    def zero_grad(self):
        for s in self.slots():
            s.zero_grad()

    def project(self, x, mode="infer", drop_mlp=None):
        if self.kind == "mlp":
            return self.proj.forward(x)
        if self.kind == "ib":
            return ib_adapter_forward(x, self.proj)
        return fused_forward(x, self.proj, mode=mode, drop_mlp=drop_mlp)

    def project_backward(self, dz, cache):
        if self.kind == "mlp":
            return self.proj.backward(dz, cache)
        if self.kind == "ib":
            return ib_adapter_backward(dz, self.proj, cache)
        return fused_backward(dz, self.proj, cache)

    def logits(self, z):
        pooled = z.mean(axis=0, keepdims=True)
        return matmul(pooled, self.head_w.value) + self.head_b.value, pooled

    def meta(self):
        return {"kind": self.kind, "dim": self.dim,
                "heads": getattr(self.proj, "n_heads",
                                 getattr(getattr(self.proj, "ib", None),
                                         "n_heads", 0)),
                "p_drop": getattr(self.proj, "p_drop", None)}


def _augment(img, rng, crop_jitter, color_jitter):
    if crop_jitter > 0:
        pad = crop_jitter
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        oy, ox = rng.integers(0, 2 * pad + 1, size=2)
        img = padded[oy:oy + IMG_SIZE, ox:ox + IMG_SIZE]
    if color_jitter > 0:
        img = img + rng.uniform(-color_jitter, color_jitter, size=3)
    return np.clip(img, 0.0, 1.0)


def _adam_step(slots, state, lr, t, beta1=0.9, beta2=0.999, eps=1e-8):
    for s in slots:
        m, v = state[s.name]
        m[...] = beta1 * m + (1 - beta1) * s.grad
        v[...] = beta2 * v + (1 - beta2) * s.grad ** 2
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        s.value -= lr * mhat / (np.sqrt(vhat) + eps)


def train_policy(dataset: list[ToyScene], config: TrainConfig):
    """Adam on softmax cross-entropy over mean-pooled projector outputs.

    Returns (model, trace) where trace is a list of (step, loss) pairs.
    Corruptions never run here; the corruption call counter is checked.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    calls_before = corruptions.call_count()
    model = PolicyModel(config.model_kind, dim=config.dim, heads=config.heads,
                        seed=config.seed, lambda_init=config.lambda_init,
                        p_drop=config.p_drop)
    rng = np.random.default_rng(config.seed)
    adam = {s.name: (np.zeros_like(s.value), np.zeros_like(s.value))
            for s in model.slots()}
    trace = []
    for step in range(config.steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        drop = bool(rng.random() < config.p_drop) if config.model_kind == "fused" else None
        model.zero_grad()
        loss = 0.0
        for i in idx:
            scene = dataset[i]
            img = _augment(scene.image, rng, config.crop_jitter, config.color_jitter)
            x = encode(img)
            z, cache = model.project(x, mode="train", drop_mlp=drop)
            logits, pooled = model.logits(z)
            probs = softmax_rows(logits)
            loss += -np.log(max(probs[0, scene.label], 1e-300))
            dlogits = probs.copy()
            dlogits[0, scene.label] -= 1.0
            dlogits /= config.batch_size
            model.head_w.grad += matmul(pooled.T, dlogits)
            model.head_b.grad += dlogits
            dpooled = matmul(dlogits, model.head_w.value.T)
            dz = np.repeat(dpooled / z.shape[0], z.shape[0], axis=0)
            model.project_backward(dz, cache)
        loss /= config.batch_size
        if not np.isfinite(loss):
            raise NumericError(f"training diverged (non-finite loss) at step {step}")
        _adam_step(model.slots(), adam, config.lr, step + 1)
        trace.append((step, float(loss)))
    assert corruptions.call_count() == calls_before, \
        "training must never touch the corruptions module"
    return model, trace


# ---------------------------------------------------------------------------
# metrics

def feature_consistency(clean_z: np.ndarray, corrupt_z: np.ndarray) -> float:
    """Mean over tokens of row-wise cosine similarity; zero rows count as 0."""
    a = np.asarray(clean_z, dtype=np.float64)
    b = np.asarray(corrupt_z, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.zeros(a.shape[0])
    cos[ok] = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return float(cos.mean())


def kmeans2_grouping(z: np.ndarray, token_mask: np.ndarray, seed: int = 0,
                     max_iter: int = 100) -> float:
    """Lloyd K-means with K=2 on direction-normalized token features.

    Rows are L2-normalized first (zero rows stay zero), so grouping is driven
    by feature direction, matching the cosine geometry of
    ``feature_consistency`` and making the metric invariant to per-pathway
    output scales.  Purity is the best agreement over the two possible
    cluster-to-mask label assignments.  If all tokens are identical the
    clustering is degenerate and the majority-mask fraction is returned
    (with a warning).
    """
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    z = z / np.maximum(norms, 1e-300)
    mask = np.asarray(token_mask, dtype=bool)
    n = z.shape[0]
    if n < 2:
        raise ValueError("need at least 2 tokens")
    if mask.all() or (~mask).all():
        raise ValueError("token mask must contain both classes")
    if np.allclose(z, z[0]):
        warnings.warn("degenerate tokens: purity falls back to majority fraction")
        return float(max(mask.mean(), 1.0 - mask.mean()))
    rng = np.random.default_rng(seed)
    # k-means++ style seeding
    first = rng.integers(0, n)
    d2 = ((z - z[first]) ** 2).sum(axis=1)
    total = d2.sum()
    if total == 0:
        second = (first + 1) % n
    else:
        second = int(rng.choice(n, p=d2 / total))
    centers = np.stack([z[first], z[second]])
    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dist = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        if (new_assign == assign).all() and _ > 0:
            break
        assign = new_assign
        for k in (0, 1):
            sel = assign == k
            if sel.any():
                centers[k] = z[sel].mean(axis=0)
    agree = (assign.astype(bool) == mask).mean()
    return float(max(agree, 1.0 - agree))


# ---------------------------------------------------------------------------
# evaluation grid

def _cell_seed(base_seed: int, kind: str, severity: int, index: int) -> int:
    key = f"{base_seed}/{kind}/{severity}/{index}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")

def _config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()[:16]


def evaluate_grid(model: PolicyModel, dataset: list[ToyScene],
                  kinds: list[str], severities: list[int],
                  seed: int = 0, purity_scenes: int = 64,
                  config: TrainConfig | None = None) -> dict:
    """Corruption-grid evaluation producing a serializable robustness report."""
    clean_tokens, clean_z = [], []
    correct = 0
    for scene in dataset:
        x = encode(scene.image)
        z, _ = model.project(x)
        logits, _ = model.logits(z)
        correct += int(logits.argmax() == scene.label)
        clean_tokens.append(x)
        clean_z.append(z)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "model_kind": model.kind,
        "clean_accuracy": correct / len(dataset),
        "eval_seed": seed,
        "n_scenes": len(dataset),
        "config_hash": _config_hash(config) if config else None,
        "cells": [],
    }
    for kind in kinds:
        for severity in severities:
            correct = 0
            cons, enc_cons, purities = [], [], []
            for i, scene in enumerate(dataset):
                spec = CorruptionSpec(kind, severity,
                                      seed=_cell_seed(seed, kind, severity, i))
                img = corrupt(scene.image, spec)
                x = encode(img)
                z, _ = model.project(x)
                logits, _ = model.logits(z)
                correct += int(logits.argmax() == scene.label)
                cons.append(feature_consistency(clean_z[i], z))
                enc_cons.append(feature_consistency(clean_tokens[i], x))
                if i < purity_scenes and scene.token_mask.any() \
                        and not scene.token_mask.all():
                    purities.append(kmeans2_grouping(z, scene.token_mask,
                                                     seed=seed + i))
            report["cells"].append({
                "kind": kind,
                "severity": severity,
                "accuracy": correct / len(dataset),
                "feature_consistency": float(np.mean(cons)),
                "encoder_consistency": float(np.mean(enc_cons)),
                "grouping_purity": float(np.mean(purities)) if purities else None,
            })
    return report
