"""Verification entry points shared by the CLI and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .adapter import FusedParams, fused_backward, fused_forward
from .linalg import ParamSlot, finite_diff_gradcheck
from .oracle import equivalence_check

__all__ = ["fused_gradcheck", "ib_equivalence_sweep"]


def fused_gradcheck(seed: int = 0, n_tokens: int = 8, dim: int = 16,
                    heads: int = 4, hidden: int = 64, h: float = 1e-5) -> dict:
    """Check every parameter and the input gradient of the fused block.

    The scalar loss is the mean of the output.  Returns {slot name: max
    relative error}, including an "input/X" entry.
    """
    rng = np.random.default_rng(seed)
    params = FusedParams(dim, heads, hidden=hidden, seed=seed)
    x_slot = ParamSlot("input/X", rng.normal(size=(n_tokens, dim)))

    def loss():
        z, _ = fused_forward(x_slot.value, params, mode="infer")
        return z.mean()

    params.zero_grad()
    z, cache = fused_forward(x_slot.value, params, mode="infer")
    dz = np.full_like(z, 1.0 / z.size)
    x_slot.grad[...] = fused_backward(dz, params, cache)
    return finite_diff_gradcheck(loss, params.slots() + [x_slot], h=h)


def ib_equivalence_sweep(n_seeds: int, kind: str, bias_b: float = 1.0,
                         n_tokens: int = 4, n_channels: int = 6) -> list[dict]:
    """Per-seed deviations between one clustering iterate and its attention form."""
    return [{"seed": s, "kind": kind,
             "deviation": equivalence_check(s, kind, bias_b=bias_b,
                                            n_tokens=n_tokens,
                                            n_channels=n_channels)}
            for s in range(n_seeds)]
