"""Brute-force iterative information-bottleneck clustering over channels.

Channels (columns of X) are soft-clustered against Gaussian cluster models
with a shared covariance.  One iterate of the update, on instances whose
centers satisfy mu^T Sigma^{-1} mu = 1, reproduces exactly the channel
attention closed form (row-softmax or sigmoid of the scaled query/key
product), which is what ``equivalence_check`` certifies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .linalg import DimensionError, NumericError, sigmoid, softmax_rows

__all__ = [
    "IBProblem",
    "IBState",
    "kl_gaussian_limit",
    "ib_iterate_categorical",
    "ib_iterate_bernoulli",
    "attention_equivalent",
    "equivalence_check",
    "make_instance",
]


@dataclass
class IBProblem:
    """Clustering instance: channel columns, trade-off beta, smoothing eps."""

    channels: np.ndarray  # N x D, column j is channel c_j
    beta: float
    eps: float = 1e-6

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] < 1:
            raise DimensionError(f"channels must be N x D, got {self.channels.shape}")
        if not np.all(np.isfinite(self.channels)):
            raise NumericError("channel data contains non-finite values")
        if self.beta <= 0 or self.eps <= 0:
            raise ValueError("beta and eps must be positive")

    @property
    def n_clusters(self) -> int:
        # one cluster per channel
        return self.channels.shape[1]


class IBState:
    """Priors, centers, shared covariance (with cached inverse) and assignments."""

    def __init__(self, priors, centers, sigma, assignments=None):
        self.priors = np.asarray(priors, dtype=np.float64)
        self.centers = np.asarray(centers, dtype=np.float64)  # N x C, column per cluster
        self.sigma = np.asarray(sigma, dtype=np.float64)
        self.assignments = assignments
        if np.any(self.priors < 0) or abs(self.priors.sum() - 1.0) > 1e-12:
            raise ValueError("priors must be nonnegative and sum to 1")
        if not np.allclose(self.sigma, self.sigma.T):
            raise ValueError("sigma must be symmetric")
        try:
            self._chol = scipy.linalg.cho_factor(self.sigma, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NumericError("sigma is not positive definite") from exc
        self.sigma_inv = scipy.linalg.cho_solve(self._chol, np.eye(self.sigma.shape[0]))
        self.log_det = 2.0 * np.sum(np.log(np.diag(self._chol[0])))

    @property
    def masses(self) -> np.ndarray:
        # n_c = C * p(c), with C the cluster count
        return self.priors * self.priors.size


def kl_gaussian_limit(c_j, mu_c, state: IBState) -> float:
    """Reduced small-eps divergence: 0.5 * [Mahalanobis(c, mu) + log|Sigma|]."""
    diff = np.asarray(c_j, float).reshape(-1) - np.asarray(mu_c, float).reshape(-1)
    return 0.5 * (float(diff @ state.sigma_inv @ diff) + state.log_det)


def _center_energy(problem: IBProblem, state: IBState) -> np.ndarray:
    """E[j, c] = beta * (mu_c^T Sigma^{-1} c_j - 0.5*(mu_c^T Sigma^{-1} mu_c - 1)).

    With centers normalized to mu^T Sigma^{-1} mu = 1 the correction term
    vanishes and E reduces to beta * mu_c^T Sigma^{-1} c_j.
    """
    x = problem.channels
    cross = x.T @ state.sigma_inv @ state.centers  # D x C
    quad = np.einsum("nc,nm,mc->c", state.centers, state.sigma_inv, state.centers)
    return problem.beta * (cross - 0.5 * (quad - 1.0))


def ib_iterate_categorical(problem: IBProblem, state: IBState) -> IBState:
    """One soft-assignment step with a categorical latent structure.

    q(c|j) is proportional to p(c) * exp(-beta * KL(j, c)) and each column is
    normalized over clusters (a softmax).  Priors and centers are then updated
    as the assignment-weighted means.
    """
    x = problem.channels
    n_ch = x.shape[1]
    n_cl = state.centers.shape[1]
    kl = np.empty((n_ch, n_cl))
    for j in range(n_ch):
        for c in range(n_cl):
            kl[j, c] = kl_gaussian_limit(x[:, j], state.centers[:, c], state)
    with np.errstate(divide="ignore"):
        log_w = np.log(state.priors)[None, :] - problem.beta * kl  # j x c
    # stabilize per channel before exponentiating
    log_w -= log_w.max(axis=1, keepdims=True)
    w = np.exp(log_w)
    col_mass = w.sum(axis=1, keepdims=True)
    if np.any(col_mass == 0.0) or not np.all(np.isfinite(w)):
        raise NumericError("assignment underflow; try a smaller beta")
    q = (w / col_mass).T  # clusters x channels
    masses = q.sum(axis=1)  # n_c, sums to the channel count
    priors = masses / n_ch
    centers = (x @ q.T) / masses[None, :]
    return IBState(priors, centers, state.sigma, assignments=q)


def ib_iterate_bernoulli(problem: IBProblem, state: IBState, bias_b: float) -> IBState:
    """One step with independent Bernoulli channel-cluster associations.

    q(a_jc = 1 | j) = (p(c) / |Sigma|^{beta/2}) * exp(E) / (exp(E) + exp(b))
    with E the center energy; each (j, c) pair is normalized on its own binary
    state space, no competition between clusters.
    """
    energy = _center_energy(problem, state)  # j x c
    prior_w = state.priors[None, :] * np.exp(-0.5 * problem.beta * state.log_det)
    q = (prior_w * sigmoid(energy - bias_b)).T  # clusters x channels
    if not np.all(np.isfinite(q)):
        raise NumericError("assignment underflow; try a smaller beta")
    x = problem.channels
    masses = q.sum(axis=1)
    if np.any(masses == 0.0):
        raise NumericError("a cluster received zero mass; try a smaller beta")
    centers = (x @ q.T) / masses[None, :]
    priors = masses / masses.sum()
    new = IBState(priors, centers, state.sigma, assignments=q)
    # keep the raw (pre-normalization) masses: the Bernoulli case does not
    # conserve total mass, and the attention prefactor needs these values
    new.raw_masses = masses
    return new


def attention_equivalent(x: np.ndarray, state: IBState, beta: float,
                         kind: str, bias_b: float = 0.0) -> np.ndarray:
    """Closed-form channel attention matching one clustering iterate.

    Q = Sigma^{-1} X, K holds the previous centers, V is X with each output
    column scaled by the mass ratio n_c(prev) / (n_c(new) * C * |Sigma|^{beta/2});
    the new masses are derived from the attention weights themselves.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != state.centers.shape[0]:
        raise DimensionError(
            f"X has {x.shape[0]} rows but state centers have {state.centers.shape[0]}")
    scores = beta * (x.T @ state.sigma_inv @ state.centers)  # j x c
    if kind == "softmax":
        s = softmax_rows(scores)
    elif kind == "sigmoid":
        s = sigmoid(scores - bias_b)
    else:
        raise ValueError(f"kind must be 'softmax' or 'sigmoid', got {kind!r}")
    det_scale = np.exp(-0.5 * beta * state.log_det)
    q = (state.priors[None, :] * det_scale) * s  # paper-form assignments, j x c
    new_masses = q.sum(axis=0)
    ratio = state.priors * det_scale / new_masses  # per output column
    return (x @ s) * ratio[None, :]


def make_instance(seed: int, n_tokens: int = 4, n_channels: int = 6,
                  beta: float = 0.7, normalized: bool = True):
    """Random instance satisfying the shared-covariance derivation assumptions.

    Centers are rescaled so mu^T Sigma^{-1} mu = 1 unless ``normalized`` is
    False (the negative control).  Priors are uniform.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_tokens, n_channels))
    a = rng.normal(size=(n_tokens, n_tokens))
    sigma = a @ a.T / n_tokens + 0.5 * np.eye(n_tokens)
    problem = IBProblem(x, beta=beta)
    centers = x + 0.1 * rng.normal(size=x.shape)
    sigma_inv = np.linalg.inv(sigma)
    if normalized:
        norms = np.sqrt(np.einsum("nc,nm,mc->c", centers, sigma_inv, centers))
        centers = centers / norms[None, :]
    priors = np.full(n_channels, 1.0 / n_channels)
    return problem, IBState(priors, centers, sigma)


def equivalence_check(seed: int, kind: str, bias_b: float = 1.0,
                      n_tokens: int = 4, n_channels: int = 6,
                      beta: float = 0.7, normalized: bool = True) -> float:
    """Max |Z_iterate - Z_attention| on a freshly constructed instance."""
    problem, state = make_instance(seed, n_tokens, n_channels, beta,
                                   normalized=normalized)
    if kind == "softmax":
        new = ib_iterate_categorical(problem, state)
    elif kind == "sigmoid":
        new = ib_iterate_bernoulli(problem, state, bias_b)
    else:
        raise ValueError(f"kind must be 'softmax' or 'sigmoid', got {kind!r}")
    z_attn = attention_equivalent(problem.channels, state, problem.beta,
                                  kind, bias_b=bias_b)
    return float(np.abs(new.centers - z_attn).max())
