"""Score functions: analytic Gaussian-mixture scores, a trainable score
network, denoising score matching, and the Tweedie denoiser.

A diffused isotropic GMM is again a GMM: component i with weight w_i, mean
mu_i and variance s_i^2 becomes, at diffusion time t, a component with mean
alpha(t) mu_i and variance alpha(t)^2 s_i^2 + sigma(t)^2. Its score is exact
and is used as the oracle-grade score model for low-dimensional tasks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .nn import Mlp, time_features
from .sde import NoiseSchedule, marginal_coeffs
from .tape import Node

Array = np.ndarray

ALPHA_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture in R^d."""

    weights: Array   # (C,), simplex
    means: Array     # (C, d)
    variances: Array # (C,), > 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        if w.ndim != 1 or m.shape[0] != w.size or v.shape != w.shape:
            raise ValueError("inconsistent mixture shapes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must form a simplex, got sum {w.sum()!r}")
        if np.any(v <= 0):
            raise ValueError("component variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_components(self) -> int:
        return self.weights.size

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        comp = rng.choice(self.num_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * eps

    def diffused(self, t: float, schedule: NoiseSchedule) -> "GaussianMixture":
        alpha, sigma = marginal_coeffs(schedule, t)
        return GaussianMixture(
            weights=self.weights,
            means=alpha * self.means,
            variances=alpha * alpha * self.variances + sigma * sigma,
        )

    def log_density(self, x: Array) -> Array:
        """log p(x) for rows of x, stabilised with log-sum-exp."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = self.dim
        sq = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)  # (B, C)
        log_comp = (
            np.log(self.weights)[None, :]
            - 0.5 * d * np.log(2.0 * np.pi * self.variances)[None, :]
            - 0.5 * sq / self.variances[None, :]
        )
        lmax = log_comp.max(axis=1, keepdims=True)
        return (np.log(np.exp(log_comp - lmax).sum(axis=1, keepdims=True)) + lmax)[:, 0]


def gmm_score(gmm: GaussianMixture, x, t: float, schedule: NoiseSchedule) -> Node:
    """Exact score of the time-t diffused mixture, recorded on the tape.

    Built from elementary ops so BPTT can differentiate through it.
    """
    mix = gmm.diffused(t, schedule)
    x = tape.as_node(x)
    d = mix.dim
    log_w = np.log(mix.weights) - 0.5 * d * np.log(2.0 * np.pi * mix.variances)

    diffs = []
    logits = []
    for i in range(mix.num_components):
        diff = tape.sub(x, tape.constant(mix.means[i]))
        diffs.append(diff)
        sq = tape.square_norm(diff, axis=1, keepdims=True)  # (B, 1)
        logits.append(tape.add(tape.scale(sq, -0.5 / mix.variances[i]),
                               tape.constant(np.array([log_w[i]]))))
    if mix.num_components == 1:
        return tape.scale(diffs[0], -1.0 / mix.variances[0])
    logit_mat = tape.concat(logits, axis=1)                     # (B, C)
    resp = tape.exp(tape.sub(logit_mat, tape.logsumexp(logit_mat)))  # (B, C)
    out = None
    for i, diff in enumerate(diffs):
        term = tape.mul(tape.gather_cols(resp, [i]),
                        tape.scale(diff, -1.0 / mix.variances[i]))
        out = term if out is None else tape.add(out, term)
    return out


def gmm_score_np(gmm: GaussianMixture, x: Array, t, schedule: NoiseSchedule) -> Array:
    """Tape-free diffused-mixture score, vectorised over per-row times."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
    alpha, sigma = marginal_coeffs(schedule, t)
    d = gmm.dim
    means = alpha[:, None, None] * gmm.means[None, :, :]          # (B, C, d)
    var = alpha[:, None] ** 2 * gmm.variances[None, :] + sigma[:, None] ** 2
    diff = x[:, None, :] - means                                  # (B, C, d)
    sq = (diff * diff).sum(axis=2)                                # (B, C)
    log_comp = (
        np.log(gmm.weights)[None, :]
        - 0.5 * d * np.log(2.0 * np.pi * var)
        - 0.5 * sq / var
    )
    lmax = log_comp.max(axis=1, keepdims=True)
    resp = np.exp(log_comp - lmax)
    resp /= resp.sum(axis=1, keepdims=True)
    return (resp[:, :, None] * (-diff / var[:, :, None])).sum(axis=1)


class AnalyticGmmScore:
    """Score provider backed by a closed-form mixture.

    With a scalar time the score is recorded on the tape (BPTT needs the
    dependence on x); with per-row times (score-matching evaluation) it is
    computed tape-free and returned as a constant.
    """

    def __init__(self, gmm: GaussianMixture, schedule: NoiseSchedule):
        self.gmm = gmm
        self.schedule = schedule

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def __call__(self, x, t) -> Node:
        if np.ndim(t) > 0 and np.asarray(t).size > 1:
            x = tape.as_node(x)
            return tape.constant(gmm_score_np(self.gmm, x.value, t, self.schedule))
        t = float(np.asarray(t).reshape(()))
        return gmm_score(self.gmm, x, t, self.schedule)

    def params(self) -> list[Node]:
        return []

    def log_density(self, x: Array, t: float) -> Array:
        return self.gmm.diffused(t, self.schedule).log_density(x)


class MlpScore:
    """Trainable score network with a denoiser head.

    The Mlp maps [x, time_features(t)] to a residual r(x, t); the denoised
    estimate is m(x, t) = x + r(x, t) and the score is the
    conjugate-Gaussian form

        S(x, t) = (alpha(t) m(x, t) - x) / sigma(t)^2.

    The residual head makes m exactly representable near t = 0 (where the
    truth is the identity), and the parametrisation bakes in the correct
    linear tail (mean reversion far outside the data region), which a
    free-form network output cannot give with saturating activations.
    """

    def __init__(self, dim: int, hidden, temb_width: int, rng: np.random.Generator,
                 schedule: NoiseSchedule | None = None, name: str = "score"):
        self.dim = int(dim)
        self.temb_width = int(temb_width)
        self.schedule = schedule if schedule is not None else NoiseSchedule()
        self.mlp = Mlp([dim + temb_width, *hidden, dim], rng, name=name)

    def denoiser_head(self, x, t) -> Node:
        x = tape.as_node(x)
        batch = x.value.shape[0]
        feats = time_features(t, self.temb_width, batch=batch)
        return tape.add(x, self.mlp(tape.concat([x, tape.constant(feats)], axis=1)))

    def __call__(self, x, t) -> Node:
        x = tape.as_node(x)
        m = self.denoiser_head(x, t)
        alpha, sigma = marginal_coeffs(self.schedule, t)
        sig2 = np.maximum(np.asarray(sigma) ** 2, 1e-8)
        if np.ndim(alpha) == 0:
            return tape.scale(tape.sub(tape.scale(m, float(alpha)), x),
                              1.0 / float(sig2))
        a_col = np.asarray(alpha).reshape(-1, 1)
        inv_col = (1.0 / sig2).reshape(-1, 1)
        return tape.mul(
            tape.sub(tape.mul(m, tape.constant(a_col)), x),
            tape.constant(inv_col),
        )

    def params(self) -> list[Node]:
        return self.mlp.params()

    def named_params(self):
        return self.mlp.named_params()

    def state_dict(self):
        return self.mlp.state_dict()

    def load_state_dict(self, state) -> None:
        self.mlp.load_state_dict(state)


def denoiser_loss(score_net: MlpScore, batch: Array, times: Array,
                  noises: Array, schedule: NoiseSchedule,
                  eps: float = 1e-3) -> Node:
    """Denoising regression, mean ||m(x_t, t) - x_0||^2.

    A signal-to-noise reweighting of the score-matching objective; O(1)
    across t, which keeps training well conditioned where the raw
    score-matching integrand diverges like 1/sigma^2.
    """
    x0 = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("denoiser_loss needs a non-empty batch")
    t = np.clip(np.asarray(times, dtype=np.float64).reshape(-1), eps, 1.0)
    eps_arr = np.asarray(noises, dtype=np.float64)
    alpha, sigma = marginal_coeffs(schedule, t)
    x_t = alpha[:, None] * x0 + sigma[:, None] * eps_arr
    resid = tape.sub(score_net.denoiser_head(tape.constant(x_t), t),
                     tape.constant(x0))
    per_sample = tape.square_norm(resid, axis=1, keepdims=True)
    return tape.scale(tape.reduce_sum(per_sample), 1.0 / x0.shape[0])


def dsm_loss(score_fn, batch: Array, times: Array, noises: Array,
             schedule: NoiseSchedule, eps: float = 1e-3) -> Node:
    """Monte Carlo denoising score-matching loss.

    mean over the batch of || -noise/sigma(t) - S(x_t, t) ||^2 where
    x_t = alpha(t) x_0 + sigma(t) noise. Times are clamped to [eps, 1]
    to avoid the sigma -> 0 singularity of the conditional score.
    """
    x0 = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("dsm_loss needs a non-empty batch")
    t = np.clip(np.asarray(times, dtype=np.float64).reshape(-1), eps, 1.0)
    eps_arr = np.asarray(noises, dtype=np.float64)
    if eps_arr.shape != x0.shape or t.size != x0.shape[0]:
        raise ValueError("batch, times and noises must agree in length/shape")
    alpha, sigma = marginal_coeffs(schedule, t)
    x_t = alpha[:, None] * x0 + sigma[:, None] * eps_arr
    target = -eps_arr / sigma[:, None]
    pred = score_fn(tape.constant(x_t), t)
    resid = tape.sub(pred, tape.constant(target))
    per_sample = tape.square_norm(resid, axis=1, keepdims=True)
    return tape.scale(tape.reduce_sum(per_sample), 1.0 / x0.shape[0])


def tweedie(x, t: float, score, schedule: NoiseSchedule) -> Node:
    """Posterior-mean denoiser x0_hat = (x + sigma(t)^2 score) / alpha(t)."""
    alpha, sigma = marginal_coeffs(schedule, t)
    alpha = float(alpha)
    if alpha < ALPHA_FLOOR:
        raise FloatingPointError(
            f"alpha(t) = {alpha} below floor at t = {t}; increase the "
            "terminal cutoff"
        )
    x = tape.as_node(x)
    score = tape.as_node(score)
    return tape.scale(
        tape.add(x, tape.scale(score, float(sigma) ** 2)), 1.0 / alpha
    )
