"""Cost terms for the control objective.

A terminal cost is any callable mapping a (batch, dim) node Y to a
(batch, 1) node of per-sample costs; the objective averages over the batch.
The running cost re-uses the terminal cost, evaluated at the aggregated
Tweedie estimate and scaled by a time weight.

Objective layout (hat-J for one batch):

    hat_J = sum_i lambda_i * sum_k ||u_i_k||^2 dt_k        (control energy)
          + sum_k alpha_t(t_k) * psi(Y0_hat_k) dt_k        (running cost)
          + psi(Y_terminal)                                (terminal cost)

with lambda_i = control_weight / N unless per-agent weights are given.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .aggregation import MaskAggregator
from .nn import Mlp
from .tape import Node

Array = np.ndarray


@dataclass(frozen=True)
class SocConfig:
    """Weights of the control objective."""

    control_weight: float = 10.0      # lambda
    running_scale: float = 1.0        # alpha
    running_ramp: str = "constant"    # "constant" or "linear" (alpha * (1 - t))
    agent_weights: tuple | None = None
    seam_beta: float = 0.0
    seam_gamma: float = 0.0
    charbonnier_eps: float = 1e-3
    target_label: int | None = None

    def __post_init__(self):
        if self.control_weight < 0 or self.running_scale < 0:
            raise ValueError("cost weights must be non-negative")
        if self.seam_beta < 0 or self.seam_gamma < 0:
            raise ValueError("seam weights must be non-negative")
        if self.charbonnier_eps <= 0:
            raise ValueError("charbonnier_eps must be positive")
        if self.running_ramp not in ("constant", "linear"):
            raise ValueError(
                f"running_ramp must be 'constant' or 'linear', got "
                f"{self.running_ramp!r}"
            )
        if self.agent_weights is not None:
            w = tuple(float(x) for x in self.agent_weights)
            if any(x < 0 for x in w):
                raise ValueError("per-agent weights must be non-negative")
            object.__setattr__(self, "agent_weights", w)

    def lambda_weights(self, num_agents: int) -> Array:
        """Per-agent control weights; default lambda / N for every agent."""
        if self.agent_weights is None:
            return np.full(num_agents, self.control_weight / num_agents)
        if len(self.agent_weights) != num_agents:
            raise ValueError(
                f"{len(self.agent_weights)} agent weights for "
                f"{num_agents} agents"
            )
        return np.asarray(self.agent_weights, dtype=np.float64)

    def running_weight(self, t: float) -> float:
        """Time scaling alpha_t of the running cost."""
        if self.running_ramp == "linear":
            return self.running_scale * (1.0 - float(t))
        return self.running_scale


# ---------------------------------------------------------------------------
# terminal costs
# ---------------------------------------------------------------------------

class ZeroCost:
    """psi identically zero (place-holder for cost-free dynamics)."""

    def __call__(self, y) -> Node:
        y = tape.as_node(y)
        return tape.constant(np.zeros((y.value.shape[0], 1)))


class QuadraticWell:
    """psi(Y) = || Y - target ||^2, per sample."""

    def __init__(self, target: Array):
        self.target = np.asarray(target, dtype=np.float64).reshape(-1)

    def __call__(self, y) -> Node:
        diff = tape.sub(y, tape.constant(self.target))
        return tape.square_norm(diff, axis=1, keepdims=True)


class GaussianNll:
    """Negative log density of an isotropic target Gaussian."""

    def __init__(self, mean: Array, variance: float):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        if variance <= 0:
            raise ValueError("variance must be positive")
        self.variance = float(variance)

    def __call__(self, y) -> Node:
        d = self.mean.size
        diff = tape.sub(y, tape.constant(self.mean))
        quad = tape.scale(
            tape.square_norm(diff, axis=1, keepdims=True), 0.5 / self.variance
        )
        log_norm = 0.5 * d * np.log(2.0 * np.pi * self.variance)
        return tape.add(quad, tape.constant(np.array([log_norm])))


class ClassifierNll:
    """Softmax cross-entropy of a classifier at a fixed target label."""

    def __init__(self, classifier: Mlp, label: int):
        self.classifier = classifier
        n_classes = classifier.out_dim
        if not (0 <= int(label) < n_classes):
            raise ValueError(
                f"label {label} outside the classifier's {n_classes} classes"
            )
        self.label = int(label)

    def __call__(self, y) -> Node:
        logits = self.classifier(y)
        return classifier_nll(logits, self.label)


def classifier_nll(logits, label: int) -> Node:
    """-log softmax(logits)[label] = logsumexp(logits) - logits[label]."""
    logits = tape.as_node(logits)
    n_classes = logits.value.shape[1]
    if not (0 <= int(label) < n_classes):
        raise ValueError(f"label {label} outside [0, {n_classes})")
    return tape.sub(
        tape.logsumexp(logits, axis=1, keepdims=True),
        tape.gather_cols(logits, [int(label)]),
    )


class SeamAugmented:
    """base cost plus the seam-continuity loss of the same image layout."""

    def __init__(self, base, agg: MaskAggregator, cfg: SocConfig):
        if agg.image_hw is None:
            raise ValueError("seam loss needs an image layout")
        self.base = base
        self.agg = agg
        self.cfg = cfg

    def __call__(self, y) -> Node:
        return tape.add(self.base(y), seam_loss(y, self.agg, self.cfg))


def with_seam(base, agg: MaskAggregator, cfg: SocConfig):
    """Attach the seam loss when it is active for this layout."""
    if (cfg.seam_beta > 0 or cfg.seam_gamma > 0) and agg.seam_pairs:
        return SeamAugmented(base, agg, cfg)
    return base


# ---------------------------------------------------------------------------
# seam-continuity loss
# ---------------------------------------------------------------------------

def _charbonnier(x, eps: float) -> Node:
    return tape.sqrt(tape.add(tape.mul(x, x), tape.constant(eps * eps)))


def _row(y: Node, r: int, width: int) -> Node:
    return tape.gather_cols(y, np.arange(r * width, (r + 1) * width))


def seam_loss(y, agg: MaskAggregator, cfg: SocConfig) -> Node:
    """Charbonnier intensity and vertical-gradient mismatch across seams.

    For each seam pair (r_p, r_q) with r_q = r_p + 1 the loss adds, summed
    over columns,

        beta  * rho(Y[r_p] - Y[r_q])
      + gamma * rho(grad(r_p) - grad(r_q)),   rho(x) = sqrt(x^2 + eps^2),

    where grad is the one-sided vertical difference taken inside each
    stripe (grad(r_p) = Y[r_p] - Y[r_p - 1], grad(r_q) = Y[r_q + 1] -
    Y[r_q]), clamped to zero at the image border. Comparing interior
    slopes avoids counting the seam jump twice.
    """
    if agg.image_hw is None:
        raise ValueError("seam loss needs an image layout")
    h, w = agg.image_hw
    y = tape.as_node(y)
    if y.value.shape[1] != h * w:
        raise ValueError(
            f"state dimension {y.value.shape[1]} does not match image "
            f"{h}x{w}"
        )
    batch = y.value.shape[0]
    eps = cfg.charbonnier_eps
    total = tape.constant(np.zeros((batch, 1)))
    for (rp, rq) in agg.seam_pairs:
        if rq != rp + 1:
            raise ValueError(f"seam pair {(rp, rq)} is not adjacent")
        upper = _row(y, rp, w)
        lower = _row(y, rq, w)
        intensity = tape.reduce_sum(
            _charbonnier(tape.sub(upper, lower), eps), axis=1, keepdims=True
        )
        if rp >= 1:
            grad_p = tape.sub(upper, _row(y, rp - 1, w))
        else:
            grad_p = tape.constant(np.zeros((batch, w)))
        if rq + 1 <= h - 1:
            grad_q = tape.sub(_row(y, rq + 1, w), lower)
        else:
            grad_q = tape.constant(np.zeros((batch, w)))
        grad_term = tape.reduce_sum(
            _charbonnier(tape.sub(grad_p, grad_q), eps), axis=1, keepdims=True
        )
        total = tape.add(
            total,
            tape.add(
                tape.scale(intensity, cfg.seam_beta),
                tape.scale(grad_term, cfg.seam_gamma),
            ),
        )
    return total


# ---------------------------------------------------------------------------
# running cost and objective recomputation
# ---------------------------------------------------------------------------

def running_cost(y0_hat, t: float, psi, cfg: SocConfig) -> Node:
    """alpha_t * psi evaluated at the aggregated Tweedie estimate."""
    return tape.scale(psi(tape.as_node(y0_hat)), cfg.running_weight(t))


def soc_objective(record, cfg: SocConfig, psi) -> float:
    """Recompute hat-J from a stored rollout, tape-free.

    ``record`` must expose dts, times, controls[k][i], y0_hats[k],
    terminal_y and batch (see optimize.RolloutRecord). Used to cross-check
    the fused objective assembled during the differentiable rollout.
    """
    if record.batch == 0:
        raise ValueError("empty batch")
    lambdas = cfg.lambda_weights(record.num_agents)
    with tape.no_grad():
        control_term = 0.0
        run_term = 0.0
        for k, dt in enumerate(record.dts):
            for i, u in enumerate(record.controls[k]):
                control_term += lambdas[i] * float((u * u).sum(axis=1).mean()) * dt
            psi_hat = psi(tape.constant(record.y0_hats[k])).value
            run_term += cfg.running_weight(record.times[k]) * float(psi_hat.mean()) * dt
        term = float(psi(tape.constant(record.terminal_y)).value.mean())
    return control_term + run_term + term
