"""Per-agent control policies and the training-free gradient baseline.

A learned control combines a free-form drift correction with an explicit
reward-gradient term:

    u_i(x_i, Y, g_i, t) = NN1([x_i, Y, g_i, time_feats]) + NN2(t) * g_i

where g_i is the gradient of the cost at the aggregated Tweedie estimate
with respect to agent i's own Tweedie estimate, treated as a constant
input (no adjoint flows through it). NN1 is zero-initialised in its final
layer and NN2 starts as a constant, so a fresh policy is exactly
NN2_const * g_i, and exactly zero for the default constant 0.

The baseline control instead scales the gradient of the same cost with
respect to the *state*, which differentiates through the Tweedie map and
the score model (the expensive path the learned parametrisation avoids).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .aggregation import MaskAggregator, aggregate
from .nn import Mlp, time_features
from .scores import tweedie
from .sde import NoiseSchedule
from .tape import Node

Array = np.ndarray


@dataclass
class ControlPolicy:
    """Parameters of one agent's control."""

    agent_index: int
    nn1: Mlp             # [x, Y, guidance, time feats] -> R^d
    nn2: Mlp             # time feats -> R^1 (broadcast gain on the guidance)
    temb_width: int

    @property
    def dim(self) -> int:
        return self.nn1.out_dim

    def params(self) -> list[Node]:
        return self.nn1.params() + self.nn2.params()

    def named_params(self) -> list[tuple[str, Node]]:
        return self.nn1.named_params() + self.nn2.named_params()

    def state_dict(self) -> dict[str, Array]:
        return {name: p.value.copy() for name, p in self.named_params()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        self.nn1.load_state_dict(state)
        self.nn2.load_state_dict(state)


def make_policy(
    dim: int,
    agent_index: int,
    rng: np.random.Generator,
    hidden=(64, 64),
    gain_hidden=(32,),
    temb_width: int = 16,
    guidance_gain_init: float = 0.0,
) -> ControlPolicy:
    """Fresh policy whose control field is guidance_gain_init * guidance."""
    nn1 = Mlp(
        [3 * dim + temb_width, *hidden, dim],
        rng,
        zero_final=True,
        name=f"agent{agent_index}.nn1",
    )
    nn2 = Mlp(
        [temb_width, *gain_hidden, 1],
        rng,
        zero_final=True,
        final_bias=guidance_gain_init,
        name=f"agent{agent_index}.nn2",
    )
    return ControlPolicy(agent_index, nn1, nn2, temb_width)


def eval_control(policy: ControlPolicy, x, y, t: float, guidance) -> Node:
    """u_i = NN1([x, Y, g, feats]) + NN2(t) * g, with g held constant."""
    x = tape.as_node(x)
    y = tape.as_node(y)
    guidance = tape.stopgrad(tape.as_node(guidance))
    d = policy.dim
    for name, v in (("state", x), ("aggregate", y), ("guidance", guidance)):
        if v.value.shape[-1] != d:
            raise ValueError(
                f"{name} has dimension {v.value.shape[-1]}, policy expects {d}"
            )
    batch = x.value.shape[0]
    feats = time_features(t, policy.temb_width, batch=batch)
    z = tape.concat([x, y, guidance, tape.constant(feats)], axis=1)
    gain = policy.nn2(tape.constant(feats[:1]))  # (1, 1), shared across the batch
    return tape.add(policy.nn1(z), tape.mul(gain, guidance))


def cdps_control(x_i, t: float, guidance_wrt_state, alpha_guid: float) -> Node:
    """u_hat = -alpha_guid * grad_x psi(Y0_hat); no learnable parameters.

    ``guidance_wrt_state`` is the gradient of the cost psi, so with
    alpha_guid > 0 the control pushes the state DOWN the cost (classifier
    guidance semantics); the scale alone sets the strength.
    """
    x_i = tape.as_node(x_i)
    guidance_wrt_state = tape.as_node(guidance_wrt_state)
    if x_i.value.shape != guidance_wrt_state.value.shape:
        raise ValueError(
            f"guidance shape {guidance_wrt_state.value.shape} does not match "
            f"state shape {x_i.value.shape}"
        )
    return tape.scale(guidance_wrt_state, -float(alpha_guid))


# ---------------------------------------------------------------------------
# guidance gradients
# ---------------------------------------------------------------------------

def tweedie_guidance(psi, agg: MaskAggregator, x0_hat_values) -> list[Array]:
    """grad of psi(aggregate(x0_hats)) w.r.t. each agent's Tweedie estimate.

    The inputs are detached values: the result is a plain array per agent,
    which downstream consumers treat as a constant. Per-sample gradients are
    independent, so one backward from the batch sum yields all rows.
    """
    values = [
        np.asarray(v.value if isinstance(v, Node) else v, dtype=np.float64)
        for v in x0_hat_values
    ]
    with tape.grad_enabled():
        leaves = [tape.leaf(v) for v in values]
        y0 = aggregate(agg, leaves)
        tape.backward(tape.reduce_sum(psi(y0)))
    return [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        for leaf in leaves
    ]


def state_guidance(
    score_fn,
    agg: MaskAggregator,
    psi,
    schedule: NoiseSchedule,
    x_values,
    t: float,
) -> list[Array]:
    """grad of psi(aggregate(tweedie(x, score(x)))) w.r.t. each agent state.

    Unlike ``tweedie_guidance`` this differentiates through the score model
    and the Tweedie map; it is the gradient the training-free baseline uses.
    """
    values = [
        np.asarray(v.value if isinstance(v, Node) else v, dtype=np.float64)
        for v in x_values
    ]
    with tape.grad_enabled():
        leaves = [tape.leaf(v) for v in values]
        x0_hats = [
            tweedie(x, t, score_fn(x, t), schedule) for x in leaves
        ]
        y0 = aggregate(agg, x0_hats)
        tape.backward(tape.reduce_sum(psi(y0)))
    return [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        for leaf in leaves
    ]
