"""Coupled-SDE rollouts, the differentiable control objective, training
loops, and baseline samplers.

One rollout simulates B trajectories of the N coupled controlled
reverse-time SDEs on a shared time grid. Per step k and agent i:

    s_i   = S(X_i, t_k)                        shared score model
    xh_i  = tweedie(X_i, t_k, s_i)             denoised look-ahead
    Yh    = aggregate(xh)                      joint Tweedie estimate
    g_i   = grad_{xh_i} psi(Yh)                guidance, detached
    u_i   = control(x_i, Y, t_k, g_i)
    mu_i  = 0.5 b X_i + b s_i                  reverse drift
    X_i  <- X_i + (mu_i + g u_i) dt + g sqrt(dt) xi

accumulating the control energy and the running cost; the terminal cost is
evaluated on the aggregate of the final states. The rollout is recorded on
the tape end to end (score evaluations included), except for the guidance
inputs g_i, which are computed from detached leaves in a nested backward
pass and enter the graph as constants: adjoints never flow from the
controls back into the score model through the guidance path.

All noise is drawn from a ``NoiseStream`` keyed by (stream, update, step),
so runs sharing a seed are pairable draw by draw: joint and control-wise
training consume identical noise at the same update index, a zero control
reproduces the uncontrolled sampler bit for bit, and baseline comparisons
at evaluation time are paired.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tape
from .aggregation import MaskAggregator, aggregate
from .control import (
    ControlPolicy,
    cdps_control,
    eval_control,
    state_guidance,
    tweedie_guidance,
)
from .costs import SocConfig
from .optim import AdamState, adam_step
from .scores import tweedie
from .sde import (
    STREAM_INIT,
    STREAM_STEP,
    NoiseSchedule,
    NoiseStream,
    TimeGrid,
    em_step,
    reverse_drift,
)
from .tape import Node

Array = np.ndarray


class DivergedRolloutError(RuntimeError):
    """A trajectory left the finite range; ``step`` names the EM step."""

    def __init__(self, step: int, agent: int):
        super().__init__(
            f"rollout diverged at step {step} (agent {agent}): "
            "non-finite state"
        )
        self.step = step
        self.agent = agent


class TrainingDivergedError(RuntimeError):
    """Training aborted after repeated divergence; carries the curve so far."""

    def __init__(self, message: str, curve: list):
        super().__init__(message)
        self.curve = curve


@dataclass
class RolloutRecord:
    """Detached per-rollout bookkeeping.

    ``loss_u`` is the unweighted control accumulator
    sum_k dt_k (1/N) sum_i mean_B ||u_i_k||^2, ``loss_c`` the unscaled
    running-cost accumulator sum_k dt_k mean_B psi(Y0_hat_k), and
    ``loss_psi`` the batch-mean terminal cost, so that with default agent
    weights  hat_J = lambda loss_u + alpha loss_c + loss_psi.
    """

    times: Array
    dts: Array
    batch: int
    num_agents: int
    loss_u: float = 0.0
    loss_c: float = 0.0
    loss_psi: float = 0.0
    objective: float = 0.0
    per_sample_psi: Array | None = None
    terminal_y: Array | None = None
    terminal_states: list = field(default_factory=list)
    states: list = field(default_factory=list)      # [k][i] -> (B, d)
    controls: list = field(default_factory=list)    # [k][i] -> (B, d)
    tweedies: list = field(default_factory=list)    # [k][i] -> (B, d)
    guidances: list = field(default_factory=list)   # [k][i] -> (B, d)
    y_aggs: list = field(default_factory=list)      # [k]    -> (B, d)
    y0_hats: list = field(default_factory=list)     # [k]    -> (B, d)


@dataclass(frozen=True)
class TrainPlan:
    """Iteration budgets and step sizes for control optimisation."""

    mode: str = "joint"              # "joint", "controlwise" or "cdps"
    updates: int = 1000              # gradient updates (joint mode)
    outer_iters: int = 300           # outer sweeps (control-wise mode)
    inner_steps: int = 5             # updates per agent per sweep
    batch: int = 16
    lr: float = 1e-4
    lr_aggregator: float = 1e-4      # used only if the aggregator has params
    shuffle_agents: bool = False
    checkpoint_every: int = 0        # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.mode not in ("joint", "controlwise", "cdps"):
            raise ValueError(
                f"mode must be joint, controlwise or cdps, got {self.mode!r}"
            )
        for name in ("updates", "outer_iters", "inner_steps", "batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0 or self.lr_aggregator <= 0:
            raise ValueError("learning rates must be positive")

    def planned_updates(self, num_agents: int) -> int:
        """Gradient updates the plan will execute.

        Control-wise sweeps visit every agent each outer iteration, so the
        total is outer_iters * num_agents * inner_steps.
        """
        if self.mode == "joint":
            return self.updates
        return self.outer_iters * num_agents * self.inner_steps


# ---------------------------------------------------------------------------
# control sources
# ---------------------------------------------------------------------------
# A control source maps per-step context to one control node per agent.
# Keeping zero controls and learned controls on the same arithmetic path
# makes "zero policy" and "uncontrolled" runs bit-identical.

class PolicyControls:
    def __init__(self, policies: Sequence[ControlPolicy]):
        self.policies = list(policies)

    def __call__(self, k, t, xs, y, x0_hats, guidances):
        return [
            eval_control(p, x, y, t, g)
            for p, x, g in zip(self.policies, xs, guidances)
        ]


class ZeroControls:
    def __call__(self, k, t, xs, y, x0_hats, guidances):
        return [tape.constant(np.zeros_like(x.value)) for x in xs]


class CdpsControls:
    """Training-free guidance: scaled cost gradient w.r.t. the states."""

    def __init__(self, alpha_guid, score_fn, agg, psi, schedule):
        self.alpha_guid = float(alpha_guid)
        self.score_fn = score_fn
        self.agg = agg
        self.psi = psi
        self.schedule = schedule

    def __call__(self, k, t, xs, y, x0_hats, guidances):
        grads = state_guidance(
            self.score_fn,
            self.agg,
            self.psi,
            self.schedule,
            [x.value for x in xs],
            t,
        )
        return [
            cdps_control(x, t, tape.constant(g), self.alpha_guid)
            for x, g in zip(xs, grads)
        ]


# ---------------------------------------------------------------------------
# the rollout
# ---------------------------------------------------------------------------

def _batch_mean(per_sample: Node, batch: int) -> Node:
    return tape.scale(tape.reduce_sum(per_sample), 1.0 / batch)


def coupled_rollout(
    control_fn: Callable,
    score_fn,
    agg: MaskAggregator,
    cfg: SocConfig,
    grid: TimeGrid,
    psi,
    schedule: NoiseSchedule,
    noise: NoiseStream,
    batch: int,
    update_index: int = 0,
    record_history: bool = False,
    guidance_override: Sequence | None = None,
) -> tuple[Node, RolloutRecord]:
    """Simulate the coupled controlled system and assemble hat-J.

    ``guidance_override``, when given, replaces the per-step guidance
    arrays (list over steps of lists per agent); gradient checks use it to
    freeze the guidance at base-point values, which is the function the
    backward pass differentiates (guidance is constant by construction).
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    n_agents = agg.num_agents
    dim = agg.dim
    times = grid.times
    dts = grid.dts
    lambdas = cfg.lambda_weights(n_agents)
    record = RolloutRecord(
        times=times, dts=dts, batch=batch, num_agents=n_agents
    )

    sigma0 = float(schedule.sigma(times[0]))
    init = noise.normal((STREAM_INIT, update_index, 0), (n_agents, batch, dim))
    xs = [tape.constant(sigma0 * init[i]) for i in range(n_agents)]

    control_node: Node | None = None
    running_node: Node | None = None
    loss_u = 0.0
    loss_c = 0.0

    for k in range(times.size - 1):
        t = float(times[k])
        dt = float(dts[k])
        g_k = float(schedule.g(t))

        if record_history:
            record.states.append([x.value for x in xs])

        y_k = aggregate(agg, xs)
        scores = [score_fn(x, t) for x in xs]
        x0_hats = [
            tweedie(x, t, s, schedule) for x, s in zip(xs, scores)
        ]
        y0_hat = aggregate(agg, x0_hats)

        psi_hat = psi(y0_hat)                      # (B, 1), on the tape
        step_cost = _batch_mean(psi_hat, batch)
        loss_c += float(step_cost.value) * dt
        weighted = tape.scale(step_cost, cfg.running_weight(t) * dt)
        running_node = weighted if running_node is None else tape.add(running_node, weighted)

        if guidance_override is not None:
            guidances = [np.asarray(g) for g in guidance_override[k]]
        else:
            guidances = tweedie_guidance(psi, agg, x0_hats)

        controls = control_fn(k, t, xs, y_k, x0_hats, guidances)

        step_u = 0.0
        for i, u in enumerate(controls):
            sq = _batch_mean(tape.square_norm(u, axis=1, keepdims=True), batch)
            term = tape.scale(sq, lambdas[i] * dt)
            control_node = term if control_node is None else tape.add(control_node, term)
            step_u += float(sq.value) / n_agents
        loss_u += step_u * dt

        if record_history:
            record.controls.append([u.value for u in controls])
            record.tweedies.append([xh.value for xh in x0_hats])
            record.guidances.append([np.asarray(g) for g in guidances])
            record.y_aggs.append(y_k.value)
            record.y0_hats.append(y0_hat.value)

        xi = noise.normal((STREAM_STEP, update_index, k), (n_agents, batch, dim))
        new_xs = []
        for i, (x, s, u) in enumerate(zip(xs, scores, controls)):
            mu = reverse_drift(x, t, s, schedule)
            drift = tape.add(mu, tape.scale(u, g_k))
            try:
                x_next = em_step(x, t, dt, drift, g_k, xi[i])
            except FloatingPointError as err:
                raise DivergedRolloutError(step=k, agent=i) from err
            if not np.all(np.isfinite(x_next.value)):
                raise DivergedRolloutError(step=k, agent=i)
            new_xs.append(x_next)
        xs = new_xs

    if record_history:
        record.states.append([x.value for x in xs])

    y_term = aggregate(agg, xs)
    psi_term = psi(y_term)                         # (B, 1)
    terminal_node = _batch_mean(psi_term, batch)

    objective = terminal_node
    if running_node is not None:
        objective = tape.add(objective, running_node)
    if control_node is not None:
        objective = tape.add(objective, control_node)

    record.loss_u = loss_u
    record.loss_c = loss_c
    record.loss_psi = float(terminal_node.value)
    record.objective = float(objective.value)
    record.per_sample_psi = psi_term.value[:, 0].copy()
    record.terminal_y = y_term.value
    record.terminal_states = [x.value for x in xs]
    return objective, record


def bptt_rollout(
    policies: Sequence[ControlPolicy],
    score_fn,
    agg: MaskAggregator,
    cfg: SocConfig,
    grid: TimeGrid,
    psi,
    schedule: NoiseSchedule,
    noise: NoiseStream,
    batch: int,
    update_index: int = 0,
    record_history: bool = False,
    guidance_override: Sequence | None = None,
) -> tuple[Node, RolloutRecord]:
    """Differentiable rollout under the learned per-agent controls."""
    if len(policies) != agg.num_agents:
        raise ValueError(
            f"{len(policies)} policies for {agg.num_agents} agents"
        )
    return coupled_rollout(
        PolicyControls(policies),
        score_fn,
        agg,
        cfg,
        grid,
        psi,
        schedule,
        noise,
        batch,
        update_index=update_index,
        record_history=record_history,
        guidance_override=guidance_override,
    )


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class CurvePoint:
    update: int
    loss_u: float
    loss_c: float
    loss_psi: float
    objective: float

    def row(self) -> tuple:
        return (self.update, self.loss_u, self.loss_c, self.loss_psi, self.objective)


@dataclass
class TrainingResult:
    policies: list
    curve: list
    total_updates: int


def _collect_grads(params: list[Node]) -> list[Array]:
    return [
        p.grad if p.grad is not None else np.zeros_like(p.value) for p in params
    ]


def joint_ido(
    plan: TrainPlan,
    policies: Sequence[ControlPolicy],
    score_fn,
    agg: MaskAggregator,
    cfg: SocConfig,
    grid: TimeGrid,
    psi,
    schedule: NoiseSchedule,
    seed: int,
    on_update: Callable | None = None,
) -> TrainingResult:
    """Simultaneous gradient descent on every agent's control parameters.

    Repeats {rollout, backward, Adam step on all policies (and aggregator
    parameters, if it has any)} for ``plan.updates`` updates. A diverged
    rollout skips the update and halves the learning rate once; a second
    divergence aborts with the partial curve attached.
    """
    if plan.mode != "joint":
        raise ValueError(f"joint_ido needs mode='joint', got {plan.mode!r}")
    policies = list(policies)
    params = [p for policy in policies for p in policy.params()]
    agg_params = agg.params()
    if not params and not agg_params:
        raise ValueError("no learnable parameters; use the cdps sampler instead")
    adam = AdamState.for_params(params, lr=plan.lr)
    adam_agg = AdamState.for_params(agg_params, lr=plan.lr_aggregator)
    noise = NoiseStream(seed)
    curve: list[CurvePoint] = []
    lr_halved = False
    for n in range(plan.updates):
        try:
            objective, rec = bptt_rollout(
                policies, score_fn, agg, cfg, grid, psi, schedule, noise,
                plan.batch, update_index=n,
            )
        except DivergedRolloutError as err:
            if lr_halved:
                raise TrainingDivergedError(
                    f"update {n}: {err} (after halving the learning rate)",
                    [c.row() for c in curve],
                ) from err
            lr_halved = True
            adam.lr = adam.lr / 2.0
            adam_agg.lr = adam_agg.lr / 2.0
            continue
        tape.backward(objective)
        adam_step(params, _collect_grads(params), adam)
        if agg_params:
            adam_step(agg_params, _collect_grads(agg_params), adam_agg)
        curve.append(CurvePoint(n, rec.loss_u, rec.loss_c, rec.loss_psi, rec.objective))
        if on_update is not None:
            on_update(n, policies)
    return TrainingResult(policies, curve, plan.updates)


def controlwise_ido(
    plan: TrainPlan,
    policies: Sequence[ControlPolicy],
    score_fn,
    agg: MaskAggregator,
    cfg: SocConfig,
    grid: TimeGrid,
    psi,
    schedule: NoiseSchedule,
    seed: int,
    on_update: Callable | None = None,
) -> TrainingResult:
    """Coordinate descent over agents.

    Outer sweeps select one agent at a time; during that agent's
    ``inner_steps`` updates every other policy is held fixed (their
    gradients are computed but never applied, and their Adam state never
    advances). The global update counter keys the noise stream, so a joint
    run with the same seed consumes identical noise at the same update.
    """
    if plan.mode != "controlwise":
        raise ValueError(
            f"controlwise_ido needs mode='controlwise', got {plan.mode!r}"
        )
    policies = list(policies)
    if not any(policy.params() for policy in policies):
        raise ValueError("no learnable parameters; use the cdps sampler instead")
    agg_params = agg.params()
    adams = [
        AdamState.for_params(policy.params(), lr=plan.lr) for policy in policies
    ]
    adam_agg = AdamState.for_params(agg_params, lr=plan.lr_aggregator)
    noise = NoiseStream(seed)
    curve: list[CurvePoint] = []
    update = 0
    lr_halved = False
    for outer in range(plan.outer_iters):
        order = list(range(len(policies)))
        if plan.shuffle_agents:
            from .sde import derive_rng

            order = list(derive_rng(seed, 9, outer).permutation(len(policies)))
        for i in order:
            active = policies[i].params()
            for _ in range(plan.inner_steps):
                try:
                    objective, rec = bptt_rollout(
                        policies, score_fn, agg, cfg, grid, psi, schedule,
                        noise, plan.batch, update_index=update,
                    )
                except DivergedRolloutError as err:
                    if lr_halved:
                        raise TrainingDivergedError(
                            f"update {update}: {err} (after halving the "
                            "learning rate)",
                            [c.row() for c in curve],
                        ) from err
                    lr_halved = True
                    for adam in adams:
                        adam.lr = adam.lr / 2.0
                    adam_agg.lr = adam_agg.lr / 2.0
                    update += 1
                    continue
                tape.backward(objective)
                adam_step(active, _collect_grads(active), adams[i])
                if agg_params:
                    adam_step(agg_params, _collect_grads(agg_params), adam_agg)
                curve.append(
                    CurvePoint(update, rec.loss_u, rec.loss_c, rec.loss_psi,
                               rec.objective)
                )
                if on_update is not None:
                    on_update(update, policies)
                update += 1
    return TrainingResult(policies, curve, update)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def sample_controlled(
    policies,
    score_fn,
    agg: MaskAggregator,
    cfg: SocConfig,
    grid: TimeGrid,
    psi,
    schedule: NoiseSchedule,
    seed: int,
    batch: int,
    record_history: bool = False,
    noise_index: int = 0,
) -> RolloutRecord:
    """Draw samples under trained policies (no parameter updates)."""
    with tape.no_grad():
        _, record = bptt_rollout(
            policies, score_fn, agg, cfg, grid, psi, schedule,
            NoiseStream(seed), batch, update_index=noise_index,
            record_history=record_history,
        )
    return record


def sample_uncontrolled(
    score_fn,
    agg: MaskAggregator,
    cfg: SocConfig,
    grid: TimeGrid,
    psi,
    schedule: NoiseSchedule,
    seed: int,
    batch: int,
    record_history: bool = False,
    noise_index: int = 0,
) -> RolloutRecord:
    """The coupled system with zero control everywhere."""
    with tape.no_grad():
        _, record = coupled_rollout(
            ZeroControls(), score_fn, agg, cfg, grid, psi, schedule,
            NoiseStream(seed), batch, update_index=noise_index,
            record_history=record_history,
        )
    return record


def sample_cdps(
    score_fn,
    agg: MaskAggregator,
    cfg: SocConfig,
    grid: TimeGrid,
    psi,
    schedule: NoiseSchedule,
    seed: int,
    batch: int,
    alpha_guid: float = 100.0,
    record_history: bool = False,
    noise_index: int = 0,
) -> RolloutRecord:
    """Training-free baseline: per-step scaled cost gradients as controls."""
    control_fn = CdpsControls(alpha_guid, score_fn, agg, psi, schedule)
    with tape.no_grad():
        _, record = coupled_rollout(
            control_fn, score_fn, agg, cfg, grid, psi, schedule,
            NoiseStream(seed), batch, update_index=noise_index,
            record_history=record_history,
        )
    return record


def sample_poe_naive(
    score_fns: Sequence,
    grid: TimeGrid,
    schedule: NoiseSchedule,
    seed: int,
    batch: int,
    dim: int,
    noise_index: int = 0,
) -> Array:
    """Reverse SDE driven by the SUM of the component scores.

    This is the biased product-of-experts shortcut: summing scores of the
    diffused components does not give the score of the diffused product
    except at t = 0, so the sampler is exact only when one score is passed
    (ordinary sampling). With one N(0, I) expert repeated n times the
    summed score is -n x and the terminal per-coordinate variance relaxes
    to 1 / (2 n - 1), not the true product variance 1 / n.
    """
    if not score_fns:
        raise ValueError("need at least one score model")
    noise = NoiseStream(seed)
    times = grid.times
    sigma0 = float(schedule.sigma(times[0]))
    x = sigma0 * noise.normal((STREAM_INIT, noise_index, 0), (1, batch, dim))[0]
    with tape.no_grad():
        for k in range(times.size - 1):
            t = float(times[k])
            dt = float(times[k] - times[k + 1])
            g_k = float(schedule.g(t))
            x_node = tape.constant(x)
            total = None
            for fn in score_fns:
                s = fn(x_node, t)
                total = s if total is None else tape.add(total, s)
            mu = reverse_drift(x_node, t, total, schedule)
            xi = noise.normal((STREAM_STEP, noise_index, k), (1, batch, dim))[0]
            x = em_step(x_node, t, dt, mu, g_k, xi).value
            if not np.all(np.isfinite(x)):
                raise DivergedRolloutError(step=k, agent=0)
    return x


def sample_reverse_sde(
    score_fn,
    grid: TimeGrid,
    schedule: NoiseSchedule,
    seed: int,
    batch: int,
    dim: int,
) -> Array:
    """Ordinary single-model sampling (one-expert case of the above)."""
    return sample_poe_naive([score_fn], grid, schedule, seed, batch, dim)
