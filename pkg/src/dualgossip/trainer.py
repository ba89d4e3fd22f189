"""Round orchestration: local adapter updates, gossip aggregation, dropout,
adaptive mixing coefficients, and learning-rate sanity checks.

One round is: every agent trains locally for ``local_epochs`` passes over its
data, stages its shared head, then the staged heads are averaged over the
communication graph with the doubly stochastic mixing matrix. Personalized
heads never cross agent boundaries.

Two local-update variants are provided. The nested variant runs all
personalized-head epochs with the shared head frozen, then takes a single
shared-head step using the gradient at the final personalized parameters on
the last minibatch of the final epoch. The parallel variant steps both heads
every minibatch: the personalized head first, then the shared head at the
freshly updated personalized parameters. With one minibatch per epoch and
``local_epochs == 1`` the two variants therefore produce identical
trajectories.

The rate validator checks the step sizes against the contraction-based
bounds: eta_w against min(1/L, N/2, (1-q) / (3*sqrt(2)*C*L*N)) and eta_v
against eta_v * tau * L * (1 + 36 tau^2) <= 1. Both checks are advisory.
"""

from dataclasses import dataclass, replace
import math
import os
import struct

import numpy as np

from . import datagen, metrics as metrics_ops, model as model_ops
from .errors import (
    DivergenceError,
    InvalidConfigError,
    InvalidInputError,
    ShapeError,
)
from .topology import MixingMatrix

NESTED = "nested"
PARALLEL = "parallel"
VARIANTS = (NESTED, PARALLEL)

PER_BATCH = "per_batch"
PER_EPOCH_SINGLE_STEP = "per_epoch_single_step"
V_UPDATE_MODES = (PER_BATCH, PER_EPOCH_SINGLE_STEP)

MANUAL = "manual"
COROLLARY1 = "corollary1"
RATE_SCHEDULES = (MANUAL, COROLLARY1)

_DROPOUT_STREAM_TAG = 0xD201
_AGENT_STREAM_TAG = 0xA6E7


@dataclass(frozen=True)
class FixedMu:
    mu: float = 0.5


@dataclass(frozen=True)
class PerAgentMu:
    values: tuple


@dataclass(frozen=True)
class AdaptiveMu:
    grid_step: float = 0.25
    ema_decay: float = 0.5
    initial: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one experiment.

    With ``rate_schedule == "corollary1"`` the step sizes are derived from
    the horizon (eta_v = 1 / (tau * sqrt(K)), eta_w = sqrt(N / K)) and must
    not be supplied.
    """

    rounds: int
    local_epochs: int = 5
    eta_w: float | None = None
    eta_v: float | None = None
    mu_policy: object = FixedMu(0.5)
    variant: str = NESTED
    batch_size: int = 32
    dropout_prob: float = 0.0
    seed: int = 0
    rate_schedule: str = COROLLARY1
    v_update_mode: str = PER_BATCH
    independent: bool = False
    full_model_gossip: bool = False
    metric_v_grad_mode: str = metrics_ops.V_GRAD_STACKED
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise InvalidConfigError("rounds must be nonnegative")
        if self.local_epochs < 1:
            raise InvalidConfigError("local_epochs must be at least 1")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be at least 1")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise InvalidConfigError("dropout_prob must lie in [0, 1)")
        if self.seed < 0:
            raise InvalidConfigError("seed must be nonnegative")
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown variant {self.variant!r}")
        if self.v_update_mode not in V_UPDATE_MODES:
            raise InvalidConfigError(f"unknown v_update_mode {self.v_update_mode!r}")
        if self.rate_schedule not in RATE_SCHEDULES:
            raise InvalidConfigError(f"unknown rate_schedule {self.rate_schedule!r}")
        if self.metric_v_grad_mode not in metrics_ops.V_GRAD_MODES:
            raise InvalidConfigError(
                f"unknown metric_v_grad_mode {self.metric_v_grad_mode!r}"
            )
        if self.checkpoint_interval < 0:
            raise InvalidConfigError("checkpoint_interval must be nonnegative")
        if self.rate_schedule == COROLLARY1:
            if self.eta_w is not None or self.eta_v is not None:
                raise InvalidConfigError(
                    "corollary1 schedule computes eta_w/eta_v; do not supply them"
                )
            if self.rounds < 1:
                raise InvalidConfigError("corollary1 schedule needs rounds >= 1")
        else:
            if self.eta_w is None or self.eta_v is None:
                raise InvalidConfigError("manual schedule requires eta_w and eta_v")
            if self.eta_w < 0 or self.eta_v < 0:
                raise InvalidConfigError("learning rates must be nonnegative")
        _validate_mu_policy(self.mu_policy)


def _validate_mu_policy(policy):
    if isinstance(policy, FixedMu):
        if not 0.0 <= policy.mu <= 1.0:
            raise InvalidConfigError(f"mu must lie in [0, 1], got {policy.mu}")
    elif isinstance(policy, PerAgentMu):
        if not policy.values or any(not 0.0 <= m <= 1.0 for m in policy.values):
            raise InvalidConfigError("per-agent mu values must lie in [0, 1]")
    elif isinstance(policy, AdaptiveMu):
        if not 0.0 < policy.grid_step <= 1.0:
            raise InvalidConfigError("grid_step must lie in (0, 1]")
        steps = round(1.0 / policy.grid_step)
        if abs(steps * policy.grid_step - 1.0) > 1e-9:
            raise InvalidConfigError("grid_step must divide 1 evenly")
        if not 0.0 <= policy.ema_decay <= 1.0:
            raise InvalidConfigError("ema_decay must lie in [0, 1]")
        if not 0.0 <= policy.initial <= 1.0:
            raise InvalidConfigError("initial mu must lie in [0, 1]")
    else:
        raise InvalidConfigError(f"unknown mu policy {policy!r}")


def resolve_rates(config, n_agents):
    """Concrete (eta_w, eta_v) for a federation of ``n_agents``."""
    if config.rate_schedule == COROLLARY1:
        return (
            math.sqrt(n_agents / config.rounds),
            1.0 / (config.local_epochs * math.sqrt(config.rounds)),
        )
    return config.eta_w, config.eta_v


def initial_mu(policy, agent_id):
    if isinstance(policy, FixedMu):
        return policy.mu
    if isinstance(policy, PerAgentMu):
        if agent_id >= len(policy.values):
            raise InvalidConfigError(
                f"per-agent mu list is shorter than agent index {agent_id}"
            )
        return policy.values[agent_id]
    return policy.initial


@dataclass
class AgentState:
    model: model_ops.DualAdapterModel
    data: datagen.AgentDataset
    rng: np.random.Generator


@dataclass
class FederationState:
    """All agents plus the mixing matrix; mutated only by the trainer."""

    agents: list
    mixing: MixingMatrix
    round: int = 0

    def __post_init__(self):
        if self.mixing.n != len(self.agents):
            raise ShapeError("mixing matrix size must equal agent count")
        shapes = {a.model.shared.weight.shape for a in self.agents}
        if len(shapes) != 1:
            raise ShapeError("all shared adapters must have identical shapes")

    def shared_stack(self):
        return np.stack([a.model.shared.flatten() for a in self.agents])

    def personalized_stack(self):
        return np.stack([a.model.personalized.flatten() for a in self.agents])

    @property
    def models(self):
        return [a.model for a in self.agents]

    @property
    def datasets(self):
        return [a.data for a in self.agents]


def init_federation(config, datasets, backbone, mixing):
    """Zero-initialized federation with per-agent minibatch streams."""
    if isinstance(config.mu_policy, PerAgentMu) and len(
        config.mu_policy.values
    ) != len(datasets):
        raise InvalidConfigError("per-agent mu list must match agent count")
    agents = []
    for ds in datasets:
        agent_model = model_ops.new_model(
            backbone, ds.n_classes, initial_mu(config.mu_policy, ds.agent_id)
        )
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, _AGENT_STREAM_TAG, ds.agent_id])
        )
        agents.append(AgentState(model=agent_model, data=ds, rng=rng))
    return FederationState(agents=agents, mixing=mixing)


def _check_finite(vec, agent_id, round_index, what):
    if not np.isfinite(vec).all():
        raise DivergenceError(
            f"non-finite {what} for agent {agent_id} in round {round_index}",
            agent=agent_id,
            round_index=round_index,
        )


def _agent_epoch_batches(agent, config):
    if config.v_update_mode == PER_BATCH:
        yield from datagen.epoch_batches(agent.data, config.batch_size, agent.rng)
    else:
        size = min(config.batch_size, agent.data.n_train)
        yield datagen.sample_minibatch(agent.data, size, agent.rng)


def local_phase_nested(state, config, online=None):
    """Per-agent: local_epochs of personalized steps with the shared head
    frozen, then one shared step at the final personalized parameters."""
    eta_w, eta_v = resolve_rates(config, len(state.agents))
    staged = state.shared_stack()
    for i, agent in enumerate(state.agents):
        if online is not None and not online[i]:
            continue
        m = agent.model
        last_batch = None
        for _ in range(config.local_epochs):
            for bx, by in _agent_epoch_batches(agent, config):
                g_v = model_ops.grad_personalized(m, bx, by)
                _check_finite(g_v, i, state.round, "personalized gradient")
                m.personalized.set_flat(m.personalized.flatten() - eta_v * g_v)
                last_batch = (bx, by)
        bx, by = last_batch
        g_w = model_ops.grad_shared(m, bx, by)
        _check_finite(g_w, i, state.round, "shared gradient")
        staged[i] = staged[i] - eta_w * g_w
    return staged


def local_phase_parallel(state, config, online=None):
    """Per-agent: both heads step every minibatch inside every epoch; the
    shared step follows the personalized step of the same minibatch."""
    eta_w, eta_v = resolve_rates(config, len(state.agents))
    staged = state.shared_stack()
    for i, agent in enumerate(state.agents):
        if online is not None and not online[i]:
            continue
        m = agent.model
        w_cur = staged[i].copy()
        for _ in range(config.local_epochs):
            for bx, by in _agent_epoch_batches(agent, config):
                eval_model = m.with_shared_flat(w_cur)
                g_v = model_ops.grad_personalized(eval_model, bx, by)
                _check_finite(g_v, i, state.round, "personalized gradient")
                m.personalized.set_flat(m.personalized.flatten() - eta_v * g_v)
                eval_model = m.with_shared_flat(w_cur)
                g_w = model_ops.grad_shared(eval_model, bx, by)
                _check_finite(g_w, i, state.round, "shared gradient")
                w_cur = w_cur - eta_w * g_w
        staged[i] = w_cur
    return staged


def gossip_round(staged, mixing):
    """Weighted neighbor averaging of the staged shared adapters."""
    staged = np.asarray(staged, dtype=np.float64)
    if staged.ndim != 2 or staged.shape[0] != mixing.n:
        raise ShapeError(
            f"expected ({mixing.n}, dim) staged adapters, got {staged.shape}"
        )
    return mixing.weights @ staged


def _support_edges(mixing):
    w = mixing.weights
    return [
        (i, j)
        for i in range(mixing.n)
        for j in range(i + 1, mixing.n)
        if w[i, j] > 0.0
    ]


def _gossip_with_mask(staged, mixing, online):
    """Gossip over the online-induced subgraph; returns the new stack and
    the number of active (online-online) edges."""
    staged = np.asarray(staged, dtype=np.float64)
    online = np.asarray(online, dtype=bool)
    if online.all():
        return gossip_round(staged, mixing), len(_support_edges(mixing))

    sub_edges = [
        (i, j) for i, j in _support_edges(mixing) if online[i] and online[j]
    ]
    deg = [0] * mixing.n
    for i, j in sub_edges:
        deg[i] += 1
        deg[j] += 1
    weights = np.eye(mixing.n)
    for i, j in sub_edges:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        weights[i, j] = w
        weights[j, i] = w
        weights[i, i] -= w
        weights[j, j] -= w
    return weights @ staged, len(sub_edges)


def dropout_gossip(staged, mixing, dropout_prob, rng):
    """Gossip where each agent is independently offline with the given
    probability; offline agents keep their staged value unchanged."""
    if not 0.0 <= dropout_prob < 1.0:
        raise InvalidInputError("dropout_prob must lie in [0, 1)")
    n = mixing.n
    online = rng.random(n) >= dropout_prob
    new, _ = _gossip_with_mask(staged, mixing, online)
    return new, online


def adapt_mu(agent_model, holdout_x, holdout_y, grid_step, ema_decay):
    """EMA step of mu toward the holdout-loss argmin over the mu grid.

    Ties break toward larger mu (more personalization).
    """
    if len(holdout_y) == 0:
        raise InvalidInputError("adaptive mu needs a nonempty holdout")
    steps = round(1.0 / grid_step)
    if abs(steps * grid_step - 1.0) > 1e-9:
        raise InvalidConfigError("grid_step must divide 1 evenly")

    best_mu, best_loss = 0.0, math.inf
    for k in range(steps + 1):
        mu = k / steps
        trial = replace(agent_model, mu=mu)
        trial_loss = model_ops.loss(trial, holdout_x, holdout_y)
        if trial_loss <= best_loss:
            best_mu, best_loss = mu, trial_loss
    new_mu = ema_decay * agent_model.mu + (1.0 - ema_decay) * best_mu
    return min(1.0, max(0.0, new_mu))


@dataclass(frozen=True)
class RateCheckReport:
    """Advisory classification of the step sizes against the theory bounds."""

    eta_w: float
    eta_v: float
    eta_w_bound: float
    eta_w_binding: str
    eta_w_ok: bool
    eta_v_bound: float
    eta_v_ok: bool
    alpha_body_bound: float
    passed: bool

    def to_dict(self):
        return {
            "eta_w": self.eta_w,
            "eta_v": self.eta_v,
            "eta_w_bound": self.eta_w_bound,
            "eta_w_binding": self.eta_w_binding,
            "eta_w_ok": self.eta_w_ok,
            "eta_v_bound": self.eta_v_bound,
            "eta_v_ok": self.eta_v_ok,
            "alpha_body_bound": self.alpha_body_bound,
            "passed": self.passed,
        }


def validate_learning_rates(config, mixing, lipschitz_estimate):
    """Check the resolved rates against the contraction bounds.

    Advisory only; callers should warn, not abort. ``alpha_body_bound``
    reports the alternative (1 + 36 tau^2) / (tau L) form of the
    personalized-rate condition for comparison.
    """
    if lipschitz_estimate <= 0:
        raise InvalidInputError("lipschitz_estimate must be positive")
    n = mixing.n
    tau = config.local_epochs
    eta_w, eta_v = resolve_rates(config, n)
    big_l = lipschitz_estimate

    candidates = {
        "1/L": 1.0 / big_l,
        "N/2": n / 2.0,
        "(1-q)/(3*sqrt(2)*C*L*N)": (1.0 - mixing.q)
        / (3.0 * math.sqrt(2.0) * mixing.c_const * big_l * n),
    }
    binding = min(candidates, key=candidates.get)
    eta_w_bound = candidates[binding]
    eta_v_bound = 1.0 / (tau * big_l * (1.0 + 36.0 * tau * tau))
    eta_w_ok = eta_w <= eta_w_bound
    eta_v_ok = eta_v <= eta_v_bound
    return RateCheckReport(
        eta_w=eta_w,
        eta_v=eta_v,
        eta_w_bound=eta_w_bound,
        eta_w_binding=binding,
        eta_w_ok=eta_w_ok,
        eta_v_bound=eta_v_bound,
        eta_v_ok=eta_v_ok,
        alpha_body_bound=(1.0 + 36.0 * tau * tau) / (tau * big_l),
        passed=eta_w_ok and eta_v_ok,
    )


def communication_payload(agent_model, full_model=False):
    """(parameters, bytes) one agent transmits per gossip broadcast."""
    params = agent_model.shared.param_count
    nbytes = agent_model.shared.nbytes
    if full_model:
        params += agent_model.personalized.param_count
        params += agent_model.backbone.param_count
        nbytes += agent_model.personalized.nbytes + agent_model.backbone.nbytes
    return params, nbytes


def run_experiment(config, state, checkpoint_dir=None):
    """Execute ``config.rounds`` full rounds; returns (metrics, state).

    Fully deterministic given the config seed. With ``config.independent``
    the gossip step is skipped (each agent evolves alone); with
    ``config.full_model_gossip`` the personalized head and (trivially, being
    identical) the backbone are gossiped too, which serves as the
    traditional full-model communication baseline.
    """
    n = len(state.agents)
    eta_w, eta_v = resolve_rates(config, n)
    local_phase = (
        local_phase_nested if config.variant == NESTED else local_phase_parallel
    )
    dropout_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _DROPOUT_STREAM_TAG])
    )
    payload_params, _ = communication_payload(
        state.agents[0].model, full_model=config.full_model_gossip
    )

    history = []
    try:
        _run_rounds(config, state, history, local_phase, dropout_rng,
                    payload_params, eta_w, eta_v, checkpoint_dir)
    except DivergenceError as exc:
        exc.partial_history = history
        raise
    return history, state


def _run_rounds(config, state, history, local_phase, dropout_rng,
                payload_params, eta_w, eta_v, checkpoint_dir):
    n = len(state.agents)
    for _ in range(config.rounds):
        t = state.round
        w_start = state.shared_stack()
        ce = metrics_ops.consensus_error(w_start)
        try:
            _, grad_v_sq = metrics_ops.global_partial_grads(
                state.models,
                state.datasets,
                at_mean=True,
                v_grad_mode=config.metric_v_grad_mode,
            )
        except DivergenceError as exc:
            raise DivergenceError(
                f"round {t}: {exc}", round_index=t
            ) from exc

        if config.dropout_prob > 0.0:
            online = dropout_rng.random(n) >= config.dropout_prob
        else:
            online = np.ones(n, dtype=bool)

        staged = local_phase(state, config, online=online)

        grad_w, _ = metrics_ops.global_partial_grads(
            state.models,
            state.datasets,
            at_mean=True,
            v_grad_mode=config.metric_v_grad_mode,
        )
        grad_w_sq = float(np.dot(grad_w, grad_w))
        if eta_w > 0.0:
            lyap = metrics_ops.lyapunov_m(ce, grad_w_sq, grad_v_sq, eta_v, eta_w,
                                          config.local_epochs)
        else:
            lyap = float("nan")

        if config.independent:
            w_new, active_edges = staged, 0
        else:
            w_new, active_edges = _gossip_with_mask(staged, state.mixing, online)
            if config.full_model_gossip:
                v_new, _ = _gossip_with_mask(
                    state.personalized_stack(), state.mixing, online
                )
                for agent, row in zip(state.agents, v_new):
                    agent.model.personalized.set_flat(row)
        for agent, row in zip(state.agents, w_new):
            _check_finite(row, agent.data.agent_id, t, "gossiped shared adapter")
            agent.model.shared.set_flat(row)

        if isinstance(config.mu_policy, AdaptiveMu):
            for i, agent in enumerate(state.agents):
                if online[i]:
                    agent.model.mu = adapt_mu(
                        agent.model,
                        agent.data.holdout_x,
                        agent.data.holdout_y,
                        config.mu_policy.grid_step,
                        config.mu_policy.ema_decay,
                    )

        accs = tuple(
            metrics_ops.accuracy(a.model, a.data.holdout_x, a.data.holdout_y)
            for a in state.agents
        )
        train_losses = [
            model_ops.loss(a.model, a.data.train_x, a.data.train_y)
            for a in state.agents
        ]
        history.append(
            metrics_ops.RoundMetrics(
                round=t,
                consensus_error=ce,
                grad_w_norm_sq=grad_w_sq,
                grad_v_norm_sq=grad_v_sq,
                lyapunov_m=lyap,
                per_agent_accuracy=accs,
                mean_accuracy=float(np.mean(accs)),
                communicated_params=2 * active_edges * payload_params,
                train_loss_mean=float(np.mean(train_losses)),
            )
        )
        state.round = t + 1

        if (
            checkpoint_dir is not None
            and config.checkpoint_interval > 0
            and state.round % config.checkpoint_interval == 0
        ):
            save_checkpoint(
                state, os.path.join(checkpoint_dir, f"round_{state.round:06d}.ckpt")
            )


_CKPT_HEADER = struct.Struct("<IIII")


def save_checkpoint(state, path):
    """Header (round, agents, classes, features) + all adapter byte arrays."""
    first = state.agents[0].model.shared
    blob = [_CKPT_HEADER.pack(state.round, len(state.agents),
                              first.n_classes, first.feature_dim)]
    for agent in state.agents:
        blob.append(agent.model.shared.to_bytes())
        blob.append(agent.model.personalized.to_bytes())
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))
    return path


def load_checkpoint(path):
    """Returns (round, [(shared, personalized)]) parsed from a checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    round_index, n_agents, c, h = _CKPT_HEADER.unpack_from(blob, 0)
    offset = _CKPT_HEADER.size
    block = 12 + 8 * (c * h + c)
    adapters = []
    for _ in range(n_agents):
        shared = model_ops.AdapterParams.from_bytes(blob[offset : offset + block])
        offset += block
        personalized = model_ops.AdapterParams.from_bytes(
            blob[offset : offset + block]
        )
        offset += block
        adapters.append((shared, personalized))
    return round_index, adapters


def restore_checkpoint(state, path):
    """Load a checkpoint into an existing federation, enabling resumption."""
    round_index, adapters = load_checkpoint(path)
    if len(adapters) != len(state.agents):
        raise InvalidInputError("checkpoint agent count does not match federation")
    for agent, (shared, personalized) in zip(state.agents, adapters):
        agent.model.shared.set_flat(shared.flatten())
        agent.model.personalized.set_flat(personalized.flatten())
    state.round = round_index
    return state
