"""Convergence diagnostics: consensus error, global partial gradients, the
composite round metric, empirical smoothness/variance estimates, accuracy,
and rate-slope fits.

The composite metric for round t combines three terms:

    M(t) = consensus_error(t)
         + || mean_i grad_w L_i(w_mean, v_i) ||^2
         + (eta_v * tau / eta_w) * grad_v_term(t)

where the gradient-of-v term treats the personalized heads as one stacked
variable: since the global objective is the mean of per-agent losses and each
v_i is a distinct block, the stacked gradient is (1/N) * stack(g_1, ..., g_N)
whose squared norm is (1/N^2) * sum_i ||g_i||^2. A per-agent-mean variant
((1/N) * sum_i ||g_i||^2) is available via ``v_grad_mode``.

All functions are read-only over federation state.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import model as model_ops
from .errors import (
    DivergenceError,
    InvalidConfigError,
    InvalidInputError,
    ShapeError,
)

V_GRAD_STACKED = "stacked"
V_GRAD_PER_AGENT_MEAN = "per_agent_mean"
V_GRAD_MODES = (V_GRAD_STACKED, V_GRAD_PER_AGENT_MEAN)


@dataclass(frozen=True)
class RoundMetrics:
    """Snapshot of one training round."""

    round: int
    consensus_error: float
    grad_w_norm_sq: float
    grad_v_norm_sq: float
    lyapunov_m: float
    per_agent_accuracy: tuple
    mean_accuracy: float
    communicated_params: int
    train_loss_mean: float


@dataclass(frozen=True)
class AssumptionEstimates:
    """Empirical lower bounds for the smoothness and variance constants.

    These probe finitely many points, so they underestimate the true
    suprema; treat them as sanity-scale numbers, not certified constants.
    """

    lipschitz_l: float
    sigma1_sq: float
    sigma2_sq: float
    varsigma_sq: float
    probes: int

    def to_dict(self):
        return {
            "lipschitz_l": self.lipschitz_l,
            "sigma1_sq": self.sigma1_sq,
            "sigma2_sq": self.sigma2_sq,
            "varsigma_sq": self.varsigma_sq,
            "probes": self.probes,
        }


def consensus_error(shared_flats):
    """Mean squared distance of shared adapters from their coordinate mean."""
    stacked = np.asarray(shared_flats, dtype=np.float64)
    if stacked.ndim != 2 or stacked.shape[0] < 1:
        raise ShapeError("expected a (n_agents, dim) stack of shared adapters")
    mean = stacked.mean(axis=0)
    return float(np.mean(np.sum((stacked - mean) ** 2, axis=1)))


def global_partial_grads(
    models, datasets, at_mean=True, v_grad_mode=V_GRAD_STACKED
):
    """Full-batch global partial gradients.

    Returns ``(grad_w, grad_v_norm_sq)`` where ``grad_w`` is the average over
    agents of the shared-head gradient evaluated at the consensus mean (or at
    each agent's own shared head when ``at_mean`` is false), and
    ``grad_v_norm_sq`` aggregates the personalized-head gradients per
    ``v_grad_mode``.
    """
    if v_grad_mode not in V_GRAD_MODES:
        raise InvalidConfigError(f"unknown v_grad_mode {v_grad_mode!r}")
    n = len(models)
    if n == 0 or n != len(datasets):
        raise InvalidInputError("need one dataset per model")

    if at_mean:
        w_mean = np.mean([m.shared.flatten() for m in models], axis=0)
        eval_models = [m.with_shared_flat(w_mean) for m in models]
    else:
        eval_models = list(models)

    grad_w_sum = None
    v_norms_sq = []
    for agent_model, ds in zip(eval_models, datasets):
        g_w, g_v = model_ops.grad_pair(agent_model, ds.train_x, ds.train_y)
        if not (np.isfinite(g_w).all() and np.isfinite(g_v).all()):
            raise DivergenceError("non-finite full-batch gradient")
        grad_w_sum = g_w if grad_w_sum is None else grad_w_sum + g_w
        v_norms_sq.append(float(np.dot(g_v, g_v)))

    grad_w = grad_w_sum / n
    if v_grad_mode == V_GRAD_STACKED:
        grad_v_norm_sq = sum(v_norms_sq) / (n * n)
    else:
        grad_v_norm_sq = sum(v_norms_sq) / n
    return grad_w, grad_v_norm_sq


def lyapunov_m(consensus_err, grad_w_norm_sq, grad_v_norm_sq, eta_v, eta_w, tau):
    """Composite round metric; linear in each of its three inputs."""
    if eta_w <= 0.0:
        raise InvalidConfigError("lyapunov metric needs eta_w > 0")
    return consensus_err + grad_w_norm_sq + (eta_v * tau / eta_w) * grad_v_norm_sq


def accuracy(agent_model, x, y):
    """Fraction of correct argmax predictions; ties go to the lowest class."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise InvalidInputError("cannot score an empty split")
    probs = model_ops.predict_batch(agent_model, x)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def estimate_assumptions(
    models, datasets, probes, rng, batch_size=32, perturb_scale=1.0
):
    """Probe-based estimates of the four analysis constants.

    Smoothness is the max observed gradient-difference ratio over random
    parameter pairs; the variance terms compare minibatch against full-batch
    gradients; the dispersion term measures per-agent w-gradient spread
    around the global mean at the consensus point. All are lower bounds of
    the corresponding suprema.
    """
    if probes < 10:
        raise InvalidInputError("need at least 10 probes")
    n = len(models)

    lipschitz = 0.0
    sigma1_acc, sigma2_acc = 0.0, 0.0
    varsigma_acc = 0.0

    for probe in range(probes):
        agent = probe % n
        m, ds = models[agent], datasets[agent]
        dim = m.shared.param_count
        base_w = m.shared.flatten()
        base_v = m.personalized.flatten()

        # smoothness in w at fixed v, then in v at fixed w
        w_a = base_w + perturb_scale * rng.standard_normal(dim)
        w_b = base_w + perturb_scale * rng.standard_normal(dim)
        g_a = model_ops.grad_shared(m.with_shared_flat(w_a), ds.train_x, ds.train_y)
        g_b = model_ops.grad_shared(m.with_shared_flat(w_b), ds.train_x, ds.train_y)
        denom = float(np.linalg.norm(w_a - w_b))
        if denom > 0:
            lipschitz = max(lipschitz, float(np.linalg.norm(g_a - g_b)) / denom)

        v_a = base_v + perturb_scale * rng.standard_normal(dim)
        v_b = base_v + perturb_scale * rng.standard_normal(dim)
        m_va = _with_personalized_flat(m, v_a)
        m_vb = _with_personalized_flat(m, v_b)
        g_a = model_ops.grad_personalized(m_va, ds.train_x, ds.train_y)
        g_b = model_ops.grad_personalized(m_vb, ds.train_x, ds.train_y)
        denom = float(np.linalg.norm(v_a - v_b))
        if denom > 0:
            lipschitz = max(lipschitz, float(np.linalg.norm(g_a - g_b)) / denom)

        # minibatch-vs-full variance at the current parameters
        size = min(batch_size, ds.n_train)
        idx = rng.choice(ds.n_train, size=size, replace=False)
        full_w = model_ops.grad_shared(m, ds.train_x, ds.train_y)
        full_v = model_ops.grad_personalized(m, ds.train_x, ds.train_y)
        mini_w = model_ops.grad_shared(m, ds.train_x[idx], ds.train_y[idx])
        mini_v = model_ops.grad_personalized(m, ds.train_x[idx], ds.train_y[idx])
        sigma1_acc += float(np.sum((mini_w - full_w) ** 2))
        sigma2_acc += float(np.sum((mini_v - full_v) ** 2))

        # cross-agent w-gradient dispersion at a perturbed consensus point
        w_mean = np.mean([mm.shared.flatten() for mm in models], axis=0)
        w_probe = w_mean + perturb_scale * rng.standard_normal(dim)
        per_agent = [
            model_ops.grad_shared(mm.with_shared_flat(w_probe), dd.train_x, dd.train_y)
            for mm, dd in zip(models, datasets)
        ]
        center = np.mean(per_agent, axis=0)
        varsigma_acc += float(
            np.mean([np.sum((g - center) ** 2) for g in per_agent])
        )

    return AssumptionEstimates(
        lipschitz_l=lipschitz,
        sigma1_sq=sigma1_acc / probes,
        sigma2_sq=sigma2_acc / probes,
        varsigma_sq=varsigma_acc / probes,
        probes=probes,
    )


def _with_personalized_flat(m, flat):
    personalized = model_ops.AdapterParams.from_flat(
        flat, m.personalized.n_classes, m.personalized.feature_dim,
        model_ops.ROLE_PERSONALIZED,
    )
    return replace(m, personalized=personalized)


def rate_slope_fit(series):
    """Ordinary least squares slope of log(mean_M) against log(K)."""
    if len(series) < 3:
        raise InvalidInputError("need at least 3 (K, mean_M) points")
    ks = np.array([k for k, _ in series], dtype=np.float64)
    ms = np.array([m for _, m in series], dtype=np.float64)
    if np.any(ks <= 0) or np.any(ms <= 0):
        raise InvalidInputError("slope fit needs strictly positive values")
    log_k, log_m = np.log(ks), np.log(ms)
    slope = np.polyfit(log_k, log_m, 1)[0]
    return float(slope)


METRICS_BASE_COLUMNS = (
    "round",
    "consensus_error",
    "grad_w_sq",
    "grad_v_sq",
    "lyapunov_m",
    "mean_acc",
)


def metrics_header(n_agents):
    agents = [f"acc_agent_{i}" for i in range(n_agents)]
    return ",".join(list(METRICS_BASE_COLUMNS) + agents + ["comm_params", "train_loss"])


def metrics_to_csv(rows, n_agents):
    """Render round metrics as the canonical comma-separated stream."""
    lines = [metrics_header(n_agents)]
    for r in rows:
        if len(r.per_agent_accuracy) != n_agents:
            raise ShapeError("per-agent accuracy width does not match agent count")
        cells = [
            str(r.round),
            repr(float(r.consensus_error)),
            repr(float(r.grad_w_norm_sq)),
            repr(float(r.grad_v_norm_sq)),
            repr(float(r.lyapunov_m)),
            repr(float(r.mean_accuracy)),
        ]
        cells += [repr(float(a)) for a in r.per_agent_accuracy]
        cells += [str(r.communicated_params), repr(float(r.train_loss_mean))]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
