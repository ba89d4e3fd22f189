import math

import numpy as np
import pytest

from dualgossip.datagen import AgentDataset, generate_federation
from dualgossip.errors import InvalidConfigError, InvalidInputError
from dualgossip.metrics import (
    V_GRAD_PER_AGENT_MEAN,
    RoundMetrics,
    accuracy,
    consensus_error,
    estimate_assumptions,
    global_partial_grads,
    lyapunov_m,
    metrics_header,
    metrics_to_csv,
    rate_slope_fit,
)
from dualgossip.model import (
    build_backbone,
    features_batch,
    grad_personalized,
    grad_shared,
    new_model,
)
from dualgossip.verification import jacobi_eigenvalues


def two_pass_consensus_oracle(vectors):
    n = len(vectors)
    dim = len(vectors[0])
    mean = [sum(v[k] for v in vectors) / n for k in range(dim)]
    total = 0.0
    for v in vectors:
        total += sum((v[k] - mean[k]) ** 2 for k in range(dim))
    return total / n


def make_dataset(rng, d=4, c=3, n=24, labels=None):
    x = rng.standard_normal((n, d))
    y = labels if labels is not None else rng.integers(0, c, n)
    return AgentDataset(0, c, x, y, x[: max(1, n // 5)], y[: max(1, n // 5)])


def test_consensus_error_identical_is_zero():
    w = np.ones((4, 7))
    assert consensus_error(w) == 0.0


def test_consensus_error_two_point_hand_case():
    assert consensus_error(np.array([[1.0], [-1.0]])) == 1.0


def test_consensus_error_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((5, 9))
    assert consensus_error(w) == pytest.approx(
        two_pass_consensus_oracle(list(w)), abs=1e-12
    )


def test_consensus_error_permutation_invariant():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((6, 4))
    shuffled = w[rng.permutation(6)]
    assert consensus_error(w) == pytest.approx(consensus_error(shuffled), abs=1e-13)


def test_single_agent_global_grad_is_its_own_full_batch():
    rng = np.random.default_rng(2)
    backbone = build_backbone(4, 5, seed=0)
    m = new_model(backbone, 3, mu=0.4)
    m.shared.set_flat(rng.standard_normal(m.shared.param_count))
    m.personalized.set_flat(rng.standard_normal(m.personalized.param_count))
    ds = make_dataset(rng)
    grad_w, grad_v_sq = global_partial_grads([m], [ds])
    own_w = grad_shared(m, ds.train_x, ds.train_y)
    own_v = grad_personalized(m, ds.train_x, ds.train_y)
    assert np.array_equal(grad_w, own_w)
    assert grad_v_sq == pytest.approx(float(own_v @ own_v), rel=1e-15)


def test_global_grads_vanish_at_presolved_optimum():
    # Random labels make the instance non-separable, so the convex head has
    # a finite optimum reachable by plain gradient descent.
    rng = np.random.default_rng(42)
    backbone = build_backbone(4, 6, seed=3)
    x = rng.standard_normal((30, 4))
    y = rng.integers(0, 2, 30)
    ds = AgentDataset(0, 2, x, y, x[:3], y[:3])
    m = new_model(backbone, 2, mu=0.5)
    for _ in range(20000):
        gw = grad_shared(m, x, y)
        gv = grad_personalized(m, x, y)
        if math.sqrt(gw @ gw + gv @ gv) < 1e-10:
            break
        m.shared.set_flat(m.shared.flatten() - 2.0 * gw)
        m.personalized.set_flat(m.personalized.flatten() - 2.0 * gv)
    other = new_model(backbone, 2, mu=0.5)
    other.shared.set_flat(m.shared.flatten())
    other.personalized.set_flat(m.personalized.flatten())
    grad_w, grad_v_sq = global_partial_grads([m, other], [ds, ds])
    assert np.linalg.norm(grad_w) < 1e-10
    assert math.sqrt(grad_v_sq) < 1e-10


def test_mirrored_datasets_cancel_global_w_gradient():
    # Two classes, same inputs, flipped labels, zero adapters: the per-agent
    # shared-head gradients are exact negatives.
    rng = np.random.default_rng(3)
    backbone = build_backbone(4, 8, seed=1)
    x = 3.0 * rng.standard_normal((20, 4))
    y = rng.integers(0, 2, 20)
    ds_a = AgentDataset(0, 2, x, y, x[:2], y[:2])
    ds_b = AgentDataset(1, 2, x, 1 - y, x[:2], 1 - y[:2])
    m_a = new_model(backbone, 2, mu=0.5)
    m_b = new_model(backbone, 2, mu=0.5)
    grad_w, _ = global_partial_grads([m_a, m_b], [ds_a, ds_b])
    assert np.linalg.norm(grad_w) < 1e-10
    per_agent = grad_shared(m_a, ds_a.train_x, ds_a.train_y)
    assert np.linalg.norm(per_agent) > 0.1


def test_v_grad_mode_stacked_vs_per_agent_mean():
    rng = np.random.default_rng(4)
    backbone = build_backbone(3, 4, seed=2)
    models, datasets = [], []
    for _ in range(3):
        m = new_model(backbone, 2, mu=0.7)
        m.personalized.set_flat(rng.standard_normal(m.personalized.param_count))
        models.append(m)
        datasets.append(make_dataset(rng, d=3, c=2))
    _, stacked = global_partial_grads(models, datasets)
    _, per_mean = global_partial_grads(
        models, datasets, v_grad_mode=V_GRAD_PER_AGENT_MEAN
    )
    assert per_mean == pytest.approx(3 * stacked, rel=1e-12)


def test_lyapunov_trivial_values():
    assert lyapunov_m(0.0, 0.0, 0.0, 0.1, 0.2, 5) == 0.0
    assert lyapunov_m(1.0, 1.0, 1.0, 0.3, 0.3, 1) == pytest.approx(3.0, abs=1e-15)


def test_lyapunov_corollary_coefficient_is_inverse_sqrt_n():
    for n_agents in (4, 9, 16):
        for rounds in (100, 400):
            for tau in (1, 5):
                eta_v = 1.0 / (tau * math.sqrt(rounds))
                eta_w = math.sqrt(n_agents / rounds)
                coef = eta_v * tau / eta_w
                assert coef == pytest.approx(1.0 / math.sqrt(n_agents), rel=1e-12)
                value = lyapunov_m(0.0, 0.0, 1.0, eta_v, eta_w, tau)
                assert value == pytest.approx(1.0 / math.sqrt(n_agents), rel=1e-12)


def test_lyapunov_rejects_zero_eta_w():
    with pytest.raises(InvalidConfigError):
        lyapunov_m(1.0, 1.0, 1.0, 0.1, 0.0, 1)


def test_lyapunov_linear_in_each_input():
    base = lyapunov_m(1.0, 2.0, 3.0, 0.2, 0.4, 5)
    assert lyapunov_m(2.0, 2.0, 3.0, 0.2, 0.4, 5) == pytest.approx(base + 1.0)
    assert lyapunov_m(1.0, 4.0, 3.0, 0.2, 0.4, 5) == pytest.approx(base + 2.0)
    coef = 0.2 * 5 / 0.4
    assert lyapunov_m(1.0, 2.0, 6.0, 0.2, 0.4, 5) == pytest.approx(base + 3.0 * coef)


def test_accuracy_zero_adapters_tie_breaks_to_class_zero():
    backbone = build_backbone(3, 4, seed=5)
    m = new_model(backbone, 2, mu=0.5)
    x = np.random.default_rng(6).standard_normal((10, 3))
    y = np.array([0, 1] * 5)
    assert accuracy(m, x, y) == 0.5


def test_accuracy_reaches_one_on_separable_data():
    rng = np.random.default_rng(7)
    backbone = build_backbone(2, 8, seed=8)
    x = np.vstack([rng.standard_normal((20, 2)) + 6, rng.standard_normal((20, 2)) - 6])
    y = np.array([0] * 20 + [1] * 20)
    m = new_model(backbone, 2, mu=1.0)
    from dualgossip.model import loss as model_loss

    for _ in range(4000):
        if model_loss(m, x, y) < 1e-6:
            break
        g = grad_personalized(m, x, y)
        m.personalized.set_flat(m.personalized.flatten() - 1.0 * g)
    assert model_loss(m, x, y) < 1e-6
    assert accuracy(m, x, y) == 1.0


def test_accuracy_single_correct_sample():
    backbone = build_backbone(2, 3, seed=9)
    m = new_model(backbone, 2, mu=1.0)
    m.personalized.bias = np.array([5.0, 0.0])
    assert accuracy(m, np.zeros((1, 2)), np.array([0])) == 1.0


def test_accuracy_invariant_under_constant_logit_shift():
    rng = np.random.default_rng(10)
    backbone = build_backbone(3, 5, seed=11)
    m = new_model(backbone, 4, mu=0.5)
    m.shared.set_flat(rng.standard_normal(m.shared.param_count))
    m.personalized.set_flat(rng.standard_normal(m.personalized.param_count))
    x = rng.standard_normal((40, 3))
    y = rng.integers(0, 4, 40)
    before = accuracy(m, x, y)
    m.shared.bias = m.shared.bias + 7.3
    m.personalized.bias = m.personalized.bias + 7.3
    assert accuracy(m, x, y) == before


def test_estimate_assumptions_full_batch_has_no_sampling_noise():
    rng = np.random.default_rng(12)
    backbone = build_backbone(3, 4, seed=13)
    models = [new_model(backbone, 2, mu=0.5) for _ in range(2)]
    datasets = [make_dataset(rng, d=3, c=2, n=20) for _ in range(2)]
    est = estimate_assumptions(
        models, datasets, probes=10, rng=np.random.default_rng(1), batch_size=20
    )
    assert est.sigma1_sq < 1e-28
    assert est.sigma2_sq < 1e-28


def test_estimate_assumptions_identical_agents_have_no_dispersion():
    rng = np.random.default_rng(14)
    backbone = build_backbone(3, 4, seed=15)
    ds = make_dataset(rng, d=3, c=2, n=20)
    models = [new_model(backbone, 2, mu=0.5) for _ in range(3)]
    est = estimate_assumptions(
        models, [ds, ds, ds], probes=10, rng=np.random.default_rng(2), batch_size=10
    )
    assert est.varsigma_sq < 1e-12


def test_estimate_assumptions_requires_enough_probes():
    backbone = build_backbone(3, 4, seed=16)
    m = new_model(backbone, 2, mu=0.5)
    ds = make_dataset(np.random.default_rng(17), d=3, c=2)
    with pytest.raises(InvalidInputError):
        estimate_assumptions([m], [ds], probes=5, rng=np.random.default_rng(0))


def test_lipschitz_estimate_within_factor_two_of_hessian_norm():
    # Small logits keep the softmax curvature at its p = 1/2 value, where the
    # shared-head Hessian is (1-mu)^2/B * sum_b S (x) psi_b psi_b^T with
    # S = [[1/4, -1/4], [-1/4, 1/4]] and psi = (features, 1).
    d, h, c = 3, 4, 2
    backbone = build_backbone(d, h, seed=2)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((12, d))
    y = rng.integers(0, c, 12)
    ds = AgentDataset(0, c, x, y, x[:2], y[:2])
    m = new_model(backbone, c, mu=0.5)

    phi = features_batch(backbone, x)
    psi = np.hstack([phi, np.ones((12, 1))])
    s = np.array([[0.25, -0.25], [-0.25, 0.25]])
    hess = np.zeros((c * (h + 1), c * (h + 1)))
    for b in range(12):
        hess += np.kron(s, np.outer(psi[b], psi[b]))
    hess *= (1 - m.mu) ** 2 / 12
    lam_max = max(abs(v) for v in jacobi_eigenvalues(hess))

    est = estimate_assumptions(
        [m], [ds], probes=40, rng=np.random.default_rng(123),
        batch_size=12, perturb_scale=0.05,
    )
    assert lam_max / 2 <= est.lipschitz_l <= 2 * lam_max


def test_metrics_are_read_only():
    rng = np.random.default_rng(18)
    backbone = build_backbone(3, 4, seed=19)
    models = [new_model(backbone, 2, mu=0.5) for _ in range(2)]
    for m in models:
        m.shared.set_flat(rng.standard_normal(m.shared.param_count))
        m.personalized.set_flat(rng.standard_normal(m.personalized.param_count))
    datasets = [make_dataset(rng, d=3, c=2) for _ in range(2)]
    before = [
        (m.shared.flatten().copy(), m.personalized.flatten().copy(), m.mu)
        for m in models
    ]
    global_partial_grads(models, datasets)
    estimate_assumptions(models, datasets, probes=10,
                         rng=np.random.default_rng(3), batch_size=8)
    for m, ds in zip(models, datasets):
        accuracy(m, ds.holdout_x, ds.holdout_y)
    for m, (w, v, mu) in zip(models, before):
        assert np.array_equal(m.shared.flatten(), w)
        assert np.array_equal(m.personalized.flatten(), v)
        assert m.mu == mu


def test_rate_slope_exact_power_law():
    series = [(k, k**-0.5) for k in (100, 400, 1600)]
    assert rate_slope_fit(series) == pytest.approx(-0.5, abs=1e-12)


def test_rate_slope_constant_series_is_flat():
    assert rate_slope_fit([(10, 2.0), (100, 2.0), (1000, 2.0)]) == pytest.approx(
        0.0, abs=1e-14
    )


def test_rate_slope_input_validation():
    with pytest.raises(InvalidInputError):
        rate_slope_fit([(10, 1.0), (20, 0.5)])
    with pytest.raises(InvalidInputError):
        rate_slope_fit([(10, 1.0), (20, 0.5), (30, -0.1)])


def test_metrics_csv_header_and_rows():
    assert (
        metrics_header(3)
        == "round,consensus_error,grad_w_sq,grad_v_sq,lyapunov_m,mean_acc,"
        "acc_agent_0,acc_agent_1,acc_agent_2,comm_params,train_loss"
    )
    row = RoundMetrics(
        round=0,
        consensus_error=0.25,
        grad_w_norm_sq=0.5,
        grad_v_norm_sq=0.125,
        lyapunov_m=1.0,
        per_agent_accuracy=(0.5, 1.0, 0.75),
        mean_accuracy=0.75,
        communicated_params=408,
        train_loss_mean=1.5,
    )
    text = metrics_to_csv([row], 3)
    lines = text.splitlines()
    assert len(lines) == 2
    assert lines[1] == "0,0.25,0.5,0.125,1.0,0.75,0.5,1.0,0.75,408,1.5"
