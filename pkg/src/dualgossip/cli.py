"""Command-line entry point: config parsing, experiment modes, file emission.

Configs are single JSON documents with flat dotted keys (``topology.kind``,
``train.eta_w``); unknown keys are hard errors. Every run directory receives
the same deterministic file set:

    config.json      resolved config echo (re-runnable)
    topology.json    the communication graph actually used
    metrics.csv      one row per round (see dualgossip.metrics)
    rate_check.json  advisory learning-rate report
    summary.json     final metrics, communication and parameter accounting

Exit codes: 0 success, 2 invalid-config, 3 io-error, 4 divergence-error,
5 construction-failure.
"""

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from . import datagen, metrics as metrics_ops, model as model_ops, trainer
from .errors import (
    ConstructionFailure,
    DataIOError,
    DivergenceError,
    DualGossipError,
    InvalidConfigError,
)
from .topology import (
    ERDOS_RENYI,
    KINDS,
    build_mixing_matrix,
    build_topology,
)

MODES = (
    "single",
    "topology-sweep",
    "mu-sweep",
    "dropout-compare",
    "rate-scaling",
    "indep-baseline",
)

EXIT_OK = 0
EXIT_INVALID_CONFIG = 2
EXIT_IO_ERROR = 3
EXIT_DIVERGENCE = 4
EXIT_CONSTRUCTION_FAILURE = 5

_EXIT_CODES = {
    "invalid-config": EXIT_INVALID_CONFIG,
    "invalid-input": EXIT_INVALID_CONFIG,
    "io-error": EXIT_IO_ERROR,
    "parse-error": EXIT_IO_ERROR,
    "divergence-error": EXIT_DIVERGENCE,
    "construction-failure": EXIT_CONSTRUCTION_FAILURE,
}


def _positive_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v > 0


def _nonneg_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int_list(v):
    return (
        isinstance(v, list) and len(v) > 0 and all(_positive_int(x) for x in v)
    )


def _num_list(v):
    return isinstance(v, list) and len(v) > 0 and all(_number(x) for x in v)


# key -> (default, validator, description); None default means "derived".
CONFIG_KEYS = {
    "seed": (0, _nonneg_int, "master seed; all randomness derives from it"),
    "topology.kind": (
        "fully_connected",
        lambda v: v in KINDS,
        "one of ring | fully_connected | erdos_renyi",
    ),
    "topology.n": (4, lambda v: _positive_int(v) and v >= 2, "agent count"),
    "topology.edge_prob": (
        None,
        lambda v: _number(v) and 0.0 < v <= 1.0,
        "edge probability (erdos_renyi only; defaults to 0.5 there)",
    ),
    "data.samples_per_agent": (
        None,
        _int_list,
        "per-agent sample counts; defaults to 200 per agent",
    ),
    "data.d": (64, _positive_int, "input dimension"),
    "data.c": (10, lambda v: _positive_int(v) and v >= 2, "class count"),
    "data.skew_alpha": (
        0.3,
        lambda v: _number(v) and v > 0,
        "Dirichlet concentration for label skew (small = heterogeneous)",
    ),
    "data.rotation_max": (
        math.pi / 4,
        lambda v: _number(v) and v >= 0,
        "max per-agent covariate rotation, radians",
    ),
    "data.holdout_frac": (
        0.2,
        lambda v: _number(v) and 0.0 < v < 1.0,
        "fraction of each agent's data held out",
    ),
    "data.prototype_scale": (
        1.0,
        lambda v: _number(v) and v > 0,
        "scale of the shared Gaussian class prototypes",
    ),
    "model.feature_dim": (128, _positive_int, "frozen backbone output width"),
    "train.rounds": (100, _nonneg_int, "communication rounds K"),
    "train.local_epochs": (5, _positive_int, "local epochs tau per round"),
    "train.rate_schedule": (
        "corollary1",
        lambda v: v in trainer.RATE_SCHEDULES,
        "manual (supply eta_w/eta_v) or corollary1 (derived from K, tau, N)",
    ),
    "train.eta_w": (None, lambda v: _number(v) and v >= 0, "shared-head rate"),
    "train.eta_v": (None, lambda v: _number(v) and v >= 0, "personalized rate"),
    "train.mu_policy": (
        "fixed",
        lambda v: v in ("fixed", "per_agent", "adaptive"),
        "how the mixing coefficient is chosen",
    ),
    "train.mu": (
        0.5,
        lambda v: _number(v) and 0.0 <= v <= 1.0,
        "mixing coefficient (fixed policy; also adaptive initial value)",
    ),
    "train.mu_per_agent": (
        None,
        lambda v: _num_list(v) and all(0.0 <= x <= 1.0 for x in v),
        "per-agent mixing coefficients (per_agent policy)",
    ),
    "train.mu_grid_step": (
        0.25,
        lambda v: _number(v) and 0.0 < v <= 1.0,
        "grid resolution for the adaptive policy",
    ),
    "train.mu_ema_decay": (
        0.5,
        lambda v: _number(v) and 0.0 <= v <= 1.0,
        "EMA retention for the adaptive policy",
    ),
    "train.variant": (
        trainer.NESTED,
        lambda v: v in trainer.VARIANTS,
        "nested or parallel local updates",
    ),
    "train.batch_size": (32, _positive_int, "minibatch size"),
    "train.dropout_prob": (
        0.0,
        lambda v: _number(v) and 0.0 <= v < 1.0,
        "per-round probability an agent is offline",
    ),
    "train.v_update_mode": (
        trainer.PER_BATCH,
        lambda v: v in trainer.V_UPDATE_MODES,
        "per_batch (SGD over each epoch) or per_epoch_single_step",
    ),
    "train.independent": (
        False,
        lambda v: isinstance(v, bool),
        "skip gossip entirely (no-collaboration baseline)",
    ),
    "train.full_model_gossip": (
        False,
        lambda v: isinstance(v, bool),
        "gossip backbone and both heads (communication baseline)",
    ),
    "train.metric_v_grad_mode": (
        metrics_ops.V_GRAD_STACKED,
        lambda v: v in metrics_ops.V_GRAD_MODES,
        "stacked or per_agent_mean reading of the v-gradient term",
    ),
    "train.checkpoint_interval": (
        0,
        _nonneg_int,
        "rounds between checkpoints (0 disables)",
    ),
    "sweep.mu_grid": (
        [0.0, 0.25, 0.5, 0.75, 1.0],
        lambda v: _num_list(v) and all(0.0 <= x <= 1.0 for x in v),
        "mu values for mu-sweep mode",
    ),
    "sweep.topologies": (
        list(KINDS),
        lambda v: isinstance(v, list) and v and all(k in KINDS for k in v),
        "graph kinds for topology-sweep mode",
    ),
    "sweep.rounds_grid": (
        [100, 400, 1600],
        lambda v: _int_list(v) and len(v) >= 3,
        "K values for rate-scaling mode",
    ),
    "sweep.dropout_prob": (
        0.1,
        lambda v: _number(v) and 0.0 < v < 1.0,
        "offline probability for dropout-compare mode",
    ),
}


def config_reference():
    """Generated key/default/description table for every config key."""
    lines = ["key | default | description", "--- | --- | ---"]
    for key, (default, _, desc) in CONFIG_KEYS.items():
        lines.append(f"{key} | {json.dumps(default)} | {desc}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DataSpec:
    samples_per_agent: tuple
    d: int
    c: int
    skew_alpha: float
    rotation_max: float
    holdout_frac: float
    prototype_scale: float


@dataclass(frozen=True)
class TopoSpec:
    kind: str
    n: int
    edge_prob: float | None


@dataclass(frozen=True)
class ParsedConfig:
    """Everything a run needs, plus the resolved flat echo."""

    seed: int
    train: trainer.TrainConfig
    data: DataSpec
    topo: TopoSpec
    feature_dim: int
    sweep_mu_grid: tuple
    sweep_topologies: tuple
    sweep_rounds_grid: tuple
    sweep_dropout_prob: float
    echo: dict


def _resolve_mu_policy(cfg):
    policy = cfg["train.mu_policy"]
    if policy == "fixed":
        return trainer.FixedMu(float(cfg["train.mu"]))
    if policy == "per_agent":
        values = cfg["train.mu_per_agent"]
        if values is None:
            raise InvalidConfigError(
                "train.mu_per_agent is required for the per_agent policy"
            )
        return trainer.PerAgentMu(tuple(float(v) for v in values))
    return trainer.AdaptiveMu(
        grid_step=float(cfg["train.mu_grid_step"]),
        ema_decay=float(cfg["train.mu_ema_decay"]),
        initial=float(cfg["train.mu"]),
    )


def resolve_config(raw, seed_override=None):
    """Apply defaults, validate every key, and build the run pieces."""
    if not isinstance(raw, dict):
        raise InvalidConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {', '.join(unknown)}")

    cfg = {}
    for key, (default, check, _) in CONFIG_KEYS.items():
        if key in raw and raw[key] is not None:
            value = raw[key]
            if not check(value):
                raise InvalidConfigError(f"invalid value for key {key!r}: {value!r}")
            cfg[key] = value
        else:
            cfg[key] = default

    if seed_override is not None:
        cfg["seed"] = int(seed_override)

    n = cfg["topology.n"]
    if cfg["topology.kind"] == ERDOS_RENYI and cfg["topology.edge_prob"] is None:
        cfg["topology.edge_prob"] = 0.5
    if cfg["topology.kind"] != ERDOS_RENYI and raw.get("topology.edge_prob") is not None:
        raise InvalidConfigError(
            "topology.edge_prob only applies to kind erdos_renyi"
        )
    if cfg["data.samples_per_agent"] is None:
        cfg["data.samples_per_agent"] = [200] * n
    if len(cfg["data.samples_per_agent"]) != n:
        raise InvalidConfigError(
            "data.samples_per_agent must list one size per agent "
            f"(topology.n = {n})"
        )
    if cfg["train.rate_schedule"] == trainer.MANUAL:
        if cfg["train.eta_w"] is None or cfg["train.eta_v"] is None:
            raise InvalidConfigError(
                "manual rate schedule requires train.eta_w and train.eta_v"
            )
    else:
        for key in ("train.eta_w", "train.eta_v"):
            if key in raw and raw[key] is not None:
                raise InvalidConfigError(
                    f"{key} must not be supplied with the corollary1 schedule"
                )

    train_config = trainer.TrainConfig(
        rounds=cfg["train.rounds"],
        local_epochs=cfg["train.local_epochs"],
        eta_w=cfg["train.eta_w"],
        eta_v=cfg["train.eta_v"],
        mu_policy=_resolve_mu_policy(cfg),
        variant=cfg["train.variant"],
        batch_size=cfg["train.batch_size"],
        dropout_prob=cfg["train.dropout_prob"],
        seed=cfg["seed"],
        rate_schedule=cfg["train.rate_schedule"],
        v_update_mode=cfg["train.v_update_mode"],
        independent=cfg["train.independent"],
        full_model_gossip=cfg["train.full_model_gossip"],
        metric_v_grad_mode=cfg["train.metric_v_grad_mode"],
        checkpoint_interval=cfg["train.checkpoint_interval"],
    )
    data_spec = DataSpec(
        samples_per_agent=tuple(cfg["data.samples_per_agent"]),
        d=cfg["data.d"],
        c=cfg["data.c"],
        skew_alpha=float(cfg["data.skew_alpha"]),
        rotation_max=float(cfg["data.rotation_max"]),
        holdout_frac=float(cfg["data.holdout_frac"]),
        prototype_scale=float(cfg["data.prototype_scale"]),
    )
    topo_spec = TopoSpec(
        kind=cfg["topology.kind"], n=n, edge_prob=cfg["topology.edge_prob"]
    )
    return ParsedConfig(
        seed=cfg["seed"],
        train=train_config,
        data=data_spec,
        topo=topo_spec,
        feature_dim=cfg["model.feature_dim"],
        sweep_mu_grid=tuple(cfg["sweep.mu_grid"]),
        sweep_topologies=tuple(cfg["sweep.topologies"]),
        sweep_rounds_grid=tuple(cfg["sweep.rounds_grid"]),
        sweep_dropout_prob=float(cfg["sweep.dropout_prob"]),
        echo=cfg,
    )


def parse_config(path, seed_override=None):
    """Load and fully validate a JSON config file."""
    if not os.path.exists(path):
        raise DataIOError(f"no such config file: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config is not valid JSON: {exc}") from None
    return resolve_config(raw, seed_override=seed_override)


def _sub_seeds(seed):
    state = np.random.SeedSequence(seed).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def build_run(parsed):
    """Construct (state, mixing, topology) for a parsed config."""
    data_seed, backbone_seed, topo_seed = _sub_seeds(parsed.seed)
    topo = build_topology(
        parsed.topo.kind, parsed.topo.n, topo_seed, edge_prob=parsed.topo.edge_prob
    )
    mixing = build_mixing_matrix(topo)
    datasets = datagen.generate_federation(
        parsed.topo.n,
        list(parsed.data.samples_per_agent),
        parsed.data.d,
        parsed.data.c,
        parsed.data.skew_alpha,
        parsed.data.rotation_max,
        parsed.data.holdout_frac,
        data_seed,
        prototype_scale=parsed.data.prototype_scale,
    )
    backbone = model_ops.build_backbone(
        parsed.data.d, parsed.feature_dim, backbone_seed
    )
    state = trainer.init_federation(parsed.train, datasets, backbone, mixing)
    return state, mixing, topo


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _summarize(parsed, state, mixing, history):
    eta_w, eta_v = trainer.resolve_rates(parsed.train, mixing.n)
    first_model = state.agents[0].model
    trainable, communicated, frozen = model_ops.param_counts(first_model)
    payload_params, payload_bytes = trainer.communication_payload(
        first_model, full_model=parsed.train.full_model_gossip
    )
    _, full_bytes = trainer.communication_payload(first_model, full_model=True)

    rng = np.random.default_rng(np.random.SeedSequence([parsed.seed, 0xE5]))
    estimates = metrics_ops.estimate_assumptions(
        state.models,
        state.datasets,
        probes=10,
        rng=rng,
        batch_size=parsed.train.batch_size,
    )

    summary = {
        "rounds": parsed.train.rounds,
        "n_agents": mixing.n,
        "eta_w": eta_w,
        "eta_v": eta_v,
        "param_counts": {
            "trainable": trainable,
            "communicated": communicated,
            "frozen": frozen,
        },
        "communication": {
            "payload_params_per_agent_per_round": payload_params,
            "payload_bytes_per_agent_per_round": payload_bytes,
            "full_model_payload_bytes": full_bytes,
            "total_communicated_params": sum(
                r.communicated_params for r in history
            ),
        },
        "assumption_estimates": estimates.to_dict(),
        "final_mu": [a.model.mu for a in state.agents],
    }
    if history:
        last = history[-1]
        lyap = [r.lyapunov_m for r in history]
        summary["final"] = {
            "mean_accuracy": last.mean_accuracy,
            "per_agent_accuracy": list(last.per_agent_accuracy),
            "train_loss_mean": last.train_loss_mean,
            "consensus_error": last.consensus_error,
            "lyapunov_m": last.lyapunov_m,
        }
        if all(math.isfinite(v) for v in lyap):
            summary["mean_lyapunov_m"] = float(np.mean(lyap))
    return summary


def run_single(parsed, out_dir, quiet=True):
    """One experiment; emits the standard file set into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    state, mixing, topo = build_run(parsed)

    _write_json(os.path.join(out_dir, "config.json"), parsed.echo)
    with open(os.path.join(out_dir, "topology.json"), "w", encoding="utf-8") as fh:
        fh.write(topo.to_json() + "\n")

    probe_rng = np.random.default_rng(np.random.SeedSequence([parsed.seed, 0x11]))
    lipschitz = metrics_ops.estimate_assumptions(
        state.models, state.datasets, probes=10, rng=probe_rng,
        batch_size=parsed.train.batch_size,
    ).lipschitz_l
    lipschitz = max(lipschitz, 1e-12)
    report = trainer.validate_learning_rates(parsed.train, mixing, lipschitz)
    payload = report.to_dict()
    payload["lipschitz_estimate"] = lipschitz
    _write_json(os.path.join(out_dir, "rate_check.json"), payload)
    if not report.passed and not quiet:
        print(
            f"warning: learning rates outside advisory bounds "
            f"(eta_w<={report.eta_w_bound:.3g}, eta_v<={report.eta_v_bound:.3g})",
            file=sys.stderr,
        )

    checkpoint_dir = out_dir if parsed.train.checkpoint_interval > 0 else None
    try:
        history, state = trainer.run_experiment(
            parsed.train, state, checkpoint_dir=checkpoint_dir
        )
    except DivergenceError as exc:
        partial = getattr(exc, "partial_history", [])
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(metrics_ops.metrics_to_csv(partial, mixing.n))
        raise

    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(metrics_ops.metrics_to_csv(history, mixing.n))
    summary = _summarize(parsed, state, mixing, history)
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    if not quiet:
        final = summary.get("final", {})
        print(
            f"{out_dir}: {parsed.train.rounds} rounds, "
            f"mean holdout accuracy {final.get('mean_accuracy', float('nan')):.4f}"
        )
    return summary


def _with_train(parsed, **changes):
    new_train = replace(parsed.train, **changes)
    return replace(parsed, train=new_train)


def _mu_label(mu):
    return f"mu_{mu:g}"


def run_mode(parsed, mode, out_dir, quiet=True):
    """Dispatch one of the experiment modes; returns the top-level summary."""
    if mode == "single":
        return run_single(parsed, out_dir, quiet=quiet)

    os.makedirs(out_dir, exist_ok=True)
    if mode == "indep-baseline":
        pema = run_single(parsed, os.path.join(out_dir, "pema"), quiet=quiet)
        indep_parsed = _with_train(
            parsed, independent=True, mu_policy=trainer.FixedMu(1.0)
        )
        indep = run_single(indep_parsed, os.path.join(out_dir, "indep"), quiet=quiet)
        summary = {
            "pema_mean_accuracy": pema["final"]["mean_accuracy"],
            "indep_mean_accuracy": indep["final"]["mean_accuracy"],
            "accuracy_delta": pema["final"]["mean_accuracy"]
            - indep["final"]["mean_accuracy"],
        }
    elif mode == "mu-sweep":
        results = []
        for mu in parsed.sweep_mu_grid:
            sub = _with_train(parsed, mu_policy=trainer.FixedMu(float(mu)))
            res = run_single(
                sub, os.path.join(out_dir, _mu_label(mu)), quiet=quiet
            )
            results.append({"mu": mu, "mean_accuracy": res["final"]["mean_accuracy"]})
        ranked = sorted(results, key=lambda r: -r["mean_accuracy"])
        summary = {"grid": results, "ranking": ranked, "best_mu": ranked[0]["mu"]}
    elif mode == "topology-sweep":
        results = []
        for kind in parsed.sweep_topologies:
            edge_prob = 0.5 if kind == ERDOS_RENYI else None
            sub = replace(
                parsed, topo=TopoSpec(kind=kind, n=parsed.topo.n, edge_prob=edge_prob)
            )
            res = run_single(sub, os.path.join(out_dir, kind), quiet=quiet)
            results.append(
                {"topology": kind, "mean_accuracy": res["final"]["mean_accuracy"]}
            )
        summary = {
            "grid": results,
            "ranking": sorted(results, key=lambda r: -r["mean_accuracy"]),
        }
    elif mode == "dropout-compare":
        base = _with_train(parsed, dropout_prob=0.0)
        dropped = _with_train(parsed, dropout_prob=parsed.sweep_dropout_prob)
        res0 = run_single(base, os.path.join(out_dir, "dropout_0"), quiet=quiet)
        res1 = run_single(
            dropped,
            os.path.join(out_dir, f"dropout_{parsed.sweep_dropout_prob:g}"),
            quiet=quiet,
        )
        summary = {
            "no_dropout_mean_accuracy": res0["final"]["mean_accuracy"],
            "dropout_mean_accuracy": res1["final"]["mean_accuracy"],
            "dropout_prob": parsed.sweep_dropout_prob,
            "accuracy_delta": res0["final"]["mean_accuracy"]
            - res1["final"]["mean_accuracy"],
        }
    elif mode == "rate-scaling":
        if parsed.train.rate_schedule != trainer.COROLLARY1:
            raise InvalidConfigError(
                "rate-scaling mode requires train.rate_schedule = corollary1"
            )
        points = []
        for k in parsed.sweep_rounds_grid:
            sub = _with_train(parsed, rounds=int(k))
            res = run_single(sub, os.path.join(out_dir, f"K_{k}"), quiet=quiet)
            points.append([int(k), res["mean_lyapunov_m"]])
        slope = metrics_ops.rate_slope_fit([(k, m) for k, m in points])
        summary = {"points": points, "slope": slope}
    else:
        raise InvalidConfigError(f"unknown mode {mode!r}")

    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="dualgossip",
        description="Decentralized dual-adapter gossip learning simulator",
    )
    parser.add_argument("--config", required=True, help="path to JSON config")
    parser.add_argument("--mode", default="single", choices=MODES)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        parsed = parse_config(args.config, seed_override=args.seed)
        run_mode(parsed, args.mode, args.out, quiet=args.quiet)
    except DualGossipError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return _EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"io-error: {exc}", file=sys.stderr)
        return EXIT_IO_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
