"""Reproducible heterogeneous per-agent datasets.

Heterogeneity has two independent knobs: Dirichlet label skew (small
``skew_alpha`` concentrates each agent on few classes) and a per-agent
covariate rotation applied in the fixed plane of the first two input
coordinates. Class prototypes are drawn once and shared by all agents;
samples are prototype + unit Gaussian noise, then rotated.

Per-agent random streams are derived by seeding with (master seed, agent id),
so agents can be generated and sampled independently.
"""

from dataclasses import dataclass, field
import math
import os

import numpy as np

from .errors import (
    DataIOError,
    InvalidConfigError,
    InvalidInputError,
    ParseError,
)

_SIMPLEX_TOL = 1e-12


@dataclass
class AgentDataset:
    """One agent's private train/holdout split."""

    agent_id: int
    n_classes: int
    train_x: np.ndarray = field(repr=False)
    train_y: np.ndarray = field(repr=False)
    holdout_x: np.ndarray = field(repr=False)
    holdout_y: np.ndarray = field(repr=False)
    rotation_angle: float = 0.0
    label_weights: np.ndarray | None = None

    def __post_init__(self):
        if len(self.train_y) == 0 or len(self.holdout_y) == 0:
            raise InvalidInputError("train and holdout must both be nonempty")
        for labels in (self.train_y, self.holdout_y):
            if labels.min() < 0 or labels.max() >= self.n_classes:
                raise InvalidInputError("labels must lie in [0, n_classes)")
        if self.label_weights is not None:
            if self.label_weights.min() < 0 or abs(
                self.label_weights.sum() - 1.0
            ) > _SIMPLEX_TOL:
                raise InvalidInputError("label weights must lie on the simplex")

    @property
    def input_dim(self):
        return self.train_x.shape[1]

    @property
    def n_train(self):
        return len(self.train_y)


def generate_federation(
    n_agents,
    samples_per_agent,
    d,
    c,
    skew_alpha,
    rotation_max,
    holdout_frac,
    seed,
    prototype_scale=1.0,
):
    """Draw one dataset per agent from a shared prototype family.

    ``samples_per_agent[i]`` is agent i's total sample count before the
    holdout split; the holdout takes ``floor(holdout_frac * total)`` samples
    (at least one).
    """
    if n_agents < 2:
        raise InvalidConfigError("need at least 2 agents")
    if len(samples_per_agent) != n_agents:
        raise InvalidConfigError("samples_per_agent must list one size per agent")
    if any(m < 10 for m in samples_per_agent):
        raise InvalidConfigError("each agent needs at least 10 samples")
    if c < 2:
        raise InvalidConfigError("need at least 2 classes")
    if skew_alpha <= 0:
        raise InvalidConfigError("skew_alpha must be positive")
    if not 0.0 < holdout_frac < 1.0:
        raise InvalidConfigError("holdout_frac must lie in (0, 1)")
    if rotation_max < 0:
        raise InvalidConfigError("rotation_max must be nonnegative")
    if rotation_max > 0 and d < 2:
        raise InvalidConfigError("covariate rotation needs input_dim >= 2")

    proto_rng = np.random.default_rng(np.random.SeedSequence([seed]))
    prototypes = proto_rng.standard_normal((c, d)) * prototype_scale

    datasets = []
    for agent_id, total in enumerate(samples_per_agent):
        rng = np.random.default_rng(np.random.SeedSequence([seed, agent_id]))
        label_weights = rng.dirichlet(np.full(c, skew_alpha))
        angle = float(rng.uniform(0.0, rotation_max)) if rotation_max > 0 else 0.0
        labels = rng.choice(c, size=total, p=label_weights)
        x = prototypes[labels] + rng.standard_normal((total, d))
        if angle != 0.0:
            cos_a, sin_a = math.cos(angle), math.sin(angle)
            plane = x[:, :2] @ np.array([[cos_a, sin_a], [-sin_a, cos_a]])
            x = x.copy()
            x[:, :2] = plane
        n_holdout = max(1, int(holdout_frac * total))
        split = total - n_holdout
        datasets.append(
            AgentDataset(
                agent_id=agent_id,
                n_classes=c,
                train_x=x[:split],
                train_y=labels[:split],
                holdout_x=x[split:],
                holdout_y=labels[split:],
                rotation_angle=angle,
                label_weights=label_weights,
            )
        )
    return datasets


def sample_minibatch(dataset, batch_size, rng):
    """Uniform sample without replacement from the train split.

    Advances ``rng``; with ``batch_size == n_train`` this returns a
    permutation of the full train set.
    """
    n = dataset.n_train
    if batch_size < 1 or batch_size > n:
        raise InvalidInputError(
            f"batch_size must lie in [1, {n}], got {batch_size}"
        )
    idx = rng.choice(n, size=batch_size, replace=False)
    return dataset.train_x[idx], dataset.train_y[idx]


def epoch_batches(dataset, batch_size, rng):
    """Minibatches covering the train set once, in a fresh random order."""
    n = dataset.n_train
    size = min(batch_size, n)
    perm = rng.permutation(n)
    for start in range(0, n, size):
        idx = perm[start : start + size]
        yield dataset.train_x[idx], dataset.train_y[idx]


@dataclass
class CsvDataset:
    """Parsed tabular data: float features, integer labels."""

    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    d: int = 0
    c: int = 0


def load_csv_dataset(path, label_column):
    """Read a comma-separated file with a header row into features/labels."""
    if not os.path.exists(path):
        raise DataIOError(f"no such file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path} is empty", line=1)

    header = [col.strip() for col in lines[0].split(",")]
    if label_column not in header:
        raise InvalidConfigError(
            f"label column {label_column!r} not in header {header}"
        )
    label_idx = header.index(label_column)
    width = len(header)

    rows_x, rows_y = [], []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        cells = raw.split(",")
        if len(cells) != width:
            raise ParseError(
                f"line {lineno}: expected {width} columns, got {len(cells)}",
                line=lineno,
            )
        feats = []
        for pos, cell in enumerate(cells):
            cell = cell.strip()
            if pos == label_idx:
                try:
                    label = int(cell)
                except ValueError:
                    raise ParseError(
                        f"line {lineno}: label {cell!r} is not an integer",
                        line=lineno,
                    ) from None
                if label < 0:
                    raise ParseError(
                        f"line {lineno}: label must be nonnegative", line=lineno
                    )
            else:
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"line {lineno}: non-numeric feature {cell!r}",
                        line=lineno,
                    ) from None
        rows_x.append(feats)
        rows_y.append(label)

    if not rows_x:
        raise ParseError(f"{path} has no data rows", line=1)
    x = np.asarray(rows_x, dtype=np.float64)
    y = np.asarray(rows_y, dtype=np.intp)
    return CsvDataset(x=x, y=y, d=x.shape[1], c=int(y.max()) + 1)


def save_csv_dataset(x, y, path, label_column="label"):
    """Write features/labels in the load_csv_dataset format.

    Floats are written with shortest round-trip precision so a reload
    compares elementwise equal.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    header = [f"f{i}" for i in range(x.shape[1])] + [label_column]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row, label in zip(x, y):
            cells = [repr(float(v)) for v in row] + [str(int(label))]
            fh.write(",".join(cells) + "\n")


def export_federation(datasets, out_dir, label_column="label"):
    """One train and one holdout file per agent, in the CSV format above."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for ds in datasets:
        for split, x, y in (
            ("train", ds.train_x, ds.train_y),
            ("holdout", ds.holdout_x, ds.holdout_y),
        ):
            path = os.path.join(out_dir, f"agent_{ds.agent_id:02d}_{split}.csv")
            save_csv_dataset(x, y, path, label_column=label_column)
            paths.append(path)
    return paths
