"""Agent model: frozen random-feature backbone plus two linear adapter heads.

Every agent shares one frozen feature extractor and trains two small linear
heads over its features: a shared head that gets gossiped between neighbors
and a personalized head that never leaves the agent. Predictions mix the two
heads' logits with a coefficient ``mu`` before the softmax:

    z = mu * personalized_logits + (1 - mu) * shared_logits

Cross-entropy on ``z`` yields analytic gradients whose chain-rule factors are
exactly ``mu`` (personalized) and ``1 - mu`` (shared). All arithmetic is
float64.
"""

from dataclasses import dataclass, field, replace
import struct

import numpy as np

from .errors import InvalidInputError, ShapeError

ROLE_SHARED = "shared"
ROLE_PERSONALIZED = "personalized"
_ROLE_TAGS = {ROLE_SHARED: 0, ROLE_PERSONALIZED: 1}
_TAG_ROLES = {tag: role for role, tag in _ROLE_TAGS.items()}

_HEADER = struct.Struct("<III")


@dataclass(frozen=True)
class BackboneSpec:
    """Frozen feature extractor: ``relu(weights @ x + bias)``.

    Identical across agents; entries are seeded Gaussians scaled by
    ``1/sqrt(input_dim)``.
    """

    input_dim: int
    feature_dim: int
    weights: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.weights.setflags(write=False)
        self.bias.setflags(write=False)

    @property
    def param_count(self):
        return self.feature_dim * self.input_dim + self.feature_dim

    @property
    def nbytes(self):
        return 8 * self.param_count


def build_backbone(input_dim, feature_dim, seed):
    if input_dim < 1 or feature_dim < 1:
        raise InvalidInputError("backbone dimensions must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, input_dim, feature_dim]))
    scale = 1.0 / np.sqrt(input_dim)
    return BackboneSpec(
        input_dim=input_dim,
        feature_dim=feature_dim,
        weights=rng.standard_normal((feature_dim, input_dim)) * scale,
        bias=rng.standard_normal(feature_dim) * scale,
    )


@dataclass
class AdapterParams:
    """One linear head: ``weight @ features + bias``.

    Flattened layout is row-major weight followed by bias, length
    ``n_classes * feature_dim + n_classes``; the same layout is used for
    gossip, byte accounting and checkpoints.
    """

    weight: np.ndarray
    bias: np.ndarray
    role: str

    def __post_init__(self):
        if self.role not in _ROLE_TAGS:
            raise InvalidInputError(f"unknown adapter role {self.role!r}")
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("adapter expects 2-d weight and 1-d bias")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError("weight rows must match bias length")

    @property
    def n_classes(self):
        return self.weight.shape[0]

    @property
    def feature_dim(self):
        return self.weight.shape[1]

    @property
    def param_count(self):
        return self.weight.size + self.bias.size

    @staticmethod
    def zeros(n_classes, feature_dim, role):
        return AdapterParams(
            weight=np.zeros((n_classes, feature_dim)),
            bias=np.zeros(n_classes),
            role=role,
        )

    def flatten(self):
        return np.concatenate([self.weight.ravel(), self.bias])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise ShapeError(
                f"flat vector of length {flat.size} does not fit adapter "
                f"({self.param_count} parameters)"
            )
        split = self.weight.size
        self.weight = flat[:split].reshape(self.weight.shape).copy()
        self.bias = flat[split:].copy()

    @staticmethod
    def from_flat(flat, n_classes, feature_dim, role):
        adapter = AdapterParams.zeros(n_classes, feature_dim, role)
        adapter.set_flat(flat)
        return adapter

    def to_bytes(self):
        """Little-endian float64 payload preceded by a (c, h, role) header."""
        header = _HEADER.pack(self.n_classes, self.feature_dim, _ROLE_TAGS[self.role])
        body = self.flatten().astype("<f8").tobytes()
        return header + body

    @staticmethod
    def from_bytes(blob):
        c, h, tag = _HEADER.unpack_from(blob, 0)
        if tag not in _TAG_ROLES:
            raise InvalidInputError(f"unknown adapter role tag {tag}")
        flat = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size, count=c * h + c)
        return AdapterParams.from_flat(flat.astype(np.float64), c, h, _TAG_ROLES[tag])

    @property
    def nbytes(self):
        return _HEADER.size + 8 * self.param_count


@dataclass
class DualAdapterModel:
    """One agent's trainable state: two same-shaped heads and the mix ``mu``."""

    backbone: BackboneSpec
    shared: AdapterParams
    personalized: AdapterParams
    mu: float

    def __post_init__(self):
        if self.shared.weight.shape != self.personalized.weight.shape:
            raise ShapeError("shared and personalized adapters must match shapes")
        if not 0.0 <= self.mu <= 1.0:
            raise InvalidInputError(f"mu must lie in [0, 1], got {self.mu}")
        if self.shared.feature_dim != self.backbone.feature_dim:
            raise ShapeError("adapter feature dim must match backbone output")

    @property
    def n_classes(self):
        return self.shared.n_classes

    def with_shared_flat(self, flat):
        """Copy of this model with the shared head replaced (for evaluation
        at the consensus mean without touching agent state)."""
        shared = AdapterParams.from_flat(
            flat, self.shared.n_classes, self.shared.feature_dim, ROLE_SHARED
        )
        return replace(self, shared=shared)


def new_model(backbone, n_classes, mu):
    """Zero-initialized model; identical across agents, so the initial
    consensus error is exactly zero."""
    return DualAdapterModel(
        backbone=backbone,
        shared=AdapterParams.zeros(n_classes, backbone.feature_dim, ROLE_SHARED),
        personalized=AdapterParams.zeros(
            n_classes, backbone.feature_dim, ROLE_PERSONALIZED
        ),
        mu=mu,
    )


def features(backbone, x):
    """Rectified frozen features for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (backbone.input_dim,):
        raise ShapeError(
            f"expected input of length {backbone.input_dim}, got shape {x.shape}"
        )
    return np.maximum(backbone.weights @ x + backbone.bias, 0.0)


def features_batch(backbone, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != backbone.input_dim:
        raise ShapeError(f"expected (batch, {backbone.input_dim}) inputs")
    return np.maximum(x @ backbone.weights.T + backbone.bias, 0.0)


def head_logits(adapter, feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape != (adapter.feature_dim,):
        raise ShapeError(
            f"expected features of length {adapter.feature_dim}, got {feats.shape}"
        )
    return adapter.weight @ feats + adapter.bias


def _mixed_logits_batch(model, x):
    feats = features_batch(model.backbone, x)
    y1 = feats @ model.shared.weight.T + model.shared.bias
    y2 = feats @ model.personalized.weight.T + model.personalized.bias
    return model.mu * y2 + (1.0 - model.mu) * y1, feats


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def mixed_predict(model, x):
    """Class probabilities from the mu-mixed logits of both heads."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.backbone.input_dim,):
        raise ShapeError(
            f"expected input of length {model.backbone.input_dim}, got {x.shape}"
        )
    logits, _ = _mixed_logits_batch(model, x[None, :])
    return _softmax(logits[0])


def predict_batch(model, x):
    logits, _ = _mixed_logits_batch(model, x)
    return _softmax(logits)


def _check_batch(model, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ShapeError("batch must be (n, d) inputs with (n,) labels")
    if x.shape[0] == 0:
        raise InvalidInputError("batch must be nonempty")
    if x.shape[1] != model.backbone.input_dim:
        raise ShapeError(
            f"expected inputs of width {model.backbone.input_dim}, got {x.shape[1]}"
        )
    if np.any(y < 0) or np.any(y >= model.n_classes):
        raise InvalidInputError(
            f"labels must lie in [0, {model.n_classes}), got range "
            f"[{y.min()}, {y.max()}]"
        )
    return x, y.astype(np.intp)


def loss(model, x, y):
    """Mean cross-entropy of the mixed prediction over a batch."""
    x, y = _check_batch(model, x, y)
    logits, _ = _mixed_logits_batch(model, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(y.size), y]))


def _grad_common(model, x, y):
    x, y = _check_batch(model, x, y)
    logits, feats = _mixed_logits_batch(model, x)
    probs = _softmax(logits)
    probs[np.arange(y.size), y] -= 1.0
    probs /= y.size
    grad_weight = probs.T @ feats
    grad_bias = probs.sum(axis=0)
    return np.concatenate([grad_weight.ravel(), grad_bias])


def grad_shared(model, x, y):
    """Batch-mean gradient of the loss w.r.t. the flattened shared head."""
    return (1.0 - model.mu) * _grad_common(model, x, y)


def grad_personalized(model, x, y):
    """Batch-mean gradient of the loss w.r.t. the flattened personalized head."""
    return model.mu * _grad_common(model, x, y)


def grad_pair(model, x, y):
    """(grad_shared, grad_personalized) from a single forward pass.

    Both heads see the same mixed-softmax error signal; only the chain-rule
    factors (1 - mu) and mu differ.
    """
    common = _grad_common(model, x, y)
    return (1.0 - model.mu) * common, model.mu * common


def param_counts(model):
    """(trainable, communicated, frozen) parameter totals for one agent."""
    head = model.shared.param_count
    return 2 * head, head, model.backbone.param_count
