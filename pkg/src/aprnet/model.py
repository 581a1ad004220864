"""Shared feature transform feeding one identity head and M attribute heads.

Weights are stored as ``(out, in)`` matrices and applied as ``x @ W.T + b``.
Everything is computed in float64; checkpoints store float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng_for

EPS = 1e-12
CHECKPOINT_MAGIC = b"APRM"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_identities: int
    attribute_class_counts: tuple[int, ...] = ()
    hidden_dims: tuple[int, ...] = ()
    dropout_rate: float = 0.9
    lam: float = 8.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "attribute_class_counts", tuple(int(m) for m in self.attribute_class_counts))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.num_identities < 2:
            raise ValueError("need at least 2 identities")
        if any(m < 2 for m in self.attribute_class_counts):
            raise ValueError("every attribute head needs at least 2 classes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and non-negative")

    @property
    def num_attributes(self) -> int:
        return len(self.attribute_class_counts)

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    @property
    def mode(self) -> str:
        if self.num_attributes == 0:
            return "baseline-1"
        if self.lam == 0:
            return "baseline-2"
        return "apr"

    def head_sizes(self) -> list[int]:
        return [self.num_identities, *self.attribute_class_counts]


@dataclass(eq=False)
class ModelParams:
    """Transform layers then heads; ``heads[0]`` is the identity classifier."""

    hidden: list[tuple[np.ndarray, np.ndarray]]
    heads: list[tuple[np.ndarray, np.ndarray]]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in (*self.hidden, *self.heads):
            out += [w, b]
        return out

    def map(self, fn) -> "ModelParams":
        return ModelParams(
            [(fn(w), fn(b)) for w, b in self.hidden],
            [(fn(w), fn(b)) for w, b in self.heads],
        )

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for a in self.arrays():
            a[...] = vec[offset: offset + a.size].reshape(a.shape)
            offset += a.size

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return all(np.allclose(a, b, **kw) for a, b in zip(self.arrays(), other.arrays()))

    def equal(self, other: "ModelParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


Gradients = ModelParams


@dataclass(frozen=True)
class LossBreakdown:
    l_id: float
    l_att: np.ndarray
    lam: float
    total: float

    @property
    def l_att_mean(self) -> float:
        return float(np.mean(self.l_att)) if len(self.l_att) else 0.0


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = rng_for(seed, "init")

    def layer(fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)

    hidden, width = [], config.input_dim
    for h in config.hidden_dims:
        hidden.append(layer(h, width))
        width = h
    heads = [layer(k, width) for k in config.head_sizes()]
    return ModelParams(hidden, heads)


def softmax(z) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting the max logit."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p, target) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    target = np.asarray(target)
    n = p.shape[-1]
    if np.any(target < 0) or np.any(target >= n):
        raise IndexError(f"target out of range for {n} classes")
    picked = np.take_along_axis(p, target[..., None], axis=-1)[..., 0] if p.ndim > 1 else p[target]
    out = -np.log(np.maximum(picked, EPS))
    return float(out) if np.ndim(out) == 0 else out


def dropout_mask(rate: float, width: int, seed: int, index: int) -> np.ndarray:
    """Inverted-dropout multiplier for one sample; depends only on (seed, index)."""
    if rate == 0.0:
        return np.ones(width)
    keep = rng_for(seed, "dropout", index).random(width) >= rate
    return keep / (1.0 - rate)


@dataclass
class _Cache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each hidden layer
    preacts: list[np.ndarray] = field(default_factory=list)
    feature: np.ndarray | None = None
    mask: np.ndarray | None = None
    dropped: np.ndarray | None = None
    logits: list[np.ndarray] = field(default_factory=list)


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    expected = params.hidden[0][0].shape[1] if params.hidden else params.heads[0][0].shape[1]
    if x.shape[1] != expected:
        raise ValueError(f"feature has dim {x.shape[1]}, model expects {expected}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite feature")
    return x


def _forward(params, x, train_mode, seed, indices, dropout_rate) -> _Cache:
    cache = _Cache()
    h = x
    for w, b in params.hidden:
        cache.inputs.append(h)
        a = h @ w.T + b
        cache.preacts.append(a)
        h = np.maximum(a, 0.0)
    cache.feature = h
    if train_mode and dropout_rate > 0:
        if indices is None:
            indices = range(len(h))
        cache.mask = np.stack([dropout_mask(dropout_rate, h.shape[1], seed, int(i)) for i in indices])
        h = h * cache.mask
    cache.dropped = h
    cache.logits = [h @ w.T + b for w, b in params.heads]
    return cache


def forward_batch(params, x, *, dropout_rate=0.0, train_mode=False, seed=0, indices=None):
    """Returns (final features, list of logit matrices: identity head first)."""
    x = _check_input(params, x)
    cache = _forward(params, x, train_mode, seed, indices, dropout_rate)
    return cache.feature, cache.logits


def forward(params, feature, config: ModelConfig, train_mode=False, seed=0, index=0):
    """Single-sample forward: (hidden activations, [id logits, att logits...])."""
    x = _check_input(params, feature)
    cache = _forward(params, x, train_mode, seed, [index], config.dropout_rate)
    hidden = [a[0] for a in cache.inputs[1:]] + ([cache.feature[0]] if params.hidden else [])
    return hidden, [z[0] for z in cache.logits]


def _losses(cache, id_targets, att_targets, lam):
    probs = [softmax(z) for z in cache.logits]
    l_id = cross_entropy(probs[0], id_targets)
    l_att = np.stack([cross_entropy(p, att_targets[:, i]) for i, p in enumerate(probs[1:])], axis=1) \
        if len(probs) > 1 else np.zeros((len(id_targets), 0))
    att_mean = l_att.mean(axis=1) if l_att.shape[1] else np.zeros(len(id_targets))
    total = lam * l_id + att_mean
    return probs, np.atleast_1d(l_id), l_att, total


def _targets(id_targets, att_targets, n, m):
    ids = np.atleast_1d(np.asarray(id_targets, dtype=np.int64))
    atts = np.asarray(att_targets, dtype=np.int64).reshape(n, m) if m else np.zeros((n, 0), np.int64)
    if len(ids) != n:
        raise ValueError("one identity target per sample required")
    return ids, atts


def per_sample_losses(params, x, id_targets, att_targets, lam, *, dropout_rate=0.0,
                      train_mode=False, seed=0, indices=None):
    """Per-sample (l_id, l_att matrix, total) arrays for a batch."""
    x = _check_input(params, x)
    ids, atts = _targets(id_targets, att_targets, len(x), len(params.heads) - 1)
    cache = _forward(params, x, train_mode, seed, indices, dropout_rate)
    _, l_id, l_att, total = _losses(cache, ids, atts, lam)
    return l_id, l_att, total


def joint_loss(params, feature, id_target, att_targets, lam, config: ModelConfig,
               train_mode=False, seed=0, index=0) -> LossBreakdown:
    l_id, l_att, total = per_sample_losses(
        params, feature, [id_target], [att_targets], lam,
        dropout_rate=config.dropout_rate, train_mode=train_mode, seed=seed, indices=[index],
    )
    return LossBreakdown(float(l_id[0]), l_att[0].copy(), float(lam), float(total[0]))


def batch_loss_and_grad(params, x, id_targets, att_targets, lam, *, dropout_rate=0.0,
                        train_mode=False, seed=0, indices=None) -> tuple[LossBreakdown, ModelParams]:
    """Mean loss and mean gradient over the batch."""
    x = _check_input(params, x)
    n = len(x)
    m = len(params.heads) - 1
    ids, atts = _targets(id_targets, att_targets, n, m)
    cache = _forward(params, x, train_mode, seed, indices, dropout_rate)
    probs, l_id, l_att, total = _losses(cache, ids, atts, lam)

    targets = [ids] + [atts[:, i] for i in range(m)]
    weights = [lam] + [1.0 / m] * m if m else [lam]
    head_grads = []
    d_feat = np.zeros_like(cache.dropped)
    for (w, _), p, t, wt in zip(params.heads, probs, targets, weights):
        rows = np.arange(n)
        dz = p.copy()
        dz[rows, t] -= 1.0
        # inside the log floor the loss is flat
        dz[p[rows, t] < EPS] = 0.0
        dz *= wt / n
        head_grads.append((dz.T @ cache.dropped, dz.sum(axis=0)))
        d_feat += dz @ w
    if cache.mask is not None:
        d_feat = d_feat * cache.mask

    hidden_grads = []
    d_h = d_feat
    for (w, _), inp, pre in zip(reversed(params.hidden), reversed(cache.inputs), reversed(cache.preacts)):
        d_a = d_h * (pre > 0)
        hidden_grads.append((d_a.T @ inp, d_a.sum(axis=0)))
        d_h = d_a @ w
    hidden_grads.reverse()

    mean = LossBreakdown(float(l_id.mean()), l_att.mean(axis=0), float(lam), float(total.mean()))
    return mean, ModelParams(hidden_grads, head_grads)


def backward(params, feature, id_target, att_targets, lam, config: ModelConfig,
             train_mode=False, seed=0, index=0) -> tuple[LossBreakdown, ModelParams]:
    return batch_loss_and_grad(
        params, feature, [id_target], [att_targets], lam,
        dropout_rate=config.dropout_rate, train_mode=train_mode, seed=seed, indices=[index],
    )


def extract_embedding(params: ModelParams, features) -> np.ndarray:
    """Eval-mode final feature (pre-head); the identity map without hidden layers."""
    x = _check_input(params, features)
    h = x
    for w, b in params.hidden:
        h = np.maximum(h @ w.T + b, 0.0)
    return h[0] if np.ndim(features) == 1 else h


@dataclass(frozen=True)
class Prediction:
    identity: np.ndarray
    attributes: np.ndarray  # (n, M)
    probs: list[np.ndarray]


def predict(params: ModelParams, features) -> Prediction:
    x = _check_input(params, features)
    _, logits = forward_batch(params, x)
    probs = [softmax(z) for z in logits]
    # argmax returns the first maximum: ties go to the lowest index
    ids = np.argmax(probs[0], axis=1)
    atts = np.stack([np.argmax(p, axis=1) for p in probs[1:]], axis=1) if len(probs) > 1 \
        else np.zeros((len(x), 0), np.int64)
    return Prediction(ids, atts, probs)


# ---------------------------------------------------------------------------
# Checkpoints: magic, config block, then float32 parameters in declaration order


def checkpoint_bytes(config: ModelConfig, params: ModelParams) -> bytes:
    parts = [CHECKPOINT_MAGIC]
    parts.append(struct.pack("<QQ", config.input_dim, len(config.hidden_dims)))
    parts.append(struct.pack(f"<{len(config.hidden_dims)}Q", *config.hidden_dims))
    parts.append(struct.pack("<QQ", config.num_identities, config.num_attributes))
    parts.append(struct.pack(f"<{config.num_attributes}Q", *config.attribute_class_counts))
    parts.append(struct.pack("<dd", config.dropout_rate, config.lam))
    parts += [a.astype("<f4").tobytes() for a in params.arrays()]
    return b"".join(parts)


def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(config, params))


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    off = 4

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, blob, off)
        off += struct.calcsize(fmt)
        return vals

    input_dim, n_hidden = take("<QQ")
    hidden = take(f"<{n_hidden}Q")
    k, m = take("<QQ")
    counts = take(f"<{m}Q")
    dropout, lam = take("<dd")
    config = ModelConfig(int(input_dim), int(k), tuple(counts), tuple(hidden), float(dropout), float(lam))
    params = init_params(config, 0)
    for a in params.arrays():
        n = a.size
        if off + 4 * n > len(blob):
            raise ValueError("truncated checkpoint")
        a[...] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(a.shape)
        off += 4 * n
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    if not all(np.isfinite(a).all() for a in params.arrays()):
        raise ValueError("non-finite parameter in checkpoint")
    return config, params

