"""Sequence classifier over irregular position-report windows.

The network embeds each feature row position-wise (continuous point
embedding stages), extracts local patterns with 1-D convolutions over the
sequence axis, mixes globally with pre-norm transformer encoder blocks, and
classifies from the representation of the last position; the task is
defined on the most recent message, so there is no pooling over time.

Temporal irregularity enters through the difference features; there is no
additive positional encoding. Forward and backward are exact, deterministic
numpy computations; gradients are hand-derived reverse-mode and are checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterator, Mapping

import numpy as np

LAYERNORM_EPS = 1e-5
CE_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class InvalidConfig(ValueError):
    """Architecture hyperparameters violate a structural constraint."""


class ShapeMismatch(ValueError):
    """An input or gradient array does not match the configured shapes."""


@dataclass(frozen=True, slots=True)
class ModelConfig:
    feature_width: int
    n_classes: int
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_cpe_layers: int = 2
    n_cnn_layers: int = 1
    n_transformer_layers: int = 1
    cnn_kernel: int = 3
    max_seq_len: int = 2048

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidConfig("n_classes must be >= 2")
        if self.d_model < 1 or self.d_ff < 1 or self.feature_width < 1:
            raise InvalidConfig("widths must be positive")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.cnn_kernel < 1 or self.cnn_kernel % 2 == 0:
            raise InvalidConfig("cnn_kernel must be odd")
        if self.n_cpe_layers < 1:
            raise InvalidConfig("need at least one embedding layer")
        if self.n_cnn_layers < 0 or self.n_transformer_layers < 0:
            raise InvalidConfig("layer counts must be nonnegative")
        if self.max_seq_len < 1:
            raise InvalidConfig("max_seq_len must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature_width": self.feature_width,
            "n_classes": self.n_classes,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "n_cpe_layers": self.n_cpe_layers,
            "n_cnn_layers": self.n_cnn_layers,
            "n_transformer_layers": self.n_transformer_layers,
            "cnn_kernel": self.cnn_kernel,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return cls(**data)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical (name -> shape) map; iteration order is the storage order."""
    d, k = cfg.d_model, cfg.cnn_kernel
    shapes: dict[str, tuple[int, ...]] = {}
    fan = cfg.feature_width
    for i in range(cfg.n_cpe_layers):
        shapes[f"cpe{i}.w"] = (fan, d)
        shapes[f"cpe{i}.b"] = (d,)
        fan = d
    for i in range(cfg.n_cnn_layers):
        shapes[f"cnn{i}.w"] = (k, d, d)
        shapes[f"cnn{i}.b"] = (d,)
    for i in range(cfg.n_transformer_layers):
        p = f"tf{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + f"attn.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[p + f"attn.{name}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ff.w1"] = (d, cfg.d_ff)
        shapes[p + "ff.b1"] = (cfg.d_ff,)
        shapes[p + "ff.w2"] = (cfg.d_ff, d)
        shapes[p + "ff.b2"] = (d,)
    shapes["head.w"] = (d, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


class ModelWeights:
    """Named dense parameter arrays, immutable by convention after load."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.arrays: dict[str, np.ndarray] = dict(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self.arrays.items()})


def init_weights(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic initialization: weight matrices drawn with standard
    deviation 1/sqrt(fan_in), biases zero, normalization gains one."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            arrays[name] = np.zeros(shape, dtype=np.float64)
        elif leaf == "g":
            arrays[name] = np.ones(shape, dtype=np.float64)
        else:
            fan_in = int(np.prod(shape[:-1]))
            arrays[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
    return ModelWeights(arrays)


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter total; kept independent of param_shapes so the
    two can be checked against each other."""
    d, dff, k = cfg.d_model, cfg.d_ff, cfg.cnn_kernel

    def affine(n_in: int, n_out: int) -> int:
        return n_in * n_out + n_out

    total = affine(cfg.feature_width, d) + (cfg.n_cpe_layers - 1) * affine(d, d)
    total += cfg.n_cnn_layers * (k * d * d + d)
    per_block = 4 * affine(d, d) + affine(d, dff) + affine(dff, d) + 4 * d
    total += cfg.n_transformer_layers * per_block
    total += affine(d, cfg.n_classes)
    return total


# -- primitive forward/backward pairs ---------------------------------------

def _gelu(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x2 * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x2 * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def _layernorm_fwd(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv)


def _layernorm_bwd(dy, cache, gain):
    xhat, inv = cache
    dxhat = dy * gain
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _conv1d_fwd(x, w, b):
    # Same-length 1-D convolution over the sequence axis, zero padded.
    k = w.shape[0]
    half = k // 2
    n = x.shape[0]
    xpad = np.zeros((n + 2 * half, x.shape[1]), dtype=x.dtype)
    xpad[half:half + n] = x
    out = np.tile(b, (n, 1))
    for j in range(k):
        out += xpad[j:j + n] @ w[j]
    return out, xpad


def _conv1d_bwd(dy, xpad, w):
    k = w.shape[0]
    half = k // 2
    n = dy.shape[0]
    dw = np.empty_like(w)
    dxpad = np.zeros_like(xpad)
    for j in range(k):
        dw[j] = xpad[j:j + n].T @ dy
        dxpad[j:j + n] += dy @ w[j].T
    db = dy.sum(axis=0)
    return dxpad[half:half + n], dw, db


def _split_heads(x, n_heads):
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def softmax(z: np.ndarray) -> np.ndarray:
    """Max-subtracted exponential normalization along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- full network ------------------------------------------------------------

def _check_input(cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.feature_width:
        raise ShapeMismatch(
            f"expected (L, {cfg.feature_width}) input, got {x.shape}")
    if not 1 <= x.shape[0] <= cfg.max_seq_len:
        raise ShapeMismatch(
            f"sequence length {x.shape[0]} outside [1, {cfg.max_seq_len}]")
    return x


def _forward_cached(cfg: ModelConfig, w: ModelWeights, x: np.ndarray):
    a = w.arrays
    h = x
    cpe_cache = []
    for i in range(cfg.n_cpe_layers):
        z = h @ a[f"cpe{i}.w"] + a[f"cpe{i}.b"]
        cpe_cache.append((h, z))
        h = _gelu(z)

    cnn_cache = []
    for i in range(cfg.n_cnn_layers):
        z, xpad = _conv1d_fwd(h, a[f"cnn{i}.w"], a[f"cnn{i}.b"])
        cnn_cache.append((xpad, z))
        h = h + _gelu(z)  # residual: in/out widths always match

    scale = 1.0 / math.sqrt(cfg.d_head)
    tf_cache = []
    for i in range(cfg.n_transformer_layers):
        p = f"tf{i}."
        x0 = h
        n1, ln1_c = _layernorm_fwd(x0, a[p + "ln1.g"], a[p + "ln1.b"])
        q = _split_heads(n1 @ a[p + "attn.wq"] + a[p + "attn.bq"], cfg.n_heads)
        key = _split_heads(n1 @ a[p + "attn.wk"] + a[p + "attn.bk"], cfg.n_heads)
        v = _split_heads(n1 @ a[p + "attn.wv"] + a[p + "attn.bv"], cfg.n_heads)
        att = softmax(q @ key.transpose(0, 2, 1) * scale)
        ctx = _merge_heads(att @ v)
        x1 = x0 + ctx @ a[p + "attn.wo"] + a[p + "attn.bo"]
        n2, ln2_c = _layernorm_fwd(x1, a[p + "ln2.g"], a[p + "ln2.b"])
        h1 = n2 @ a[p + "ff.w1"] + a[p + "ff.b1"]
        g = _gelu(h1)
        h = x1 + g @ a[p + "ff.w2"] + a[p + "ff.b2"]
        tf_cache.append((x0, ln1_c, n1, q, key, v, att, ctx, x1, ln2_c, n2, h1, g))

    logits = h[-1] @ a["head.w"] + a["head.b"]
    return logits, (x, cpe_cache, cnn_cache, tf_cache, h)


def forward(cfg: ModelConfig, w: ModelWeights, x: np.ndarray) -> np.ndarray:
    """Compute classifier logits for a feature sequence of shape (L, F).

    Same arithmetic as the training-time forward, but the final attention
    block evaluates only the last query position: positions are independent
    row-wise everywhere downstream of it, and the classifier head reads only
    the last row. That keeps long-window streaming inference cheap.
    """
    x = _check_input(cfg, x)
    a = w.arrays
    h = x
    for i in range(cfg.n_cpe_layers):
        h = _gelu(h @ a[f"cpe{i}.w"] + a[f"cpe{i}.b"])
    for i in range(cfg.n_cnn_layers):
        z, _ = _conv1d_fwd(h, a[f"cnn{i}.w"], a[f"cnn{i}.b"])
        h = h + _gelu(z)

    scale = 1.0 / math.sqrt(cfg.d_head)
    final = cfg.n_transformer_layers - 1
    for i in range(cfg.n_transformer_layers):
        p = f"tf{i}."
        rows = slice(-1, None) if i == final else slice(None)
        n1, _ = _layernorm_fwd(h, a[p + "ln1.g"], a[p + "ln1.b"])
        q = _split_heads(n1[rows] @ a[p + "attn.wq"] + a[p + "attn.bq"],
                         cfg.n_heads)
        key = _split_heads(n1 @ a[p + "attn.wk"] + a[p + "attn.bk"],
                           cfg.n_heads)
        v = _split_heads(n1 @ a[p + "attn.wv"] + a[p + "attn.bv"], cfg.n_heads)
        att = softmax(q @ key.transpose(0, 2, 1) * scale)
        ctx = _merge_heads(att @ v)
        h = h[rows] + ctx @ a[p + "attn.wo"] + a[p + "attn.bo"]
        n2, _ = _layernorm_fwd(h, a[p + "ln2.g"], a[p + "ln2.b"])
        h = h + _gelu(n2 @ a[p + "ff.w1"] + a[p + "ff.b1"]) @ a[p + "ff.w2"] \
            + a[p + "ff.b2"]
    return h[-1] @ a["head.w"] + a["head.b"]


def backward(
    cfg: ModelConfig,
    w: ModelWeights,
    x: np.ndarray,
    label: int,
    class_weights: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted cross-entropy loss at the last position and its exact
    gradients with respect to every weight array.

    Returns (loss, grads) where grads shape-matches the weights one-to-one.
    """
    x = _check_input(cfg, x)
    if not 0 <= label < cfg.n_classes:
        raise ShapeMismatch(f"label {label} out of range for {cfg.n_classes} classes")
    if class_weights is None:
        class_weights = np.ones(cfg.n_classes)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (cfg.n_classes,):
        raise ShapeMismatch("class_weights must have one entry per class")

    logits, cache = _forward_cached(cfg, w, x)
    _, cpe_cache, cnn_cache, tf_cache, h_final = cache
    a = w.arrays
    grads: dict[str, np.ndarray] = {}

    probs = softmax(logits)
    p_label = probs[label]
    loss = float(-class_weights[label] * math.log(p_label + CE_EPS))
    # d/dz of -w * log(softmax(z)[label] + eps), the eps kept exact so the
    # finite-difference check sees the same function.
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    dlogits *= class_weights[label] * (p_label / (p_label + CE_EPS))

    grads["head.w"] = np.outer(h_final[-1], dlogits)
    grads["head.b"] = dlogits
    dh = np.zeros_like(h_final)
    dh[-1] = a["head.w"] @ dlogits

    scale = 1.0 / math.sqrt(cfg.d_head)
    for i in reversed(range(cfg.n_transformer_layers)):
        p = f"tf{i}."
        x0, ln1_c, n1, q, key, v, att, ctx, x1, ln2_c, n2, h1, g = tf_cache[i]
        # h = x1 + gelu(n2 @ w1 + b1) @ w2 + b2
        grads[p + "ff.w2"] = g.T @ dh
        grads[p + "ff.b2"] = dh.sum(axis=0)
        dg = dh @ a[p + "ff.w2"].T
        dh1 = dg * _gelu_grad(h1)
        grads[p + "ff.w1"] = n2.T @ dh1
        grads[p + "ff.b1"] = dh1.sum(axis=0)
        dn2 = dh1 @ a[p + "ff.w1"].T
        dx1, dg2, db2 = _layernorm_bwd(dn2, ln2_c, a[p + "ln2.g"])
        grads[p + "ln2.g"] = dg2
        grads[p + "ln2.b"] = db2
        dx1 += dh
        # x1 = x0 + merge(att @ v) @ wo + bo
        grads[p + "attn.wo"] = ctx.T @ dx1
        grads[p + "attn.bo"] = dx1.sum(axis=0)
        dctx = _split_heads(dx1 @ a[p + "attn.wo"].T, cfg.n_heads)
        datt = dctx @ v.transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ dctx
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = ds @ key * scale
        dk = ds.transpose(0, 2, 1) @ q * scale
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        grads[p + "attn.wq"] = n1.T @ dq
        grads[p + "attn.bq"] = dq.sum(axis=0)
        grads[p + "attn.wk"] = n1.T @ dk
        grads[p + "attn.bk"] = dk.sum(axis=0)
        grads[p + "attn.wv"] = n1.T @ dv
        grads[p + "attn.bv"] = dv.sum(axis=0)
        dn1 = dq @ a[p + "attn.wq"].T + dk @ a[p + "attn.wk"].T + dv @ a[p + "attn.wv"].T
        dx0, dg1, db1 = _layernorm_bwd(dn1, ln1_c, a[p + "ln1.g"])
        grads[p + "ln1.g"] = dg1
        grads[p + "ln1.b"] = db1
        dh = dx0 + dx1

    for i in reversed(range(cfg.n_cnn_layers)):
        xpad, z = cnn_cache[i]
        dz = dh * _gelu_grad(z)
        dx, dw, db = _conv1d_bwd(dz, xpad, a[f"cnn{i}.w"])
        grads[f"cnn{i}.w"] = dw
        grads[f"cnn{i}.b"] = db
        dh = dh + dx

    for i in reversed(range(cfg.n_cpe_layers)):
        h_in, z = cpe_cache[i]
        dz = dh * _gelu_grad(z)
        grads[f"cpe{i}.w"] = h_in.T @ dz
        grads[f"cpe{i}.b"] = dz.sum(axis=0)
        dh = dz @ a[f"cpe{i}.w"].T

    return loss, grads


# -- shipped configurations ---------------------------------------------------

# Default feature width for the stock feature layout: 4 + 3 * 9 anchors.
DEFAULT_FEATURE_WIDTH = 31


def toy_config(n_classes: int, feature_width: int = DEFAULT_FEATURE_WIDTH,
               max_seq_len: int = 2048) -> ModelConfig:
    """Small test-workhorse configuration (well under 50k parameters)."""
    return ModelConfig(
        feature_width=feature_width,
        n_classes=n_classes,
        d_model=32,
        n_heads=4,
        d_ff=64,
        n_cpe_layers=2,
        n_cnn_layers=1,
        n_transformer_layers=1,
        max_seq_len=max_seq_len,
    )


def production_activity_config(feature_width: int = DEFAULT_FEATURE_WIDTH) -> ModelConfig:
    """Full-scale 5-class configuration, ~4.75M parameters."""
    return ModelConfig(
        feature_width=feature_width,
        n_classes=5,
        d_model=192,
        n_heads=8,
        d_ff=832,
        n_cpe_layers=6,
        n_cnn_layers=3,
        n_transformer_layers=9,
    )


def production_entity_config(feature_width: int = DEFAULT_FEATURE_WIDTH) -> ModelConfig:
    """Full-scale 2-class (vessel vs. buoy) configuration."""
    return ModelConfig(
        feature_width=feature_width,
        n_classes=2,
        d_model=192,
        n_heads=8,
        d_ff=832,
        n_cpe_layers=6,
        n_cnn_layers=3,
        n_transformer_layers=4,
    )
