"""Per-client multimodal model: MLP encoders, fusion, linear head, manual backprop.

Parameters of one client live in a :class:`ClientModel`. Gradients are
returned in the same container so that ``params - lr * grads`` is a plain
field-wise update. Flattened layout (used by finite differences,
checkpoints and the sheaf): encoders in ascending modality id, each as
``W1, b1, W2, b2``; then attention vectors in ascending modality id; then
the head ``W`` (row-major) and ``b``. The head slice ``[W.ravel(), b]`` is
the vector the sheaf acts on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DimensionMismatch, EmptyBatch, LabelOutOfRange

ENC_KEYS = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class ModelSpec:
    modalities: tuple[int, ...]
    input_dims: Mapping[int, int]
    embed_dims: Mapping[int, int]
    hidden: int
    n_classes: int
    fusion: str = "concat"

    def __post_init__(self):
        if self.fusion not in ("concat", "attention"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if list(self.modalities) != sorted(set(self.modalities)) or not self.modalities:
            raise ValueError("modalities must be a nonempty ascending tuple")
        if self.fusion == "attention":
            dims = {self.embed_dims[k] for k in self.modalities}
            if len(dims) != 1:
                raise DimensionMismatch("attention fusion needs one shared embedding dim")

    @property
    def fused_dim(self) -> int:
        if self.fusion == "attention":
            return self.embed_dims[self.modalities[0]]
        return sum(self.embed_dims[k] for k in self.modalities)

    @property
    def head_dim(self) -> int:
        return self.n_classes * self.fused_dim + self.n_classes


@dataclass
class ClientModel:
    spec: ModelSpec
    encoders: dict[int, dict[str, np.ndarray]]
    attention: dict[int, np.ndarray] | None
    head_W: np.ndarray
    head_b: np.ndarray

    def copy(self) -> "ClientModel":
        return ClientModel(
            self.spec,
            {k: {n: a.copy() for n, a in enc.items()} for k, enc in self.encoders.items()},
            None if self.attention is None else {k: b.copy() for k, b in self.attention.items()},
            self.head_W.copy(),
            self.head_b.copy(),
        )

    def zeros_like(self) -> "ClientModel":
        return map_params(np.zeros_like, self)

    @property
    def head_vector(self) -> np.ndarray:
        return np.concatenate([self.head_W.ravel(), self.head_b])

    def set_head_vector(self, v: np.ndarray) -> None:
        c, f = self.head_W.shape
        if v.shape != (c * f + c,):
            raise DimensionMismatch(f"head vector has shape {v.shape}, expected ({c * f + c},)")
        self.head_W = v[: c * f].reshape(c, f).copy()
        self.head_b = v[c * f:].copy()


def map_params(fn: Callable[..., np.ndarray], *models: ClientModel) -> ClientModel:
    """Apply ``fn`` leaf-wise across models sharing one spec."""
    m0 = models[0]
    enc = {k: {n: fn(*(m.encoders[k][n] for m in models)) for n in ENC_KEYS} for k in m0.encoders}
    att = None
    if m0.attention is not None:
        att = {k: fn(*(m.attention[k] for m in models)) for k in m0.attention}
    return ClientModel(m0.spec, enc, att, fn(*(m.head_W for m in models)),
                       fn(*(m.head_b for m in models)))


def init_encoder(m_k: int, hidden: int, l_k: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(m_k), size=(hidden, m_k)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(l_k, hidden)),
        "b2": np.zeros(l_k),
    }


def init_client_model(
    spec: ModelSpec,
    encoder_rngs: Mapping[int, np.random.Generator],
    head_rng: np.random.Generator,
) -> ClientModel:
    """Seeded init: weights ``N(0, 1/fan_in)``, zero biases, zero attention."""
    enc = {k: init_encoder(spec.input_dims[k], spec.hidden, spec.embed_dims[k], encoder_rngs[k])
           for k in spec.modalities}
    att = None
    if spec.fusion == "attention":
        att = {k: np.zeros(spec.embed_dims[k]) for k in spec.modalities}
    f = spec.fused_dim
    head_W = head_rng.normal(0.0, 1.0 / np.sqrt(f), size=(spec.n_classes, f))
    return ClientModel(spec, enc, att, head_W, np.zeros(spec.n_classes))


# ---------------------------------------------------------------- flattening

def flatten(m: ClientModel) -> np.ndarray:
    parts = [m.encoders[k][n].ravel() for k in sorted(m.encoders) for n in ENC_KEYS]
    if m.attention is not None:
        parts += [m.attention[k] for k in sorted(m.attention)]
    parts += [m.head_W.ravel(), m.head_b]
    return np.concatenate(parts)


def unflatten(template: ClientModel, vec: np.ndarray) -> ClientModel:
    out = template.copy()
    pos = 0

    def take(shape):
        nonlocal pos
        size = math.prod(shape)
        chunk = vec[pos:pos + size].reshape(shape).copy()
        pos += size
        return chunk

    for k in sorted(out.encoders):
        for n in ENC_KEYS:
            out.encoders[k][n] = take(out.encoders[k][n].shape)
    if out.attention is not None:
        for k in sorted(out.attention):
            out.attention[k] = take(out.attention[k].shape)
    out.head_W = take(out.head_W.shape)
    out.head_b = take(out.head_b.shape)
    if pos != vec.size:
        raise DimensionMismatch(f"flat vector has {vec.size} entries, model needs {pos}")
    return out


# ------------------------------------------------------------------- forward

def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    z = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def encoder_forward(p: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """``W2 relu(W1 x + b1) + b2`` for a single vector or a batch of rows."""
    if x.shape[-1] != p["W1"].shape[1]:
        raise DimensionMismatch(f"input dim {x.shape[-1]} != encoder input {p['W1'].shape[1]}")
    return relu(x @ p["W1"].T + p["b1"]) @ p["W2"].T + p["b2"]


def concat_fuse(embeddings) -> np.ndarray:
    return np.concatenate(list(embeddings), axis=-1)


def attention_fuse(betas, embeddings) -> tuple[np.ndarray, np.ndarray]:
    """Softmax(tanh(beta_k . h_k))-weighted sum of embeddings.

    ``betas`` and ``embeddings`` are sequences ordered by modality id.
    Works on single vectors (alphas shape ``(K,)``) or batches (``(n, K)``).
    """
    betas, embeddings = list(betas), list(embeddings)
    if len(betas) != len(embeddings):
        raise DimensionMismatch("need one attention vector per embedding")
    l = embeddings[0].shape[-1]
    for b, h in zip(betas, embeddings):
        if h.shape[-1] != l or b.shape != (l,):
            raise DimensionMismatch("attention fusion needs equal embedding dims")
    scores = np.stack([np.tanh(h @ b) for b, h in zip(betas, embeddings)], axis=-1)
    alphas = softmax(scores, axis=-1)
    fused = sum(alphas[..., a, None] * h for a, h in enumerate(embeddings))
    return fused, alphas


def head_forward(W: np.ndarray, b: np.ndarray, fused: np.ndarray) -> np.ndarray:
    if fused.shape[-1] != W.shape[1]:
        raise DimensionMismatch(f"fused dim {fused.shape[-1]} != head input {W.shape[1]}")
    return fused @ W.T + b


@dataclass
class _Cache:
    x: dict
    z1: dict = field(default_factory=dict)
    a1: dict = field(default_factory=dict)
    h: dict = field(default_factory=dict)
    e: np.ndarray | None = None
    alphas: np.ndarray | None = None
    fused: np.ndarray | None = None


def forward(m: ClientModel, x: Mapping[int, np.ndarray]) -> tuple[np.ndarray, _Cache]:
    """Batched forward pass; ``x[k]`` has shape ``(n, m_k)``."""
    cache = _Cache(dict(x))
    mods = m.spec.modalities
    for k in mods:
        p = m.encoders[k]
        if x[k].shape[-1] != p["W1"].shape[1]:
            raise DimensionMismatch(f"modality {k}: input dim {x[k].shape[-1]}")
        z1 = x[k] @ p["W1"].T + p["b1"]
        a1 = relu(z1)
        cache.z1[k], cache.a1[k] = z1, a1
        cache.h[k] = a1 @ p["W2"].T + p["b2"]
    if m.spec.fusion == "concat":
        fused = concat_fuse(cache.h[k] for k in mods)
    else:
        scores = np.stack([np.tanh(cache.h[k] @ m.attention[k]) for k in mods], axis=-1)
        alphas = softmax(scores, axis=-1)
        fused = sum(alphas[:, a, None] * cache.h[k] for a, k in enumerate(mods))
        cache.e, cache.alphas = scores, alphas
    cache.fused = fused
    return head_forward(m.head_W, m.head_b, fused), cache


def backward(m: ClientModel, cache: _Cache, dlogits: np.ndarray) -> ClientModel:
    """Reverse-mode pass: pull ``dlogits`` back to every parameter."""
    g = m.zeros_like()
    mods = m.spec.modalities
    g.head_W = dlogits.T @ cache.fused
    g.head_b = dlogits.sum(axis=0)
    dfused = dlogits @ m.head_W
    dh = {}
    if m.spec.fusion == "concat":
        pos = 0
        for k in mods:
            l = m.spec.embed_dims[k]
            dh[k] = dfused[:, pos:pos + l]
            pos += l
    else:
        alphas, e = cache.alphas, cache.e
        dalpha = np.stack([np.sum(dfused * cache.h[k], axis=1) for k in mods], axis=-1)
        de = alphas * (dalpha - np.sum(alphas * dalpha, axis=1, keepdims=True))
        ds = de * (1.0 - e * e)
        for a, k in enumerate(mods):
            g.attention[k] = ds[:, a] @ cache.h[k]
            dh[k] = alphas[:, a, None] * dfused + ds[:, a, None] * m.attention[k]
    for k in mods:
        p, gk = m.encoders[k], g.encoders[k]
        gk["W2"] = dh[k].T @ cache.a1[k]
        gk["b2"] = dh[k].sum(axis=0)
        dz1 = (dh[k] @ p["W2"]) * (cache.z1[k] > 0)
        gk["W1"] = dz1.T @ cache.x[k]
        gk["b1"] = dz1.sum(axis=0)
    return g


def logits_jvp(m: ClientModel, cache: _Cache, t: ClientModel) -> np.ndarray:
    """Forward-mode derivative of the logits along parameter tangent ``t``."""
    mods = m.spec.modalities
    dh = {}
    for k in mods:
        p, tk = m.encoders[k], t.encoders[k]
        dz1 = cache.x[k] @ tk["W1"].T + tk["b1"]
        da1 = dz1 * (cache.z1[k] > 0)
        dh[k] = da1 @ p["W2"].T + cache.a1[k] @ tk["W2"].T + tk["b2"]
    if m.spec.fusion == "concat":
        dfused = concat_fuse(dh[k] for k in mods)
    else:
        alphas, e = cache.alphas, cache.e
        ds = np.stack([dh[k] @ m.attention[k] + cache.h[k] @ t.attention[k] for k in mods], axis=-1)
        de = (1.0 - e * e) * ds
        dalpha = alphas * (de - np.sum(alphas * de, axis=1, keepdims=True))
        dfused = sum(dalpha[:, a, None] * cache.h[k] + alphas[:, a, None] * dh[k]
                     for a, k in enumerate(mods))
    return dfused @ m.head_W.T + cache.fused @ t.head_W.T + t.head_b


# ---------------------------------------------------------------------- loss

def _check_batch(m: ClientModel, x, y):
    y = np.asarray(y)
    if y.size == 0:
        raise EmptyBatch("batch has no samples")
    if y.min() < 0 or y.max() >= m.spec.n_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {m.spec.n_classes})")
    for k in m.spec.modalities:
        if k not in x or x[k].shape[0] != y.size:
            raise DimensionMismatch(f"modality {k} missing or wrong sample count")
    return y


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    n = y.size
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), y]))
    d = softmax(logits, axis=1)
    d[np.arange(n), y] -= 1.0
    return loss, d / n


def loss(m: ClientModel, x, y) -> float:
    y = _check_batch(m, x, y)
    logits, _ = forward(m, x)
    return cross_entropy(logits, y)[0]


def loss_and_grads(m: ClientModel, x, y) -> tuple[float, ClientModel]:
    y = _check_batch(m, x, y)
    logits, cache = forward(m, x)
    val, dlogits = cross_entropy(logits, y)
    return val, backward(m, cache, dlogits)


def gauss_newton_matvec(m: ClientModel, x, y, t: ClientModel) -> ClientModel:
    """``J^T H J t`` for the mean cross-entropy, ``H`` the softmax Hessian."""
    y = _check_batch(m, x, y)
    logits, cache = forward(m, x)
    p = softmax(logits, axis=1)
    jt = logits_jvp(m, cache, t)
    hjt = (p * jt - p * np.sum(p * jt, axis=1, keepdims=True)) / y.size
    return backward(m, cache, hjt)


def accuracy(m: ClientModel, x, y) -> float:
    logits, _ = forward(m, x)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


def finite_diff_grads(m: ClientModel, x, y, eps: float = 1e-5,
                      fn: Callable[[ClientModel], float] | None = None) -> ClientModel:
    """Central-difference gradient over every flattened parameter.

    ``fn`` overrides the objective (defaults to the mean cross-entropy on
    ``(x, y)``).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    f = fn if fn is not None else (lambda mm: loss(mm, x, y))
    theta = flatten(m)
    g = np.empty_like(theta)
    for a in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[a] += eps
        tm[a] -= eps
        g[a] = (f(unflatten(m, tp)) - f(unflatten(m, tm))) / (2.0 * eps)
    return unflatten(m, g)
