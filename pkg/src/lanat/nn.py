"""Network building blocks: attention, transformer layers, subsampling.

All parameters live in a ``ParamStore`` keyed by hierarchical names so the
trainer can freeze by name and checkpoints serialise in a stable order.
Blocks are stateless given their parameters; forward passes are safe to
run concurrently when nothing mutates the store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class AttentionConfig:
    d: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"model dim {self.d} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


class ParamStore:
    """Ordered registry of trainable tensors with deterministic init."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def matrix(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        data = self.rng.uniform(-limit, limit, size=(fan_in, fan_out))
        return self._register(name, data)

    def vector(self, name: str, n: int, fill: float = 0.0) -> Tensor:
        return self._register(name, np.full(n, fill))

    def normal(self, name: str, shape, scale: float = 0.02) -> Tensor:
        return self._register(name, self.rng.normal(0.0, scale, size=shape))

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t


def sinusoidal_pe(length: int, d: int) -> np.ndarray:
    """Fixed sin/cos positional table, shape (length, d)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if d % 2:
        raise ValueError(f"positional embedding needs an even width, got {d}")
    pos = np.arange(length)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2) / d)[None, :]
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def additive_mask(allow: np.ndarray) -> np.ndarray:
    """Boolean queries-by-keys mask to an additive pre-softmax term.

    Disallowed keys get -1e30, which underflows to exactly zero attention
    weight after softmax. Rows with no allowed key are rejected.
    """
    allow = np.asarray(allow, dtype=bool)
    if not allow.any(axis=1).all():
        bad = int(np.flatnonzero(~allow.any(axis=1))[0])
        raise ValueError(f"attention mask row {bad} allows no keys")
    return np.where(allow, 0.0, -1e30)


class MultiHeadAttention:
    """Scaled dot-product attention with h heads over width d."""

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig):
        d = cfg.d
        self.heads = cfg.heads
        self.dk = d // cfg.heads
        self.scale = 1.0 / math.sqrt(self.dk)
        self.wq = store.matrix(f"{prefix}.wq", d, d)
        self.wk = store.matrix(f"{prefix}.wk", d, d)
        self.wv = store.matrix(f"{prefix}.wv", d, d)
        self.wo = store.matrix(f"{prefix}.wo", d, d)
        self.bq = store.vector(f"{prefix}.bq", d)
        self.bk = store.vector(f"{prefix}.bk", d)
        self.bv = store.vector(f"{prefix}.bv", d)
        self.bo = store.vector(f"{prefix}.bo", d)

    def __call__(self, q: Tensor, kv: Tensor, mask_add: np.ndarray | None = None,
                 return_weights: bool = False):
        qh = ad.split_heads(ad.linear(q, self.wq, self.bq), self.heads, self.scale)
        kh = ad.split_heads(ad.linear(kv, self.wk, self.bk), self.heads)
        vh = ad.split_heads(ad.linear(kv, self.wv, self.bv), self.heads)
        scores = qh @ ad.transpose(kh, (0, 2, 1))
        add = None if mask_add is None else mask_add[None, :, :]
        weights = ad.softmax(scores, axis=-1, add=add)
        out = ad.linear(ad.merge_heads(weights @ vh), self.wo, self.bo)
        if return_weights:
            return out, weights
        return out


class TransformerLayer:
    """Pre-norm residual block: attention sublayer then GLU feed-forward."""

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig):
        d, f = cfg.d, cfg.ffn_dim
        self.cfg = cfg
        self.attn = MultiHeadAttention(store, f"{prefix}.attn", cfg)
        self.ln1_g = store.vector(f"{prefix}.ln1.gain", d, 1.0)
        self.ln1_b = store.vector(f"{prefix}.ln1.bias", d)
        self.ln2_g = store.vector(f"{prefix}.ln2.gain", d, 1.0)
        self.ln2_b = store.vector(f"{prefix}.ln2.bias", d)
        self.w1 = store.matrix(f"{prefix}.ffn.w1", d, 2 * f)
        self.b1 = store.vector(f"{prefix}.ffn.b1", 2 * f)
        self.w2 = store.matrix(f"{prefix}.ffn.w2", f, d)
        self.b2 = store.vector(f"{prefix}.ffn.b2", d)

    def __call__(self, q: Tensor, kv: Tensor | None = None,
                 mask: np.ndarray | None = None,
                 dropout_rng: np.random.Generator | None = None) -> Tensor:
        mask_add = None
        if mask is not None:
            mask_add = mask if mask.dtype == np.float64 else additive_mask(mask)
        qn = ad.layer_norm(q, self.ln1_g, self.ln1_b)
        attn_out = self.attn(qn, qn if kv is None else kv, mask_add)
        x = q + self._drop(attn_out, dropout_rng)
        h = ad.glu(ad.linear(ad.layer_norm(x, self.ln2_g, self.ln2_b), self.w1, self.b1),
                   axis=-1)
        return x + self._drop(ad.linear(h, self.w2, self.b2), dropout_rng)

    def _drop(self, x: Tensor, rng) -> Tensor:
        if rng is None or self.cfg.dropout <= 0.0:
            return x
        return ad.dropout(x, self.cfg.dropout, rng)


def subsampled_length(n: int, layers: int = 2) -> int:
    """Output time length after the stride-2, kernel-3, padding-1 stack."""
    for _ in range(layers):
        n = (n - 1) // 2 + 1
    return n


class ConvSubsampler:
    """Two stride-2 2D conv layers followed by a linear projection to d.

    Input is a (T', F) frame matrix; output is (T, d) with
    T = subsampled_length(T'). Frequency bins surviving subsampling are
    flattened into the projection.
    """

    def __init__(self, store: ParamStore, prefix: str, feat_dim: int, d: int,
                 channels: int = 32):
        self.channels = channels
        self.feat_dim = feat_dim
        f_out = subsampled_length(feat_dim)
        k1 = math.sqrt(6.0 / (9 + 9 * channels))
        k2 = math.sqrt(6.0 / (9 * channels + 9 * channels))
        self.k1 = store._register(f"{prefix}.conv1.w",
                                  store.rng.uniform(-k1, k1, (channels, 1, 3, 3)))
        self.b1 = store.vector(f"{prefix}.conv1.b", channels)
        self.k2 = store._register(f"{prefix}.conv2.w",
                                  store.rng.uniform(-k2, k2, (channels, channels, 3, 3)))
        self.b2 = store.vector(f"{prefix}.conv2.b", channels)
        self.proj_w = store.matrix(f"{prefix}.proj.w", channels * f_out, d)
        self.proj_b = store.vector(f"{prefix}.proj.b", d)

    def __call__(self, frames: Tensor) -> Tensor:
        t_in, f_in = frames.shape
        if t_in < 4:
            raise ValueError(f"need at least 4 frames to subsample, got {t_in}")
        if f_in != self.feat_dim:
            raise ValueError(f"expected {self.feat_dim} features, got {f_in}")
        x = ad.reshape(frames, (1, t_in, f_in))
        x = ad.relu(ad.conv2d(x, self.k1, stride=2, padding=1, bias=self.b1))
        x = ad.relu(ad.conv2d(x, self.k2, stride=2, padding=1, bias=self.b2))
        c, t, f = x.shape
        flat = ad.reshape(ad.transpose(x, (1, 0, 2)), (t, c * f))
        return ad.linear(flat, self.proj_w, self.proj_b)
