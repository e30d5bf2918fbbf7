"""Standard multi-head attention and ROI-windowed attention.

All forwards accept a single sequence ``(n, D)`` or a batch ``(B, n, D)``.
Per-head weights are stored stacked along a leading head axis, so one
matmul projects every head at once: ``(B, 1, n, D) @ (h, D, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -np.inf


@dataclass
class ScoreCounter:
    """Tally of softmax score entries actually materialized by a forward pass."""

    integration: int = 0
    broadcasting: int = 0
    full: int = 0

    @property
    def total(self) -> int:
        return self.integration + self.broadcasting + self.full

    def reset(self) -> None:
        self.integration = self.broadcasting = self.full = 0


@dataclass
class AttentionTrace:
    """Intermediate tensors of one layer forward, as numpy arrays.

    Arrays keep a leading batch axis (size 1 for a single sequence) followed
    by the head axis.  MANAR-only fields stay ``None`` for plain attention.
    """

    values: np.ndarray
    head_out: np.ndarray
    queries: Optional[np.ndarray] = None
    keys: Optional[np.ndarray] = None
    attn: Optional[np.ndarray] = None
    window_mask: Optional[np.ndarray] = None
    window_before: int = 0
    # MANAR
    acr_keys: Optional[np.ndarray] = None
    search_patterns: Optional[np.ndarray] = None
    retrieved_indices: Optional[np.ndarray] = None
    retrieval_weights: Optional[np.ndarray] = None
    concepts: Optional[np.ndarray] = None
    acr: Optional[np.ndarray] = None
    integration: Optional[np.ndarray] = None
    broadcast_acr: Optional[np.ndarray] = None
    broadcast_local: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    def softmax_rows(self) -> list[np.ndarray]:
        """Every stored softmax weight array (rows along the last axis)."""
        rows = []
        if self.attn is not None:
            rows.append(self.attn)
        if self.retrieval_weights is not None:
            rows.append(self.retrieval_weights)
        if self.integration is not None:
            rows.append(self.integration)
        if self.broadcast_acr is not None:
            rows.append(np.concatenate([self.broadcast_acr, self.broadcast_local], axis=-1))
        return rows


# -- region of interest ----------------------------------------------------


def roi(i: int, l: int, n: int) -> list[int]:
    """1-based token positions in the local window of token ``i``.

    ``{j : max(0, i - l) < j <= min(n, i + l)}``: at most ``2l`` positions,
    always including ``i`` itself.
    """
    if not 1 <= i <= n:
        raise ValueError(f"roi: index {i} outside 1..{n}")
    if l < 1:
        raise ValueError(f"roi: half-window must be >= 1, got {l}")
    return list(range(max(0, i - l) + 1, min(n, i + l) + 1))


def window_extent(n: int, l: int) -> tuple[int, int]:
    """Slots before/after each token in the offset-aligned ROI layout."""
    return min(l - 1, n - 1), min(l, n - 1)


def roi_mask(n: int, l: int) -> np.ndarray:
    """Boolean ``(n, W)`` table; slot ``w`` of row ``i0`` is token ``i0 + w - before``."""
    before, after = window_extent(n, l)
    offsets = np.arange(-before, after + 1)
    pos = np.arange(n)[:, None] + offsets[None, :]
    return (pos >= 0) & (pos < n)


def _tri(k: int) -> int:
    return k * (k + 1) // 2 if k > 0 else 0


def roi_total(n: int, l: int) -> int:
    """Closed form of ``sum_i |roi(i, l, n)|`` over ``i = 1..n``."""
    upper = n * (n + 1) // 2 + n * l - (_tri(l) - _tri(max(1, l - n + 1) - 1))
    lower = _tri(max(0, n - l))
    return upper - lower


# -- weights ---------------------------------------------------------------


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype or T.default_dtype())


@dataclass
class MhaWeights:
    """Per-head q/k/v projections ``(h, D, d)`` and the shared output ``(h*d, D)``."""

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor

    @property
    def heads(self) -> int:
        return self.W_q.shape[0]

    @property
    def model_dim(self) -> int:
        return self.W_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.W_q.shape[2]

    @classmethod
    def init(cls, D: int, h: int, rng: np.random.Generator, dtype=None) -> "MhaWeights":
        if D % h:
            raise ValueError(f"model width {D} not divisible by {h} heads")
        d = D // h
        mk = lambda: Tensor(glorot(rng, (h, D, d), D, d, dtype), requires_grad=True)
        return cls(mk(), mk(), mk(), Tensor(glorot(rng, (h * d, D), h * d, D, dtype), requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        return {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "W_o": self.W_o}


# -- head plumbing ---------------------------------------------------------


def as_batch(X: Tensor) -> tuple[Tensor, bool]:
    if X.ndim == 2:
        return X.reshape(1, *X.shape), True
    if X.ndim != 3:
        raise ValueError(f"expected (n, D) or (B, n, D) input, got shape {X.shape}")
    return X, False


def project(X: Tensor, W: Tensor) -> Tensor:
    """``(B, n, D)`` through stacked ``(h, D, d)`` weights -> ``(B, h, n, d)``."""
    if X.shape[-1] != W.shape[-2]:
        raise ValueError(f"projection mismatch: input {X.shape} vs weight {W.shape}")
    B, n, D = X.shape
    return X.reshape(B, 1, n, D) @ W


def merge_heads(H: Tensor, W_o: Tensor) -> Tensor:
    B, h, n, d = H.shape
    if W_o.shape[0] != h * d:
        raise ValueError(f"output projection {W_o.shape} does not match {h} heads of width {d}")
    return T.transpose(H, (0, 2, 1, 3)).reshape(B, n, h * d) @ W_o


def joint_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    l: int,
    acr: Optional[Tensor] = None,
    acr_keys: Optional[Tensor] = None,
    counter: Optional[ScoreCounter] = None,
):
    """One softmax per token over ACR slots (if any) followed by its ROI slots.

    Returns ``(out, weights_acr, weights_local, mask, before)``; weights are
    numpy arrays, ``weights_acr`` is ``None`` without ACR.
    """
    B, h, n, d = Q.shape
    inv = 1.0 / math.sqrt(d)
    before, after = window_extent(n, l)
    mask = roi_mask(n, l)
    bias = np.where(mask, 0.0, NEG_INF).astype(Q.dtype)

    local = T.band_dot(Q, K, before, after) * inv + bias

    m = 0 if acr is None else acr.shape[-2]
    if m:
        glob = (Q @ T.transpose(acr_keys)) * inv
        P = T.softmax(T.concat([glob, local], axis=-1), axis=-1)
        P_acr, P_loc = P[..., :m], P[..., m:]
        out = P_acr @ acr + T.band_mix(P_loc, V, before, after)
    else:
        P_loc = T.softmax(local, axis=-1)
        P_acr = None
        out = T.band_mix(P_loc, V, before, after)
    if counter is not None:
        counter.broadcasting += B * h * (n * m + int(mask.sum()))
    return out, (None if P_acr is None else P_acr.data), P_loc.data, mask, before


# -- forwards --------------------------------------------------------------


def mha_forward(X: Tensor, w: MhaWeights, counter: Optional[ScoreCounter] = None):
    """Full softmax attention per head, heads concatenated then projected."""
    Xb, single = as_batch(X)
    if Xb.shape[-1] != w.model_dim:
        raise ValueError(f"input width {Xb.shape[-1]} != weight width {w.model_dim}")
    Q, K, V = project(Xb, w.W_q), project(Xb, w.W_k), project(Xb, w.W_v)
    B, h, n, d = Q.shape
    P = T.softmax((Q @ T.transpose(K)) * (1.0 / math.sqrt(d)), axis=-1)
    H = P @ V
    if counter is not None:
        counter.full += B * h * n * n
    Y = merge_heads(H, w.W_o)
    trace = AttentionTrace(values=V.data, head_out=H.data, queries=Q.data, keys=K.data, attn=P.data)
    return (Y.reshape(n, -1) if single else Y), trace


def windowed_mha_forward(X: Tensor, w: MhaWeights, l: int, counter: Optional[ScoreCounter] = None):
    """Multi-head attention restricted to each token's ROI window."""
    if l < 1:
        raise ValueError(f"half-window must be >= 1, got {l}")
    Xb, single = as_batch(X)
    Q, K, V = project(Xb, w.W_q), project(Xb, w.W_k), project(Xb, w.W_v)
    H, _, P_loc, mask, before = joint_attention(Q, K, V, l, counter=counter)
    Y = merge_heads(H, w.W_o)
    trace = AttentionTrace(
        values=V.data, head_out=H.data, queries=Q.data, keys=K.data,
        attn=P_loc, window_mask=mask, window_before=before,
    )
    n = Xb.shape[1]
    return (Y.reshape(n, -1) if single else Y), trace


def mha_entries(n: int, h: int = 1) -> int:
    return h * n * n
