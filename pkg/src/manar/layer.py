"""The MANAR contextualization layer.

Per head: search patterns -> memory retrieval -> conceptualization ->
integration (ACR construction) -> broadcasting (token contextualization).
Heads share the memory unit and the ACR key projection ``W_kr``; their
outputs are concatenated and mapped back through ``W_o``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import (
    AttentionTrace,
    ScoreCounter,
    as_batch,
    glorot,
    joint_attention,
    merge_heads,
    project,
    roi_total,
)
from .config import ConfigError, ManarConfig
from .memory import MemoryUnit, SearchPatternWeights, build_search_patterns, retrieve, split_concept
from .tensor import Tensor


@dataclass
class ManarLayerWeights:
    W_q: Tensor
    W_kM: Tensor
    W_k: Tensor
    W_v: Tensor
    search: SearchPatternWeights
    W_kr: Tensor
    W_o: Tensor
    memory: MemoryUnit

    @classmethod
    def init(cls, cfg: ManarConfig, rng: np.random.Generator, dtype=None) -> "ManarLayerWeights":
        cfg.validate()
        D, h, d = cfg.D, cfg.h, cfg.d
        proj = lambda: Tensor(glorot(rng, (h, D, d), D, d, dtype), requires_grad=True)
        return cls(
            W_q=proj(),
            W_kM=proj(),
            W_k=proj(),
            W_v=proj(),
            search=SearchPatternWeights.init(D, h, cfg.m, rng, dtype),
            W_kr=Tensor(glorot(rng, (d, d), d, d, dtype), requires_grad=True),
            W_o=Tensor(glorot(rng, (h * d, D), h * d, D, dtype), requires_grad=True),
            memory=MemoryUnit.init(cfg.M, d, rng, cfg.key_mode, dtype),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {"W_q": self.W_q, "W_kM": self.W_kM, "W_k": self.W_k, "W_v": self.W_v}
        out.update(self.search.parameters())
        out["W_kr"] = self.W_kr
        out["W_o"] = self.W_o
        out.update(self.memory.parameters())
        return out


def conceptualize(X: Tensor, w: ManarLayerWeights):
    """Token projections ``(K^M, Q, K, V)``, each ``(B, h, n, d)``."""
    return project(X, w.W_kM), project(X, w.W_q), project(X, w.W_k), project(X, w.W_v)


def _concept_parts(concepts):
    if isinstance(concepts, (tuple, list)) and len(concepts) == 3:
        return concepts
    parts = split_concept(concepts)
    return parts.q, parts.k, parts.v


def build_acr(concepts, KM: Tensor, V: Tensor, d: Optional[int] = None):
    """Contextualize each retrieved concept by itself plus every token.

    ``concepts`` is either a ``(..., m, 3d)`` tensor or a ``(c_q, c_k, c_v)``
    triple of ``(..., m, d)`` tensors.  Returns ``(acr (..., m, d), S)`` with
    ``S`` of shape ``(..., m, n + 1)``; slot 0 is the self term.
    """
    cq, ck, cv = _concept_parts(concepts)
    d = d or cq.shape[-1]
    if cq.shape[-2] == 0:
        return cq, np.zeros(cq.shape[:-1] + (KM.shape[-2] + 1,), dtype=cq.dtype)
    inv = 1.0 / math.sqrt(d)
    self_logit = (cq * ck).sum(axis=-1, keepdims=True) * inv
    token_logits = (cq @ T.transpose(KM)) * inv
    S = T.softmax(T.concat([self_logit, token_logits], axis=-1), axis=-1)
    acr = S[..., 0:1] * cv + S[..., 1:] @ V
    return acr, S.data


def acr_decomposition(concepts, KM, V, d: Optional[int] = None) -> np.ndarray:
    """ACR rows rebuilt as ``S0 * c_v + (1 - S0) * A``.

    ``A`` is plain attention of the concept query over token keys and ``S0``
    the self-slot weight.  Algebraically identical to :func:`build_acr`.
    """
    cq, ck, cv = (np.asarray(getattr(p, "data", p)) for p in _concept_parts(concepts))
    KM = np.asarray(getattr(KM, "data", KM))
    V = np.asarray(getattr(V, "data", V))
    d = d or cq.shape[-1]
    inv = 1.0 / math.sqrt(d)
    a_self = (cq * ck).sum(axis=-1, keepdims=True) * inv
    a_tok = (cq @ np.swapaxes(KM, -1, -2)) * inv
    top = np.maximum(a_self, a_tok.max(axis=-1, keepdims=True))
    e_self = np.exp(a_self - top)
    e_tok = np.exp(a_tok - top)
    tok_sum = e_tok.sum(axis=-1, keepdims=True)
    s0 = e_self / (e_self + tok_sum)
    A = (e_tok / tok_sum) @ V
    return s0 * cv + (1.0 - s0) * A


def contextualize_tokens(Q, K, V, acr, W_kr, l: int, counter: Optional[ScoreCounter] = None):
    """Joint softmax per token over the ACR slots then its ROI slots.

    Returns ``(Y_head, S_hat, S_tilde)``; ``S_tilde`` uses the offset-aligned
    window layout of :func:`manar.attention.roi_mask`.
    """
    if acr is not None and acr.shape[-2] == 0:
        acr = None
    acr_keys = None if acr is None else acr @ W_kr
    out, s_hat, s_tilde, _, _ = joint_attention(Q, K, V, l, acr=acr, acr_keys=acr_keys, counter=counter)
    return out, s_hat, s_tilde


def manar_layer_forward(
    X: Tensor,
    w: ManarLayerWeights,
    cfg: ManarConfig,
    counter: Optional[ScoreCounter] = None,
):
    """Full multi-head MANAR layer; returns ``(Y, trace)``."""
    cfg.validate()
    Xb, single = as_batch(X)
    B, n, D = Xb.shape
    if D != cfg.D:
        raise ConfigError(f"input width {D} != configured D={cfg.D}")
    if w.memory.mode != cfg.key_mode:
        raise ConfigError(f"memory mode {w.memory.mode} != configured key_mode {cfg.key_mode}")
    d, m = cfg.d, cfg.m

    KM, Q, K, V = conceptualize(Xb, w)
    trace = AttentionTrace(values=V.data, head_out=None, queries=Q.data, keys=K.data)
    acr = None
    if m:
        sigma = build_search_patterns(Xb, w.search)
        concept, idx, s = retrieve(sigma, w.memory, cfg.k_top)
        parts = split_concept(concept)
        acr, S = build_acr((parts.q, parts.k, parts.v), KM, V, d)
        if counter is not None:
            counter.integration += int(np.prod(S.shape))
        trace.search_patterns = sigma.data
        trace.retrieved_indices = idx
        trace.retrieval_weights = s
        trace.concepts = concept.data
        trace.acr = acr.data
        trace.integration = S
        trace.acr_keys = KM.data
    H, s_hat, s_tilde = contextualize_tokens(Q, K, V, acr, w.W_kr, cfg.l, counter)
    trace.head_out = H.data
    trace.broadcast_acr = s_hat if s_hat is not None else np.zeros(s_tilde.shape[:-1] + (0,), s_tilde.dtype)
    trace.broadcast_local = s_tilde
    Y = merge_heads(H, w.W_o)
    return (Y.reshape(n, D) if single else Y), trace


def manar_entries(n: int, m: int, l: int, h: int = 1) -> int:
    """Closed-form softmax score entries per sequence: integration + broadcasting."""
    return h * (m * (n + 1) + n * m + roi_total(n, l))
