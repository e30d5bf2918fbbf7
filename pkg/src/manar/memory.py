"""Trainable memory unit: search patterns, flat and product-key retrieval."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import glorot
from .tensor import Tensor, topk_indices


@dataclass
class MemoryUnit:
    """``M`` cells of concatenated (q, k, v) concepts plus their key tables.

    Flat mode keeps one ``(M, d)`` key table ``xi``.  Product mode keeps two
    half tables ``xi1, xi2`` of shape ``(sqrt(M), d/2)``; composite key ``j``
    is ``[xi1[j // r]; xi2[j % r]]`` with ``r = sqrt(M)``.
    """

    mu: Tensor
    mode: str = "flat"
    xi: Optional[Tensor] = None
    xi1: Optional[Tensor] = None
    xi2: Optional[Tensor] = None

    def __post_init__(self):
        if self.mode == "flat":
            if self.xi is None or self.xi.shape[0] != self.mu.shape[0]:
                raise ValueError("flat memory needs one key per cell")
        elif self.mode == "product":
            if self.xi1 is None or self.xi2 is None:
                raise ValueError("product memory needs both half-key tables")
            r = self.xi1.shape[0]
            if r * r != self.mu.shape[0] or self.xi2.shape[0] != r:
                raise ValueError(f"product memory needs M = sqrt(M)^2 cells, got M={self.mu.shape[0]}, sqrt={r}")
            if self.xi1.shape[1] + self.xi2.shape[1] != self.head_dim:
                raise ValueError("half-key widths must add up to the head width")
        else:
            raise ValueError(f"unknown memory mode {self.mode!r}")

    @property
    def size(self) -> int:
        return self.mu.shape[0]

    @property
    def head_dim(self) -> int:
        return self.mu.shape[1] // 3

    @classmethod
    def init(cls, M: int, d: int, rng: np.random.Generator, mode: str = "flat", dtype=None) -> "MemoryUnit":
        dtype = dtype or T.default_dtype()
        std = 1.0 / math.sqrt(d)
        normal = lambda shape: Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)
        mu = normal((M, 3 * d))
        if mode == "flat":
            return cls(mu=mu, mode="flat", xi=normal((M, d)))
        if mode != "product":
            raise ValueError(f"unknown memory mode {mode!r}")
        r = math.isqrt(M)
        if r * r != M or d % 2:
            raise ValueError(f"product keys need square M and even d (M={M}, d={d})")
        return cls(mu=mu, mode="product", xi1=normal((r, d // 2)), xi2=normal((r, d // 2)))

    def parameters(self) -> dict[str, Tensor]:
        if self.mode == "flat":
            return {"mu": self.mu, "xi": self.xi}
        return {"mu": self.mu, "xi1": self.xi1, "xi2": self.xi2}


@dataclass
class SearchPatternWeights:
    """Per-head mixers ``(h, m, d)`` and projections ``(h, D, d)``."""

    mixers: Tensor
    W_k: Tensor
    W_v: Tensor

    @classmethod
    def init(cls, D: int, h: int, m: int, rng: np.random.Generator, dtype=None) -> "SearchPatternWeights":
        dtype = dtype or T.default_dtype()
        d = D // h
        mixers = rng.normal(0.0, 1.0 / math.sqrt(d), size=(h, m, d)).astype(dtype)
        return cls(
            Tensor(mixers, requires_grad=True),
            Tensor(glorot(rng, (h, D, d), D, d, dtype), requires_grad=True),
            Tensor(glorot(rng, (h, D, d), D, d, dtype), requires_grad=True),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"mixers": self.mixers, "W_k_sp": self.W_k, "W_v_sp": self.W_v}


@dataclass
class RetrievalResult:
    indices: list
    weights: np.ndarray
    concept: Tensor


@dataclass
class RetrievedConcept:
    q: Tensor
    k: Tensor
    v: Tensor


def build_search_patterns(X: Tensor, w: SearchPatternWeights) -> Tensor:
    """Cross-attention of the mixers over the tokens.

    ``X`` of shape ``(n, D)`` gives ``(h, m, d)``; ``(B, n, D)`` gives
    ``(B, h, m, d)``.
    """
    single = X.ndim == 2
    Xb = X.reshape(1, *X.shape) if single else X
    if Xb.shape[-1] != w.W_k.shape[1]:
        raise ValueError(f"search-pattern projection {w.W_k.shape} does not accept input {X.shape}")
    B, n, D = Xb.shape
    Xh = Xb.reshape(B, 1, n, D)
    keys = Xh @ w.W_k
    vals = Xh @ w.W_v
    d = keys.shape[-1]
    P = T.softmax((w.mixers @ T.transpose(keys)) * (1.0 / math.sqrt(d)), axis=-1)
    sigma = P @ vals
    return sigma.reshape(sigma.shape[1:]) if single else sigma


def _select_flat(scores: np.ndarray, k: int) -> np.ndarray:
    return topk_indices(scores, k)


def select_product(s1: np.ndarray, s2: np.ndarray, k: int) -> np.ndarray:
    """Best ``k`` composite indices from per-half score vectors.

    Candidates are the ``k x k`` pairs of the per-half top-``k`` lists, ranked
    by summed score; ties go to the smaller composite index ``j1 * r + j2``.
    """
    r = s1.shape[-1]
    I1 = topk_indices(s1, k)
    I2 = topk_indices(s2, k)
    v1 = np.take_along_axis(s1, I1, axis=-1)
    v2 = np.take_along_axis(s2, I2, axis=-1)
    lead = s1.shape[:-1]
    cand = (v1[..., :, None] + v2[..., None, :]).reshape(lead + (k * k,))
    comp = (I1[..., :, None] * r + I2[..., None, :]).reshape(lead + (k * k,))
    order = np.lexsort((comp, -cand), axis=-1)[..., :k]
    return np.take_along_axis(comp, order, axis=-1)


def exhaustive_product(s1: np.ndarray, s2: np.ndarray, k: int) -> np.ndarray:
    """Reference for :func:`select_product`: rank all ``r * r`` composite keys.

    Same tie-break (smaller composite index first); cost ``O(r^2)``.
    """
    r = s1.shape[-1]
    full = (s1[..., :, None] + s2[..., None, :]).reshape(s1.shape[:-1] + (r * r,))
    comp = np.broadcast_to(np.arange(r * r), full.shape)
    order = np.lexsort((comp, -full), axis=-1)[..., :k]
    return np.take_along_axis(comp, order, axis=-1)


def retrieve(sigma: Tensor, mem: MemoryUnit, k_top: int):
    """Retrieve soft-combined concepts for search patterns ``(..., d)``.

    Returns ``(concepts (..., 3d), indices (..., k_top), weights (..., k_top))``.
    Indices are selected without gradient; the softmax weights and cell
    contents stay on the tape.
    """
    d = sigma.shape[-1]
    if d != mem.head_dim:
        raise ValueError(f"search pattern width {d} != memory head width {mem.head_dim}")
    lead = sigma.shape[:-1]
    s5 = sigma.reshape(*lead, 1, d)
    if mem.mode == "flat":
        if k_top > mem.size:
            raise ValueError(f"k_top={k_top} exceeds memory size {mem.size}")
        idx = _select_flat(sigma.data @ mem.xi.data.T, k_top)
        scores = (s5 @ T.transpose(T.gather(mem.xi, idx))).reshape(*lead, k_top)
    else:
        r = mem.xi1.shape[0]
        if k_top > r:
            raise ValueError(f"k_top={k_top} exceeds sqrt(M)={r}")
        half = mem.xi1.shape[1]
        sd = sigma.data
        idx = select_product(sd[..., :half] @ mem.xi1.data.T, sd[..., half:] @ mem.xi2.data.T, k_top)
        q1 = s5[..., :half]
        q2 = s5[..., half:]
        scores = (q1 @ T.transpose(T.gather(mem.xi1, idx // r))) + (q2 @ T.transpose(T.gather(mem.xi2, idx % r)))
        scores = scores.reshape(*lead, k_top)
    s = T.softmax(scores, axis=-1)
    concept = (s.reshape(*lead, 1, k_top) @ T.gather(mem.mu, idx)).reshape(*lead, 3 * d)
    return concept, idx, s.data


def _single(sigma, mem: MemoryUnit, k_top: int, mode: str) -> RetrievalResult:
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    if sigma.ndim != 1:
        raise ValueError(f"expected a single search pattern vector, got shape {sigma.shape}")
    if mem.mode != mode:
        raise ValueError(f"memory is in {mem.mode} mode, not {mode}")
    concept, idx, s = retrieve(sigma, mem, k_top)
    return RetrievalResult([int(i) for i in idx], s, concept)


def retrieve_flat(sigma, mem: MemoryUnit, k_top: int) -> RetrievalResult:
    return _single(sigma, mem, k_top, "flat")


def retrieve_product(sigma, mem: MemoryUnit, k_top: int) -> RetrievalResult:
    return _single(sigma, mem, k_top, "product")


def split_concept(concept) -> RetrievedConcept:
    """Cut a ``(..., 3d)`` concept into its q, k, v thirds."""
    width = concept.shape[-1]
    if width % 3:
        raise ValueError(f"concept width {width} is not a multiple of 3")
    d = width // 3
    return RetrievedConcept(concept[..., :d], concept[..., d:2 * d], concept[..., 2 * d:])
