"""Toy sequence classifier used for training, gradchecks and CHM reports.

token + absolute position embedding -> N pre-norm blocks (contextualization
layer, feed-forward) -> final norm -> mean pool -> linear head.
The head is linear on the pooled features, so per-token evidence combines
additively; pairwise interactions must happen inside the blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import MhaWeights, glorot, mha_forward, windowed_mha_forward
from .config import ManarConfig
from .layer import ManarLayerWeights, manar_layer_forward
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab: int
    seq_len: int
    D: int = 32
    h: int = 2
    layers: int = 2
    kind: str = "manar"  # "manar" | "mha"
    M: int = 16
    m: int = 8
    l: int = 8
    k_top: int = 2
    key_mode: str = "flat"
    ffn: int = 64
    classes: int = 2
    window: Optional[int] = None  # half-window for windowed MHA; None = full

    def layer_config(self) -> ManarConfig:
        return ManarConfig(D=self.D, h=self.h, M=self.M, m=self.m, l=self.l,
                           k_top=self.k_top, key_mode=self.key_mode).validate()


@dataclass
class Block:
    attn: object
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class ToyModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None):
        self.cfg = cfg
        dtype = np.dtype(dtype or T.default_dtype())
        rng = np.random.default_rng(seed)
        D, F = cfg.D, cfg.ffn
        self.tok_emb = _param(rng.normal(0.0, 1.0, (cfg.vocab, D)).astype(dtype))
        self.pos_emb = _param(rng.normal(0.0, 1.0, (cfg.seq_len, D)).astype(dtype))
        self.blocks: list[Block] = []
        for _ in range(cfg.layers):
            if cfg.kind == "manar":
                attn = ManarLayerWeights.init(cfg.layer_config(), rng, dtype)
            elif cfg.kind == "mha":
                attn = MhaWeights.init(D, cfg.h, rng, dtype)
            else:
                raise ValueError(f"unknown layer kind {cfg.kind!r}")
            self.blocks.append(Block(
                attn=attn,
                ln1_g=_param(np.ones(D, dtype)), ln1_b=_param(np.zeros(D, dtype)),
                ln2_g=_param(np.ones(D, dtype)), ln2_b=_param(np.zeros(D, dtype)),
                W1=_param(glorot(rng, (D, F), D, F, dtype)), b1=_param(np.zeros(F, dtype)),
                W2=_param(glorot(rng, (F, D), F, D, dtype)), b2=_param(np.zeros(D, dtype)),
            ))
        self.lnf_g = _param(np.ones(D, dtype))
        self.lnf_b = _param(np.zeros(D, dtype))
        self.head_W = _param(glorot(rng, (D, cfg.classes), D, cfg.classes, dtype))
        self.head_b = _param(np.zeros(cfg.classes, dtype))

    def parameters(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            pre = f"layers.{i}."
            for name, p in blk.attn.parameters().items():
                out[pre + "attn." + name] = p
            for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "W1", "b1", "W2", "b2"):
                out[pre + name] = getattr(blk, name)
        out.update({"lnf_g": self.lnf_g, "lnf_b": self.lnf_b, "head.W": self.head_W, "head.b": self.head_b})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype)

    def _attend(self, blk: Block, x: Tensor):
        cfg = self.cfg
        if cfg.kind == "manar":
            return manar_layer_forward(x, blk.attn, cfg.layer_config())
        if cfg.window is None:
            return mha_forward(x, blk.attn)
        return windowed_mha_forward(x, blk.attn, cfg.window)

    def forward(self, tokens, with_traces: bool = False):
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.ndim == 1:
            tokens = tokens[None]
        n = tokens.shape[1]
        if n > self.cfg.seq_len:
            raise ValueError(f"sequence length {n} exceeds positional table {self.cfg.seq_len}")
        x = T.gather(self.tok_emb, tokens) + self.pos_emb[:n]
        traces = []
        for blk in self.blocks:
            a, tr = self._attend(blk, T.layer_norm(x, blk.ln1_g, blk.ln1_b))
            traces.append(tr)
            x = x + a
            hdn = T.gelu(T.layer_norm(x, blk.ln2_g, blk.ln2_b) @ blk.W1 + blk.b1)
            x = x + (hdn @ blk.W2 + blk.b2)
        pooled = T.layer_norm(x, self.lnf_g, self.lnf_b).mean(axis=1)
        logits = pooled @ self.head_W + self.head_b
        return (logits, traces) if with_traces else logits

    __call__ = forward

    def layer_traces(self, tokens) -> list:
        with T.no_grad():
            _, traces = self.forward(tokens, with_traces=True)
        return traces

    def loss(self, tokens, labels) -> Tensor:
        return T.cross_entropy(self.forward(tokens), labels)

    def predict(self, tokens, batch: int = 256) -> np.ndarray:
        tokens = np.asarray(tokens)
        out = []
        with T.no_grad():
            for i in range(0, len(tokens), batch):
                out.append(self.forward(tokens[i:i + batch]).data.argmax(axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)
