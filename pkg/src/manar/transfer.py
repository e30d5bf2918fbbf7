"""Weight-copy transfer from standard attention into a MANAR layer."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .attention import MhaWeights, mha_forward
from .config import ConfigError, ManarConfig
from .layer import ManarLayerWeights, manar_layer_forward
from .tensor import Tensor, no_grad

COPIED = ("W_q", "W_k", "W_v", "W_kM", "W_o")

FreezeMask = dict  # parameter name -> trainable flag


def _copy_into(dst: Tensor, src: Tensor, name: str) -> None:
    if dst.shape != src.shape:
        raise ConfigError(f"{name}: source shape {src.shape} != destination shape {dst.shape}")
    dst.data = np.array(src.data, dtype=dst.dtype, copy=True)


def copy_mha_weights(src: MhaWeights, dst: ManarLayerWeights) -> FreezeMask:
    """Copy q/k/v/out projections into ``dst`` and return the freeze mask.

    The MHA key goes to the contextualization key ``W_k`` and also seeds the
    ACR key ``W_kM``.  Memory-related parameters stay trainable.
    """
    if (src.model_dim, src.heads, src.head_dim) != (dst.W_q.shape[1], dst.W_q.shape[0], dst.W_q.shape[2]):
        raise ConfigError(
            f"head layout mismatch: MHA (D={src.model_dim}, h={src.heads}, d={src.head_dim}) "
            f"vs MANAR {tuple(dst.W_q.shape)}"
        )
    _copy_into(dst.W_q, src.W_q, "W_q")
    _copy_into(dst.W_k, src.W_k, "W_k")
    _copy_into(dst.W_v, src.W_v, "W_v")
    _copy_into(dst.W_kM, src.W_k, "W_kM")
    _copy_into(dst.W_o, src.W_o, "W_o")
    return {name: name not in COPIED for name in dst.parameters()}


def staged_unfreeze(mask: FreezeMask, step: int, thaw_step: int) -> FreezeMask:
    if thaw_step < 0:
        raise ValueError(f"thaw_step must be >= 0, got {thaw_step}")
    if step >= thaw_step:
        return {name: True for name in mask}
    return dict(mask)


def frozen_names(mask: FreezeMask) -> set:
    return {name for name, trainable in mask.items() if not trainable}


def equivalence_check(
    src: MhaWeights,
    X: Tensor,
    cfg: Optional[ManarConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max abs difference between MHA and a weight-copied MANAR with ``m = 0, l >= n``."""
    n = X.shape[-2]
    if cfg is None:
        cfg = ManarConfig(D=src.model_dim, h=src.heads, M=1, m=0, l=max(n, 1), k_top=1)
    if cfg.m != 0 or cfg.l < n:
        raise ConfigError(f"equivalence needs m=0 and l >= n (got m={cfg.m}, l={cfg.l}, n={n})")
    rng = rng or np.random.default_rng(0)
    dst = ManarLayerWeights.init(cfg, rng, dtype=src.W_q.dtype)
    copy_mha_weights(src, dst)
    with no_grad():
        y_manar, _ = manar_layer_forward(X, dst, cfg)
        y_mha, _ = mha_forward(X, src)
    return float(np.max(np.abs(y_manar.data.astype(np.float64) - y_mha.data.astype(np.float64))))
