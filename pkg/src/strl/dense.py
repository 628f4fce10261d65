"""Decision-Transformer-style dense baseline.

Shares embeddings, parameter layout and action head with the SNN policy; only
the block internals differ (dense Q/K/V, GELU feed-forward, no LIF neurons).
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .dataset import TokenBatch
from .numerics import Tensor
from .snn import (
    ModelConfig,
    SpikeTrace,
    action_head,
    attention_mask,
    block_params,
    embed_tokens,
    init_params,
    multihead,
)

__all__ = ["dense_attention", "feed_forward", "dense_block", "dt_forward", "init_params"]


def dense_attention(x: Tensor, bp: dict, cfg: ModelConfig, keep: np.ndarray, trace: SpikeTrace | None = None) -> Tensor:
    q = nx.matmul(x, bp["W_Q"])
    k = nx.matmul(x, bp["W_K"])
    v = nx.matmul(x, bp["W_V"])
    if trace is not None:
        trace.add_mac(4 * cfg.d * cfg.d)
        # scores and weighted sum: d MACs per visible (query, key) pair, twice
        visible = keep[:, 0] & trace.token_mask[:, :, None] & trace.token_mask[:, None, :]
        trace.n_mac += 2.0 * cfg.d * float(visible.sum())
    return nx.matmul(multihead(q, k, v, cfg.h, keep), bp["W_O"])


def feed_forward(x: Tensor, bp: dict, cfg: ModelConfig, trace: SpikeTrace | None = None) -> Tensor:
    if trace is not None:
        trace.add_mac(2 * cfg.d * cfg.d_hidden)
    return nx.linear(nx.gelu(nx.linear(x, bp["W_1"], bp["b_1"])), bp["W_2"], bp["b_2"])


def dense_block(x: Tensor, bp: dict, cfg: ModelConfig, keep: np.ndarray, trace: SpikeTrace | None = None) -> Tensor:
    def norm(t, n):
        return nx.layer_norm(t, bp[n + ".gain"], bp[n + ".bias"], cfg.ln_eps)

    if cfg.prenorm:
        z = x + dense_attention(norm(x, "norm1"), bp, cfg, keep, trace)
        return z + feed_forward(norm(z, "norm2"), bp, cfg, trace)
    z = norm(x + dense_attention(x, bp, cfg, keep, trace), "norm1")
    return norm(z + feed_forward(z, bp, cfg, trace), "norm2")


def dt_forward(batch: TokenBatch, params: dict[str, Tensor], cfg: ModelConfig, trace: SpikeTrace | None = None) -> Tensor:
    if trace is not None:
        trace.token_mask = np.asarray(batch.mask, dtype=bool)
    keep = attention_mask(np.asarray(batch.mask, dtype=bool), cfg.causal)
    x = embed_tokens(batch, params, cfg, trace)
    for i in range(cfg.L):
        x = dense_block(x, block_params(params, i), cfg, keep, trace)
    return action_head(x, params, cfg, trace)
