"""SNN Transformer policy: embeddings, multi-step LIF neurons, spiking blocks, action head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .dataset import DUMMY_ACTION, N_ACTIONS, TokenBatch
from .numerics import Tensor


@dataclass(frozen=True)
class LifConfig:
    alpha: float = 0.5
    theta: float = 1.0
    T_s: int = 4
    width: float = 2.0
    # gradient-check switches: smooth forward spikes and a differentiable reset
    smooth: bool = False
    detach_reset: bool = True

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not math.isfinite(self.theta):
            raise ValueError("theta must be finite")
        if self.T_s < 1:
            raise ValueError("T_s must be >= 1")
        if self.width <= 0:
            raise ValueError("surrogate width must be positive")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 256
    L: int = 6
    h: int = 8
    d_hidden: int = 1024
    S_max: int = 100
    n_actions: int = N_ACTIONS
    causal: bool = True
    prenorm: bool = True
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.h:
            raise ValueError(f"d={self.d} is not divisible by h={self.h}")
        if self.L < 1:
            raise ValueError("need at least one block")


BLOCK_PARAMS = ("W_Q", "W_K", "W_V", "W_O", "norm1.gain", "norm1.bias", "norm2.gain", "norm2.bias", "W_1", "b_1", "W_2", "b_2")


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> dict[str, Tensor]:
    """Normal(0, init_std) for projections and tables, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    d, dh = cfg.d, cfg.d_hidden

    def normal(*shape):
        return Tensor(rng.normal(0.0, cfg.init_std, size=shape), requires_grad=True, dtype=dtype)

    def const(v, *shape):
        return Tensor(np.full(shape, v), requires_grad=True, dtype=dtype)

    p = {
        "W_s": normal(d, 2),
        "W_a": normal(cfg.n_actions + 1, d),
        "W_r": normal(d, 1),
        "E_t": normal(cfg.S_max, d),
        "p": normal(cfg.S_max, d),
    }
    for i in range(cfg.L):
        pre = f"blocks.{i}."
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            p[pre + name] = normal(d, d)
        for n in ("norm1", "norm2"):
            p[pre + n + ".gain"] = const(1.0, d)
            p[pre + n + ".bias"] = const(0.0, d)
        p[pre + "W_1"] = normal(d, dh)
        p[pre + "b_1"] = const(0.0, dh)
        p[pre + "W_2"] = normal(dh, d)
        p[pre + "b_2"] = const(0.0, d)
    p["norm_f.gain"] = const(1.0, d)
    p["norm_f.bias"] = const(0.0, d)
    p["head.w_out"] = normal(d, cfg.n_actions)
    p["head.b_out"] = const(0.0, cfg.n_actions)
    return p


def block_params(params: dict[str, Tensor], i: int) -> dict[str, Tensor]:
    pre = f"blocks.{i}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def count_params(params: dict[str, Tensor]) -> int:
    return sum(t.data.size for t in params.values())


# ---------------------------------------------------------------- instrumentation


@dataclass
class SpikeTrace:
    """Per-site spike counts and operation tallies from one instrumented forward."""

    sites: dict = field(default_factory=dict)  # name -> [spikes, slots]
    n_mac: float = 0.0
    n_ac: float = 0.0
    token_mask: np.ndarray | None = None

    def tokens(self) -> int:
        return int(self.token_mask.sum())

    def record(self, site: str, spikes: np.ndarray, fan_out) -> None:
        """``spikes`` is [T_s, B, S, ...]; ``fan_out`` is a scalar or a [B, S] array."""
        m = self.token_mask.astype(np.float64)
        per_token = spikes.reshape(spikes.shape[0], *self.token_mask.shape, -1).sum(axis=(0, 3))
        n_spikes = float((per_token * m).sum())
        slots = float(m.sum()) * spikes.shape[0] * int(np.prod(spikes.shape[3:]))
        acc = self.sites.setdefault(site, [0.0, 0.0])
        acc[0] += n_spikes
        acc[1] += slots
        self.n_ac += float((per_token * m * fan_out).sum())

    def add_mac(self, per_token: float) -> None:
        self.n_mac += per_token * self.tokens()

    def firing_rates(self) -> dict[str, float]:
        return {k: (s / n if n else 0.0) for k, (s, n) in self.sites.items()}

    def mean_firing_rate(self) -> float:
        spikes = sum(s for s, _ in self.sites.values())
        slots = sum(n for _, n in self.sites.values())
        return spikes / slots if slots else 0.0

    def energy(self, e_mac: float = 4.6, e_ac: float = 0.9) -> float:
        return self.n_mac * e_mac + self.n_ac * e_ac

    def summary(self, e_mac: float = 4.6, e_ac: float = 0.9) -> dict:
        return {
            "firing_rates": self.firing_rates(),
            "mean_firing_rate": self.mean_firing_rate(),
            "n_mac": self.n_mac,
            "n_ac": self.n_ac,
            "energy_proxy": self.energy(e_mac, e_ac),
            "e_mac": e_mac,
            "e_ac": e_ac,
        }


def _keys_per_query(mask: np.ndarray, causal: bool) -> np.ndarray:
    n_valid = mask.sum(axis=1, keepdims=True)
    if causal:
        return np.broadcast_to(np.arange(1, mask.shape[1] + 1), mask.shape).astype(np.float64)
    return np.broadcast_to(n_valid, mask.shape).astype(np.float64)


def _queries_per_key(mask: np.ndarray, causal: bool) -> np.ndarray:
    n_valid = mask.sum(axis=1, keepdims=True)
    if causal:
        return np.maximum(n_valid - np.arange(mask.shape[1]), 0).astype(np.float64)
    return np.broadcast_to(n_valid, mask.shape).astype(np.float64)


# ---------------------------------------------------------------- LIF


def lif_multistep(currents: Tensor, cfg: LifConfig) -> tuple[Tensor, Tensor]:
    """Run LIF neurons over the leading micro-step axis of ``currents``.

    Per step: V = alpha*U + I, S = H(V - theta), U = V*(1 - S) (reset to zero).
    Returns the spike train [T_s, ...] and its mean over steps.
    """
    I = currents.data
    T = I.shape[0]
    dt = I.dtype
    alpha = dt.type(cfg.alpha)
    U = np.zeros(I.shape[1:], dtype=dt)
    Vs = np.empty_like(I)
    Ss = np.empty_like(I)
    for tau in range(T):
        V = alpha * U + I[tau]
        if cfg.smooth:
            S = nx.smooth_step(V, cfg.theta, cfg.width).astype(dt)
        else:
            S = (V > cfg.theta).astype(dt)
        U = V * (1 - S)
        Vs[tau] = V
        Ss[tau] = S

    def backward(gS):
        gI = np.empty_like(gS)
        gU = np.zeros(I.shape[1:], dtype=gS.dtype)
        for tau in range(T - 1, -1, -1):
            V, S = Vs[tau], Ss[tau]
            gS_tot = gS[tau] if cfg.detach_reset else gS[tau] - gU * V
            gV = gU * (1 - S) + gS_tot * nx.surrogate_grad(V, cfg.theta, cfg.width)
            gI[tau] = gV
            gU = alpha * gV
        return (gI,)

    spikes = nx._make(Ss, (currents,), backward, "lif")
    return spikes, nx.mean_axis0(spikes)


def lif_rate(x: Tensor, cfg: LifConfig, trace: SpikeTrace | None = None, site: str = "", fan_out=1.0) -> Tensor:
    """Drive LIF neurons with ``x`` repeated over T_s micro-steps; return the rate."""
    spikes, rate = lif_multistep(nx.expand(x, cfg.T_s), cfg)
    if trace is not None:
        trace.record(site, spikes.data, fan_out)
    return rate


# ---------------------------------------------------------------- layers


def embed_tokens(batch: TokenBatch, params: dict[str, Tensor], cfg: ModelConfig, trace: SpikeTrace | None = None) -> Tensor:
    """One token per step: W_s s + W_a[a_prev] + W_r G + E_t[t] + p[t]."""
    B, S = batch.mask.shape
    ts = np.asarray(batch.timesteps)
    if S > cfg.S_max or ts.max(initial=0) >= cfg.S_max:
        raise ValueError(f"timestep exceeds S_max={cfg.S_max}")
    states = Tensor(batch.states)
    rtg = Tensor(np.asarray(batch.rtg)[..., None])
    tok = nx.matmul(states, nx.transpose(params["W_s"]))
    tok = tok + nx.take_rows(params["W_a"], batch.prev_actions)
    tok = tok + nx.matmul(rtg, nx.transpose(params["W_r"]))
    tok = tok + nx.take_rows(params["E_t"], ts)
    tok = tok + nx.take_rows(params["p"], np.broadcast_to(np.arange(S), (B, S)))
    if trace is not None:
        trace.add_mac(3 * cfg.d)
    return tok


def attention_mask(batch_mask: np.ndarray, causal: bool) -> np.ndarray:
    """[B, 1, S, S] keep-mask: padded keys are dropped, future keys too when causal."""
    B, S = batch_mask.shape
    keep = np.broadcast_to(batch_mask[:, None, None, :], (B, 1, S, S))
    if causal:
        keep = keep & np.tril(np.ones((S, S), dtype=bool))
    # a padded query with no valid key left still needs a finite row
    keep = keep | np.eye(S, dtype=bool)
    return keep


def multihead(q: Tensor, k: Tensor, v: Tensor, h: int, keep: np.ndarray) -> Tensor:
    B, S, d = q.shape
    dh = d // h

    def heads(t):
        return nx.transpose(nx.reshape(t, (B, S, h, dh)), (0, 2, 1, 3))

    scores = nx.scale(nx.matmul(heads(q), nx.swap_last(heads(k))), 1.0 / math.sqrt(dh))
    attn = nx.softmax_rows(scores, keep)
    out = nx.matmul(attn, heads(v))
    return nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, S, d))


def spiking_attention(x: Tensor, bp: dict, cfg: ModelConfig, lif: LifConfig, keep: np.ndarray,
                      trace: SpikeTrace | None = None, tag: str = "") -> Tensor:
    """Rate-coded Q, K, V from LIF neurons, scaled dot-product attention, output LIF."""
    fan_q = fan_k = 1.0
    if trace is not None:
        # a Q spike is accumulated once per visible key, a K/V spike once per query seeing it
        trace.add_mac(3 * cfg.d * cfg.d)
        fan_q = _keys_per_query(trace.token_mask, cfg.causal)
        fan_k = _queries_per_key(trace.token_mask, cfg.causal)
    q = lif_rate(nx.matmul(x, bp["W_Q"]), lif, trace, tag + "attn.q", fan_q)
    k = lif_rate(nx.matmul(x, bp["W_K"]), lif, trace, tag + "attn.k", fan_k)
    v = lif_rate(nx.matmul(x, bp["W_V"]), lif, trace, tag + "attn.v", fan_k)
    o = nx.matmul(multihead(q, k, v, cfg.h, keep), bp["W_O"])
    if trace is not None:
        trace.add_mac(cfg.d * cfg.d)
    return lif_rate(o, lif, trace, tag + "attn.out", 1.0)


def spiking_mlp(x: Tensor, bp: dict, cfg: ModelConfig, lif: LifConfig,
                trace: SpikeTrace | None = None, tag: str = "") -> Tensor:
    if trace is not None:
        trace.add_mac(cfg.d * cfg.d_hidden)
    hid = lif_rate(nx.linear(x, bp["W_1"], bp["b_1"]), lif, trace, tag + "mlp.hidden", float(cfg.d))
    return lif_rate(nx.linear(hid, bp["W_2"], bp["b_2"]), lif, trace, tag + "mlp.out", 1.0)


def snn_block(x: Tensor, bp: dict, cfg: ModelConfig, lif: LifConfig, keep: np.ndarray,
              trace: SpikeTrace | None = None, tag: str = "") -> Tensor:
    def norm(t, n):
        return nx.layer_norm(t, bp[n + ".gain"], bp[n + ".bias"], cfg.ln_eps)

    if cfg.prenorm:
        z = x + spiking_attention(norm(x, "norm1"), bp, cfg, lif, keep, trace, tag)
        return z + spiking_mlp(norm(z, "norm2"), bp, cfg, lif, trace, tag)
    z = norm(x + spiking_attention(x, bp, cfg, lif, keep, trace, tag), "norm1")
    return norm(z + spiking_mlp(z, bp, cfg, lif, trace, tag), "norm2")


def action_head(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig, trace: SpikeTrace | None = None) -> Tensor:
    x = nx.layer_norm(x, params["norm_f.gain"], params["norm_f.bias"], cfg.ln_eps)
    if trace is not None:
        trace.add_mac(cfg.d * cfg.n_actions)
    return nx.linear(x, params["head.w_out"], params["head.b_out"])


def forward(batch: TokenBatch, params: dict[str, Tensor], cfg: ModelConfig, lif: LifConfig,
            trace: SpikeTrace | None = None) -> Tensor:
    """Logits [B, S, 4]; position t sees only steps <= t when ``cfg.causal``."""
    if trace is not None:
        trace.token_mask = np.asarray(batch.mask, dtype=bool)
    keep = attention_mask(np.asarray(batch.mask, dtype=bool), cfg.causal)
    x = embed_tokens(batch, params, cfg, trace)
    for i in range(cfg.L):
        x = snn_block(x, block_params(params, i), cfg, lif, keep, trace, f"blocks.{i}.")
    return action_head(x, params, cfg, trace)


def config_dict(cfg) -> dict:
    return asdict(cfg)
