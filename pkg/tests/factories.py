"""Small random inputs shared by the model tests."""
import numpy as np

from strl.dataset import DUMMY_ACTION, TokenBatch
from strl.snn import ModelConfig


def small_cfg(**kw) -> ModelConfig:
    base = dict(d=16, L=2, h=4, d_hidden=32, S_max=12)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(B: int, S: int, seed: int = 0, lengths=None) -> TokenBatch:
    rng = np.random.default_rng(seed)
    lengths = [S] * B if lengths is None else lengths
    mask = np.arange(S)[None, :] < np.asarray(lengths)[:, None]
    acts = rng.integers(0, 4, size=(B, S))
    prev = np.concatenate([np.full((B, 1), DUMMY_ACTION), acts[:, :-1]], axis=1)
    return TokenBatch(
        states=rng.normal(size=(B, S, 2)),
        prev_actions=prev,
        rtg=rng.normal(size=(B, S)),
        timesteps=np.broadcast_to(np.arange(S), (B, S)).copy(),
        target_actions=acts,
        mask=mask,
    )


def perturb_from(batch: TokenBatch, t: int, seed: int) -> TokenBatch:
    """Copy of ``batch`` with every input at steps >= t re-drawn."""
    rng = np.random.default_rng(seed)
    B, S = batch.mask.shape
    states = batch.states.copy()
    rtg = batch.rtg.copy()
    prev = batch.prev_actions.copy()
    states[:, t:] = rng.normal(size=(B, S - t, 2)) * 3
    rtg[:, t:] = rng.normal(size=(B, S - t)) * 3
    if t > 0:
        prev[:, t:] = rng.integers(0, 4, size=(B, S - t))
    return TokenBatch(states, prev, rtg, batch.timesteps.copy(), batch.target_actions.copy(), batch.mask.copy())
