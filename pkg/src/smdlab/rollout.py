"""Trajectory generation under a KV-compressed (or dense) cache."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .kvcache import EvictionPolicy, Policy, ShadowMask, enforce_budget, record_eviction, score_heavy_hitters
from .model import incremental_step, new_cache, prefill
from .tasks import STOP


@dataclass(frozen=True)
class RolloutConfig:
    K: int = 4
    temperature: float = 1.0
    max_new_tokens: int = 3
    policy: EvictionPolicy = field(default_factory=EvictionPolicy)
    compression_ratio: float = 0.5
    stop_token: int | None = STOP

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2 for group normalisation")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.compression_ratio < 1.0:
            raise ValueError("compression_ratio must be in [0, 1)")

    @property
    def keep_fraction(self):
        return 1.0 - self.compression_ratio

    def dense(self):
        return replace(self, policy=EvictionPolicy(Policy.NONE), compression_ratio=0.0)


@dataclass
class Trajectory:
    prompt_tokens: list
    generated_tokens: list
    behavior_logprobs: np.ndarray
    shadow_mask: ShadowMask
    reward: float = 0.0
    rng_seed: tuple = ()

    @property
    def tokens(self):
        """Tokens actually fed to the model (the last sample is never fed back)."""
        return list(self.prompt_tokens) + list(self.generated_tokens[:-1])

    def to_record(self):
        return {
            "seed": list(self.rng_seed),
            "prompt": list(self.prompt_tokens),
            "generated": list(self.generated_tokens),
            "behavior_logprobs": [float(x) for x in self.behavior_logprobs],
            "mask": self.shadow_mask.to_record(),
            "reward": float(self.reward),
        }

    @classmethod
    def from_record(cls, rec):
        return cls(rec["prompt"], rec["generated"], np.asarray(rec["behavior_logprobs"], dtype=np.float64),
                   ShadowMask.from_record(rec["mask"]), rec["reward"], tuple(rec["seed"]))


def sample_token(logits, temperature, rng):
    """Sample from softmax(logits / temperature); return (token, log-prob of it)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    logp = z - np.log(np.exp(z).sum())
    tok = int(rng.choice(len(logp), p=np.exp(logp)))
    return tok, float(logp[tok])


def _enforce(cache, mask, policy, step, rng):
    scores = None
    if policy.variant is Policy.HEAVY_HITTER:
        scores = [score_heavy_hitters(rows)[:, : cache.length] if rows else None
                  for rows in cache.attention_rows]
    evicted = enforce_budget(cache, policy, scores, step, rng)
    for (l, h), idx in evicted.items():
        record_eviction(mask, l, h, idx, step)
    return evicted


def greedy_token(logits, temperature):
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    tok = int(np.argmax(z))
    return tok, float(z[tok] - np.log(np.exp(z).sum()))


def generate(cfg, params, prompt, config, seed=(0,), greedy=False):
    """Sample one response, compressing the cache after prefill and every decode step."""
    prompt = [int(t) for t in prompt]
    if len(prompt) + config.max_new_tokens > cfg.max_seq_len:
        raise ValueError("prompt plus max_new_tokens exceeds max_seq_len")
    seq = np.random.SeedSequence(list(seed))
    sample_rng, evict_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    policy = config.policy
    window = max(policy.window, 1)
    cache = new_cache(cfg, keep_fraction=config.keep_fraction)
    mask = ShadowMask(cfg.n_layers, cfg.n_heads, len(prompt), len(prompt))
    logits = prefill(cfg, params, prompt, cache, history=window)
    P = len(prompt)
    _enforce(cache, mask, policy, P, evict_rng)

    generated, logps = [], []
    while True:
        if greedy:
            tok, lp = greedy_token(logits, config.temperature)
        else:
            tok, lp = sample_token(logits, config.temperature, sample_rng)
        generated.append(tok)
        logps.append(lp)
        if tok == config.stop_token or len(generated) >= config.max_new_tokens:
            break
        pos = P + len(generated) - 1
        logits = incremental_step(cfg, params, tok, cache, history=window)
        mask.extend(pos + 1)
        _enforce(cache, mask, policy, pos + 1, evict_rng)
    mask.extend(P + len(generated) - 1)
    return Trajectory(prompt, generated, np.asarray(logps), mask, rng_seed=tuple(seed))


def generate_sparse(cfg, params, prompt, config, seed=(0,)):
    return generate(cfg, params, prompt, config, seed)


def generate_dense(cfg, params, prompt, config, seed=(0,)):
    return generate(cfg, params, prompt, config.dense(), seed)
