"""Variance of cumulative importance-weight products, simulated and measured.

For iid per-token weights with mean 1 and variance s2, the product over L
tokens has variance (1 + s2)^L - 1 exactly.  The policy measurement compares
that statistic for dense-over-behaviour ratios with the shadow-recomputed
ratios, which should be identically 1.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .learner import pack, policy_logprobs, gather
from .rollout import generate_sparse
from .tasks import make_instance


@dataclass(frozen=True)
class WeightModel:
    sigma2: float
    L: int
    n_samples: int = 10 ** 6
    kind: str = "two_point"   # or "lognormal"

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        if self.kind == "two_point" and self.sigma2 > 1:
            raise ValueError("two-point weights need sigma2 <= 1 to stay non-negative")
        if self.kind not in ("two_point", "lognormal"):
            raise ValueError(f"unknown weight model {self.kind!r}")
        if self.L < 1:
            raise ValueError("L must be >= 1")


def closed_form_variance(sigma2, L):
    """Var of a product of L iid mean-one weights with variance sigma2."""
    if sigma2 < 0 or L < 1:
        raise ValueError("need sigma2 >= 0 and L >= 1")
    return (1.0 + sigma2) ** L - 1.0


def sample_products(model, rng, chunk=200_000):
    """Draw ``model.n_samples`` independent products of L weights."""
    out = np.empty(model.n_samples)
    s = np.sqrt(model.sigma2)
    if model.kind == "lognormal":
        s2 = np.log1p(model.sigma2)
        mu = -0.5 * s2
    for start in range(0, model.n_samples, chunk):
        n = min(chunk, model.n_samples - start)
        if model.kind == "two_point":
            # number of "up" factors among L fair coin flips
            ups = rng.binomial(model.L, 0.5, size=n)
            out[start:start + n] = (1.0 + s) ** ups * (1.0 - s) ** (model.L - ups)
        else:
            # sum of L iid normals in log space
            logs = rng.normal(mu * model.L, np.sqrt(s2 * model.L), size=n)
            out[start:start + n] = np.exp(logs)
    return out


def simulate_product_variance(model, rng):
    if model.n_samples < 10 ** 4:
        raise ValueError("n_samples must be >= 1e4")
    if model.sigma2 == 0:
        return 0.0
    rho = sample_products(model, rng)
    return float(np.var(rho, ddof=1))


def log_growth_slope(lengths, variances):
    """Least-squares slope and R^2 of ln(var + 1) against L."""
    x = np.asarray(lengths, dtype=np.float64)
    y = np.log(np.asarray(variances, dtype=np.float64) + 1.0)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(r2)


def measure_policy_ratio_variance(cfg, params, task, lengths, rollout_cfg, mode="ir",
                                  n_prompts=8, seed=0):
    """Sample variance of the cumulative ratio over the first L generated tokens.

    One rollout of ``max(lengths)`` tokens is drawn per prompt (stop token
    disabled) and prefixes are scored, so all L share the same trajectories.
    ``mode="ir"`` puts the dense recompute in the numerator; ``mode="smd"``
    uses the shadow recompute.
    """
    if mode not in ("ir", "smd"):
        raise ValueError("mode must be 'ir' or 'smd'")
    Lmax = max(lengths)
    rc = replace(rollout_cfg, max_new_tokens=Lmax, stop_token=None)
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n_prompts):
        inst = make_instance(task, rng)
        for k in range(rc.K):
            trajs.append(generate_sparse(cfg, params, inst.prompt, rc, seed=(seed, i, k)))
    packed = pack(trajs)
    with nc.no_grad():
        lp = gather(policy_logprobs(cfg, params, packed, mode == "smd", rc.temperature),
                    packed.chosen).data
    diff = (lp - packed.behavior).reshape(len(trajs), Lmax)
    cum = np.cumsum(diff, axis=1)
    return {L: float(np.var(np.exp(cum[:, L - 1]), ddof=1)) for L in lengths}
