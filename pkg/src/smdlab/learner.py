"""Group-relative policy updates over sparse-rollout trajectories.

Modes differ only in which attention pattern the learner uses to recompute
log-probs and in how off-policy tokens are reweighted:

* ``smd``        shadow-masked recompute + dense->shadow distillation
* ``dense``      dense rollouts, dense recompute (reference run)
* ``naive``      sparse rollouts, dense recompute, no correction
* ``ir``         as naive, per-token weights clip(pi_dense / pi_behavior)
* ``ir-reject``  as ir, after dropping the most deviated trajectories
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numcore as nc
from .model import forward_dense, forward_shadow, zero_grads

log = logging.getLogger(__name__)

MODES = ("smd", "dense", "naive", "ir", "ir-reject")
ADV_EPS = 1e-8


@dataclass(frozen=True)
class LearnerConfig:
    clip_eps: float = 0.2
    beta: float = 0.01
    lam: float = 0.1
    lr: float = 3e-4
    epochs: int = 1
    mode: str = "smd"
    ir_low: float = 0.8
    ir_high: float = 1.2
    reject_fraction: float = 0.2
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown learner mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.reject_fraction < 1.0:
            raise ValueError("reject_fraction must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class GroupBatch:
    prompt: tuple
    trajectories: list
    advantages: np.ndarray = None

    def __post_init__(self):
        if self.advantages is None:
            self.advantages = compute_advantages([t.reward for t in self.trajectories])


@dataclass
class LossBreakdown:
    pg: float
    ref_kl: float
    distill: float
    total: float
    ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ratio_variance: float = 0.0
    applied_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    clip_fraction: float = 0.0
    consumed: int = 0
    generated: int = 0


def compute_advantages(rewards):
    """(r - mean) / (population std + 1e-8)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    return (r - r.mean()) / (r.std() + ADV_EPS)


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------


@dataclass
class Packed:
    tokens: np.ndarray        # [B, T]
    masks: list               # ShadowMask per row
    rows: tuple               # (batch_idx, query_pos), one per generated token
    chosen: np.ndarray        # [N]
    behavior: np.ndarray      # [N]
    owner: np.ndarray         # [N] trajectory index
    lengths: np.ndarray       # [B] generated tokens per trajectory

    @property
    def seg_sum(self):
        s = np.zeros((len(self.lengths), len(self.owner)))
        s[self.owner, np.arange(len(self.owner))] = 1.0
        return s


def pack(trajectories):
    T = max(len(t.tokens) for t in trajectories)
    toks = np.zeros((len(trajectories), T), dtype=np.int64)
    b_idx, q_idx, chosen, behavior, owner, lengths = [], [], [], [], [], []
    for b, tr in enumerate(trajectories):
        seq = tr.tokens
        toks[b, : len(seq)] = seq
        P, G = len(tr.prompt_tokens), len(tr.generated_tokens)
        b_idx.extend([b] * G)
        q_idx.extend(range(P - 1, P - 1 + G))
        chosen.extend(tr.generated_tokens)
        behavior.extend(tr.behavior_logprobs)
        owner.extend([b] * G)
        lengths.append(G)
    return Packed(toks, [t.shadow_mask for t in trajectories],
                  (np.asarray(b_idx), np.asarray(q_idx)), np.asarray(chosen, dtype=np.int64),
                  np.asarray(behavior, dtype=np.float64), np.asarray(owner), np.asarray(lengths))


def policy_logprobs(cfg, params, packed, shadow, temperature=1.0):
    """Full-vocabulary log-probs [N, V] at every generation-predicting query."""
    if shadow:
        if any(m is None for m in packed.masks):
            raise ValueError("shadow recompute needs a mask on every trajectory")
        logits = forward_shadow(cfg, params, packed.tokens, packed.masks, rows=packed.rows)
    else:
        logits = forward_dense(cfg, params, packed.tokens, rows=packed.rows)
    return nc.log_softmax_last(logits * (1.0 / temperature))


def gather(lp_full, chosen):
    return nc.getitem(lp_full, (np.arange(len(chosen)), chosen))


def _full_kl(lp_p, lp_q):
    """Per-row KL(p || q) over the vocabulary; gradients flow through both args."""
    return nc.tsum(nc.exp(lp_p) * (lp_p - lp_q), axis=-1)


def distill_kl(dense_lp, shadow_lp, seg_sum):
    """Mean over trajectories of summed token KL(sg[dense] || shadow)."""
    teacher = nc.detach(dense_lp)
    p = np.exp(teacher.data)
    tok = nc.tsum(nc.Tensor(p) * (teacher - shadow_lp), axis=-1)
    per_traj = nc.matmul(nc.Tensor(seg_sum), tok.reshape(-1, 1))
    return per_traj.mean()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _recompute_shadow(mode):
    return mode in ("smd", "dense")


def _flat(groups):
    trajs, adv = [], []
    for g in groups:
        trajs.extend(g.trajectories)
        adv.extend(g.advantages)
    return trajs, np.asarray(adv, dtype=np.float64)


def policy_loss(cfg, params, ref_params, groups, config, old_logprobs=None):
    """Clipped surrogate minus beta * KL(pi || pi_ref), plus lambda * distillation.

    Returns ``(total Tensor, LossBreakdown)``.  Which attention pattern the
    learner uses follows ``config.mode``.
    """
    trajs, adv = _flat(groups)
    packed = pack(trajs)
    shadow = _recompute_shadow(config.mode)
    T = config.temperature
    lp_full = policy_logprobs(cfg, params, packed, shadow, T)
    lp_tok = gather(lp_full, packed.chosen)
    old = lp_tok.data if old_logprobs is None else np.asarray(old_logprobs)
    ratio = nc.exp(lp_tok - nc.Tensor(old))
    a_tok = nc.Tensor(adv[packed.owner])
    eps = config.clip_eps
    surr = nc.minimum(ratio * a_tok, nc.clip(ratio, 1 - eps, 1 + eps) * a_tok)
    weights = np.ones(len(packed.chosen))
    if config.mode in ("ir", "ir-reject"):
        # recompute path is dense here, so this is pi_dense / pi_behavior
        weights = np.clip(np.exp(lp_tok.data - packed.behavior), config.ir_low, config.ir_high)
        surr = surr * nc.Tensor(weights)

    with nc.no_grad():
        ref_full = policy_logprobs(cfg, ref_params, packed, shadow, T)
    kl_tok = _full_kl(lp_full, ref_full)

    seg_sum = packed.seg_sum
    seg_mean = seg_sum / packed.lengths[:, None]
    per_traj = nc.matmul(nc.Tensor(seg_mean), (surr - kl_tok * config.beta).reshape(-1, 1))
    pg = -per_traj.mean()

    distill = nc.Tensor(0.0)
    if config.mode == "smd" and config.lam > 0:
        with nc.no_grad():
            dense_full = policy_logprobs(cfg, params, packed, False, T)
        distill = distill_kl(dense_full, lp_full, seg_sum)
    total = pg + distill * config.lam

    log_ratio = seg_sum @ (lp_tok.data - packed.behavior)
    ratios = np.exp(log_ratio)
    clipped = np.abs(ratio.data - np.clip(ratio.data, 1 - eps, 1 + eps)) > 0
    ref_kl = float((seg_mean @ kl_tok.data).mean())
    info = LossBreakdown(
        pg=float(pg.data), ref_kl=ref_kl, distill=float(distill.data), total=float(total.data),
        ratios=ratios, ratio_variance=float(np.var(ratios, ddof=1)) if len(ratios) > 1 else 0.0,
        applied_weights=weights, clip_fraction=float(clipped.mean()),
        consumed=len(trajs), generated=len(trajs))
    return total, info


def shadow_policy_loss(cfg, params, ref_params, groups, config, old_logprobs=None):
    """Shadow-masked clipped surrogate with shadow-masked reference KL (no distillation)."""
    return policy_loss(cfg, params, ref_params, groups,
                       replace(config, mode="smd", lam=0.0), old_logprobs)


def distill_loss(cfg, params, groups, temperature=1.0):
    trajs, _ = _flat(groups)
    packed = pack(trajs)
    with nc.no_grad():
        dense = policy_logprobs(cfg, params, packed, False, temperature)
    shadow = policy_logprobs(cfg, params, packed, True, temperature)
    return distill_kl(dense, shadow, packed.seg_sum)


# ---------------------------------------------------------------------------
# rejection
# ---------------------------------------------------------------------------


def dense_log_ratios(cfg, params, groups, temperature=1.0):
    """Per-trajectory log rho = sum_t (dense log-prob - behavior log-prob), per group."""
    out = []
    for g in groups:
        packed = pack(g.trajectories)
        with nc.no_grad():
            lp = gather(policy_logprobs(cfg, params, packed, False, temperature), packed.chosen).data
        out.append(packed.seg_sum @ (lp - packed.behavior))
    return out


def rejection_filter(groups, fraction, log_rho):
    """Drop the ceil(fraction * N) trajectories with the largest |log rho|.

    A group is never cut below two members; the next most deviated
    trajectory elsewhere is dropped instead.  Advantages are recomputed on
    the survivors.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    flat = [(abs(float(lr)), gi, ti) for gi, g in enumerate(log_rho) for ti, lr in enumerate(g)]
    n_drop = math.ceil(fraction * len(flat) - 1e-9)
    if n_drop == 0:
        return list(groups)
    # most deviated first; stable, so ties drop the earlier trajectory
    order = sorted(range(len(flat)), key=lambda i: -flat[i][0])
    sizes = [len(g.trajectories) for g in groups]
    dropped = set()
    for i in order:
        if len(dropped) == n_drop:
            break
        _, gi, ti = flat[i]
        if sizes[gi] <= 2:
            log.warning("rejection would leave group %d with fewer than 2 trajectories; keeping it", gi)
            continue
        sizes[gi] -= 1
        dropped.add((gi, ti))
    out = []
    for gi, g in enumerate(groups):
        keep = [t for ti, t in enumerate(g.trajectories) if (gi, ti) not in dropped]
        out.append(GroupBatch(g.prompt, keep))
    return out


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------


def _param_grads(params):
    return {k: t.grad for k, t in params.items() if t.grad is not None}


def update(cfg, params, ref_params, opt_state, groups, config):
    """Run ``config.epochs`` optimiser steps on one batch; returns the first epoch's breakdown."""
    generated = sum(len(g.trajectories) for g in groups)
    if config.mode == "ir-reject":
        log_rho = dense_log_ratios(cfg, params, groups, config.temperature)
        groups = rejection_filter(groups, config.reject_fraction, log_rho)
    old = None
    if config.epochs > 1:
        trajs, _ = _flat(groups)
        packed = pack(trajs)
        with nc.no_grad():
            old = gather(policy_logprobs(cfg, params, packed, _recompute_shadow(config.mode),
                                         config.temperature), packed.chosen).data
    first = None
    for _ in range(config.epochs):
        zero_grads(params)
        total, info = policy_loss(cfg, params, ref_params, groups, config, old)
        nc.backward(total)
        arrays = {k: t.data for k, t in params.items()}
        nc.adam_step(arrays, _param_grads(params), opt_state, config.lr)
        first = first or info
    first.generated = generated
    return groups, first


def smd_update(cfg, params, ref_params, opt_state, groups, config):
    return update(cfg, params, ref_params, opt_state, groups, replace(config, mode="smd"))


def naive_update(cfg, params, ref_params, opt_state, groups, config):
    return update(cfg, params, ref_params, opt_state, groups, replace(config, mode="naive", lam=0.0))


def ir_update(cfg, params, ref_params, opt_state, groups, config, reject=False):
    mode = "ir-reject" if reject else "ir"
    return update(cfg, params, ref_params, opt_state, groups, replace(config, mode=mode))
