"""Experiment orchestration: training runs, sweeps, memory bench, variance lab."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..kvcache import EvictionPolicy, KVCache, MemoryLedger, Policy, learner_peak_ratio, \
    ledger_peak_ratio, mask_simulate, physical_slice
from ..learner import GroupBatch, update
from ..model import copy_params, forward_dense, init_params, load_checkpoint, save_checkpoint, zero_grads
from ..rollout import generate, generate_dense, generate_sparse
from ..tasks import make_instance, reward, target_sequence
from ..variance_lab import WeightModel, closed_form_variance, log_growth_slope, \
    measure_policy_ratio_variance, simulate_product_variance
from .config import dump_config
from .records import MetricRecord, MetricsWriter, write_jsonl

log = logging.getLogger(__name__)

SFT_STREAM, TRAIN_STREAM, EVAL_STREAM = 11, 13, 17


def _threads():
    try:
        return max(1, int(os.environ.get("SMD_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# warm start
# ---------------------------------------------------------------------------


def sft_pretrain(cfg, params, task, steps, batch, lr, seed):
    """Teacher-forced cross-entropy on oracle answers (dense attention)."""
    rng = np.random.default_rng([seed, SFT_STREAM])
    state = nc.AdamState()
    for _ in range(steps):
        insts = [make_instance(task, rng) for _ in range(batch)]
        seqs = [list(i.prompt) + target_sequence(i) for i in insts]
        T = max(len(s) for s in seqs) - 1
        toks = np.zeros((batch, T), dtype=np.int64)
        b_idx, q_idx, tgt = [], [], []
        for b, (inst, s) in enumerate(zip(insts, seqs)):
            toks[b, : len(s) - 1] = s[:-1]
            P = len(inst.prompt)
            for j in range(P - 1, len(s) - 1):
                b_idx.append(b)
                q_idx.append(j)
                tgt.append(s[j + 1])
        zero_grads(params)
        logits = forward_dense(cfg, params, toks, rows=(np.asarray(b_idx), np.asarray(q_idx)))
        lp = nc.log_softmax_last(logits)
        loss = -nc.getitem(lp, (np.arange(len(tgt)), np.asarray(tgt))).mean()
        nc.backward(loss)
        nc.adam_step({k: t.data for k, t in params.items()},
                     {k: t.grad for k, t in params.items() if t.grad is not None}, state, lr)
    return params


def _sft_key(exp):
    t = exp.train
    text = repr((asdict(exp.model), asdict(exp.task), t.sft_steps, t.sft_batch, t.sft_lr, exp.seed))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def initial_params(exp):
    """Seeded init plus the supervised warm start; reuses ``train.sft_cache`` when set."""
    if not exp.train.sft_steps:
        return init_params(exp.model, exp.seed)
    path = Path(exp.train.sft_cache) / f"sft-{_sft_key(exp)}.ckpt" if exp.train.sft_cache else None
    if path is not None and path.exists():
        return load_checkpoint(path)
    params = init_params(exp.model, exp.seed)
    sft_pretrain(exp.model, params, exp.task, exp.train.sft_steps, exp.train.sft_batch,
                 exp.train.sft_lr, exp.seed)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        save_checkpoint(tmp, params)
        os.replace(tmp, path)
    return params


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _memory_method(mode):
    return {"smd": "mask", "ir": "slice", "ir-reject": "slice"}.get(mode, "dense")


def rollout_phase(exp, params, step):
    """K trajectories for each prompt of this step; frozen params, per-rollout RNG."""
    rng = np.random.default_rng([exp.seed, TRAIN_STREAM, step])
    insts = [make_instance(exp.task, rng) for _ in range(exp.train.prompts_per_step)]
    gen = generate_dense if exp.learner.mode == "dense" else generate_sparse
    jobs = [(i, k) for i in range(len(insts)) for k in range(exp.rollout.K)]

    def run(job):
        i, k = job
        tr = gen(exp.model, params, insts[i].prompt, exp.rollout, seed=(exp.seed, step, i, k))
        tr.reward = reward(insts[i], tr.generated_tokens)
        return tr

    n = _threads()
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            trajs = list(pool.map(run, jobs))
    else:
        trajs = [run(j) for j in jobs]
    K = exp.rollout.K
    return insts, [GroupBatch(insts[i].prompt, trajs[i * K:(i + 1) * K]) for i in range(len(insts))]


def run_train(exp, out_dir=None, params=None, write=True):
    """Rollouts then one learner update per step; returns a summary dict."""
    exp.validate()
    out = Path(out_dir or exp.train.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(exp))
    params = params if params is not None else initial_params(exp)
    ref = copy_params(params, requires_grad=False)
    state = nc.AdamState()
    writer = MetricsWriter(out / "metrics.tsv") if write else None
    rewards = []
    consumed = generated = 0
    method = _memory_method(exp.learner.mode)
    try:
        for step in range(exp.train.steps):
            _, groups = rollout_phase(exp, params, step)
            r = np.array([t.reward for g in groups for t in g.trajectories])
            trajs = [t for g in groups for t in g.trajectories]
            kept, info = update(exp.model, params, ref, state, groups, exp.learner)
            consumed += info.consumed
            generated += info.generated
            rewards.append(float(r.mean()))
            evicted = np.mean([t.shadow_mask.n_evicted() /
                               max(1, t.shadow_mask.length * exp.model.n_layers * exp.model.n_heads)
                               for t in trajs])
            peak = max(learner_peak_ratio(t.shadow_mask, exp.model.d_head, method) for t in trajs)
            rec = MetricRecord(
                step=step, reward_mean=float(r.mean()), reward_std=float(r.std()),
                ratio_mean=float(info.ratios.mean()), ratio_var=info.ratio_variance,
                loss_pg=info.pg, loss_ref_kl=info.ref_kl, loss_distill=info.distill,
                loss_total=info.total, peak_mem_ratio=peak, consumed=info.consumed,
                generated=info.generated, clip_fraction=info.clip_fraction,
                evicted_fraction=float(evicted))
            if writer:
                writer.write(rec)
    finally:
        if writer:
            writer.close()
    w = max(1, min(exp.train.final_window, len(rewards))) if rewards else 0
    summary = {
        "mode": exp.learner.mode,
        "seed": exp.seed,
        "steps": exp.train.steps,
        "final_reward": float(np.mean(rewards[-w:])) if rewards else float("nan"),
        "consumed": consumed,
        "generated": generated,
        "consumed_ratio": consumed / generated if generated else float("nan"),
    }
    if write:
        save_checkpoint(out / "final.ckpt", params)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    summary["params"] = params
    summary["rewards"] = rewards
    return summary


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("compression_ratio", "lambda", "strategy")
STRATEGIES = {"snapkv": Policy.HEAVY_HITTER, "heavy_hitter": Policy.HEAVY_HITTER,
              "recent": Policy.RECENT, "random": Policy.RANDOM}


def apply_axis(exp, axis, value):
    if axis == "compression_ratio":
        return replace(exp, rollout=replace(exp.rollout, compression_ratio=float(value)))
    if axis == "lambda":
        return replace(exp, learner=replace(exp.learner, lam=float(value)))
    if axis == "strategy":
        pol = replace(exp.rollout.policy, variant=STRATEGIES[str(value).lower().replace("-", "_")])
        return replace(exp, rollout=replace(exp.rollout, policy=pol))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def run_sweep(exp, axis, values, out_dir=None, write=True):
    if not values:
        raise ValueError("sweep needs at least one value")
    out = Path(out_dir or exp.train.out_dir)
    rows = []
    for v in values:
        sub = apply_axis(exp, axis, v)
        s = run_train(sub, out / f"{axis}={v}", write=write)
        rows.append({"axis": axis, "value": str(v), "final_reward": s["final_reward"],
                     "consumed_ratio": s["consumed_ratio"]})
    if write:
        with MetricsWriter(out / "sweep.tsv", ("axis", "value", "final_reward", "consumed_ratio")) as w:
            for r in rows:
                w.write(r)
    return rows


# ---------------------------------------------------------------------------
# memory bench
# ---------------------------------------------------------------------------


def run_membench(n_layers=2, n_heads=4, d_head=16, n_keys=1000, retentions=(0.5, 0.8, 1.0)):
    """Peak/baseline ratios for physical slicing vs mask simulation at each retention."""
    report = []
    for r in retentions:
        res = {"retention": r}
        for method in ("slice", "mask"):
            ledger = MemoryLedger()
            cache = KVCache(n_layers, n_heads, d_head, n_keys, ledger=ledger)
            z = np.zeros((n_heads, d_head))
            for _ in range(n_keys):
                for l in range(n_layers):
                    cache.append(l, z, z)
            keep = int(round(r * n_keys))
            # drop the oldest entries; which ones does not affect the byte count
            cache.retained[:, :, : n_keys - keep] = False
            base = cache.nbytes()
            if method == "slice":
                physical_slice(cache, ledger)
            else:
                mask_simulate(cache, ledger)
            res[method] = ledger_peak_ratio(ledger, base)
            res[method + "_spike_bytes"] = ledger.peak_bytes - base
        res["baseline_bytes"] = n_layers * n_heads * n_keys * 2 * d_head * 8
        report.append(res)
    return report


# ---------------------------------------------------------------------------
# variance lab
# ---------------------------------------------------------------------------


def run_variance_lab(exp, sigma2=0.04, lengths=(10, 50, 100), n_samples=10 ** 6,
                     policy_lengths=(16, 32, 64), seeds=(0, 1, 2, 3, 4), n_prompts=32,
                     kind="two_point"):
    rng = np.random.default_rng(exp.seed)
    sim = []
    for L in lengths:
        v = simulate_product_variance(WeightModel(sigma2, L, n_samples, kind), rng)
        sim.append({"L": L, "sigma2": sigma2, "empirical_var": v,
                    "closed_form": closed_form_variance(sigma2, L)})
    slope, r2 = log_growth_slope(lengths, [r["empirical_var"] for r in sim])
    policy = []
    for s in seeds:
        params = init_params(exp.model, s)
        ir = measure_policy_ratio_variance(exp.model, params, exp.task, policy_lengths,
                                           exp.rollout, "ir", n_prompts, s)
        smd = measure_policy_ratio_variance(exp.model, params, exp.task, policy_lengths,
                                            exp.rollout, "smd", n_prompts, s)
        for L in policy_lengths:
            policy.append({"seed": s, "L": L, "ir_var": ir[L], "smd_var": smd[L]})
    return {"simulated": sim, "slope": slope, "slope_r2": r2,
            "slope_target": float(np.log1p(sigma2)), "policy": policy}


# ---------------------------------------------------------------------------
# eval / dump
# ---------------------------------------------------------------------------


def run_eval(exp, params, n=100, dense=False):
    """Greedy-decode reward on held-out instances."""
    rng = np.random.default_rng([exp.seed, EVAL_STREAM])
    rc = exp.rollout.dense() if dense else exp.rollout
    total = 0.0
    for i in range(n):
        inst = make_instance(exp.task, rng)
        tr = generate(exp.model, params, inst.prompt, rc, seed=(exp.seed, EVAL_STREAM, i), greedy=True)
        total += reward(inst, tr.generated_tokens)
    return total / n


def dump_trajectories(exp, params, path, n_prompts=4):
    rng = np.random.default_rng([exp.seed, EVAL_STREAM, 1])
    recs = []
    for i in range(n_prompts):
        inst = make_instance(exp.task, rng)
        for k in range(exp.rollout.K):
            tr = generate_sparse(exp.model, params, inst.prompt, exp.rollout, seed=(exp.seed, i, k))
            tr.reward = reward(inst, tr.generated_tokens)
            rec = tr.to_record()
            rec["instance"] = inst.to_record()
            recs.append(rec)
    write_jsonl(path, recs)
    return recs


def load_or_init(exp, ckpt=None):
    return load_checkpoint(ckpt) if ckpt else initial_params(exp)
