"""KV cache with eviction policies, eviction-timestamp masks and a memory ledger.

Positions are absolute token indices.  A key evicted "at step s" stays
visible to queries at positions < s and is hidden from every query at
position >= s.  Queries inside the prompt always see the full causal
prefix, since prefill runs before any compression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

NEVER = np.iinfo(np.int64).max
FLOAT_BYTES = 8


class CacheContractError(ValueError):
    pass


class Policy(str, Enum):
    NONE = "none"
    HEAVY_HITTER = "heavy_hitter"
    RECENT = "recent"
    RANDOM = "random"


@dataclass(frozen=True)
class EvictionPolicy:
    variant: Policy = Policy.HEAVY_HITTER
    window: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Policy(self.variant))
        if self.window < 0:
            raise ValueError("observation window must be >= 0")


# ---------------------------------------------------------------------------
# shadow mask
# ---------------------------------------------------------------------------


class ShadowMask:
    """Per-layer, per-head eviction timestamps for every key position."""

    def __init__(self, n_layers, n_heads, prompt_length, length=0):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.prompt_length = int(prompt_length)
        self.eviction_step = np.full((n_layers, n_heads, length), NEVER, dtype=np.int64)

    @property
    def length(self):
        return self.eviction_step.shape[-1]

    def extend(self, length):
        if length > self.length:
            pad = np.full((self.n_layers, self.n_heads, length - self.length), NEVER, dtype=np.int64)
            self.eviction_step = np.concatenate([self.eviction_step, pad], axis=-1)

    def copy(self):
        out = ShadowMask(self.n_layers, self.n_heads, self.prompt_length)
        out.eviction_step = self.eviction_step.copy()
        return out

    def n_evicted(self):
        return int(np.sum(self.eviction_step != NEVER))

    def is_visible(self, layer, head, query, key):
        if key > query:
            return False
        if query < self.prompt_length:
            return True
        step = self.eviction_step[layer, head, key] if key < self.length else NEVER
        return bool(query < step)

    def visibility(self, length):
        """Boolean table [L, H, T, T]: entry (q, j) says whether query q saw key j."""
        steps = self.eviction_step
        if steps.shape[-1] < length:
            steps = np.concatenate(
                [steps, np.full(steps.shape[:2] + (length - steps.shape[-1],), NEVER, np.int64)],
                axis=-1)
        steps = steps[..., :length]
        q = np.arange(length)[:, None]
        j = np.arange(length)[None, :]
        causal = j <= q
        in_prompt = q < self.prompt_length
        alive = q < steps[:, :, None, :]
        return causal & (in_prompt | alive)

    def to_record(self):
        """Text-friendly form: finitely-evicted (position, step) pairs per layer/head."""
        heads = []
        for l in range(self.n_layers):
            for h in range(self.n_heads):
                pos = np.nonzero(self.eviction_step[l, h] != NEVER)[0]
                heads.append([[int(p), int(self.eviction_step[l, h, p])] for p in pos])
        return {
            "prompt_length": self.prompt_length,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "length": self.length,
            "evictions": heads,
        }

    @classmethod
    def from_record(cls, rec):
        out = cls(rec["n_layers"], rec["n_heads"], rec["prompt_length"], rec["length"])
        for i, pairs in enumerate(rec["evictions"]):
            l, h = divmod(i, rec["n_heads"])
            for p, s in pairs:
                out.eviction_step[l, h, p] = s
        return out

    def __eq__(self, other):
        return (isinstance(other, ShadowMask)
                and self.prompt_length == other.prompt_length
                and np.array_equal(self.eviction_step, other.eviction_step))


def record_eviction(mask, layer, head, evicted, step):
    """Stamp ``evicted`` key positions as hidden from queries at ``step`` onward."""
    evicted = np.asarray(list(evicted), dtype=np.int64)
    if evicted.size == 0:
        return mask
    mask.extend(int(evicted.max()) + 1)
    row = mask.eviction_step[layer, head]
    if np.any(row[evicted] != NEVER):
        raise CacheContractError(f"key evicted twice in layer {layer} head {head}")
    if np.any(step <= evicted):
        raise CacheContractError("eviction step must come after the key's own position")
    row[evicted] = step
    return mask


# ---------------------------------------------------------------------------
# memory ledger
# ---------------------------------------------------------------------------


@dataclass
class MemoryLedger:
    events: list = field(default_factory=list)
    live_bytes: int = 0
    peak_bytes: int = 0

    def alloc(self, nbytes, label=""):
        self.live_bytes += int(nbytes)
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        self.events.append(("alloc", int(nbytes), label))

    def free(self, nbytes, label=""):
        if nbytes > self.live_bytes:
            raise CacheContractError(f"freeing {nbytes} bytes with only {self.live_bytes} live")
        self.live_bytes -= int(nbytes)
        self.events.append(("free", int(nbytes), label))

    def balance(self):
        return sum(n if kind == "alloc" else -n for kind, n, _ in self.events)


def ledger_peak_ratio(ledger, baseline_bytes):
    if baseline_bytes <= 0:
        raise ValueError("baseline_bytes must be positive")
    return ledger.peak_bytes / baseline_bytes


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------


class KVCache:
    """Mask-simulation cache: evicted entries are flagged, never removed.

    ``budget`` fixes the per-head retained count; otherwise the budget is
    ``ceil(keep_fraction * n_keys)`` at each enforcement.
    """

    def __init__(self, n_layers, n_heads, d_head, capacity, *,
                 keep_fraction=1.0, budget=None, prompt_length=0, ledger=None):
        if budget is not None and budget < 1:
            raise ValueError("cache budget must be >= 1")
        if not 0.0 < keep_fraction <= 1.0:
            raise ValueError("keep_fraction must be in (0, 1]")
        self.n_layers, self.n_heads, self.d_head = n_layers, n_heads, d_head
        self.capacity = capacity
        self.keys = np.zeros((n_layers, n_heads, capacity, d_head))
        self.values = np.zeros((n_layers, n_heads, capacity, d_head))
        self.retained = np.zeros((n_layers, n_heads, capacity), dtype=bool)
        self.length = 0
        self.keep_fraction = keep_fraction
        self.budget = budget
        self.prompt_length = prompt_length
        # per layer: recent attention rows, each [H, capacity]
        self.attention_rows = [[] for _ in range(n_layers)]
        self.ledger = ledger

    def entry_bytes(self):
        """Bytes for one key+value entry of one head in one layer."""
        return 2 * self.d_head * FLOAT_BYTES

    def nbytes(self):
        return self.length * self.n_layers * self.n_heads * self.entry_bytes()

    def append(self, layer, k, v):
        """Add one position's keys/values ([H, d_head]) to ``layer``."""
        pos = self.length if layer == 0 else self.length - 1
        if layer == 0:
            if self.length >= self.capacity:
                raise CacheContractError("cache capacity exceeded")
            self.length += 1
            if self.ledger is not None:
                self.ledger.alloc(self.n_layers * self.n_heads * self.entry_bytes(), "kv-append")
        self.keys[layer, :, pos] = k
        self.values[layer, :, pos] = v
        self.retained[layer, :, pos] = True
        return pos

    def push_attention(self, layer, rows, keep):
        """Remember attention rows ([H, n]) of the latest query for scoring."""
        full = np.zeros((self.n_heads, self.capacity))
        full[:, :rows.shape[-1]] = rows
        buf = self.attention_rows[layer]
        buf.append(full)
        if len(buf) > keep:
            del buf[: len(buf) - keep]

    def retained_count(self):
        return self.retained[:, :, : self.length].sum(axis=-1)

    def current_budget(self):
        if self.budget is not None:
            return self.budget
        return max(1, math.ceil(self.keep_fraction * self.length - 1e-12))


def score_heavy_hitters(recent_attention):
    """Accumulated attention per key: sum over the last w query rows.

    ``recent_attention`` is a sequence of [H, n] rows (or an array [w, H, n]).
    """
    rows = np.asarray(recent_attention, dtype=np.float64)
    if rows.ndim == 2:
        rows = rows[None]
    if rows.shape[0] == 0:
        raise ValueError("no attention rows to score")
    return rows.sum(axis=0)


def _select_keep(policy, candidates, scores, budget, prompt_length, rng):
    """Pick the kept subset of ``candidates`` (sorted ascending positions)."""
    newest = candidates[-1]
    if policy.variant is Policy.RECENT:
        return candidates[-budget:]
    if policy.variant is Policy.RANDOM:
        others = candidates[:-1]
        pick = rng.choice(others, size=budget - 1, replace=False) if budget > 1 else []
        return np.sort(np.append(np.asarray(pick, dtype=np.int64), newest))
    # heavy hitter: protect the w newest generation keys, rank the rest by score
    gen = candidates[candidates >= prompt_length]
    protected = gen[-policy.window:] if policy.window > 0 else gen[:0]
    if len(protected) >= budget:
        return protected[-budget:]
    rest = np.setdiff1d(candidates, protected)
    # highest score first; equal scores keep the lower index
    order = np.lexsort((rest, -scores[rest]))
    chosen = rest[order[: budget - len(protected)]]
    return np.sort(np.concatenate([protected, chosen]))


def enforce_budget(cache, policy, scores, current_step, rng=None):
    """Trim each head's retained set to the cache budget.

    ``scores`` is [L, H, n] (heavy hitter only; ignored otherwise).  Returns
    ``{(layer, head): evicted positions}`` for heads that lost keys.  Entries
    are only flagged, so ``current_step`` is recorded by the caller.
    """
    if policy.variant is Policy.NONE:
        return {}
    budget = cache.current_budget()
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if policy.variant is Policy.RANDOM and rng is None:
        rng = np.random.default_rng(policy.rng_seed)
    evicted = {}
    n = cache.length
    for l in range(cache.n_layers):
        for h in range(cache.n_heads):
            cand = np.nonzero(cache.retained[l, h, :n])[0]
            if len(cand) <= budget:
                continue
            head_scores = None if scores is None else np.asarray(scores[l][h])
            keep = _select_keep(policy, cand, head_scores, budget, cache.prompt_length, rng)
            drop = np.setdiff1d(cand, keep)
            cache.retained[l, h, drop] = False
            evicted[(l, h)] = drop
    return evicted


# ---------------------------------------------------------------------------
# physical slicing vs mask simulation (allocation accounting)
# ---------------------------------------------------------------------------


@dataclass
class CompactCache:
    """Physically compacted cache: per (layer, head) arrays of kept entries."""
    keys: dict
    values: dict
    positions: dict


def physical_slice(cache, ledger):
    """Copy retained entries into fresh storage, then free the original.

    The new block is allocated before the old one is released, which is the
    source of the transient peak.
    """
    old_bytes = cache.nbytes()
    kept = int(cache.retained_count().sum())
    new_bytes = kept * cache.entry_bytes()
    ledger.alloc(new_bytes, "slice-new")
    keys, values, positions = {}, {}, {}
    n = cache.length
    for l in range(cache.n_layers):
        for h in range(cache.n_heads):
            idx = np.nonzero(cache.retained[l, h, :n])[0]
            keys[(l, h)] = cache.keys[l, h, idx].copy()
            values[(l, h)] = cache.values[l, h, idx].copy()
            positions[(l, h)] = idx
    ledger.free(old_bytes, "slice-old")
    return CompactCache(keys, values, positions)


def mask_bitmap_bytes(cache):
    bits = cache.length * cache.n_heads * cache.n_layers
    return (bits + 7) // 8


def mask_simulate(cache, ledger):
    """Keep storage in place; only a 1-bit-per-entry retention bitmap is allocated."""
    ledger.alloc(mask_bitmap_bytes(cache), "mask-bitmap")
    return cache


def cache_from_mask(mask, d_head, ledger=None):
    """Cache whose retention flags match ``mask`` at the end of generation (values zero)."""
    cache = KVCache(mask.n_layers, mask.n_heads, d_head, mask.length,
                    prompt_length=mask.prompt_length, ledger=ledger)
    zeros = np.zeros((mask.n_heads, d_head))
    for _ in range(mask.length):
        for l in range(mask.n_layers):
            cache.append(l, zeros, zeros)
    cache.retained[:] = mask.eviction_step == NEVER
    return cache


def learner_peak_ratio(mask, d_head, method):
    """Peak/baseline bytes when the learner handles this trajectory's cache.

    ``method`` is ``"slice"`` (physical compaction), ``"mask"`` (bitmap only)
    or ``"dense"`` (nothing to do).
    """
    ledger = MemoryLedger()
    cache = cache_from_mask(mask, d_head, ledger)
    base = cache.nbytes()
    if base == 0:
        return 1.0
    if method == "slice":
        physical_slice(cache, ledger)
    elif method == "mask":
        mask_simulate(cache, ledger)
    elif method != "dense":
        raise ValueError(f"unknown method {method!r}")
    return ledger_peak_ratio(ledger, base)
