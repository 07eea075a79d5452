"""Synthetic, programmatically rewarded prompt/answer tasks.

Vocabulary layout (64 ids by default)::

    0 PAD   1 BOS   2 STOP   3 ANSWER   4 QUERY   5 NEEDLE   6 COPY   7 PARITY
    8 SPAN_OPEN   9 SPAN_CLOSE   10 TARGET   11-15 reserved
    16-31 keys      32-47 values      48-63 filler

NeedleRetrieval states the queried key right after the task token, so a
cache that only keeps recent tokens loses it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

PAD, BOS, STOP, ANSWER, QUERY, NEEDLE, COPY, PARITY = range(8)
SPAN_OPEN, SPAN_CLOSE, TARGET = 8, 9, 10
KEYS = tuple(range(16, 32))
VALUES = tuple(range(32, 48))
FILLER = tuple(range(48, 64))
MIN_VOCAB = 64


class Variant(str, Enum):
    NEEDLE = "needle"
    COPY = "copy"
    PARITY = "parity"


@dataclass(frozen=True)
class TaskSpec:
    variant: Variant = Variant.NEEDLE
    min_prompt: int = 24
    max_prompt: int = 32
    answer_length: int = 2
    n_pairs: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.min_prompt > self.max_prompt:
            raise ValueError("min_prompt must not exceed max_prompt")
        if self.answer_length < 1:
            raise ValueError("answer_length must be >= 1")

    def validate(self, max_seq_len, vocab_size):
        # the answer plus a stop token must fit after the longest prompt
        if self.max_prompt + self.answer_length + 1 > max_seq_len:
            raise ValueError("prompt plus answer does not fit in max_seq_len")
        if vocab_size < MIN_VOCAB:
            raise ValueError(f"tasks need vocab_size >= {MIN_VOCAB}")
        if self.variant is Variant.NEEDLE:
            need = 3 + self.n_pairs * (1 + self.answer_length) + 1
            if need > self.min_prompt:
                raise ValueError("min_prompt too short for the requested needle pairs")
            if self.n_pairs > len(KEYS):
                raise ValueError("too many needle pairs")


@dataclass(frozen=True)
class Instance:
    variant: str
    prompt: tuple
    answer: tuple

    def to_record(self):
        return {"variant": self.variant, "prompt": list(self.prompt), "answer": list(self.answer)}

    @classmethod
    def from_record(cls, rec):
        return cls(rec["variant"], tuple(rec["prompt"]), tuple(rec["answer"]))


def _needle(spec, rng, length):
    n, a = spec.n_pairs, spec.answer_length
    keys = rng.choice(KEYS, size=n, replace=False)
    # first value tokens are distinct so a wrong key earns no partial credit
    firsts = rng.choice(VALUES, size=n, replace=False)
    values = [[int(f)] + [int(t) for t in rng.choice(VALUES, size=a - 1)] for f in firsts]
    q = int(rng.integers(n))
    head = [NEEDLE, QUERY, int(keys[q])]
    body_len = length - len(head) - 1
    body = [int(t) for t in rng.choice(FILLER, size=body_len)]
    # records go between filler chunks, in shuffled order
    rec_len = 1 + a
    order = rng.permutation(n)
    fill = list(body[: body_len - n * rec_len])
    cuts = np.sort(rng.choice(len(fill) + 1, size=n, replace=True))
    out, last = [], 0
    for i, c in enumerate(cuts):
        out.extend(fill[last:c])
        k = order[i]
        out.append(int(keys[k]))
        out.extend(values[k])
        last = c
    out.extend(fill[last:])
    prompt = head + out + [ANSWER]
    return prompt, values[q]


def _copy(spec, rng, length):
    a = spec.answer_length
    span = [int(t) for t in rng.choice(VALUES, size=a)]
    fill_len = length - 1 - (a + 2) - 1
    fill = [int(t) for t in rng.choice(FILLER, size=fill_len)]
    cut = int(rng.integers(fill_len + 1))
    prompt = [COPY] + fill[:cut] + [SPAN_OPEN] + span + [SPAN_CLOSE] + fill[cut:] + [ANSWER]
    return prompt, span


def _parity(spec, rng, length):
    target = int(rng.choice(FILLER))
    body_len = length - 4
    body = [int(t) for t in rng.choice(FILLER, size=body_len)]
    count = sum(t == target for t in body)
    prompt = [PARITY, TARGET, target] + body + [ANSWER]
    # parity token, then the count itself (mod 16) for the remaining slots
    answer = [VALUES[count % 2]] + [VALUES[count % len(VALUES)]] * (spec.answer_length - 1)
    return prompt, answer


_BUILDERS = {Variant.NEEDLE: _needle, Variant.COPY: _copy, Variant.PARITY: _parity}


def make_instance(spec, rng):
    """Draw one (prompt, oracle answer) instance from ``rng``."""
    length = int(rng.integers(spec.min_prompt, spec.max_prompt + 1))
    prompt, answer = _BUILDERS[spec.variant](spec, rng, length)
    return Instance(spec.variant.value, tuple(prompt), tuple(int(t) for t in answer))


def strip_stop(tokens):
    tokens = list(tokens)
    return tokens[: tokens.index(STOP)] if STOP in tokens else tokens


def reward(instance, generated):
    """1.0 on exact match, else common-prefix length over the longer of answer/output."""
    gen = strip_stop(generated)
    ans = list(instance.answer)
    if gen == ans:
        return 1.0
    if not gen:
        return 0.0
    lcp = 0
    for g, t in zip(gen, ans):
        if g != t:
            break
        lcp += 1
    return lcp / max(len(ans), len(gen))


def target_sequence(instance):
    """Teacher-forcing continuation: answer followed by STOP."""
    return list(instance.answer) + [STOP]
