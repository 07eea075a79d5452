"""Tiny pre-norm decoder-only transformer with injectable attention visibility.

The autograd path (``forward_dense`` / ``forward_shadow``) processes whole
sequences; ``incremental_step`` is a plain-numpy decode step that reads the
same parameter arrays and attends only to keys still retained in a KVCache.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .kvcache import KVCache, ShadowMask

CKPT_MAGIC = b"SMDCKPT1"


class TokenError(ValueError):
    pass


class DegenerateVisibilityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 256
    mlp_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @property
    def d_head(self):
        return self.d_model // self.n_heads


def init_params(cfg, seed=0):
    """Named parameter Tensors; matrices ~ N(0, 1/fan_in)."""
    rng = np.random.default_rng(seed)
    d, v = cfg.d_model, cfg.vocab_size
    arrays = {
        "tok_emb": rng.normal(0, 1.0, (v, d)),
        "pos_emb": rng.normal(0, 0.5, (cfg.max_seq_len, d)),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        arrays[p + "norm1"] = np.ones(d)
        for w in ("wq", "wk", "wv", "wo"):
            arrays[p + w] = rng.normal(0, d ** -0.5, (d, d))
        arrays[p + "norm2"] = np.ones(d)
        arrays[p + "w1"] = rng.normal(0, d ** -0.5, (d, cfg.mlp_mult * d))
        arrays[p + "w2"] = rng.normal(0, (cfg.mlp_mult * d) ** -0.5, (cfg.mlp_mult * d, d))
    arrays["norm_f"] = np.ones(d)
    arrays["w_out"] = rng.normal(0, d ** -0.5, (d, v))
    return {k: nc.Tensor(a, requires_grad=True) for k, a in arrays.items()}


def copy_params(params, requires_grad=True):
    return {k: nc.Tensor(t.data.copy(), requires_grad=requires_grad) for k, t in params.items()}


def zero_grads(params):
    for t in params.values():
        t.grad = None


# ---------------------------------------------------------------------------
# visibility tables
# ---------------------------------------------------------------------------


def causal_visibility(cfg, batch, length):
    vis = np.tril(np.ones((length, length), dtype=bool))
    return np.broadcast_to(vis, (cfg.n_layers, batch, cfg.n_heads, length, length))


def shadow_visibility(cfg, masks, length):
    """Stack per-sequence ShadowMasks into [L, B, H, T, T]; ``None`` means dense."""
    out = np.empty((cfg.n_layers, len(masks), cfg.n_heads, length, length), dtype=bool)
    dense = np.tril(np.ones((length, length), dtype=bool))
    for b, m in enumerate(masks):
        if m is None:
            out[:, b] = dense
            continue
        if m.n_layers != cfg.n_layers or m.n_heads != cfg.n_heads:
            raise ValueError("shadow mask layer/head layout does not match the model")
        out[:, b] = m.visibility(length)
    return out


# ---------------------------------------------------------------------------
# autograd forward
# ---------------------------------------------------------------------------


def _check_tokens(cfg, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.shape[1] > cfg.max_seq_len:
        raise TokenError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise TokenError("token id outside vocabulary")
    return tokens


def masked_attention(q, k, v, visible):
    """Scaled dot-product attention; ``visible[..., t, j]`` False gives weight exactly 0.

    Returns (output, weights).
    """
    q, k, v = nc.as_tensor(q), nc.as_tensor(k), nc.as_tensor(v)
    scores = (q @ nc.swap_last(k)) * (1.0 / np.sqrt(q.shape[-1]))
    att = nc.softmax_last(scores, visible)
    return att @ v, att


def _forward(cfg, params, tokens, vis, collect=False, rows=None):
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.d_head
    x = nc.getitem(params["tok_emb"], tokens) + nc.getitem(params["pos_emb"], np.arange(T))
    trace = []
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        h = nc.rms_normalize(x) * params[p + "norm1"]

        def heads(w):
            return (h @ params[p + w]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        o, att = masked_attention(q, k, v, vis[l])
        out = o.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        x = x + out @ params[p + "wo"]
        h2 = nc.rms_normalize(x) * params[p + "norm2"]
        x = x + nc.gelu(h2 @ params[p + "w1"]) @ params[p + "w2"]
        if collect:
            trace.append({"k": k.data, "v": v.data, "att": att})
    if rows is not None:
        # only these (batch, position) pairs reach the output head
        x = nc.getitem(x, rows)
    logits = (nc.rms_normalize(x) * params["norm_f"]) @ params["w_out"]
    return (logits, trace) if collect else logits


def forward_dense(cfg, params, tokens, return_trace=False, rows=None):
    """Causal logits [B, T, V] (or [T, V] for a 1-D token list).

    With ``rows=(batch_idx, pos_idx)`` only those positions are projected,
    giving logits [N, V].
    """
    flat = np.ndim(tokens) == 1 and rows is None
    tokens = _check_tokens(cfg, tokens)
    vis = causal_visibility(cfg, tokens.shape[0], tokens.shape[1])
    res = _forward(cfg, params, tokens, vis, collect=return_trace, rows=rows)
    return _squeeze(res, flat, return_trace)


def forward_shadow(cfg, params, tokens, masks, return_trace=False, rows=None):
    """Logits with each generation query restricted to its recorded visible keys.

    ``masks`` is a ShadowMask (1-D tokens) or one ShadowMask/None per row.
    """
    flat = np.ndim(tokens) == 1 and rows is None
    tokens = _check_tokens(cfg, tokens)
    if isinstance(masks, ShadowMask) or masks is None:
        masks = [masks] * tokens.shape[0]
    if len(masks) != tokens.shape[0]:
        raise ValueError("need one mask per sequence")
    vis = shadow_visibility(cfg, masks, tokens.shape[1])
    if not vis.any(axis=-1).all():
        raise DegenerateVisibilityError("a generation query has no visible keys")
    res = _forward(cfg, params, tokens, vis, collect=return_trace, rows=rows)
    return _squeeze(res, flat, return_trace)


def _squeeze(res, flat, traced):
    if not flat:
        return res
    if traced:
        logits, trace = res
        return logits[0], trace
    return res[0]


def token_logprobs(logits, chosen, temperature=1.0):
    """log_softmax(logits / temperature) gathered at ``chosen`` along the last axis."""
    logits = nc.as_tensor(logits)
    chosen = np.asarray(chosen, dtype=np.int64)
    lp = nc.log_softmax_last(logits * (1.0 / temperature))
    lead = np.indices(chosen.shape)
    return nc.getitem(lp, tuple(lead) + (chosen,))


# ---------------------------------------------------------------------------
# incremental decoding
# ---------------------------------------------------------------------------


def _rms(x, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(nc._GELU_C * (x + 0.044715 * x * x * x)))


def new_cache(cfg, prompt_length=0, **kw):
    return KVCache(cfg.n_layers, cfg.n_heads, cfg.d_head, cfg.max_seq_len,
                   prompt_length=prompt_length, **kw)


def incremental_step(cfg, params, token, cache, history=8):
    """Feed one token at position ``cache.length``; return next-token logits [V].

    Attention covers the retained keys plus the new one.  The attention row
    of each layer/head is pushed onto the cache for heavy-hitter scoring.
    """
    if cache.n_layers != cfg.n_layers or cache.n_heads != cfg.n_heads or cache.d_head != cfg.d_head:
        raise ValueError("cache layout does not match the model")
    if not 0 <= token < cfg.vocab_size:
        raise TokenError(f"token {token} outside vocabulary")
    pos = cache.length
    if pos >= cfg.max_seq_len:
        raise TokenError("sequence exceeds max_seq_len")
    P = {k: t.data for k, t in params.items()}
    H, dh = cfg.n_heads, cfg.d_head
    x = P["tok_emb"][token] + P["pos_emb"][pos]
    scale = 1.0 / np.sqrt(dh)
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        h = _rms(x) * P[p + "norm1"]
        q = (h @ P[p + "wq"]).reshape(H, dh)
        k = (h @ P[p + "wk"]).reshape(H, dh)
        v = (h @ P[p + "wv"]).reshape(H, dh)
        cache.append(l, k, v)
        n = pos + 1
        out = np.empty((H, dh))
        rows = np.zeros((H, n))
        for hd in range(H):
            idx = np.nonzero(cache.retained[l, hd, :n])[0]
            if idx.size == 0:
                raise DegenerateVisibilityError("no retained keys for query")
            s = cache.keys[l, hd, idx] @ q[hd] * scale
            e = np.exp(s - s.max())
            w = e / e.sum()
            rows[hd, idx] = w
            out[hd] = w @ cache.values[l, hd, idx]
        cache.push_attention(l, rows, history)
        x = x + out.reshape(-1) @ P[p + "wo"]
        h2 = _rms(x) * P[p + "norm2"]
        x = x + _gelu(h2 @ P[p + "w1"]) @ P[p + "w2"]
    return (_rms(x) * P["norm_f"]) @ P["w_out"]


def prefill(cfg, params, prompt, cache, history=8):
    """Dense pass over the prompt, filling ``cache``; returns logits at the last position."""
    prompt = np.asarray(prompt, dtype=np.int64)
    with nc.no_grad():
        logits, trace = forward_dense(cfg, params, prompt, return_trace=True)
    n = len(prompt)
    if cache.length:
        raise ValueError("prefill needs an empty cache")
    for pos in range(n):
        for l in range(cfg.n_layers):
            cache.append(l, trace[l]["k"][0, :, pos], trace[l]["v"][0, :, pos])
    cache.prompt_length = n
    for l in range(cfg.n_layers):
        att = trace[l]["att"].data[0]  # [H, T, T]
        for q in range(max(0, n - history), n):
            cache.push_attention(l, att[:, q, :n], history)
    return logits.data[-1]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<q", len(raw)))
            f.write(raw)
            f.write(struct.pack("<q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not an SMDCKPT1 checkpoint")
    off = len(CKPT_MAGIC)
    params = {}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<q", blob, off)
        off += 8
        name = blob[off: off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<q", blob, off)
        off += 8
        dims = struct.unpack_from(f"<{rank}q", blob, off)
        off += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
        off += 8 * count
        params[name] = nc.Tensor(arr.astype(np.float64), requires_grad=True)
    return params
