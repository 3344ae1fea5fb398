"""
Token-at-a-time inference with heterogeneous per-head KV caches.

Each softmax head keeps a ring buffer holding at most w_{i,j} predecessor rows.
The live token's key/value take part in its own attention step and are pushed
into the ring afterwards, so the attended set is the live row plus up to
w_{i,j} predecessors. Linear layers keep the constant-size accumulators S, z.
"""

import logging
import math
import statistics
import time
from dataclasses import dataclass
from functools import singledispatch
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from attention_kernels import (
    FeatureMapConfig,
    NumericalDegeneracyError,
    merge_heads,
    project_linear,
    project_qkv,
    taylor2_feature_map,
)
from model import LengthError, Mechanism, MSWAModel
from numerics import Tensor, as_tensor, no_grad, rms_norm
from window_plan import WindowPlan

logger = logging.getLogger(__name__)

BENCH_SAMPLE_POSITIONS = (500, 1000, 1500, 2000)


class RingCache:
    """Fixed-capacity circular store of one head's key/value rows."""

    def __init__(self, capacity: int, head_dim: int, dtype: np.dtype = np.float64):
        if capacity < 1:
            raise ValueError(f"ring capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.k_rows = np.zeros((capacity, head_dim), dtype=dtype)
        self.v_rows = np.zeros((capacity, head_dim), dtype=dtype)
        self.filled = 0
        self.next_slot = 0

    def push(self, k: np.ndarray, v: np.ndarray) -> None:
        self.k_rows[self.next_slot] = k
        self.v_rows[self.next_slot] = v
        self.next_slot = (self.next_slot + 1) % self.capacity
        self.filled = min(self.filled + 1, self.capacity)

    def rows(self) -> Tuple[np.ndarray, np.ndarray]:
        """Stored rows oldest first."""
        if self.filled < self.capacity:
            return self.k_rows[:self.filled], self.v_rows[:self.filled]
        order = (self.next_slot + np.arange(self.capacity)) % self.capacity
        return self.k_rows[order], self.v_rows[order]


class LinearState:
    """Running S = sum phi(k)^T v and z = sum phi(k) for every head of a layer."""

    def __init__(self, lead: Tuple[int, ...], feature_len: int, head_dim: int,
                 dtype: np.dtype = np.float64):
        self.S = np.zeros(lead + (feature_len, head_dim), dtype=dtype)
        self.z = np.zeros(lead + (feature_len,), dtype=dtype)

    def advance(self, phi_k: np.ndarray, v: np.ndarray) -> None:
        self.S += np.einsum('...f,...d->...fd', phi_k, v)
        self.z += phi_k

    def read(self, phi_q: np.ndarray) -> np.ndarray:
        num = np.einsum('...f,...fd->...d', phi_q, self.S)
        den = (phi_q * self.z).sum(axis=-1, keepdims=True)
        if not (den > 0).all():
            raise NumericalDegeneracyError("non-positive linear attention normalizer in recurrent state")
        return num / den

    def copy(self) -> 'LinearState':
        clone = LinearState.__new__(LinearState)
        clone.S = self.S.copy()
        clone.z = self.z.copy()
        return clone


def recurrent_linear_attention(q: Tensor, k: Tensor, v: Tensor, cfg: FeatureMapConfig,
                               state: Optional[LinearState] = None) -> Tuple[np.ndarray, LinearState]:
    """
    Linear attention evaluated one position at a time from accumulators.

    Passing the returned state back in resumes the sequence where it stopped.
    """
    with no_grad():
        phi_q = taylor2_feature_map(as_tensor(q), cfg).data
        phi_k = taylor2_feature_map(as_tensor(k), cfg).data
    v = as_tensor(v).data
    if state is None:
        state = LinearState(phi_k.shape[:-2], cfg.feature_len, v.shape[-1], v.dtype)
    out = np.empty_like(v)
    for t in range(v.shape[-2]):
        state.advance(phi_k[..., t, :], v[..., t, :])
        out[..., t, :] = state.read(phi_q[..., t, :])
    return out, state


@dataclass
class DecodeState:
    """
    Inference memory of one decoding session. `position` is the index of the
    most recently processed token (-1 before the first step).
    """
    caches: Dict[int, List[RingCache]]
    linear: Dict[int, LinearState]
    head_dim: int
    max_len: int
    position: int = -1
    itemsize: int = 8

    @classmethod
    def for_model(cls, model: MSWAModel) -> 'DecodeState':
        cfg = model.config
        dtype = cfg.np_dtype
        caches: Dict[int, List[RingCache]] = {}
        linear: Dict[int, LinearState] = {}
        for layer in model.layers:
            if layer.mechanism == Mechanism.LINEAR:
                linear[layer.index] = LinearState((cfg.heads,), model.feature_cfg.feature_len, cfg.head_dim, dtype)
            else:
                caches[layer.index] = [RingCache(w, cfg.head_dim, dtype) for w in layer.window_row]
        return cls(caches=caches, linear=linear, head_dim=cfg.head_dim, max_len=cfg.max_seq_len,
                   itemsize=dtype.itemsize)

    @property
    def cached_rows(self) -> int:
        return sum(c.filled for heads in self.caches.values() for c in heads)


def _attend_cached(q: np.ndarray, k: np.ndarray, v: np.ndarray, cache: RingCache) -> np.ndarray:
    past_k, past_v = cache.rows()
    keys = np.concatenate([past_k, k[None, :]], axis=0)
    values = np.concatenate([past_v, v[None, :]], axis=0)
    scores = keys @ q / math.sqrt(q.shape[-1])
    scores = np.exp(scores - scores.max())
    return (scores / scores.sum()) @ values


def step(state: DecodeState, model: MSWAModel, token: int) -> Tuple[Tensor, DecodeState]:
    """
    Advance the session by one token and return next-token logits.

    Raises:
        VocabularyError: If token is outside the byte vocabulary
        LengthError: If the session already holds max_seq_len tokens
    """
    p = state.position + 1
    if p >= state.max_len:
        raise LengthError(f"decode position {p} reaches max_seq_len={state.max_len}")
    ids = model.check_tokens([token])
    positions = np.asarray([p])

    with no_grad():
        x = model.embed_tokens(ids)
        for layer in model.layers:
            h = rms_norm(x, layer.attn_norm, model.config.norm_eps)
            if layer.mechanism == Mechanism.LINEAR:
                phi_q, phi_k, v = project_linear(h, layer.attn, model.feature_cfg, positions, model.config.rope_base)
                acc = state.linear[layer.index]
                acc.advance(phi_k.data[:, 0, :], v.data[:, 0, :])
                o = acc.read(phi_q.data[:, 0, :])
            else:
                q, k, v = project_qkv(h, layer.attn, positions, model.config.rope_base)
                heads = state.caches[layer.index]
                o = np.empty((len(heads), model.config.head_dim), dtype=x.dtype)
                for j, cache in enumerate(heads):
                    o[j] = _attend_cached(q.data[j, 0], k.data[j, 0], v.data[j, 0], cache)
                    cache.push(k.data[j, 0], v.data[j, 0])
            x = x + merge_heads(Tensor(o[:, None, :]), layer.attn)
            x = model.feed_forward(layer, x)
        logits = model.output(x)[0]
    state.position = p
    return logits, state


def prefill(model: MSWAModel, tokens: Sequence[int]) -> Tuple[Tensor, DecodeState]:
    """
    Run the parallel forward pass over a prompt, then back-fill every ring with
    the last rows it would hold after stepping through the same prompt.
    """
    ids = model.check_tokens(tokens)
    n = len(ids)
    captures: Dict[int, Dict[str, np.ndarray]] = {}
    with no_grad():
        logits = model.forward(ids, capture=captures)
    state = DecodeState.for_model(model)
    for index, heads in state.caches.items():
        keys, values = captures[index]['k'], captures[index]['v']
        for j, cache in enumerate(heads):
            for t in range(max(0, n - cache.capacity), n):
                cache.push(keys[j, t], values[j, t])
    for index, acc in state.linear.items():
        phi_k, values = captures[index]['phi_k'], captures[index]['v']
        acc.S += np.einsum('hnf,hnd->hfd', phi_k, values)
        acc.z += phi_k.sum(axis=-2)
    state.position = n - 1
    return logits, state


def greedy_decode(model: MSWAModel, prompt: Sequence[int], total: int) -> Tuple[List[int], List[np.ndarray]]:
    """
    Feed `prompt` step by step, then extend greedily until `total` tokens exist.
    Returns the tokens and the logits produced after each of them.
    """
    state = DecodeState.for_model(model)
    tokens = list(prompt)
    history: List[np.ndarray] = []
    i = 0
    while i < len(tokens):
        logits, state = step(state, model, tokens[i])
        history.append(logits.data.copy())
        if len(tokens) < total and i == len(tokens) - 1:
            tokens.append(int(np.argmax(logits.data)))
        i += 1
    return tokens, history


@singledispatch
def cache_bytes(obj, head_dim: int, bytes_per_scalar: int = 4, **kwargs) -> int:
    """
    Bytes of decode state held for a plan (closed form) or a live session (measured).

    Raises:
        TypeError: For anything other than a WindowPlan or DecodeState
    """
    raise TypeError(f"cache_bytes does not support {type(obj).__name__}")


@cache_bytes.register
def _(obj: DecodeState, head_dim: int, bytes_per_scalar: int = 4, **kwargs) -> int:
    """Measured: key and value rows in every ring plus the linear accumulators."""
    kv = 2 * bytes_per_scalar * head_dim * obj.cached_rows
    linear = sum(bytes_per_scalar * (acc.S.size + acc.z.size) for acc in obj.linear.values())
    return kv + linear


@cache_bytes.register
def _(obj: WindowPlan, head_dim: int, bytes_per_scalar: int = 4, position: Optional[int] = None,
      linear_layers: int = 0, feature_len: int = 273, **kwargs) -> int:
    """
    Closed form for a plan: 2 * b * d * sum_ij min(position+1, w_ij) for the
    local heads (saturated when position is None) plus b * (F*d + F) per
    linear head.
    """
    if position is None:
        rows = sum(sum(row) for row in obj.sizes)
    else:
        rows = sum(min(position + 1, w) for row in obj.sizes for w in row)
    linear = linear_layers * obj.heads * bytes_per_scalar * (feature_len * head_dim + feature_len)
    return 2 * bytes_per_scalar * head_dim * rows + linear


class BenchRow(BaseModel):
    position: int
    step_micros: float
    cache_bytes: int


def decode_benchmark(model: MSWAModel, length: int, seed: int = 0, every: int = 1) -> List[BenchRow]:
    """Step through `length` random bytes, timing each step."""
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, model.config.vocab_size, size=length)
    state = DecodeState.for_model(model)
    rows: List[BenchRow] = []
    for token in tokens:
        started = time.perf_counter_ns()
        _, state = step(state, model, int(token))
        elapsed = (time.perf_counter_ns() - started) / 1000.0
        if state.position % every == 0:
            rows.append(BenchRow(position=state.position, step_micros=elapsed,
                                 cache_bytes=cache_bytes(state, state.head_dim, state.itemsize)))
    return rows


def summarize_benchmark(rows: Sequence[BenchRow],
                        positions: Sequence[int] = BENCH_SAMPLE_POSITIONS) -> Dict[str, float]:
    """Median step time over the sample positions that were recorded."""
    at = {r.position: r for r in rows}
    picked = [at[p] for p in positions if p in at]
    if not picked:
        picked = list(rows)
    return {
        'median_step_micros': statistics.median(r.step_micros for r in picked),
        'max_cache_bytes': max(r.cache_bytes for r in rows),
        'positions': len(picked),
    }
