"""
Reference attention kernels: full causal, per-head sliding window and
second-order Taylor linear attention, plus the grouped multi-head layer that
executes one row of a WindowPlan.

A window of size w lets token i attend to positions max(0, i-w) .. i, that is
w predecessors plus itself. Excluded positions are removed from the softmax
sum; no large negative constants are added to scores.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from numerics import (
    ShapeError,
    Tensor,
    apply_rotary,
    as_tensor,
    concat,
    cumsum,
    einsum,
    matmul,
    reshape,
    softmax_rows,
    swapaxes,
    take,
)

logger = logging.getLogger(__name__)

# Band gather is used while the band is at most this fraction of the sequence;
# wider windows go through the dense score matrix with a band mask.
BAND_FRACTION = 0.25


class EmptySequenceError(ValueError):
    """Raised when a kernel receives zero positions."""


class WindowError(ValueError):
    """Raised for a window size below 1."""


class NumericalDegeneracyError(ValueError):
    """Raised when a linear-attention normalizer is not strictly positive."""


class PlanParamsError(ValueError):
    """Raised when a plan row does not match the layer's head count."""


class FeatureMapConfig(BaseModel):
    """Taylor-2 feature map settings. `normalizer` is the d in s = q.k / sqrt(d)."""
    model_config = ConfigDict(frozen=True)

    proj_dim: int = Field(default=16, ge=1)
    normalizer: float = Field(default=16.0, gt=0)

    @property
    def feature_len(self) -> int:
        return 1 + self.proj_dim + self.proj_dim * self.proj_dim


@dataclass
class AttentionParams:
    """
    Fused projections of one attention layer.

    w_q, w_k: D x (h * qk_dim); w_v: D x (h * d); w_o: (h * d) x D.
    For softmax layers qk_dim equals head_dim; linear layers project q and k
    to the feature-input width instead.
    """
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    num_heads: int
    head_dim: int
    qk_dim: Optional[int] = None

    def __post_init__(self):
        if self.qk_dim is None:
            self.qk_dim = self.head_dim
        model_dim = self.w_o.shape[1]
        if self.w_v.shape != (model_dim, self.num_heads * self.head_dim):
            raise ShapeError(f"w_v shape {self.w_v.shape} does not match D={model_dim}, h*d={self.num_heads * self.head_dim}")
        if self.w_o.shape[0] != self.num_heads * self.head_dim:
            raise ShapeError(f"w_o shape {self.w_o.shape} does not match h*d={self.num_heads * self.head_dim}")
        for name, w in (('w_q', self.w_q), ('w_k', self.w_k)):
            if w.shape != (model_dim, self.num_heads * self.qk_dim):
                raise ShapeError(f"{name} shape {w.shape} does not match D={model_dim}, h*qk={self.num_heads * self.qk_dim}")

    @property
    def model_dim(self) -> int:
        return self.w_o.shape[1]


class AttendedPairCounter:
    """Counts (query, key) pairs actually attended by the windowed kernels."""

    def __init__(self):
        self.pairs = 0
        self.calls = 0

    def add(self, pairs: int) -> None:
        self.pairs += int(pairs)
        self.calls += 1


def band_mask(n: int, w: int) -> np.ndarray:
    """n x n boolean mask, True where j in [max(0, i-w), i]."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return (j <= i) & (j >= i - w)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> int:
    if q.shape[-2] == 0:
        raise EmptySequenceError("attention over an empty sequence")
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"q {q.shape}, k {k.shape}, v {v.shape} do not line up")
    return q.shape[-2]


def _windowed(q: Tensor, k: Tensor, v: Tensor, w: int,
              counter: Optional[AttendedPairCounter] = None) -> Tensor:
    n = _check_qkv(q, k, v)
    w_eff = min(w, n - 1)
    scale = 1.0 / math.sqrt(q.shape[-1])
    batch = int(np.prod(q.shape[:-2])) if q.ndim > 2 else 1

    if (w_eff + 1) <= BAND_FRACTION * n:
        offsets = np.arange(-w_eff, 1)
        idx = np.arange(n)[:, None] + offsets[None, :]
        keep = idx >= 0
        idx = np.where(keep, idx, 0)
        k_band = take(k, idx, axis=-2)
        v_band = take(v, idx, axis=-2)
        scores = einsum('...nd,...nwd->...nw', q, k_band) * scale
        alpha = softmax_rows(scores, mask=keep)
        out = einsum('...nw,...nwd->...nd', alpha, v_band)
    else:
        keep = band_mask(n, w_eff)
        scores = matmul(q, swapaxes(k, -1, -2)) * scale
        alpha = softmax_rows(scores, mask=keep)
        out = matmul(alpha, v)

    if counter is not None:
        counter.add(int(keep.sum()) * batch)
    return out


def causal_attention(q: Tensor, k: Tensor, v: Tensor,
                     counter: Optional[AttendedPairCounter] = None) -> Tensor:
    """
    Full causal softmax attention over (..., n, d) inputs.

    Raises:
        EmptySequenceError: If n is 0
    """
    n = _check_qkv(q, k, v)
    return _windowed(q, k, v, n - 1, counter)


def swa_attention(q: Tensor, k: Tensor, v: Tensor, w: int,
                  counter: Optional[AttendedPairCounter] = None) -> Tensor:
    """
    Sliding window attention; token i sees positions max(0, i-w) .. i.

    Windows at or beyond n-1 run the causal path unchanged.

    Raises:
        WindowError: If w < 1
        EmptySequenceError: If n is 0
    """
    if w < 1:
        raise WindowError(f"window size must be >= 1, got {w}")
    return _windowed(q, k, v, w, counter)


def masked_dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                           w: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Dense oracle with -inf masking. Returns (output, alpha) where alpha holds
    the full n x n attention weights; w=None means plain causal masking.
    """
    n, d = q.shape[-2], q.shape[-1]
    mask = band_mask(n, n - 1 if w is None else w)
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(d)
    scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    alpha = e / e.sum(axis=-1, keepdims=True)
    return np.matmul(alpha, v), alpha


# --- linear attention ----------------------------------------------------------

def taylor2_feature_map(x: Tensor, cfg: FeatureMapConfig) -> Tensor:
    """
    phi(x) = [1, x / d^(1/4), vec(x x^T) / (sqrt(2) sqrt(d))], so that
    phi(q).phi(k) = 1 + s + s^2 / 2 with s = q.k / sqrt(d).
    """
    r = x.shape[-1]
    if r != cfg.proj_dim:
        raise ShapeError(f"feature map expects width {cfg.proj_dim}, got {r}")
    d = cfg.normalizer
    lead = x.shape[:-1]
    ones = as_tensor(np.ones(lead + (1,), dtype=x.dtype), x)
    first = x * (d ** -0.25)
    outer = reshape(x, lead + (r, 1)) * reshape(x, lead + (1, r))
    second = reshape(outer, lead + (r * r,)) * (1.0 / (math.sqrt(2.0) * math.sqrt(d)))
    return concat([ones, first, second], axis=-1)


def _check_denominator(den: np.ndarray) -> None:
    if not (den > 0).all():
        bad = np.argwhere(~(den > 0))[0]
        raise NumericalDegeneracyError(f"non-positive linear attention normalizer at {tuple(int(i) for i in bad)}")


def linear_attention(q: Tensor, k: Tensor, v: Tensor, cfg: FeatureMapConfig,
                     form: str = 'parallel') -> Tensor:
    """
    Causal linear attention o_i = phi(q_i) S_i / phi(q_i) z_i with
    S_i = sum_{j<=i} phi(k_j)^T v_j and z_i = sum_{j<=i} phi(k_j).

    Args:
        form: 'parallel' accumulates S and z with cumulative sums;
              'quadratic' evaluates the masked n x n kernel matrix instead

    Raises:
        NumericalDegeneracyError: If a normalizer is not strictly positive
    """
    n = q.shape[-2]
    if n == 0:
        raise EmptySequenceError("attention over an empty sequence")
    phi_q = taylor2_feature_map(q, cfg)
    phi_k = taylor2_feature_map(k, cfg)

    if form == 'parallel':
        kv = einsum('...nf,...nd->...nfd', phi_k, v)
        s = cumsum(kv, axis=-3)
        z = cumsum(phi_k, axis=-2)
        num = einsum('...nf,...nfd->...nd', phi_q, s)
        den = (phi_q * z).sum(axis=-1, keepdims=True)
    elif form == 'quadratic':
        tril = np.tril(np.ones((n, n), dtype=q.dtype))
        kernel = matmul(phi_q, swapaxes(phi_k, -1, -2)) * tril
        num = matmul(kernel, v)
        den = kernel.sum(axis=-1, keepdims=True)
    else:
        raise ValueError(f"unknown linear attention form {form!r}")
    _check_denominator(den.data)
    return num / den


# --- multi-head layers -----------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, h*e) -> (..., h, n, e)
    lead, width = x.shape[:-1], x.shape[-1]
    return swapaxes(reshape(x, lead + (heads, width // heads)), -2, -3)


def merge_heads(o: Tensor, params: AttentionParams) -> Tensor:
    """(..., h, n, d) head outputs -> (..., n, D) via concatenation and W_o."""
    o = swapaxes(o, -2, -3)
    merged = reshape(o, o.shape[:-2] + (params.num_heads * params.head_dim,))
    return matmul(merged, params.w_o)


def project_qkv(x: Tensor, params: AttentionParams, positions: np.ndarray,
                rope_base: float = 10000.0) -> Tuple[Tensor, Tensor, Tensor]:
    """Per-head q, k (rotated) and v, each shaped (..., h, n, e)."""
    h = params.num_heads
    q = apply_rotary(_split_heads(matmul(x, params.w_q), h), positions, rope_base)
    k = apply_rotary(_split_heads(matmul(x, params.w_k), h), positions, rope_base)
    v = _split_heads(matmul(x, params.w_v), h)
    return q, k, v


def window_groups(row: Sequence[int]) -> Dict[int, List[int]]:
    """Head indices keyed by window size, in order of first appearance."""
    groups: Dict[int, List[int]] = {}
    for head, w in enumerate(row):
        groups.setdefault(int(w), []).append(head)
    return groups


def mswa_layer(x: Tensor, params: AttentionParams, row: Sequence[int],
               positions: Optional[np.ndarray] = None, grouped: bool = True,
               rope_base: float = 10000.0, counter: Optional[AttendedPairCounter] = None,
               capture: Optional[Dict[str, np.ndarray]] = None) -> Tensor:
    """
    Multi-scale sliding window attention for one layer.

    Heads sharing a window size run as one batched group; group outputs are
    put back in the original head order before W_o. With grouped=False each
    head runs on its own, which is the reference assembly.

    Args:
        x: (..., n, D) input rows
        row: window size per head
        positions: absolute positions for rotary encoding (default 0..n-1)
        capture: if given, receives the rotated keys and the values

    Raises:
        PlanParamsError: If len(row) differs from the head count
    """
    h = params.num_heads
    if len(row) != h:
        raise PlanParamsError(f"plan row has {len(row)} windows but the layer has {h} heads")
    n = x.shape[-2]
    if positions is None:
        positions = np.arange(n)
    q, k, v = project_qkv(x, params, positions, rope_base)
    if capture is not None:
        capture['k'] = k.data
        capture['v'] = v.data

    if grouped:
        order: List[int] = []
        outputs: List[Tensor] = []
        for w, heads in window_groups(row).items():
            idx = np.asarray(heads)
            outputs.append(swa_attention(take(q, idx, -3), take(k, idx, -3), take(v, idx, -3), w, counter))
            order.extend(heads)
        stacked = concat(outputs, axis=-3) if len(outputs) > 1 else outputs[0]
        o = take(stacked, np.argsort(order), axis=-3)
    else:
        per_head = []
        for j, w in enumerate(row):
            idx = np.asarray([j])
            per_head.append(swa_attention(take(q, idx, -3), take(k, idx, -3), take(v, idx, -3), int(w), counter))
        o = concat(per_head, axis=-3)
    return merge_heads(o, params)


def project_linear(x: Tensor, params: AttentionParams, cfg: FeatureMapConfig, positions: np.ndarray,
                   rope_base: float = 10000.0) -> Tuple[Tensor, Tensor, Tensor]:
    """Feature-mapped phi(q), phi(k) and values for a linear-attention layer."""
    q, k, v = project_qkv(x, params, positions, rope_base)
    return taylor2_feature_map(q, cfg), taylor2_feature_map(k, cfg), v


def linear_layer(x: Tensor, params: AttentionParams, cfg: FeatureMapConfig,
                 positions: Optional[np.ndarray] = None, form: str = 'quadratic',
                 rope_base: float = 10000.0,
                 capture: Optional[Dict[str, np.ndarray]] = None) -> Tensor:
    """
    Multi-head linear attention: q and k are projected to cfg.proj_dim per
    head and rotated before the feature map.
    """
    n = x.shape[-2]
    if positions is None:
        positions = np.arange(n)
    q, k, v = project_qkv(x, params, positions, rope_base)
    if capture is not None:
        capture['phi_k'] = taylor2_feature_map(k, cfg).data
        capture['v'] = v.data
    return merge_heads(linear_attention(q, k, v, cfg, form=form), params)
