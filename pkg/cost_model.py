"""
Analytic compute and memory accounting for full, sliding window, MSWA and
linear attention. Every count is an exact integer obtained by summation.
"""

import csv
import logging
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import BaseModel, ConfigDict

from model import Mechanism, ModelConfig
from window_plan import Strategy, format_fraction, round_half_up

logger = logging.getLogger(__name__)

TABLE_BASES = (512, 256, 128, 64)


def attended_pairs(n: int, w: int) -> int:
    """sum_{i<n} (min(i, w) + 1): queries times the keys each one sees."""
    if n <= 0:
        return 0
    if w >= n - 1:
        return n * (n + 1) // 2
    return w * (w + 1) // 2 + (n - w) * (w + 1)


class LayerCost(BaseModel):
    layer: int
    mechanism: str
    window_budget: int
    attended_pairs: int
    attention_flops: int
    softmax_exps: int
    projection_flops: int
    ffn_flops: int
    cache_rows: int
    state_scalars: int


class CostReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    seq_len: int
    window_budget: int
    attended_pairs: int
    attention_flops: int
    cache_rows: int
    state_scalars: int
    relative_cost: Optional[Fraction] = None
    layers: List[LayerCost]


def report(config: ModelConfig, n: int, reference: Optional[ModelConfig] = None) -> CostReport:
    """
    Exact cost of one forward pass over n tokens.

    Attention FLOPs are 2 * 2 * d per attended pair (scores and weighted values);
    full layers use w = n - 1. Linear heads spend 2 * (2*F*d + 2*F) per token on
    accumulator updates and reads. Cache rows are the KV rows held after n
    tokens; linear state is itemized separately as scalars.
    """
    plan = config.plan()
    h, d, D = config.heads, config.head_dim, config.model_dim
    F = config.feature_map().feature_len
    ffn = 2 * n * 3 * D * config.resolved_ffn_dim
    local_rank = {layer: k for k, layer in enumerate(config.local_layers)}

    layers: List[LayerCost] = []
    for i, mechanism in enumerate(config.pattern):
        if mechanism == Mechanism.LINEAR:
            r = config.proj_dim
            layers.append(LayerCost(
                layer=i, mechanism=mechanism.value, window_budget=0, attended_pairs=0,
                attention_flops=h * n * 2 * (2 * F * d + 2 * F), softmax_exps=0,
                projection_flops=2 * n * D * (2 * h * r + h * d) + 2 * n * h * d * D,
                ffn_flops=ffn, cache_rows=0, state_scalars=h * (F * d + F),
            ))
            continue
        row = plan.row(local_rank[i]) if mechanism == Mechanism.LOCAL else [n - 1] * h
        pairs = sum(attended_pairs(n, w) for w in row)
        layers.append(LayerCost(
            layer=i, mechanism=mechanism.value, window_budget=sum(row), attended_pairs=pairs,
            attention_flops=2 * 2 * d * pairs, softmax_exps=pairs,
            projection_flops=2 * n * D * 3 * h * d + 2 * n * h * d * D,
            ffn_flops=ffn, cache_rows=sum(min(n, w) for w in row), state_scalars=0,
        ))

    result = CostReport(
        seq_len=n,
        window_budget=sum(c.window_budget for c in layers),
        attended_pairs=sum(c.attended_pairs for c in layers),
        attention_flops=sum(c.attention_flops for c in layers),
        cache_rows=sum(c.cache_rows for c in layers),
        state_scalars=sum(c.state_scalars for c in layers),
        layers=layers,
    )
    if reference is not None:
        ref = report(reference, n)
        result.relative_cost = Fraction(result.window_budget, ref.window_budget)
    return result


class RelativeCostRow(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    attention: str
    length_setting: str
    relative_cost: Fraction

    @property
    def rounded(self) -> float:
        return round_half_up(self.relative_cost)


def relative_cost_table(bases: Sequence[int] = TABLE_BASES, layers: int = 12, heads: int = 8,
                        head_dim: int = 64, reference_base: int = 128, seq_len: int = 2048) -> List[RelativeCostRow]:
    """SWA and MSWA at each base window, costed against MSWA at `reference_base`."""
    def config(strategy: Strategy, base: int) -> ModelConfig:
        return ModelConfig(layers=layers, heads=heads, head_dim=head_dim, model_dim=heads * head_dim,
                           base_window=base, strategy=strategy, max_seq_len=seq_len)

    reference = config(Strategy.MSWA, reference_base)
    rows = []
    for base in bases:
        for strategy, label in ((Strategy.UNIFORM, 'SWA'), (Strategy.MSWA, 'MSWA')):
            cfg = config(strategy, base)
            plan = cfg.plan()
            setting = f"w={base}" if strategy == Strategy.UNIFORM else f"w_ij from {plan.min_window()} to {plan.max_window()}"
            rows.append(RelativeCostRow(attention=label, length_setting=setting,
                                        relative_cost=report(cfg, seq_len, reference).relative_cost))
    return rows


def format_report(result: CostReport) -> str:
    header = ['layer', 'mechanism', 'windows', 'pairs', 'attn_flops', 'proj_flops', 'ffn_flops', 'cache_rows', 'state']
    body = [[str(c.layer), c.mechanism, str(c.window_budget), str(c.attended_pairs), str(c.attention_flops),
             str(c.projection_flops), str(c.ffn_flops), str(c.cache_rows), str(c.state_scalars)]
            for c in result.layers]
    widths = [max(len(row[k]) for row in [header] + body) for k in range(len(header))]
    lines = ['  '.join(cell.rjust(widths[k]) for k, cell in enumerate(row)) for row in [header] + body]
    lines.append(f"n={result.seq_len} window_budget={result.window_budget} pairs={result.attended_pairs} "
                 f"attention_flops={result.attention_flops} cache_rows={result.cache_rows} "
                 f"state_scalars={result.state_scalars}")
    if result.relative_cost is not None:
        lines.append(f"relative_cost={format_fraction(result.relative_cost)} "
                     f"({round_half_up(result.relative_cost):.2f})")
    return '\n'.join(lines)


def format_relative_cost_table(rows: Sequence[RelativeCostRow]) -> str:
    width = max(len(r.length_setting) for r in rows)
    return '\n'.join(f"{r.attention:<5} {r.length_setting:<{width}} {r.rounded:.2f}" for r in rows)


def write_report_csv(result: CostReport, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['layer', 'mechanism', 'window_budget', 'attended_pairs', 'attention_flops',
                         'softmax_exps', 'projection_flops', 'ffn_flops', 'cache_rows', 'state_scalars'])
        for c in result.layers:
            writer.writerow([c.layer, c.mechanism, c.window_budget, c.attended_pairs, c.attention_flops,
                             c.softmax_exps, c.projection_flops, c.ffn_flops, c.cache_rows, c.state_scalars])


def write_table_csv(rows: Sequence[RelativeCostRow], path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['attention', 'length_setting', 'relative_cost', 'relative_cost_exact'])
        for r in rows:
            writer.writerow([r.attention, r.length_setting, f'{r.rounded:.2f}', format_fraction(r.relative_cost)])
