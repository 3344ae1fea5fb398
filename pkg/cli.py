#!/usr/bin/env python3
"""
Command-line driver: plan, train, eval, bench, cost and compare.

Configuration comes from built-in defaults, then an optional `key = value`
file (--config), then command-line flags, later sources winning. Every run
writes its resolved configuration next to its outputs.
"""

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from cost_model import (
    format_relative_cost_table,
    format_report,
    relative_cost_table,
    report,
    write_report_csv,
    write_table_csv,
)
from decode_state import decode_benchmark, summarize_benchmark
from model import (
    ConfigError,
    MSWAModel,
    ModelConfig,
    TrainConfig,
    compare_budget_matched,
    evaluate,
    load_checkpoint,
    load_corpus,
    split_corpus,
    train,
    write_comparison_csv,
    write_metrics_csv,
)
from window_plan import Strategy, build_plan, format_fraction, total_budget

logger = logging.getLogger(__name__)

MODEL_KEYS = [k for k in ModelConfig.model_fields if k != 'vocab_size']
TRAIN_KEYS = list(TrainConfig.model_fields)
RUN_KEYS = ['preset', 'corpus', 'checkpoint', 'checkpoint_dir', 'resume', 'out', 'valid_offset', 'test_offset',
            'split', 'length', 'bench_every', 'reference_base', 'swa_window', 'mswa_window']
PLAN_KEYS = ['strategy', 'layers', 'heads', 'base_window']
LIST_KEYS = {'layer_pattern', 'betas'}


class RunConfig(BaseModel):
    """Resolved view of model, training and path settings for one run."""
    model_config = ConfigDict(protected_namespaces=())

    model: ModelConfig
    train: TrainConfig
    preset: Optional[str] = None
    corpus: Optional[str] = None
    checkpoint: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    resume: Optional[str] = None
    out: str = 'runs/latest'
    valid_offset: Optional[int] = None
    test_offset: Optional[int] = None
    split: str = 'test'
    length: Optional[int] = None
    bench_every: int = 1
    reference_base: Optional[int] = None
    swa_window: int = 64
    mswa_window: int = 64

    @property
    def sequence_length(self) -> int:
        """Positions swept by bench and cost: `length`, else the model's max_seq_len."""
        return self.length if self.length is not None else self.model.max_seq_len

    def to_text(self) -> str:
        values: Dict[str, Any] = {}
        values.update(self.model.model_dump(mode='json', exclude={'vocab_size'}))
        values.update(self.train.model_dump(mode='json'))
        values.update(self.model_dump(mode='json', exclude={'model', 'train'}))
        return format_config_text(values, MODEL_KEYS + TRAIN_KEYS + RUN_KEYS)


def format_config_text(values: Dict[str, Any], keys: List[str]) -> str:
    """Render `key = value` lines in `keys` order, skipping unset values."""
    lines = ['# resolved configuration']
    for key in keys:
        value = values.get(key)
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ','.join(str(v) for v in value)
        lines.append(f'{key} = {value}')
    return '\n'.join(lines) + '\n'


def parse_config_text(text: str) -> Dict[str, str]:
    """
    Parse `key = value` lines; blank lines and `#` comments are skipped.

    Raises:
        ConfigError: If a line has no '=' or a key is repeated
    """
    values: Dict[str, str] = {}
    for line_num, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"config line {line_num} is not 'key = value': {raw!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if key in values:
            raise ConfigError(f"config key {key!r} is set twice (line {line_num})")
        values[key] = value
    return values


def _validation_message(error: ValidationError) -> str:
    parts = []
    for err in error.errors():
        loc = '.'.join(str(p) for p in err['loc']) or 'config'
        parts.append(f"{loc}: {err['msg']}")
    return '; '.join(parts)


def resolve_config(config_path: Optional[str], overrides: Dict[str, str]) -> RunConfig:
    """
    Merge defaults, config file and command-line overrides.

    Raises:
        ConfigError: For unknown keys, invalid values or conflicting keys
        FileNotFoundError: If the config file does not exist
    """
    merged: Dict[str, str] = {}
    if config_path:
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                merged.update(parse_config_text(f.read()))
        except FileNotFoundError:
            raise FileNotFoundError(f"Config file not found: {config_path}")
    merged.update({k: v for k, v in overrides.items() if v is not None})

    unknown = sorted(set(merged) - set(MODEL_KEYS) - set(TRAIN_KEYS) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    def pick(keys: List[str]) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for key in keys:
            if key in merged:
                value = merged[key]
                out[key] = [v.strip() for v in value.split(',')] if key in LIST_KEYS else value
        return out

    model_kwargs = pick(MODEL_KEYS)
    run_kwargs = pick(RUN_KEYS)
    try:
        if run_kwargs.get('preset') == 'hybrid' and 'layer_pattern' not in model_kwargs:
            layers = int(model_kwargs.pop('layers', 12))
            model = ModelConfig.hybrid(layers=layers, **model_kwargs)
        elif run_kwargs.get('preset') not in (None, 'hybrid'):
            raise ConfigError(f"preset must be 'hybrid', got {run_kwargs['preset']!r}")
        else:
            model = ModelConfig(**model_kwargs)
        train_cfg = TrainConfig(**pick(TRAIN_KEYS))
        run = RunConfig(model=model, train=train_cfg, **run_kwargs)
    except ValidationError as e:
        raise ConfigError(_validation_message(e))

    if run.train.seq_len > run.model.max_seq_len:
        raise ConfigError(f"seq_len ({run.train.seq_len}) conflicts with max_seq_len ({run.model.max_seq_len})")
    return run


def persist_config(run: RunConfig) -> Path:
    return write_resolved_config(run.out, run.to_text())


def write_resolved_config(out_dir: str, text: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / 'resolved_config.txt'
    path.write_text(text, encoding='utf-8')
    logger.info(f"Resolved config written to {path}")
    return path


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    return {key: getattr(args, key) for key in MODEL_KEYS + TRAIN_KEYS + RUN_KEYS
            if getattr(args, key, None) is not None}


def _require(value: Optional[str], key: str) -> str:
    if not value:
        raise ConfigError(f"missing required key {key!r}")
    return value


# --- subcommands ----------------------------------------------------------------

def cmd_plan(args: argparse.Namespace) -> int:
    plan = build_plan(Strategy(args.strategy), args.layers, args.heads, args.base)
    budget = total_budget(plan)
    text = plan.to_text()
    print(text, end='')
    print(f"total={budget.total_windows} ratio={format_fraction(budget.ratio_to_uniform)}")
    if args.out:
        values = {'strategy': args.strategy, 'layers': args.layers, 'heads': args.heads, 'base_window': args.base}
        write_resolved_config(args.out, format_config_text(values, PLAN_KEYS))
        (Path(args.out) / 'plan.txt').write_text(text, encoding='utf-8')
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run = resolve_config(args.config, _overrides(args))
    persist_config(run)
    corpus = load_corpus(_require(run.corpus, 'corpus'))
    splits = split_corpus(corpus, run.valid_offset, run.test_offset)
    model = MSWAModel(run.model, seed=run.train.seed)
    resume = load_checkpoint(run.resume) if run.resume else None
    checkpoint_dir = run.checkpoint_dir or os.path.join(run.out, 'checkpoints')
    history = list(train(model, splits['train'], run.train, checkpoint_dir=checkpoint_dir, resume=resume))
    write_metrics_csv(history, os.path.join(run.out, 'metrics.csv'))
    print(f"trained {len(history)} steps: initial {history[0].loss_bpc:.3f} bpc, final {history[-1].loss_bpc:.3f} bpc")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = resolve_config(args.config, _overrides(args))
    persist_config(run)
    checkpoint = load_checkpoint(_require(run.checkpoint, 'checkpoint'))
    model = checkpoint.build_model()
    corpus = load_corpus(_require(run.corpus, 'corpus'))
    splits = split_corpus(corpus, run.valid_offset, run.test_offset)
    if run.split not in splits:
        raise ConfigError(f"split must be one of {sorted(splits)}, got {run.split!r}")
    seq_len = min(run.train.seq_len, model.config.max_seq_len)
    result = evaluate(model, splits[run.split], seq_len)
    with open(os.path.join(run.out, 'eval.csv'), 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['split', 'tokens', 'nll', 'ppl', 'bpc'])
        writer.writerow([run.split, result.tokens, f'{result.nll:.8f}', f'{result.ppl:.6f}', f'{result.bpc:.6f}'])
    print(f"ppl={result.ppl:.2f} bpc={result.bpc:.3f}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    run = resolve_config(args.config, _overrides(args))
    persist_config(run)
    if run.checkpoint:
        model = load_checkpoint(run.checkpoint).build_model()
    else:
        model = MSWAModel(run.model, seed=run.train.seed)
    length = run.length if run.length is not None else model.config.max_seq_len
    if length > model.config.max_seq_len:
        raise ConfigError(f"length ({length}) conflicts with max_seq_len ({model.config.max_seq_len})")
    rows = decode_benchmark(model, length, seed=run.train.seed, every=run.bench_every)
    with open(os.path.join(run.out, 'bench.csv'), 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['position', 'step_micros', 'cache_bytes'])
        for r in rows:
            writer.writerow([r.position, f'{r.step_micros:.1f}', r.cache_bytes])
    summary = summarize_benchmark(rows)
    print(f"median step {summary['median_step_micros']:.1f} us over {summary['positions']} positions, "
          f"peak cache {summary['max_cache_bytes']} bytes")
    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    run = resolve_config(args.config, _overrides(args))
    persist_config(run)
    if args.compare:
        rows = relative_cost_table()
        print(format_relative_cost_table(rows))
        write_table_csv(rows, os.path.join(run.out, 'relative_cost.csv'))
        return 0
    reference = None
    if run.reference_base is not None:
        reference = run.model.model_copy(update={'strategy': Strategy.MSWA, 'base_window': run.reference_base})
    result = report(run.model, run.sequence_length, reference)
    print(format_report(result))
    write_report_csv(result, os.path.join(run.out, 'cost.csv'))
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    run = resolve_config(args.config, _overrides(args))
    persist_config(run)
    corpus = load_corpus(_require(run.corpus, 'corpus'))
    splits = split_corpus(corpus, run.valid_offset, run.test_offset)
    swa = run.model.model_copy(update={'strategy': Strategy.UNIFORM, 'base_window': run.swa_window})
    mswa = run.model.model_copy(update={'strategy': Strategy.MSWA, 'base_window': run.mswa_window})
    rows = compare_budget_matched(swa, mswa, splits, run.train, seed=run.train.seed)
    write_comparison_csv(rows, os.path.join(run.out, 'comparison.csv'))
    for r in rows:
        print(f"{r.strategy:<5} w={r.base_window:<5} budget={r.total_budget:<7} "
              f"relative={format_fraction(r.relative_cost):<9} train_bpc={r.train_bpc:.3f} valid_bpc={r.valid_bpc:.3f}")
    return 0


# --- parser -------------------------------------------------------------------------

def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='plain-text key = value config file')
    for key in MODEL_KEYS + TRAIN_KEYS + RUN_KEYS:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar='VALUE')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='mswa', description='Multi-scale sliding window attention toolkit')
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    parser.add_argument('--quiet', action='store_true', help='warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True)

    plan = sub.add_parser('plan', help='print a window plan and its budget')
    plan.add_argument('--strategy', default='mswa', choices=[s.value for s in Strategy])
    plan.add_argument('--layers', type=int, default=4)
    plan.add_argument('--heads', type=int, default=4)
    plan.add_argument('--base', type=int, default=16)
    plan.add_argument('--out', default=None)
    plan.set_defaults(handler=cmd_plan)

    for name, handler, help_text in (
        ('train', cmd_train, 'train a byte-level model and write metrics.csv'),
        ('eval', cmd_eval, 'evaluate a checkpoint: ppl and bpc'),
        ('bench', cmd_bench, 'time step-by-step decoding and report cache bytes'),
        ('cost', cmd_cost, 'analytic FLOP / cache report'),
        ('compare', cmd_compare, 'budget-matched SWA vs MSWA training run'),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_override_flags(p)
        if name == 'cost':
            p.add_argument('--compare', action='store_true', help='relative-cost table across base windows')
        p.set_defaults(handler=handler)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level)
    try:
        return args.handler(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
