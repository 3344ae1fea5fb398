"""
Byte-level decoder-only language models built from full, multi-scale sliding
window and linear attention layers, with the desk-scale training loop,
evaluation and checkpoint container.
"""

import csv
import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import jsonschema
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing_extensions import Self

from attention_kernels import (
    AttendedPairCounter,
    AttentionParams,
    FeatureMapConfig,
    linear_layer,
    mswa_layer,
)
from numerics import (
    AdamW,
    Parameter,
    Tensor,
    backward,
    clip_grad_norm,
    cosine_lr,
    cross_entropy_with_logits,
    embedding,
    make_rng,
    matmul,
    no_grad,
    rms_norm,
    swiglu,
    truncated_normal,
)
from window_plan import Strategy, WindowPlan, build_plan, format_fraction, total_budget

logger = logging.getLogger(__name__)

VOCAB_SIZE = 256
LN2 = math.log(2.0)
CHECKPOINT_MAGIC = b'MSWACKPT'
HEADER_SCHEMA_PATH = Path(__file__).with_name('checkpoint_header_schema.json')
EVAL_WORKERS_ENV = 'MSWA_EVAL_WORKERS'


class ConfigError(ValueError):
    """Raised for invalid or conflicting configuration keys."""


class VocabularyError(ValueError):
    """Raised for token ids outside the byte vocabulary."""


class LengthError(ValueError):
    """Raised when a sequence exceeds the configured maximum length."""


class DivergenceError(ValueError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step


class DataError(ValueError):
    """Raised when a corpus split cannot provide any prediction target."""


class CheckpointError(ValueError):
    """Raised when a checkpoint container is malformed."""


class BudgetError(ValueError):
    """Raised when a budget-matched comparison is not actually budget matched."""


class Mechanism(str, Enum):
    LOCAL = 'local'
    LINEAR = 'linear'
    FULL = 'full'


class ModelConfig(BaseModel):
    """Shape of a byte-level decoder. Local layers take their windows from the plan."""
    model_config = ConfigDict(frozen=True)

    layers: int = Field(default=4, ge=1)
    heads: int = Field(default=4, ge=1)
    model_dim: int = Field(default=128, ge=1)
    head_dim: int = Field(default=32, ge=2)
    vocab_size: int = VOCAB_SIZE
    base_window: int = Field(default=32, ge=1)
    strategy: Strategy = Strategy.MSWA
    layer_pattern: Optional[Tuple[Mechanism, ...]] = None
    proj_dim: int = Field(default=16, ge=2)
    max_seq_len: int = Field(default=512, ge=2)
    ffn_dim: Optional[int] = None
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    init_std: float = 0.02
    dtype: Literal['float32', 'float64'] = 'float64'

    @model_validator(mode='after')
    def _consistent(self):
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"vocab_size must be {VOCAB_SIZE} (byte-level), got {self.vocab_size}")
        if self.model_dim != self.heads * self.head_dim:
            raise ValueError(f"model_dim ({self.model_dim}) must equal heads ({self.heads}) * head_dim ({self.head_dim})")
        if self.head_dim % 2 or self.proj_dim % 2:
            raise ValueError(f"head_dim ({self.head_dim}) and proj_dim ({self.proj_dim}) must be even for rotary positions")
        if self.layer_pattern is not None and len(self.layer_pattern) != self.layers:
            raise ValueError(f"layer_pattern has {len(self.layer_pattern)} entries but layers is {self.layers}")
        return self

    @classmethod
    def hybrid(cls, layers: int = 12, **kwargs: Any) -> Self:
        """Repeating [Linear, Local, Local] blocks."""
        if layers % 3:
            raise ConfigError(f"hybrid preset needs layers divisible by 3, got layers={layers}")
        pattern = (Mechanism.LINEAR, Mechanism.LOCAL, Mechanism.LOCAL) * (layers // 3)
        return cls(layers=layers, layer_pattern=pattern, **kwargs)

    @property
    def pattern(self) -> Tuple[Mechanism, ...]:
        return self.layer_pattern if self.layer_pattern is not None else (Mechanism.LOCAL,) * self.layers

    @property
    def local_layers(self) -> List[int]:
        return [i for i, m in enumerate(self.pattern) if m == Mechanism.LOCAL]

    @property
    def resolved_ffn_dim(self) -> int:
        if self.ffn_dim is not None:
            return self.ffn_dim
        return int(math.ceil(8 * self.model_dim / 3 / 16) * 16)

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def feature_map(self) -> FeatureMapConfig:
        return FeatureMapConfig(proj_dim=self.proj_dim, normalizer=float(self.head_dim))

    def plan(self) -> Optional[WindowPlan]:
        """Window plan over the Local layers only, shallow to deep."""
        local = self.local_layers
        if not local:
            return None
        return build_plan(self.strategy, len(local), self.heads, self.base_window)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=200, ge=1)
    batch_size: int = Field(default=8, ge=1)
    seq_len: int = Field(default=128, ge=1)
    lr: float = Field(default=3e-3, gt=0)
    min_lr: float = Field(default=3e-4, ge=0)
    warmup_steps: int = Field(default=20, ge=0)
    betas: Tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    schedule: Literal['cosine'] = 'cosine'
    seed: int = 0
    checkpoint_every: int = Field(default=0, ge=0)
    log_every: int = Field(default=10, ge=1)

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len


@dataclass
class DecoderLayer:
    index: int
    mechanism: Mechanism
    attn: AttentionParams
    attn_norm: Parameter
    ffn_norm: Parameter
    w_gate: Parameter
    w_up: Parameter
    w_down: Parameter
    window_row: Optional[List[int]] = None


class MSWAModel:
    """
    Pre-norm decoder: embedding, then per layer x += attn(norm(x)) and
    x += SwiGLU(norm(x)), then a final norm and the output projection.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.plan = config.plan()
        self.feature_cfg = config.feature_map()
        self.parameters: Dict[str, Parameter] = {}

        D, h, d = config.model_dim, config.heads, config.head_dim
        self.embed = self._param('embed', (config.vocab_size, D))
        self.layers: List[DecoderLayer] = []
        local_rank = {layer: k for k, layer in enumerate(config.local_layers)}
        for i, mechanism in enumerate(config.pattern):
            prefix = f'layers.{i}'
            qk = config.proj_dim if mechanism == Mechanism.LINEAR else d
            attn = AttentionParams(
                w_q=self._param(f'{prefix}.attn.w_q', (D, h * qk)),
                w_k=self._param(f'{prefix}.attn.w_k', (D, h * qk)),
                w_v=self._param(f'{prefix}.attn.w_v', (D, h * d)),
                w_o=self._param(f'{prefix}.attn.w_o', (h * d, D)),
                num_heads=h, head_dim=d, qk_dim=qk,
            )
            if mechanism == Mechanism.LOCAL:
                row = self.plan.row(local_rank[i])
            elif mechanism == Mechanism.FULL:
                row = [config.max_seq_len - 1] * h
            else:
                row = None
            F = config.resolved_ffn_dim
            self.layers.append(DecoderLayer(
                index=i, mechanism=mechanism, attn=attn,
                attn_norm=self._param(f'{prefix}.attn_norm', (D,), init='ones'),
                ffn_norm=self._param(f'{prefix}.ffn_norm', (D,), init='ones'),
                w_gate=self._param(f'{prefix}.ffn.w_gate', (D, F)),
                w_up=self._param(f'{prefix}.ffn.w_up', (D, F)),
                w_down=self._param(f'{prefix}.ffn.w_down', (F, D)),
                window_row=row,
            ))
        self.final_norm = self._param('final_norm', (D,), init='ones')
        self.lm_head = self._param('lm_head', (D, config.vocab_size))

        if self.plan is not None and self.plan.max_window() > config.max_seq_len - 1:
            logger.warning(f"Largest window {self.plan.max_window()} exceeds max_seq_len-1={config.max_seq_len - 1}; "
                           f"masks are capped at the sequence length")
        logger.debug(f"Built model with {self.num_parameters()} parameters, pattern "
                     f"{[m.value for m in config.pattern]}")

    def _param(self, name: str, shape: Tuple[int, ...], init: str = 'normal') -> Parameter:
        if name in self.parameters:
            raise ConfigError(f"duplicate parameter name {name!r}")
        dtype = self.config.np_dtype
        if init == 'ones':
            data = np.ones(shape, dtype=dtype)
        elif init == 'zeros':
            data = np.zeros(shape, dtype=dtype)
        else:
            data = truncated_normal(make_rng(self.seed, name), shape, self.config.init_std).astype(dtype)
        param = Parameter(data, name=name, dtype=dtype)
        self.parameters[name] = param
        return param

    def parameter_list(self) -> List[Parameter]:
        return list(self.parameters.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters.values())

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.grad = None

    def check_tokens(self, tokens: Any) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 0:
            ids = ids.reshape(1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.config.vocab_size)][0]
            raise VocabularyError(f"token id {int(bad)} outside vocabulary [0, {self.config.vocab_size})")
        if ids.shape[-1] > self.config.max_seq_len:
            raise LengthError(f"sequence length {ids.shape[-1]} exceeds max_seq_len={self.config.max_seq_len}")
        return ids

    # --- building blocks shared with incremental decoding ----------------

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        return embedding(self.embed, ids)

    def attention(self, layer: DecoderLayer, x: Tensor, positions: np.ndarray,
                  capture: Optional[Dict[str, np.ndarray]] = None,
                  counter: Optional[AttendedPairCounter] = None) -> Tensor:
        h = rms_norm(x, layer.attn_norm, self.config.norm_eps)
        if layer.mechanism == Mechanism.LINEAR:
            return linear_layer(h, layer.attn, self.feature_cfg, positions, form='quadratic',
                                rope_base=self.config.rope_base, capture=capture)
        return mswa_layer(h, layer.attn, layer.window_row, positions, rope_base=self.config.rope_base,
                          counter=counter, capture=capture)

    def feed_forward(self, layer: DecoderLayer, x: Tensor) -> Tensor:
        h = rms_norm(x, layer.ffn_norm, self.config.norm_eps)
        return x + swiglu(h, layer.w_gate, layer.w_up, layer.w_down)

    def output(self, x: Tensor) -> Tensor:
        return matmul(rms_norm(x, self.final_norm, self.config.norm_eps), self.lm_head)

    # --- full-sequence passes ------------------------------------------------

    def forward(self, tokens: Any, capture: Optional[Dict[int, Dict[str, np.ndarray]]] = None,
                counter: Optional[AttendedPairCounter] = None) -> Tensor:
        """
        Logits for every position of a (n,) or (batch, n) id array.

        Raises:
            LengthError: If n exceeds max_seq_len
            VocabularyError: If an id is outside the byte vocabulary
        """
        ids = self.check_tokens(tokens)
        positions = np.arange(ids.shape[-1])
        x = self.embed_tokens(ids)
        for layer in self.layers:
            layer_capture = None
            if capture is not None:
                layer_capture = capture.setdefault(layer.index, {})
            x = x + self.attention(layer, x, positions, layer_capture, counter)
            x = self.feed_forward(layer, x)
        return self.output(x)

    def loss(self, inputs: Any, targets: Any) -> Tensor:
        return cross_entropy_with_logits(self.forward(inputs), np.asarray(targets, dtype=np.int64))


# --- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    optimizer: Optional[Dict[str, Any]] = None
    rng_state: Optional[Dict[str, Any]] = None

    def build_model(self) -> MSWAModel:
        model = MSWAModel(self.config, seed=self.seed)
        for name, param in model.parameters.items():
            if name not in self.params:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            param.data[...] = self.params[name]
        return model

    def restore_optimizer(self, optimizer: AdamW) -> None:
        if self.optimizer is None:
            logger.warning(f"Checkpoint at step {self.step} carries no optimizer state; moments start from zero")
            return
        optimizer.load_state_dict(self.optimizer)

    def restore_rng(self, rng: np.random.Generator) -> None:
        if self.rng_state is None:
            raise CheckpointError(f"checkpoint at step {self.step} carries no batch sampler state")
        rng.bit_generator.state = self.rng_state


def _header_schema() -> Dict[str, Any]:
    with open(HEADER_SCHEMA_PATH, 'r', encoding='utf-8') as f:
        return json.load(f)


def _validate_header(header: Dict[str, Any]) -> None:
    try:
        jsonschema.validate(instance=header, schema=_header_schema())
    except jsonschema.exceptions.ValidationError as e:
        logger.error(f"Checkpoint header failed validation: {e.message}")
        raise CheckpointError(f"checkpoint header does not match its schema: {e.message}")


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """
    Serialize to MAGIC | u64 little-endian header length | JSON header | blobs.
    Blobs are raw little-endian float32 at the offsets listed in the header.
    """
    blobs: List[Tuple[str, np.ndarray]] = [(f'param/{k}', v) for k, v in checkpoint.params.items()]
    optimizer_meta = None
    if checkpoint.optimizer is not None:
        optimizer_meta = {'t': int(checkpoint.optimizer['t'])}
        for name in checkpoint.params:
            blobs.append((f'exp_avg/{name}', checkpoint.optimizer['exp_avg'][name]))
            blobs.append((f'exp_avg_sq/{name}', checkpoint.optimizer['exp_avg_sq'][name]))

    tensors, chunks, offset = [], [], 0
    for name, array in blobs:
        raw = np.ascontiguousarray(array, dtype='<f4').tobytes()
        tensors.append({'name': name, 'shape': list(array.shape), 'offset': offset, 'nbytes': len(raw)})
        chunks.append(raw)
        offset += len(raw)

    header = {
        'format': 'mswa-checkpoint',
        'version': 1,
        'config': checkpoint.config.model_dump(mode='json'),
        'seed': checkpoint.seed,
        'step': checkpoint.step,
        'optimizer': optimizer_meta,
        'rng_state': checkpoint.rng_state,
        'tensors': tensors,
    }
    _validate_header(header)
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return CHECKPOINT_MAGIC + struct.pack('<Q', len(header_bytes)) + header_bytes + b''.join(chunks)


def decode_checkpoint(payload: bytes) -> Checkpoint:
    if payload[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an MSWA checkpoint (bad magic)")
    start = len(CHECKPOINT_MAGIC)
    if len(payload) < start + 8:
        raise CheckpointError(f"truncated header: {len(payload)} bytes is shorter than magic plus length field")
    (header_len,) = struct.unpack('<Q', payload[start:start + 8])
    body = start + 8 + header_len
    if body > len(payload):
        raise CheckpointError(f"truncated header: declares {header_len} bytes, {len(payload) - start - 8} present")
    try:
        header = json.loads(payload[start + 8:body].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}")
    _validate_header(header)

    arrays: Dict[str, np.ndarray] = {}
    for entry in header['tensors']:
        lo = body + entry['offset']
        raw = payload[lo:lo + entry['nbytes']]
        if len(raw) != entry['nbytes']:
            raise CheckpointError(f"tensor {entry['name']!r} is truncated")
        arrays[entry['name']] = np.frombuffer(raw, dtype='<f4').reshape(entry['shape']).copy()

    params = {k[len('param/'):]: v for k, v in arrays.items() if k.startswith('param/')}
    optimizer = None
    if header['optimizer'] is not None:
        optimizer = {
            't': header['optimizer']['t'],
            'exp_avg': {k[len('exp_avg/'):]: v for k, v in arrays.items() if k.startswith('exp_avg/')},
            'exp_avg_sq': {k[len('exp_avg_sq/'):]: v for k, v in arrays.items() if k.startswith('exp_avg_sq/')},
        }
    return Checkpoint(config=ModelConfig.model_validate(header['config']), params=params,
                      step=header['step'], seed=header['seed'], optimizer=optimizer,
                      rng_state=header['rng_state'])


def snapshot(model: MSWAModel, optimizer: Optional[AdamW] = None, step: int = 0,
             rng_state: Optional[Dict[str, Any]] = None) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        params={name: p.data for name, p in model.parameters.items()},
        step=step, seed=model.seed,
        optimizer=optimizer.state_dict() if optimizer is not None else None,
        rng_state=rng_state,
    )


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode_checkpoint(checkpoint))
    logger.info(f"Wrote checkpoint {path} (step {checkpoint.step})")


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, 'rb') as f:
            return decode_checkpoint(f.read())
    except FileNotFoundError:
        raise FileNotFoundError(f"Checkpoint not found: {path}")


# --- corpus ------------------------------------------------------------------------

def load_corpus(path: str) -> np.ndarray:
    try:
        with open(path, 'rb') as f:
            return np.frombuffer(f.read(), dtype=np.uint8).copy()
    except FileNotFoundError:
        raise FileNotFoundError(f"Corpus not found: {path}")


def split_corpus(data: np.ndarray, valid_offset: Optional[int] = None,
                 test_offset: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Split bytes at the given offsets; defaults are 90% / 5% / 5%."""
    n = len(data)
    valid_offset = int(n * 0.9) if valid_offset is None else valid_offset
    test_offset = int(n * 0.95) if test_offset is None else test_offset
    if not 0 <= valid_offset <= test_offset <= n:
        raise ConfigError(f"split offsets must satisfy 0 <= valid_offset ({valid_offset}) "
                          f"<= test_offset ({test_offset}) <= corpus size ({n})")
    return {'train': data[:valid_offset], 'valid': data[valid_offset:test_offset], 'test': data[test_offset:]}


def sample_batch(data: np.ndarray, batch_size: int, seq_len: int,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    if len(data) < seq_len + 1:
        raise DataError(f"corpus of {len(data)} bytes is shorter than seq_len+1={seq_len + 1}")
    starts = rng.integers(0, len(data) - seq_len, size=batch_size)
    window = np.stack([data[s:s + seq_len + 1] for s in starts]).astype(np.int64)
    return window[:, :-1], window[:, 1:]


# --- training ------------------------------------------------------------------------

class StepMetrics(BaseModel):
    step: int
    loss_bpc: float
    lr: float
    elapsed_s: float


def train(model: MSWAModel, corpus: np.ndarray, cfg: TrainConfig,
          checkpoint_dir: Optional[str] = None,
          resume: Optional[Checkpoint] = None) -> Iterator[StepMetrics]:
    """
    AdamW with warmup and cosine decay on randomly sampled windows.

    Yields one StepMetrics per update with the loss measured before the update.

    Args:
        model: Model to update in place
        corpus: Training bytes
        cfg: Optimizer, schedule and batch settings
        checkpoint_dir: Where periodic and final checkpoints go (None to skip)
        resume: Checkpoint to continue from; its parameters, optimizer moments
            and batch sampler state are restored and training picks up at its step

    Raises:
        DivergenceError: If a loss is not finite
        LengthError: If cfg.seq_len exceeds the model's max_seq_len
        CheckpointError: If `resume` does not belong to this model or run
    """
    if cfg.seq_len > model.config.max_seq_len:
        raise LengthError(f"seq_len={cfg.seq_len} exceeds max_seq_len={model.config.max_seq_len}")
    if len(corpus) < cfg.steps * cfg.tokens_per_step:
        logger.warning(f"Corpus of {len(corpus)} bytes is under one epoch for {cfg.steps} steps; sampling wraps around")

    rng = make_rng(cfg.seed, 'batches')
    optimizer = AdamW(model.parameter_list(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    first_step = 0
    if resume is not None:
        if resume.config != model.config:
            raise CheckpointError("resume checkpoint was written for a different model configuration")
        if resume.step >= cfg.steps:
            raise CheckpointError(f"resume checkpoint is at step {resume.step}, nothing left of {cfg.steps} steps")
        for name, param in model.parameters.items():
            param.data[...] = resume.params[name]
        resume.restore_optimizer(optimizer)
        resume.restore_rng(rng)
        first_step = resume.step
        logger.info(f"Resuming training at step {first_step} of {cfg.steps}")
    started = time.perf_counter()
    for step in range(first_step, cfg.steps):
        lr = cosine_lr(step, cfg.lr, cfg.min_lr, cfg.warmup_steps, cfg.steps)
        inputs, targets = sample_batch(corpus, cfg.batch_size, cfg.seq_len, rng)
        loss = model.loss(inputs, targets)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        backward(loss)
        clip_grad_norm(optimizer.params, cfg.grad_clip)
        optimizer.step(lr)
        optimizer.zero_grad()

        metrics = StepMetrics(step=step, loss_bpc=value / LN2, lr=lr, elapsed_s=time.perf_counter() - started)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info(f"step {step}: loss {metrics.loss_bpc:.4f} bpc, lr {lr:.2e}")
        if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            path = os.path.join(checkpoint_dir, f'step_{step + 1:06d}.ckpt')
            save_checkpoint(path, snapshot(model, optimizer, step + 1, rng.bit_generator.state))
        yield metrics

    if checkpoint_dir:
        save_checkpoint(os.path.join(checkpoint_dir, 'final.ckpt'),
                        snapshot(model, optimizer, cfg.steps, rng.bit_generator.state))


def write_metrics_csv(metrics: Sequence[StepMetrics], path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['step', 'loss_bpc', 'lr', 'elapsed_s'])
        for m in metrics:
            writer.writerow([m.step, f'{m.loss_bpc:.6f}', f'{m.lr:.6e}', f'{m.elapsed_s:.3f}'])


# --- evaluation ----------------------------------------------------------------------

class EvalResult(BaseModel):
    nll: float
    tokens: int
    ppl: float
    bpc: float


def eval_segments(data: np.ndarray, seq_len: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Non-overlapping windows; the last one may be shorter."""
    ids = np.asarray(data, dtype=np.int64)
    segments = []
    for start in range(0, len(ids) - 1, seq_len):
        stop = min(start + seq_len, len(ids) - 1)
        segments.append((ids[start:stop], ids[start + 1:stop + 1]))
    return segments


def _segment_nll(model: MSWAModel, batch: List[Tuple[np.ndarray, np.ndarray]]) -> List[float]:
    inputs = np.stack([x for x, _ in batch])
    targets = np.stack([y for _, y in batch])
    with no_grad():
        logits = model.forward(inputs).data.astype(np.float64)
    row_max = logits.max(axis=-1, keepdims=True)
    lse = row_max[..., 0] + np.log(np.exp(logits - row_max).sum(axis=-1))
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return [float(v) for v in (lse - picked).sum(axis=-1)]


def evaluate(model: MSWAModel, data: np.ndarray, seq_len: int, batch_size: int = 8,
             workers: Optional[int] = None) -> EvalResult:
    """
    Mean token NLL over non-overlapping segments, reported as ppl and bpc.

    Batches are spread over `workers` threads (default from MSWA_EVAL_WORKERS);
    per-segment sums are reduced in segment order so the result does not
    depend on batching.

    Raises:
        DataError: If the split has fewer than two bytes
    """
    segments = eval_segments(data, seq_len)
    if not segments:
        raise DataError(f"evaluation split of {len(data)} bytes has nothing to predict")
    if workers is None:
        workers = int(os.environ.get(EVAL_WORKERS_ENV, '1'))

    by_length: Dict[int, List[int]] = {}
    for idx, (x, _) in enumerate(segments):
        by_length.setdefault(len(x), []).append(idx)
    batches = []
    for indices in by_length.values():
        for lo in range(0, len(indices), batch_size):
            batches.append(indices[lo:lo + batch_size])

    logger.info(f"Evaluating {len(segments)} segments in {len(batches)} batches on {workers} worker(s)")
    sums = [0.0] * len(segments)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda b: _segment_nll(model, [segments[i] for i in b]), batches))
    else:
        results = [_segment_nll(model, [segments[i] for i in b]) for b in batches]
    for indices, values in zip(batches, results):
        for i, v in zip(indices, values):
            sums[i] = v

    tokens = sum(len(y) for _, y in segments)
    nll = math.fsum(sums) / tokens
    return EvalResult(nll=nll, tokens=tokens, ppl=math.exp(nll), bpc=nll / LN2)


# --- budget-matched comparison ----------------------------------------------------------

class ComparisonRow(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    strategy: str
    base_window: int
    total_budget: int
    ratio_to_uniform: Fraction
    relative_cost: Fraction
    train_bpc: float
    valid_bpc: float


def compare_budget_matched(swa_config: ModelConfig, mswa_config: ModelConfig,
                           splits: Dict[str, np.ndarray], train_cfg: TrainConfig,
                           seed: int = 0) -> List[ComparisonRow]:
    """
    Train and evaluate an SWA model and an MSWA model whose window budget is
    verified to be no larger than the SWA budget.

    Raises:
        BudgetError: If the shapes differ or the MSWA budget exceeds the SWA budget
    """
    swa_plan, mswa_plan = swa_config.plan(), mswa_config.plan()
    if swa_plan is None or mswa_plan is None:
        raise BudgetError("both configurations need at least one Local layer")
    if (swa_config.pattern, swa_config.heads) != (mswa_config.pattern, mswa_config.heads):
        raise BudgetError("compared configurations must share layer pattern and head count")
    swa_budget = total_budget(swa_plan)
    mswa_budget = total_budget(mswa_plan)
    if mswa_budget.total_windows > swa_budget.total_windows:
        raise BudgetError(f"MSWA budget {mswa_budget.total_windows} exceeds SWA budget {swa_budget.total_windows}")
    logger.info(f"Budget check passed: {mswa_config.strategy.value} {mswa_budget.total_windows} <= "
                f"{swa_config.strategy.value} {swa_budget.total_windows} "
                f"(ratio {format_fraction(Fraction(mswa_budget.total_windows, swa_budget.total_windows))})")

    rows = []
    for config, budget in ((swa_config, swa_budget), (mswa_config, mswa_budget)):
        model = MSWAModel(config, seed=seed)
        history = list(train(model, splits['train'], train_cfg))
        result = evaluate(model, splits['valid'], train_cfg.seq_len)
        rows.append(ComparisonRow(
            strategy=config.strategy.value,
            base_window=config.base_window,
            total_budget=budget.total_windows,
            ratio_to_uniform=budget.ratio_to_uniform,
            relative_cost=Fraction(budget.total_windows, swa_budget.total_windows),
            train_bpc=history[-1].loss_bpc,
            valid_bpc=result.bpc,
        ))
    return rows


def write_comparison_csv(rows: Sequence[ComparisonRow], path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['strategy', 'base_window', 'total_budget', 'ratio_to_uniform',
                         'relative_cost', 'train_bpc', 'valid_bpc'])
        for r in rows:
            writer.writerow([r.strategy, r.base_window, r.total_budget, format_fraction(r.ratio_to_uniform),
                             format_fraction(r.relative_cost), f'{r.train_bpc:.6f}', f'{r.valid_bpc:.6f}'])
