"""
Window-size allocation for multi-scale sliding window attention.

A plan is an l x h matrix of per-head window sizes derived from a single base
window w. Layers and heads are each split into four equal groups and every
group scales w by one rung of a multiplier ladder.
"""

import logging
import math
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from typing_extensions import Self

logger = logging.getLogger(__name__)

GROUPS = 4


class PlanError(ValueError):
    """Raised when (l, h, w) cannot be laid out exactly for a strategy."""


class ComparabilityError(ValueError):
    """Raised when two plans of different shape are compared."""


class Strategy(str, Enum):
    UNIFORM = 'uniform'
    MSWA_H = 'mswa_h'
    MSWA_L = 'mswa_l'
    MSWA = 'mswa'
    MSWA_REVERSED_LAYERS = 'mswa_reversed_layers'
    MSWA_ARITHMETIC = 'mswa_arithmetic'


Ladder = Tuple[Fraction, Fraction, Fraction, Fraction]

GEOMETRIC: Ladder = (Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2))
REVERSED: Ladder = (Fraction(2), Fraction(1), Fraction(1, 2), Fraction(1, 4))
ARITHMETIC: Ladder = (Fraction(1, 2), Fraction(3, 4), Fraction(1), Fraction(5, 4))

# (layer ladder, head ladder); None leaves that axis at the base size
LADDERS: Dict[Strategy, Tuple[Optional[Ladder], Optional[Ladder]]] = {
    Strategy.UNIFORM: (None, None),
    Strategy.MSWA_H: (None, GEOMETRIC),
    Strategy.MSWA_L: (GEOMETRIC, None),
    Strategy.MSWA: (GEOMETRIC, GEOMETRIC),
    Strategy.MSWA_REVERSED_LAYERS: (REVERSED, GEOMETRIC),
    Strategy.MSWA_ARITHMETIC: (ARITHMETIC, ARITHMETIC),
}

_ONE: Ladder = (Fraction(1),) * GROUPS


def _rungs(ladder: Optional[Ladder]) -> Ladder:
    return _ONE if ladder is None else ladder


def required_modulus(strategy: Strategy) -> int:
    """Smallest modulus of w that keeps every composed multiple of w integral."""
    layer_ladder, head_ladder = LADDERS[strategy]
    modulus = 1
    for a in _rungs(layer_ladder):
        for b in _rungs(head_ladder):
            modulus = math.lcm(modulus, (a * b).denominator)
    return modulus


class Budget(BaseModel):
    """Exact window budget of a plan."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    total_windows: int
    ratio_to_uniform: Fraction


class WindowPlan(BaseModel):
    """Per-layer, per-head window sizes. Immutable once built."""
    model_config = ConfigDict(frozen=True)

    layers: int
    heads: int
    base_window: int
    sizes: Tuple[Tuple[int, ...], ...]
    strategy: Strategy

    @field_validator('sizes')
    @classmethod
    def _positive_windows(cls, sizes):
        for i, row in enumerate(sizes):
            for j, w in enumerate(row):
                if w < 1:
                    raise ValueError(f"window size at layer {i} head {j} must be >= 1, got {w}")
        return sizes

    @model_validator(mode='after')
    def _matrix_shape(self):
        if len(self.sizes) != self.layers or any(len(row) != self.heads for row in self.sizes):
            raise ValueError(f"sizes must be a {self.layers}x{self.heads} matrix")
        return self

    def row(self, layer: int) -> List[int]:
        return list(self.sizes[layer])

    def min_window(self) -> int:
        return min(min(row) for row in self.sizes)

    def max_window(self) -> int:
        return max(max(row) for row in self.sizes)

    def describe(self) -> str:
        if self.min_window() == self.max_window():
            return f"w={self.base_window}"
        return f"w_ij from {self.min_window()} to {self.max_window()}"

    def to_text(self) -> str:
        lines = [f"{self.layers} {self.heads} {self.base_window} {self.strategy.value}"]
        lines.extend(' '.join(str(w) for w in row) for row in self.sizes)
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> Self:
        """
        Parse the tabular plan format: a header line `l h w strategy` followed by
        l lines of h integers.

        Raises:
            PlanError: If the text is malformed
        """
        lines = [line.strip() for line in text.strip().splitlines() if line.strip()]
        if not lines:
            raise PlanError("plan text is empty")
        header = lines[0].split()
        if len(header) != 4:
            raise PlanError(f"plan header must be 'l h w strategy', got {lines[0]!r}")
        try:
            layers, heads, base = (int(v) for v in header[:3])
            strategy = Strategy(header[3])
            sizes = tuple(tuple(int(v) for v in line.split()) for line in lines[1:])
            return cls(layers=layers, heads=heads, base_window=base, sizes=sizes, strategy=strategy)
        except ValueError as e:
            raise PlanError(f"invalid plan text: {e}")


def build_plan(strategy: Strategy, layers: int, heads: int, base_window: int) -> WindowPlan:
    """
    Build the window matrix for a strategy.

    Head group b covers heads [b*h/4, (b+1)*h/4) with the smallest windows
    first; layer group a covers layers [a*l/4, (a+1)*l/4) shallow to deep.

    Raises:
        PlanError: If layers, heads or base_window break a divisibility requirement
    """
    strategy = Strategy(strategy)
    layer_ladder, head_ladder = LADDERS[strategy]
    if layers < 1 or heads < 1 or base_window < 1:
        raise PlanError(f"layers, heads and base_window must be positive, got l={layers} h={heads} w={base_window}")
    if layer_ladder is not None and layers % GROUPS:
        raise PlanError(f"layers={layers} must be divisible by {GROUPS} for strategy {strategy.value}")
    if head_ladder is not None and heads % GROUPS:
        raise PlanError(f"heads={heads} must be divisible by {GROUPS} for strategy {strategy.value}")
    modulus = required_modulus(strategy)
    if base_window % modulus:
        raise PlanError(f"base_window={base_window} must be divisible by {modulus} for strategy {strategy.value}")

    layer_rungs, head_rungs = _rungs(layer_ladder), _rungs(head_ladder)
    sizes = []
    for i in range(layers):
        a = i * GROUPS // layers
        row = []
        for j in range(heads):
            b = j * GROUPS // heads
            row.append(int(base_window * layer_rungs[a] * head_rungs[b]))
        sizes.append(tuple(row))

    plan = WindowPlan(layers=layers, heads=heads, base_window=base_window,
                      sizes=tuple(sizes), strategy=strategy)
    logger.debug(f"Built {strategy.value} plan l={layers} h={heads} w={base_window}: {plan.describe()}")
    return plan


def layer_bases(plan: WindowPlan) -> List[Fraction]:
    """Per-layer base size w_i before the head ladder is applied."""
    layer_ladder, _ = LADDERS[plan.strategy]
    rungs = _rungs(layer_ladder)
    return [plan.base_window * rungs[i * GROUPS // plan.layers] for i in range(plan.layers)]


def total_budget(plan: WindowPlan) -> Budget:
    """
    Sum every window in the plan and compare it with a uniform plan of the same shape.

    Args:
        plan: Window plan to measure

    Returns:
        Budget with the integer window total and its exact ratio to l * h * w
    """
    total = sum(sum(row) for row in plan.sizes)
    return Budget(total_windows=total,
                  ratio_to_uniform=Fraction(total, plan.base_window * plan.heads * plan.layers))


def budget_ratio(plan: WindowPlan, reference: WindowPlan) -> Fraction:
    """
    Exact ratio of total window budgets.

    Raises:
        ComparabilityError: If the plans differ in layer or head count
    """
    if (plan.layers, plan.heads) != (reference.layers, reference.heads):
        raise ComparabilityError(
            f"plans are not comparable: l={plan.layers} h={plan.heads} vs l={reference.layers} h={reference.heads}")
    return Fraction(total_budget(plan).total_windows, total_budget(reference).total_windows)


def round_half_up(value: Fraction, places: int = 2) -> float:
    """
    Round an exact fraction to `places` decimals, ties away from zero.

    Args:
        value: Exact value to round
        places: Number of decimals kept

    Returns:
        The rounded value as a float, e.g. 1024/225 -> 4.55
    """
    quantum = Decimal(1).scaleb(-places)
    exact = Decimal(value.numerator) / Decimal(value.denominator)
    return float(exact.quantize(quantum, rounding=ROUND_HALF_UP))


def relative_cost(plan: WindowPlan, reference: WindowPlan) -> float:
    """Budget ratio against a reference plan, reported to two decimals."""
    return round_half_up(budget_ratio(plan, reference))


def format_fraction(value: Fraction) -> str:
    return f"{value.numerator}/{value.denominator}"
