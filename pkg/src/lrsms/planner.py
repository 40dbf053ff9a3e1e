"""Rank assignment for the factorizable layers of a model.

Two policies are provided. ``uniform_plan`` gives every layer the same
scaling factor alpha. ``linear_plan`` ramps alpha linearly with block depth,
with independent [start, end] ranges for attention and feed-forward layers
and independent ramps per submodel (encoder and decoder each use their own
block count). Either policy resolves a layer's rank as

    r = clamp(round_half_up(alpha * min(m, n)), 1, min(m, n))

Blocks are zero-indexed, so a ramp over B blocks evaluates alpha at
b/B for b in {0, ..., B-1} and the end value is approached, not attained,
by real layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConsistencyError, DomainError

__all__ = [
    "MHSA",
    "FFN",
    "KINDS",
    "SUBMODELS",
    "LayerSpec",
    "ScalingRanges",
    "PlanEntry",
    "RankPlan",
    "resolve_rank",
    "uniform_plan",
    "linear_plan",
    "plan_summary",
    "format_summary",
]

MHSA = "mhsa"
FFN = "ffn"
KINDS = (MHSA, FFN)
SUBMODELS = ("encoder", "decoder")


@dataclass(frozen=True)
class LayerSpec:
    """Identity and geometry of one factorizable linear layer."""

    id: str
    kind: str          # "mhsa" | "ffn"
    submodel: str      # "encoder" | "decoder"
    block: int         # zero-based block index within the submodel
    m: int
    n: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown layer kind {self.kind!r}")
        if self.submodel not in SUBMODELS:
            raise DomainError(f"unknown submodel {self.submodel!r}")
        if self.block < 0:
            raise DomainError(f"block index must be >= 0, got {self.block}")
        if self.m < 1 or self.n < 1:
            raise DomainError(f"dims must be positive, got ({self.m}, {self.n})")

    @property
    def max_rank(self) -> int:
        return min(self.m, self.n)

    @property
    def dense_params(self) -> int:
        return self.m * self.n


@dataclass(frozen=True)
class ScalingRanges:
    """Per-kind [start, end] scaling-factor ranges, plus full-rank overrides.

    A kind whose override flag is set keeps its layers dense and out of the
    factorized set entirely.
    """

    mhsa_start: float = 0.0
    mhsa_end: float = 0.0
    ffn_start: float = 0.0
    ffn_end: float = 0.0
    mhsa_full_rank: bool = False
    ffn_full_rank: bool = False

    def __post_init__(self):
        for kind, lo, hi in (
            (MHSA, self.mhsa_start, self.mhsa_end),
            (FFN, self.ffn_start, self.ffn_end),
        ):
            if self.is_full_rank(kind):
                continue
            for name, val in ((f"{kind}_start", lo), (f"{kind}_end", hi)):
                if not 0.0 <= val <= 1.0:
                    raise DomainError(f"{name}={val} outside [0, 1]")
            if lo > hi:
                raise DomainError(
                    f"{kind} range start {lo} > end {hi}: only monotone-increasing "
                    "depth ramps are supported"
                )

    def is_full_rank(self, kind: str) -> bool:
        if kind == MHSA:
            return self.mhsa_full_rank
        if kind == FFN:
            return self.ffn_full_rank
        raise DomainError(f"unknown layer kind {kind!r}")

    def range_for(self, kind: str) -> tuple[float, float]:
        if kind == MHSA:
            return self.mhsa_start, self.mhsa_end
        if kind == FFN:
            return self.ffn_start, self.ffn_end
        raise DomainError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class PlanEntry:
    alpha: float
    rank: int


@dataclass
class RankPlan:
    """Map layer id -> (alpha, rank) for the factorized layer set."""

    entries: dict[str, PlanEntry] = field(default_factory=dict)

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, RankPlan) and self.entries == other.entries

    def rank_of(self, layer_id: str) -> int:
        return self.entries[layer_id].rank

    def alpha_of(self, layer_id: str) -> float:
        return self.entries[layer_id].alpha


def resolve_rank(alpha: float, max_rank: int) -> int:
    """round-half-up(alpha * max_rank), clamped into [1, max_rank]."""
    if max_rank < 1:
        raise DomainError(f"max_rank must be >= 1, got {max_rank}")
    r = math.floor(alpha * max_rank + 0.5)
    return max(1, min(max_rank, r))


def alpha_at(start: float, end: float, block: int, total_blocks: int) -> float:
    """Depth ramp: alpha(b) = b * (end - start) / B + start."""
    if total_blocks < 1:
        raise DomainError(f"total_blocks must be >= 1, got {total_blocks}")
    return block * (end - start) / total_blocks + start


def _block_counts(layers) -> dict[str, int]:
    counts: dict[str, int] = {}
    for lyr in layers:
        counts[lyr.submodel] = max(counts.get(lyr.submodel, 0), lyr.block + 1)
    return counts


def uniform_plan(layers, alpha: float, kinds=KINDS) -> RankPlan:
    """Assign the same scaling factor to every selected layer."""
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha={alpha} outside (0, 1]")
    entries = {}
    for lyr in layers:
        if lyr.kind in kinds:
            entries[lyr.id] = PlanEntry(alpha, resolve_rank(alpha, lyr.max_rank))
    return RankPlan(entries)


def linear_plan(layers, ranges: ScalingRanges) -> RankPlan:
    """Assign depth-ramped scaling factors per kind and submodel.

    The block count B is taken per submodel from the layer list itself
    (max block index + 1). Kinds flagged full-rank in *ranges* are skipped.
    """
    layers = list(layers)
    totals = _block_counts(layers)
    entries = {}
    for lyr in layers:
        if ranges.is_full_rank(lyr.kind):
            continue
        start, end = ranges.range_for(lyr.kind)
        a = alpha_at(start, end, lyr.block, totals[lyr.submodel])
        entries[lyr.id] = PlanEntry(a, resolve_rank(a, lyr.max_rank))
    return RankPlan(entries)


@dataclass(frozen=True)
class PlanSummary:
    """Aggregate weight-parameter accounting for a plan over its layer set.

    Counts cover the factorizable weight matrices only (biases and other
    tensors are identical across the dense and factorized builds and can be
    supplied via *extra_params* for whole-model ratios).
    """

    dense_params: int
    factorized_params: int
    per_kind: dict[str, tuple[int, int]]   # kind -> (dense, factorized)
    extra_params: int = 0

    @property
    def compression(self) -> float:
        if self.factorized_params == 0:
            return math.inf
        return self.dense_params / self.factorized_params

    @property
    def model_compression(self) -> float:
        total_fact = self.factorized_params + self.extra_params
        if total_fact == 0:
            return math.inf
        return (self.dense_params + self.extra_params) / total_fact


def plan_summary(plan: RankPlan, layers, extra_params: int = 0) -> PlanSummary:
    """Total and per-kind parameter accounting of *plan* over *layers*.

    Layers absent from the plan (full-rank overrides) contribute their dense
    count to both sides. Every plan entry must correspond to a listed layer.
    """
    layers = list(layers)
    ids = {lyr.id for lyr in layers}
    missing = sorted(set(plan.entries) - ids)
    if missing:
        raise ConsistencyError(f"plan entries without a layer: {missing}")
    dense_total = 0
    fact_total = 0
    per_kind: dict[str, tuple[int, int]] = {k: (0, 0) for k in KINDS}
    for lyr in layers:
        dense = lyr.dense_params
        if lyr.id in plan:
            fact = plan.rank_of(lyr.id) * (lyr.m + lyr.n)
        else:
            fact = dense
        dense_total += dense
        fact_total += fact
        kd, kf = per_kind[lyr.kind]
        per_kind[lyr.kind] = (kd + dense, kf + fact)
    return PlanSummary(dense_total, fact_total, per_kind, extra_params)


def format_summary(summary: PlanSummary) -> str:
    """Human-readable table for the CLI."""
    lines = [
        f"{'kind':<8} {'dense':>12} {'factorized':>12} {'ratio':>8}",
    ]
    for kind in KINDS:
        d, f = summary.per_kind[kind]
        ratio = f"{d / f:.2f}x" if f else "-"
        lines.append(f"{kind:<8} {d:>12} {f:>12} {ratio:>8}")
    lines.append(
        f"{'total':<8} {summary.dense_params:>12} {summary.factorized_params:>12} "
        f"{summary.compression:>7.2f}x"
    )
    if summary.extra_params:
        lines.append(
            f"{'model':<8} {summary.dense_params + summary.extra_params:>12} "
            f"{summary.factorized_params + summary.extra_params:>12} "
            f"{summary.model_compression:>7.2f}x"
        )
    return "\n".join(lines)
