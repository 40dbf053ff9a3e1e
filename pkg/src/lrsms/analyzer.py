"""Singular-value spectrum analysis of trained weight matrices.

For each attention/feed-forward weight matrix in a checkpoint this computes
k95: the smallest number of leading singular vectors whose energy reaches a
threshold fraction (default 0.95) of the matrix total. The ratio
k95 / min(m, n) is the per-layer effective-rank measure; tracking it across
training stages and across block depth is what motivates depth-ramped rank
assignment, and ``trend_fit`` / ``suggest_gamma`` turn the per-block ratios
back into scaling-factor ranges.

Energy criterion: "frobenius" accumulates squared singular values (so the
threshold bounds the Frobenius reconstruction error via Eckart-Young);
"nuclear" accumulates plain singular values. Frobenius is the default; every
report records which criterion produced it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import DomainError, FormatError
from .linalg import singular_values
from .planner import FFN, MHSA, SUBMODELS, LayerSpec, ScalingRanges

__all__ = [
    "ENERGY_KINDS",
    "k95",
    "numerical_rank",
    "RankRatioRecord",
    "RankRatioReport",
    "checkpoint_weights",
    "analyze_checkpoint",
    "trend_fit",
    "suggest_gamma",
]

ENERGY_KINDS = ("frobenius", "nuclear")

# enc.3.mhsa.q.w / dec.0.cross.k.u / enc.5.ffn.w1.v ...
_LAYER_TENSOR = re.compile(
    r"^(enc|dec)\.(\d+)\.(mhsa|self|cross|ffn)\.(q|k|v|o|w1|w2)\.(w|u|v)$"
)
_SUBMODEL = {"enc": "encoder", "dec": "decoder"}
_KIND = {"mhsa": MHSA, "self": MHSA, "cross": MHSA, "ffn": FFN}


def numerical_rank(sigma: np.ndarray, rel_tol: float = 1e-12) -> int:
    """Count of singular values above rel_tol * sigma_max."""
    if sigma.size == 0 or sigma[0] <= 0.0:
        return 0
    return int(np.count_nonzero(sigma > rel_tol * sigma[0]))


def k95(w, threshold: float = 0.95, energy: str = "frobenius") -> int:
    """Smallest k with sum of the top-k singular-value energies >= threshold * total.

    A zero matrix has no energy and yields 0. threshold = 1.0 degenerates to
    the numerical rank (count of singular values above 1e-12 * sigma_max),
    since in exact arithmetic the cumulative energy reaches the total exactly
    when the zero tail starts.
    """
    if not 0.0 < threshold <= 1.0:
        raise DomainError(f"threshold={threshold} outside (0, 1]")
    if energy not in ENERGY_KINDS:
        raise DomainError(f"energy={energy!r} not one of {ENERGY_KINDS}")
    sigma = singular_values(w)
    return _k95_from_sigma(sigma, threshold, energy)


def _k95_from_sigma(sigma: np.ndarray, threshold: float, energy: str) -> int:
    weights = sigma**2 if energy == "frobenius" else sigma
    total = float(weights.sum())
    if total <= 0.0:
        return 0
    if threshold == 1.0:
        return numerical_rank(sigma)
    cum = np.cumsum(weights)
    # tiny relative slack absorbs summation-order noise on exact ties
    target = total * threshold - total * 1e-12
    return int(np.searchsorted(cum, target) + 1)


@dataclass(frozen=True)
class RankRatioRecord:
    stage: str
    layer: str
    kind: str
    submodel: str
    block: int
    k95: int
    ktotal: int

    @property
    def ratio(self) -> float:
        return self.k95 / self.ktotal


@dataclass
class RankRatioReport:
    stage: str
    threshold: float
    energy: str
    records: list[RankRatioRecord] = field(default_factory=list)

    def mean_ratio(self) -> float:
        if not self.records:
            raise DomainError("empty report has no mean ratio")
        return float(np.mean([rec.ratio for rec in self.records]))


def checkpoint_weights(ckpt: Checkpoint) -> list[tuple[LayerSpec, np.ndarray]]:
    """Effective weight matrix per attention/FFN layer in a checkpoint.

    Dense layers contribute their stored matrix; factorized layers are
    materialized as u @ v.T. Embedding/head/bias/norm tensors carry no block
    metadata and are not part of the analysis.
    """
    dense: dict[str, tuple[re.Match, np.ndarray]] = {}
    factors: dict[str, dict[str, np.ndarray]] = {}
    matches: dict[str, re.Match] = {}
    for t in ckpt.tensors:
        m = _LAYER_TENSOR.match(t.name)
        if m is None:
            if t.kind in ("factor_u", "factor_v"):
                raise FormatError(f"factor tensor {t.name!r} has unparseable layer id")
            continue
        layer_id = t.name.rsplit(".", 1)[0]
        part = m.group(5)
        if part == "w":
            dense[layer_id] = (m, t.data)
        else:
            factors.setdefault(layer_id, {})[part] = t.data
            matches[layer_id] = m
    out: list[tuple[LayerSpec, np.ndarray]] = []
    for layer_id, (m, w) in dense.items():
        out.append((_layer_spec(layer_id, m, w.shape[0], w.shape[1]), w))
    for layer_id, parts in factors.items():
        if "u" not in parts or "v" not in parts:
            raise FormatError(f"factorized layer {layer_id!r} missing a factor tensor")
        u, v = parts["u"], parts["v"]
        out.append((_layer_spec(layer_id, matches[layer_id], u.shape[0], v.shape[0]), u @ v.T))
    out.sort(key=lambda lw: (SUBMODELS.index(lw[0].submodel), lw[0].block, lw[0].id))
    return out


def _layer_spec(layer_id: str, m: re.Match, rows: int, cols: int) -> LayerSpec:
    return LayerSpec(
        id=layer_id,
        kind=_KIND[m.group(3)],
        submodel=_SUBMODEL[m.group(1)],
        block=int(m.group(2)),
        m=rows,
        n=cols,
    )


def analyze_checkpoint(
    ckpt: Checkpoint,
    threshold: float = 0.95,
    energy: str = "frobenius",
    stage: str = "",
) -> RankRatioReport:
    """One RankRatioRecord per attention/FFN weight matrix of *ckpt*."""
    if not 0.0 < threshold <= 1.0:
        raise DomainError(f"threshold={threshold} outside (0, 1]")
    if energy not in ENERGY_KINDS:
        raise DomainError(f"energy={energy!r} not one of {ENERGY_KINDS}")
    records = []
    for spec, w in checkpoint_weights(ckpt):
        sigma = singular_values(w)
        records.append(
            RankRatioRecord(
                stage=stage,
                layer=spec.id,
                kind=spec.kind,
                submodel=spec.submodel,
                block=spec.block,
                k95=_k95_from_sigma(sigma, threshold, energy),
                ktotal=spec.max_rank,
            )
        )
    return RankRatioReport(stage=stage, threshold=threshold, energy=energy, records=records)


def trend_fit(report: RankRatioReport) -> dict[tuple[str, str], tuple[float, float]]:
    """Least-squares line of ratio vs. normalized depth b/B per (submodel, kind).

    Returns {(submodel, kind): (slope, intercept)}. Requires at least two
    distinct blocks per fitted group.
    """
    groups: dict[tuple[str, str], list[RankRatioRecord]] = {}
    for rec in report.records:
        groups.setdefault((rec.submodel, rec.kind), []).append(rec)
    fits = {}
    for key, recs in groups.items():
        blocks = sorted({rec.block for rec in recs})
        if len(blocks) < 2:
            raise DomainError(
                f"trend fit for {key} needs >= 2 blocks, got {len(blocks)}"
            )
        total = max(blocks) + 1
        x = np.array([rec.block / total for rec in recs])
        y = np.array([rec.ratio for rec in recs])
        slope, intercept = np.polyfit(x, y, 1)
        fits[key] = (float(slope), float(intercept))
    return fits


def suggest_gamma(report: RankRatioReport, floor: float = 0.05) -> ScalingRanges:
    """Scaling-range suggestion from the fitted depth trends.

    Per kind, the fitted line's endpoints at depth 0 and 1 become the
    suggested [start, end], clipped into [floor, 1] and ordered. Encoder and
    decoder points are pooled per kind (each normalized by its own block
    count) since one range pair per kind drives both submodels.
    """
    pooled: dict[str, list[tuple[float, float]]] = {MHSA: [], FFN: []}
    totals: dict[str, int] = {}
    for rec in report.records:
        totals[rec.submodel] = max(totals.get(rec.submodel, 0), rec.block + 1)
    for rec in report.records:
        pooled[rec.kind].append((rec.block / totals[rec.submodel], rec.ratio))
    endpoints = {}
    for kind, pts in pooled.items():
        if len({x for x, _ in pts}) < 2:
            raise DomainError(f"gamma suggestion for kind {kind!r} needs >= 2 depths")
        x = np.array([p[0] for p in pts])
        y = np.array([p[1] for p in pts])
        slope, intercept = np.polyfit(x, y, 1)
        lo = float(np.clip(intercept, floor, 1.0))
        hi = float(np.clip(intercept + slope, floor, 1.0))
        endpoints[kind] = tuple(sorted((lo, hi)))
    return ScalingRanges(
        mhsa_start=endpoints[MHSA][0],
        mhsa_end=endpoints[MHSA][1],
        ffn_start=endpoints[FFN][0],
        ffn_end=endpoints[FFN][1],
    )
