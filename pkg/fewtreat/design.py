"""Aggregation schemes: the A_j and B_j matrices behind every estimator.

For treated unit ``j``, ``A_j`` (K_j x T) turns an outcome path into
building-block comparisons and ``B_j`` (K x K_j) weights those into the
K-dimensional target. Coordinates whose row of ``B_j A_j`` is zero are
degenerate for ``j``; coordinates that are zero for every ``j`` are
degenerate for the whole scheme.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from collections.abc import Mapping, Sequence
from typing import Literal, Any

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel, Field

from fewtreat import constants
from fewtreat.exception_handlers import SchemeError
from fewtreat.panel import PanelData
from fewtreat.util import canonical_json, fingerprint

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

SchemeKind = Literal["att", "event_study", "pretrends", "generic"]
SCHEME_KINDS: tuple[str, ...] = ("att", "event_study", "pretrends", "generic")

UNIFORM_PRE_KINDS: frozenset[str] = frozenset({"att", "event_study"})
"""Schemes whose A_j compare against the plain average of all pre-periods."""


@dataclasses.dataclass(frozen=True)
class UnitBlock:
    extraction: np.ndarray
    """A_j, K_j x T"""
    aggregation: np.ndarray
    """B_j, K x K_j"""

    def __post_init__(self):
        for name in ("extraction", "aggregation"):
            matrix = np.array(getattr(self, name), dtype=np.float64)
            matrix.flags.writeable = False
            object.__setattr__(self, name, matrix)

    @property
    def transform(self) -> np.ndarray:
        """B_j A_j, K x T"""
        return self.aggregation @ self.extraction


@dataclasses.dataclass(frozen=True)
class AggregationScheme:
    kind: str
    k_target: int
    blocks: tuple[UnitBlock, ...]
    labels: tuple[str, ...]
    degenerate: tuple[frozenset[int], ...]
    """Per treated unit, coordinates whose row of B_j A_j is zero"""
    global_degenerate: frozenset[int]
    """Coordinates that are zero for every treated unit"""
    n_periods: int
    treat_times: tuple[int, ...]

    @property
    def n_treated(self) -> int:
        return len(self.blocks)

    def transforms(self) -> np.ndarray:
        """Stacked B_j A_j with shape (N1, K, T)"""
        return np.stack([block.transform for block in self.blocks])

    def nondegenerate(self, j: int) -> np.ndarray:
        return np.array(
            [s for s in range(self.k_target) if s not in self.degenerate[j]],
            dtype=np.intp,
        )

    def global_nondegenerate(self) -> np.ndarray:
        return np.array(
            [s for s in range(self.k_target) if s not in self.global_degenerate],
            dtype=np.intp,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "k_target": self.k_target,
            "labels": list(self.labels),
            "n_periods": self.n_periods,
            "treat_times": list(self.treat_times),
            "degenerate": [sorted(d) for d in self.degenerate],
            "global_degenerate": sorted(self.global_degenerate),
            "blocks": [
                {
                    "a": block.extraction.tolist(),
                    "b": block.aggregation.tolist(),
                }
                for block in self.blocks
            ],
        }

    def to_json(self, *, indent: int | None = None) -> str:
        return canonical_json(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> AggregationScheme:
        k_target = int(payload["k_target"])
        blocks = tuple(
            UnitBlock(
                extraction=np.array(block["a"], dtype=np.float64).reshape(
                    -1, int(payload["n_periods"])
                ),
                aggregation=np.array(block["b"], dtype=np.float64).reshape(
                    k_target, -1
                ),
            )
            for block in payload["blocks"]
        )
        return cls(
            kind=str(payload["kind"]),
            k_target=k_target,
            blocks=blocks,
            labels=tuple(payload["labels"]),
            degenerate=tuple(frozenset(d) for d in payload["degenerate"]),
            global_degenerate=frozenset(payload["global_degenerate"]),
            n_periods=int(payload["n_periods"]),
            treat_times=tuple(int(t) for t in payload["treat_times"]),
        )

    @classmethod
    def from_json(cls, text: str) -> AggregationScheme:
        return cls.from_dict(json.loads(text))

    def fingerprint(self) -> str:
        return fingerprint(self.to_json())


def degenerate_rows(
    transform: np.ndarray, tolerance: float = constants.DEGENERATE_TOLERANCE
) -> frozenset[int]:
    return frozenset(
        int(s) for s in np.flatnonzero(np.all(np.abs(transform) <= tolerance, axis=1))
    )


def _assemble(
    kind: str,
    panel: PanelData,
    blocks: list[UnitBlock],
    labels: Sequence[str],
) -> AggregationScheme:
    degenerate = tuple(degenerate_rows(block.transform) for block in blocks)
    global_degenerate = frozenset.intersection(*degenerate) if degenerate else frozenset()
    scheme = AggregationScheme(
        kind=kind,
        k_target=len(labels),
        blocks=tuple(blocks),
        labels=tuple(labels),
        degenerate=degenerate,
        global_degenerate=global_degenerate,
        n_periods=panel.n_periods,
        treat_times=panel.treated_times,
    )
    logger.debug(
        "Built aggregation scheme",
        extra={
            "kind": kind,
            "k_target": scheme.k_target,
            "global_degenerate": sorted(global_degenerate),
        },
    )
    return scheme


def _uniform_pre_extraction(t_star: int, n_periods: int) -> np.ndarray:
    """A_j comparing each post period with the mean of all pre-periods"""
    k_j = n_periods - t_star
    return np.hstack([-np.ones((k_j, t_star)) / t_star, np.eye(k_j)])


def build_scheme_att(panel: PanelData) -> AggregationScheme:
    """Average effect over every treated (unit, period) cell, K = 1"""
    n_periods = panel.n_periods
    post_counts = [n_periods - t for t in panel.treated_times]
    total = sum(post_counts)
    blocks = [
        UnitBlock(
            extraction=_uniform_pre_extraction(t_star, n_periods),
            aggregation=np.ones((1, k_j)) / total,
        )
        for t_star, k_j in zip(panel.treated_times, post_counts)
    ]
    return _assemble("att", panel, blocks, ["att"])


def build_scheme_event_study(panel: PanelData) -> AggregationScheme:
    """Average effects by length of exposure 1..K"""
    n_periods = panel.n_periods
    post_counts = [n_periods - t for t in panel.treated_times]
    k_target = max(post_counts)
    # Treated units observed at each exposure
    exposure_counts = np.array(
        [sum(1 for k_j in post_counts if k <= k_j) for k in range(1, k_target + 1)],
        dtype=np.float64,
    )

    blocks = []
    for t_star, k_j in zip(panel.treated_times, post_counts):
        aggregation = np.zeros((k_target, k_j))
        aggregation[:k_j, :k_j] = np.diag(1 / exposure_counts[:k_j])
        blocks.append(
            UnitBlock(
                extraction=_uniform_pre_extraction(t_star, n_periods),
                aggregation=aggregation,
            )
        )

    return _assemble(
        "event_study", panel, blocks, [str(k) for k in range(1, k_target + 1)]
    )


def build_scheme_pretrends(panel: PanelData) -> AggregationScheme:
    """Pre- and post-treatment differential trends relative to period t*_j.

    Coordinates run over relative times L..U in ascending order. Relative time
    zero compares period t*_j with itself and is degenerate for every unit.
    """
    n_periods = panel.n_periods
    treat_times = panel.treated_times
    lowest = min(1 - t for t in treat_times)
    highest = max(n_periods - t for t in treat_times)
    relative_times = range(lowest, highest + 1)
    # Treated units observed at each relative time
    observed = {
        k: sum(1 for t in treat_times if 1 - t <= k <= n_periods - t)
        for k in relative_times
    }

    blocks = []
    for t_star in treat_times:
        base = t_star - 1
        extraction = np.zeros((n_periods, n_periods))
        for t in range(n_periods):
            if t == base:
                continue
            extraction[t, t] = 1.0
            extraction[t, base] = -1.0

        aggregation = np.zeros((len(relative_times), n_periods))
        for t in range(n_periods):
            k = t + 1 - t_star
            aggregation[k - lowest, t] = 1 / observed[k]

        blocks.append(UnitBlock(extraction=extraction, aggregation=aggregation))

    return _assemble(
        "pretrends", panel, blocks, [str(k) for k in relative_times]
    )


def build_scheme_generic(
    panel: PanelData,
    pre_weights: Mapping[tuple[int, int], Sequence[float]],
    agg_weights: Mapping[tuple[int, int, int], float],
    *,
    labels: Sequence[str] | None = None,
    default_pre_weights: Literal["uniform", "last"] | None = "uniform",
) -> AggregationScheme:
    """Scheme from explicit pre-period and aggregation weights.

    Keys use zero-based indices: ``j`` is the treated unit, ``t`` the period
    column (which must be a post-treatment column, ``t >= t*_j``) and ``k``
    the target coordinate. Post periods without pre-weights fall back to
    ``default_pre_weights``, or raise when it is None.
    """
    n_periods = panel.n_periods
    treat_times = panel.treated_times
    n_treated = len(treat_times)

    for key in list(pre_weights) + [(j, t) for _, j, t in agg_weights]:
        j, t = key
        if not 0 <= j < n_treated:
            raise SchemeError(f"treated unit index {j} is out of range 0..{n_treated - 1}")
        if not 0 <= t < n_periods:
            raise SchemeError(f"period index {t} is out of range 0..{n_periods - 1}")
        if t < treat_times[j]:
            raise SchemeError(
                f"weights for treated unit {j} reference period {t}, which is not "
                f"after its last pre-treatment period (t*={treat_times[j]}); use "
                "the pretrends scheme for pre-treatment coordinates"
            )

    if labels is None:
        k_target = max((k for k, _, _ in agg_weights), default=-1) + 1
        labels = [str(k) for k in range(k_target)]
    k_target = len(labels)
    if k_target == 0:
        raise SchemeError("the generic scheme needs at least one aggregation weight")

    blocks = []
    for j, t_star in enumerate(treat_times):
        k_j = n_periods - t_star
        extraction = np.zeros((k_j, n_periods))
        for row, t in enumerate(range(t_star, n_periods)):
            if (j, t) in pre_weights:
                nu = np.asarray(pre_weights[(j, t)], dtype=np.float64)
            elif default_pre_weights == "uniform":
                nu = np.ones(t_star) / t_star
            elif default_pre_weights == "last":
                nu = np.zeros(t_star)
                nu[-1] = 1.0
            else:
                raise SchemeError(f"no pre-period weights for treated unit {j}, period {t}")

            if nu.shape != (t_star,):
                raise SchemeError(
                    f"pre-period weights for treated unit {j}, period {t} have "
                    f"length {nu.size}, expected t*={t_star}"
                )
            if abs(nu.sum() - 1) > constants.WEIGHT_SUM_TOLERANCE:
                raise SchemeError(
                    f"pre-period weights for treated unit {j}, period {t} sum to "
                    f"{nu.sum():.12g}, not 1"
                )

            extraction[row, :t_star] = -nu
            extraction[row, t] = 1.0

        aggregation = np.zeros((k_target, k_j))
        blocks.append((extraction, aggregation))

    for (k, j, t), omega in agg_weights.items():
        if not 0 <= k < k_target:
            raise SchemeError(f"coordinate index {k} is out of range 0..{k_target - 1}")
        blocks[j][1][k, t - treat_times[j]] = omega

    return _assemble(
        "generic",
        panel,
        [UnitBlock(extraction=a, aggregation=b) for a, b in blocks],
        labels,
    )


def verify_scheme(scheme: AggregationScheme) -> list[str]:
    violations: list[str] = []
    if len(scheme.labels) != scheme.k_target:
        violations.append(
            f"{len(scheme.labels)} labels for {scheme.k_target} coordinates"
        )
    if len(scheme.degenerate) != len(scheme.blocks):
        violations.append("one degenerate set per treated unit is required")
    if len(scheme.treat_times) != len(scheme.blocks):
        violations.append("one treat time per treated unit is required")

    conforming = []
    for j, block in enumerate(scheme.blocks):
        a, b = block.extraction, block.aggregation
        if a.ndim != 2 or a.shape[1] != scheme.n_periods:
            violations.append(
                f"A_{j} has shape {a.shape}, expected {scheme.n_periods} columns"
            )
            continue
        if b.ndim != 2 or b.shape != (scheme.k_target, a.shape[0]):
            violations.append(
                f"B_{j} has shape {b.shape}, expected "
                f"({scheme.k_target}, {a.shape[0]})"
            )
            continue

        transform = block.transform
        conforming.append(j)
        for row, total in enumerate(transform.sum(axis=1)):
            if abs(total) > constants.ROW_SUM_TOLERANCE:
                violations.append(
                    f"row {row} of B_{j} A_{j} sums to {total:.3g}, not zero "
                    f"(treated unit {j})"
                )

        if j < len(scheme.degenerate) and degenerate_rows(transform) != set(
            scheme.degenerate[j]
        ):
            violations.append(f"degenerate set mismatch for treated unit {j}")

    if len(conforming) == len(scheme.blocks) and scheme.blocks:
        recomputed = frozenset.intersection(
            *(degenerate_rows(block.transform) for block in scheme.blocks)
        )
        if recomputed != scheme.global_degenerate:
            violations.append("global degenerate set mismatch")

    return violations


class PreWeightEntry(BaseModel):
    unit: str = Field(description="Label of a treated unit")
    period: str = Field(description="Label of a post-treatment period")
    weights: list[float] = Field(
        description="Weights over the unit's pre-treatment periods, summing to one"
    )


class AggregationWeightEntry(BaseModel):
    coordinate: str = Field(description="Label of the target coordinate")
    unit: str = Field(description="Label of a treated unit")
    period: str = Field(description="Label of a post-treatment period")
    weight: float


class GenericWeights(BaseModel):
    """The ``--weights`` document for the generic scheme"""

    labels: list[str] = Field(description="Target coordinate labels, in order")
    default_pre_weights: Literal["uniform", "last"] | None = Field(
        default="uniform",
        description="Pre-period weighting for post periods without explicit weights",
    )
    pre_weights: list[PreWeightEntry] = Field(default_factory=list)
    agg_weights: list[AggregationWeightEntry]

    def resolve(
        self, panel: PanelData
    ) -> tuple[dict[tuple[int, int], list[float]], dict[tuple[int, int, int], float]]:
        units = {label: j for j, label in enumerate(panel.unit_labels[: panel.n_treated])}
        periods = {label: t for t, label in enumerate(panel.period_labels)}
        coordinates = {label: k for k, label in enumerate(self.labels)}

        def lookup(table: dict[str, int], label: str, what: str) -> int:
            if label not in table:
                raise SchemeError(f"unknown {what} {label!r} in weights file")
            return table[label]

        pre = {
            (lookup(units, e.unit, "treated unit"), lookup(periods, e.period, "period")): e.weights
            for e in self.pre_weights
        }
        agg = {
            (
                lookup(coordinates, e.coordinate, "coordinate"),
                lookup(units, e.unit, "treated unit"),
                lookup(periods, e.period, "period"),
            ): e.weight
            for e in self.agg_weights
        }
        return pre, agg


def build_scheme(
    kind: str, panel: PanelData, weights: GenericWeights | None = None
) -> AggregationScheme:
    with tracer.start_as_current_span("fewtreat.design.build") as span:
        span.set_attribute("fewtreat.scheme", kind)
        match kind:
            case "att":
                return build_scheme_att(panel)
            case "event_study":
                return build_scheme_event_study(panel)
            case "pretrends":
                return build_scheme_pretrends(panel)
            case "generic":
                if weights is None:
                    raise SchemeError("the generic scheme requires a weights file")
                pre, agg = weights.resolve(panel)
                return build_scheme_generic(
                    panel,
                    pre,
                    agg,
                    labels=weights.labels,
                    default_pre_weights=weights.default_pre_weights,
                )
            case _:
                raise SchemeError(
                    f"unknown scheme {kind!r}, expected one of {', '.join(SCHEME_KINDS)}"
                )
