"""Point estimates and the control residuals that inference resamples."""

from __future__ import annotations

import dataclasses
import logging
from typing import Any

import numpy as np
import pandas as pd
from opentelemetry import trace

from fewtreat.design import AggregationScheme
from fewtreat.exception_handlers import SchemeError
from fewtreat.panel import PanelData
from fewtreat.util import canonical_json

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

RESIDUAL_SUM_TOLERANCE = 1e-9


@dataclasses.dataclass(frozen=True)
class EstimateVector:
    values: np.ndarray
    """The K dimensional estimate"""
    labels: tuple[str, ...]
    scheme_fingerprint: str
    degenerate: frozenset[int] = frozenset()

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def k_target(self) -> int:
        return self.values.size

    def to_dict(self) -> dict[str, Any]:
        return {
            "labels": list(self.labels),
            "values": self.values.tolist(),
            "degenerate": sorted(self.degenerate),
            "scheme_fingerprint": self.scheme_fingerprint,
        }

    def to_json(self, *, indent: int | None = None) -> str:
        return canonical_json(self.to_dict(), indent=indent)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"label": list(self.labels), "estimate": self.values})


@dataclasses.dataclass(frozen=True)
class ControlResiduals:
    """Centered B_j A_j Y_i for every control i, one N0 x K matrix per treated j"""

    residuals: tuple[np.ndarray, ...]
    degenerate: tuple[frozenset[int], ...]
    labels: tuple[str, ...]
    scheme_fingerprint: str
    scheme: AggregationScheme | None = dataclasses.field(
        default=None, repr=False, compare=False
    )

    @property
    def n_treated(self) -> int:
        return len(self.residuals)

    @property
    def n_control(self) -> int:
        return self.residuals[0].shape[0]

    @property
    def k_target(self) -> int:
        return len(self.labels)

    def nondegenerate(self, j: int) -> np.ndarray:
        return np.array(
            [s for s in range(self.k_target) if s not in self.degenerate[j]],
            dtype=np.intp,
        )

    def reduced(self, j: int) -> np.ndarray:
        """Residuals of treated unit ``j`` on its nondegenerate coordinates, N0 x m_j"""
        return self.residuals[j][:, self.nondegenerate(j)]

    def check(self) -> list[str]:
        violations = []
        for j, matrix in enumerate(self.residuals):
            scale = float(np.max(np.abs(matrix))) if matrix.size else 0.0
            total = np.abs(matrix.sum(axis=0))
            if np.any(total > RESIDUAL_SUM_TOLERANCE * scale * max(1, matrix.shape[0])):
                violations.append(
                    f"control residuals of treated unit {j} do not sum to zero "
                    f"(max |sum| {total.max():.3g})"
                )

            for s in self.degenerate[j]:
                if np.any(matrix[:, s] != 0):
                    violations.append(
                        f"degenerate coordinate {s} of treated unit {j} is not zero"
                    )

        return violations


def check_dimensions(panel: PanelData, scheme: AggregationScheme) -> None:
    if scheme.n_periods != panel.n_periods:
        raise SchemeError(
            f"scheme expects {scheme.n_periods} periods, the panel has {panel.n_periods}"
        )

    if tuple(scheme.treat_times) != panel.treated_times:
        raise SchemeError(
            "scheme was built for treat times "
            f"{list(scheme.treat_times)}, the panel has {list(panel.treated_times)}"
        )

    for j, block in enumerate(scheme.blocks):
        if block.transform.shape != (scheme.k_target, scheme.n_periods):
            raise SchemeError(
                f"B_{j} A_{j} has shape {block.transform.shape}, expected "
                f"({scheme.k_target}, {scheme.n_periods})"
            )


def masked_transforms(scheme: AggregationScheme) -> np.ndarray:
    """B_j A_j stacked as (N1, K, T), with degenerate rows set to exactly zero"""
    transforms = scheme.transforms().copy()
    for j, degenerate in enumerate(scheme.degenerate):
        transforms[j, sorted(degenerate), :] = 0.0

    return transforms


def point_estimate(panel: PanelData, scheme: AggregationScheme) -> EstimateVector:
    with tracer.start_as_current_span("fewtreat.estimator.point_estimate") as span:
        check_dimensions(panel, scheme)
        span.set_attribute("fewtreat.n_treated", panel.n_treated)
        span.set_attribute("fewtreat.k_target", scheme.k_target)

        contrasts = panel.treated_outcomes - panel.control_outcomes.mean(axis=0)
        values = np.einsum("jkt,jt->k", masked_transforms(scheme), contrasts)
        values[sorted(scheme.global_degenerate)] = 0.0

        estimate = EstimateVector(
            values=values,
            labels=scheme.labels,
            scheme_fingerprint=scheme.fingerprint(),
            degenerate=scheme.global_degenerate,
        )
        logger.debug(
            "Computed point estimate",
            extra={"scheme": scheme.kind, "values": values.tolist()},
        )
        return estimate


def control_residuals(panel: PanelData, scheme: AggregationScheme) -> ControlResiduals:
    with tracer.start_as_current_span("fewtreat.estimator.control_residuals") as span:
        check_dimensions(panel, scheme)
        span.set_attribute("fewtreat.n_control", panel.n_control)

        controls = panel.control_outcomes
        centered = controls - controls.mean(axis=0)
        # (N1, N0, K)
        residuals = np.einsum("jkt,it->jik", masked_transforms(scheme), centered)

        result = ControlResiduals(
            residuals=tuple(np.ascontiguousarray(r) for r in residuals),
            degenerate=scheme.degenerate,
            labels=scheme.labels,
            scheme_fingerprint=scheme.fingerprint(),
            scheme=scheme,
        )
        for matrix in result.residuals:
            matrix.flags.writeable = False

        return result
