"""Confidence intervals and sup-t uniform bands from resample draws.

Critical values are the ceil((1 - alpha) B)-th order statistic of the
relevant absolute statistic. Degenerate coordinates carry no sampling
variation: they get zero width at zero and never enter the sup.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Any, Literal

import numpy as np
import pandas as pd
from opentelemetry import trace

from fewtreat import constants
from fewtreat.estimator import EstimateVector
from fewtreat.exception_handlers import ConfidenceError
from fewtreat.resample import ResampleDraws

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

NormalizerKind = Literal["constant", "studentized"]
NORMALIZERS: tuple[str, ...] = ("constant", "studentized")


@dataclasses.dataclass(frozen=True)
class ConfidenceBand:
    level: float
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    critical_value: float
    normalizers: np.ndarray
    """Per coordinate scale multiplying the critical value"""
    normalizer: str
    """constant, studentized or pointwise"""
    labels: tuple[str, ...]
    degenerate: frozenset[int]
    n_draws: int
    seed: int

    @property
    def half_width(self) -> np.ndarray:
        return (self.upper - self.lower) / 2

    def contains(
        self, truth: np.ndarray, tolerance: float | np.ndarray = 0.0
    ) -> tuple[np.ndarray, bool]:
        """Per coordinate containment of ``truth`` and whether all coordinates hold"""
        truth = np.asarray(truth, dtype=np.float64).reshape(-1)
        if truth.size != self.estimate.size:
            raise ConfidenceError(
                f"truth has {truth.size} coordinates, the band has {self.estimate.size}"
            )

        inside = (truth >= self.lower - tolerance) & (truth <= self.upper + tolerance)
        return inside, bool(np.all(inside))

    def to_dict(self) -> dict[str, Any]:
        return {
            "level": self.level,
            "normalizer": self.normalizer,
            "critical_value": self.critical_value,
            "n_draws": self.n_draws,
            "seed": self.seed,
            "degenerate": sorted(self.degenerate),
            "rows": self.to_frame().to_dict(orient="records"),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "label": list(self.labels),
                "estimate": self.estimate,
                "lower": self.lower,
                "upper": self.upper,
            }
        )


def required_draws(alpha: float) -> int:
    """Smallest B for which the (1 - alpha) order statistic is well defined"""
    return math.ceil(round(1 / alpha, 9))


def _check_inputs(estimate: EstimateVector, draws: ResampleDraws, alpha: float) -> None:
    if not 0 < alpha < 1:
        raise ConfidenceError(f"alpha must lie in (0, 1), got {alpha}")

    if draws.n_draws < required_draws(alpha):
        raise ConfidenceError(
            f"{draws.n_draws} draws are too few for alpha={alpha}, "
            f"at least {required_draws(alpha)} are needed"
        )

    if draws.k_target != estimate.k_target:
        raise ConfidenceError(
            f"draws have {draws.k_target} coordinates, the estimate has {estimate.k_target}"
        )


def order_statistic(values: np.ndarray, alpha: float) -> float:
    """The ceil((1 - alpha) B)-th smallest of ``values``"""
    rank = max(1, math.ceil(round((1 - alpha) * values.size, 9)))
    return float(np.partition(values, rank - 1)[rank - 1])


def _band(
    estimate: EstimateVector,
    draws: ResampleDraws,
    alpha: float,
    critical_value: float,
    normalizers: np.ndarray,
    normalizer: str,
    degenerate: frozenset[int],
) -> ConfidenceBand:
    centre = estimate.values.copy()
    normalizers = normalizers.astype(np.float64, copy=True)
    normalizers[sorted(degenerate)] = 0.0
    half = normalizers * critical_value
    lower = centre - half
    upper = centre + half
    for s in degenerate:
        centre[s] = lower[s] = upper[s] = 0.0

    return ConfidenceBand(
        level=1 - alpha,
        estimate=centre,
        lower=lower,
        upper=upper,
        critical_value=critical_value,
        normalizers=normalizers,
        normalizer=normalizer,
        labels=estimate.labels,
        degenerate=degenerate,
        n_draws=draws.n_draws,
        seed=draws.seed,
    )


def ci_scalar(estimate: EstimateVector, draws: ResampleDraws, alpha: float) -> ConfidenceBand:
    if estimate.k_target != 1:
        raise ConfidenceError(
            f"scalar intervals need a one dimensional target, got K={estimate.k_target}; "
            "use uniform_band"
        )
    _check_inputs(estimate, draws, alpha)

    critical_value = order_statistic(np.abs(draws.draws[:, 0]), alpha)
    return _band(
        estimate,
        draws,
        alpha,
        critical_value,
        np.ones(1),
        "constant",
        frozenset(draws.degenerate | estimate.degenerate),
    )


def uniform_band(
    estimate: EstimateVector,
    draws: ResampleDraws,
    alpha: float,
    normalizer: NormalizerKind = "constant",
) -> ConfidenceBand:
    """Sup-t band: every coordinate shares one critical value"""
    _check_inputs(estimate, draws, alpha)
    if normalizer not in NORMALIZERS:
        raise ConfidenceError(
            f"unknown normalizer {normalizer!r}, expected one of {', '.join(NORMALIZERS)}"
        )

    with tracer.start_as_current_span("fewtreat.confidence.uniform_band") as span:
        span.set_attribute("fewtreat.normalizer", normalizer)
        degenerate = frozenset(draws.degenerate | estimate.degenerate)
        active = np.array(
            [s for s in range(estimate.k_target) if s not in degenerate], dtype=np.intp
        )
        if active.size == 0:
            raise ConfidenceError("every coordinate of the target is degenerate")

        normalizers = np.ones(estimate.k_target)
        values = draws.draws[:, active]
        if normalizer == "studentized":
            sigma = values.std(axis=0)
            scale = 1 + np.max(np.abs(values), axis=0)
            flat = sigma <= constants.DEGENERATE_TOLERANCE * scale
            if np.any(flat):
                names = [estimate.labels[s] for s in active[flat]]
                raise ConfidenceError(
                    f"coordinates {names} have no sampling variation across draws, "
                    "use the constant normalizer"
                )
            normalizers[active] = sigma

        statistic = np.max(np.abs(values) / normalizers[active], axis=1)
        critical_value = order_statistic(statistic, alpha)
        logger.debug(
            "Built uniform band",
            extra={"normalizer": normalizer, "critical_value": critical_value},
        )
        return _band(
            estimate, draws, alpha, critical_value, normalizers, normalizer, degenerate
        )


def pointwise_intervals(
    estimate: EstimateVector, draws: ResampleDraws, alpha: float
) -> ConfidenceBand:
    """Per coordinate intervals, each with its own critical value.

    The per coordinate quantiles are stored as normalizers against a unit
    critical value, so the band is not simultaneous.
    """
    _check_inputs(estimate, draws, alpha)
    degenerate = frozenset(draws.degenerate | estimate.degenerate)
    normalizers = np.ones(estimate.k_target)
    for s in range(estimate.k_target):
        if s not in degenerate:
            normalizers[s] = order_statistic(np.abs(draws.draws[:, s]), alpha)

    return _band(estimate, draws, alpha, 1.0, normalizers, "pointwise", degenerate)
