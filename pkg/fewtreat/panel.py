"""Balanced panels with staggered, absorbing treatment.

Units are held treated-first: rows ``0 .. N1 - 1`` are treated and the
remaining rows are never treated. ``treat_time[j]`` is the number of
pre-treatment periods of unit ``j`` (the last period before treatment,
counting periods from one), so its outcome columns ``0 .. t* - 1`` are
pre-treatment and ``t* .. T - 1`` are treated. Controls carry ``None``.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from opentelemetry import trace
from pydantic import BaseModel, Field

from fewtreat.exception_handlers import PanelValidationError

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

NEVER = "never"
"""The ``treat_time`` value used for never treated units in CSV files."""

MAX_REPORTED_PAIRS = 10


class ColumnMap(BaseModel):
    unit: str = Field(default="unit", description="Unit identifier column")
    period: str = Field(default="period", description="Period label column")
    outcome: str = Field(default="outcome", description="Outcome column")
    treat_time: str = Field(
        default="treat_time",
        description="First treated period label, empty or 'never' for controls",
    )
    size: str | None = Field(
        default="size",
        description="Size column, constant within unit for Z_j. Read when present "
        "unless set explicitly, None ignores sizes",
    )
    treated: str | None = Field(
        default=None,
        description="Optional 0/1 treatment indicator, checked against treat_time",
    )


@dataclasses.dataclass(frozen=True)
class PanelData:
    outcomes: np.ndarray
    """N x T outcome matrix, treated units first"""
    treat_time: tuple[int | None, ...]
    """Per unit number of pre-treatment periods, None for controls"""
    unit_labels: tuple[str, ...]
    period_labels: tuple[str, ...]
    sizes: np.ndarray | None = None
    """Z_j with shape (N,) or Z_{j,t} with shape (N, T)"""

    def __post_init__(self):
        outcomes = np.array(self.outcomes, dtype=np.float64)
        outcomes.flags.writeable = False
        object.__setattr__(self, "outcomes", outcomes)
        if self.sizes is not None:
            sizes = np.array(self.sizes, dtype=np.float64)
            sizes.flags.writeable = False
            object.__setattr__(self, "sizes", sizes)

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[1] if self.outcomes.ndim == 2 else 0

    @property
    def n_treated(self) -> int:
        return sum(1 for t in self.treat_time if t is not None)

    @property
    def n_control(self) -> int:
        return self.n_units - self.n_treated

    @property
    def treated_times(self) -> tuple[int, ...]:
        return tuple(t for t in self.treat_time if t is not None)

    @property
    def treated_outcomes(self) -> np.ndarray:
        return self.outcomes[: self.n_treated]

    @property
    def control_outcomes(self) -> np.ndarray:
        return self.outcomes[self.n_treated :]

    @property
    def size_mode(self) -> Literal["unit", "unit_period"] | None:
        if self.sizes is None:
            return None

        return "unit" if self.sizes.ndim == 1 else "unit_period"

    def unit_sizes(self) -> np.ndarray:
        """Z_j per unit, shape (N,)"""
        if self.sizes is None or self.sizes.ndim != 1:
            raise PanelValidationError(
                ["unit level sizes Z_j are required, the panel has none"]
            )

        return self.sizes

    def period_sizes(self) -> np.ndarray:
        """Z_{j,t} per unit and period, broadcasting unit level sizes"""
        if self.sizes is None:
            raise PanelValidationError(["sizes are required, the panel has none"])

        if self.sizes.ndim == 1:
            return np.repeat(self.sizes[:, None], self.n_periods, axis=1)

        return self.sizes

    def with_outcomes(self, outcomes: np.ndarray) -> PanelData:
        return dataclasses.replace(self, outcomes=outcomes)

    def to_frame(self) -> pd.DataFrame:
        """Long format, one row per (unit, period)"""
        n_units, n_periods = self.outcomes.shape
        frame = pd.DataFrame(
            {
                "unit": np.repeat(np.array(self.unit_labels, dtype=object), n_periods),
                "period": np.tile(np.array(self.period_labels, dtype=object), n_units),
                "outcome": self.outcomes.reshape(-1),
                "treat_time": np.repeat(
                    np.array(
                        [
                            NEVER if t is None else self.period_labels[t]
                            for t in self.treat_time
                        ],
                        dtype=object,
                    ),
                    n_periods,
                ),
            }
        )
        if self.sizes is not None:
            frame["size"] = self.period_sizes().reshape(-1)

        return frame


def validate(panel: PanelData) -> list[str]:
    violations: list[str] = []
    outcomes = panel.outcomes
    if outcomes.ndim != 2:
        return [f"outcomes must be a matrix, got {outcomes.ndim} dimensions"]

    n_units, n_periods = outcomes.shape
    if n_periods < 2:
        violations.append("at least two periods are required")

    if len(panel.treat_time) != n_units:
        violations.append(
            f"treat_time has {len(panel.treat_time)} entries for {n_units} units"
        )
        return violations

    if len(panel.unit_labels) != n_units:
        violations.append("unit label count does not match the number of units")
    if len(panel.period_labels) != n_periods:
        violations.append("period label count does not match the number of periods")

    missing = np.argwhere(~np.isfinite(outcomes))
    if missing.size:
        violations.append(
            "unbalanced panel, missing outcomes at "
            + _describe_pairs(panel, [tuple(pair) for pair in missing])
        )

    if panel.n_treated == 0:
        violations.append("no treated units")
    if panel.n_control == 0:
        violations.append("no never-treated controls")
    elif panel.n_control == 1:
        violations.append("fewer than two never-treated controls")

    is_treated = [t is not None for t in panel.treat_time]
    if is_treated != sorted(is_treated, reverse=True):
        violations.append("treated units must precede controls")

    for position, t_star in enumerate(panel.treat_time):
        if t_star is None:
            continue

        if (
            not isinstance(t_star, (int, np.integer))
            or not 1 <= t_star <= n_periods - 1
        ):
            violations.append(
                f"treat time out of range for unit {_unit_label(panel, position)}: "
                f"t*={t_star} is not in 1..{n_periods - 1}"
            )

    if panel.sizes is not None:
        sizes = panel.sizes
        if sizes.shape not in ((n_units,), (n_units, n_periods)):
            violations.append(
                f"sizes have shape {sizes.shape}, expected ({n_units},) "
                f"or ({n_units}, {n_periods})"
            )
        elif not np.all(np.isfinite(sizes)):
            violations.append("missing size")
        elif np.any(sizes <= 0):
            violations.append("nonpositive size")

    return violations


def build_panel(
    outcomes: np.ndarray,
    treat_time: Sequence[int | None],
    *,
    sizes: np.ndarray | None = None,
    unit_labels: Sequence[str] | None = None,
    period_labels: Sequence[str] | None = None,
) -> PanelData:
    """Create a validated panel, moving treated units ahead of controls.

    The relative order within treated units and within controls is kept.
    """
    outcomes = np.asarray(outcomes, dtype=np.float64)
    if outcomes.ndim != 2:
        raise PanelValidationError(["outcomes must be a matrix"])

    n_units, n_periods = outcomes.shape
    if len(treat_time) != n_units:
        raise PanelValidationError(
            [f"treat_time has {len(treat_time)} entries for {n_units} units"]
        )

    if unit_labels is None:
        unit_labels = [str(i + 1) for i in range(n_units)]
    if period_labels is None:
        period_labels = [str(t + 1) for t in range(n_periods)]

    order = [i for i, t in enumerate(treat_time) if t is not None] + [
        i for i, t in enumerate(treat_time) if t is None
    ]
    if sizes is not None:
        sizes = np.asarray(sizes, dtype=np.float64)[order]

    panel = PanelData(
        outcomes=outcomes[order],
        treat_time=tuple(
            None if treat_time[i] is None else int(treat_time[i]) for i in order
        ),
        unit_labels=tuple(str(unit_labels[i]) for i in order),
        period_labels=tuple(str(label) for label in period_labels),
        sizes=sizes,
    )
    violations = validate(panel)
    if violations:
        raise PanelValidationError(violations)

    return panel


def load_panel(source: str | Path, column_map: ColumnMap | None = None) -> PanelData:
    """Read a long format CSV into a validated panel.

    Periods are relabelled ``1..T`` in sorted order (numerically when every
    label is numeric) and the original labels are kept for reporting.
    """
    if column_map is None:
        column_map = ColumnMap()

    with tracer.start_as_current_span("fewtreat.panel.load") as span:
        try:
            frame = pd.read_csv(
                source, dtype=str, keep_default_na=False, encoding="utf-8"
            )
        except FileNotFoundError as e:
            raise PanelValidationError([f"file not found: {source}"]) from e

        required = [
            column_map.unit,
            column_map.period,
            column_map.outcome,
            column_map.treat_time,
        ]
        size_column = column_map.size
        if (
            size_column is not None
            and "size" not in column_map.model_fields_set
            and size_column not in frame.columns
        ):
            size_column = None

        optional = [c for c in (size_column, column_map.treated) if c is not None]
        absent = [c for c in required + optional if c not in frame.columns]
        if absent:
            raise PanelValidationError(
                [f"column {c!r} not found in {source}" for c in absent]
            )

        frame[column_map.unit] = frame[column_map.unit].str.strip()
        frame[column_map.period] = frame[column_map.period].str.strip()
        duplicated = frame.duplicated([column_map.unit, column_map.period])
        if duplicated.any():
            first = frame[duplicated].iloc[0]
            raise PanelValidationError(
                [
                    "more than one row for (unit, period) = "
                    f"({first[column_map.unit]}, {first[column_map.period]})"
                ]
            )

        period_labels, period_keys = _sorted_periods(frame[column_map.period])
        period_index = {label: i for i, label in enumerate(period_labels)}
        units = list(dict.fromkeys(frame[column_map.unit]))
        n_periods = len(period_labels)

        adoption = _adoption_times(frame, column_map, units, period_labels, period_keys)
        treated_units = sorted(u for u in units if adoption[u] is not None)
        control_units = sorted(u for u in units if adoption[u] is None)
        ordered_units = treated_units + control_units
        unit_index = {u: i for i, u in enumerate(ordered_units)}

        outcome_values = pd.to_numeric(frame[column_map.outcome], errors="coerce")
        bad_outcomes = frame[outcome_values.isna()]
        if len(bad_outcomes):
            first = bad_outcomes.iloc[0]
            raise PanelValidationError(
                [
                    f"non-numeric or empty outcome for (unit, period) = "
                    f"({first[column_map.unit]}, {first[column_map.period]})"
                ]
            )

        rows = frame[column_map.unit].map(unit_index).to_numpy()
        cols = frame[column_map.period].map(period_index).to_numpy()
        outcomes = np.full((len(ordered_units), n_periods), np.nan)
        outcomes[rows, cols] = outcome_values.to_numpy(dtype=np.float64)

        missing = np.argwhere(np.isnan(outcomes))
        if missing.size:
            pairs = [
                f"({ordered_units[i]}, {period_labels[t]})"
                for i, t in missing[:MAX_REPORTED_PAIRS]
            ]
            more = len(missing) - len(pairs)
            raise PanelValidationError(
                [
                    "unbalanced panel, missing (unit, period) pairs: "
                    + ", ".join(pairs)
                    + (f" and {more} more" if more > 0 else "")
                ]
            )

        if column_map.treated is not None:
            _check_indicator(frame, column_map, period_index, adoption)

        sizes = None
        if size_column is not None:
            size_values = pd.to_numeric(frame[size_column], errors="coerce")
            size_grid = np.full((len(ordered_units), n_periods), np.nan)
            size_grid[rows, cols] = size_values.to_numpy(dtype=np.float64)
            if np.all(size_grid == size_grid[:, :1]):
                sizes = size_grid[:, 0]
            else:
                sizes = size_grid

        panel = PanelData(
            outcomes=outcomes,
            treat_time=tuple(adoption[u] for u in ordered_units),
            unit_labels=tuple(ordered_units),
            period_labels=tuple(period_labels),
            sizes=sizes,
        )
        violations = validate(panel)
        if violations:
            raise PanelValidationError(violations)

        span.set_attribute("fewtreat.n_treated", panel.n_treated)
        span.set_attribute("fewtreat.n_control", panel.n_control)
        span.set_attribute("fewtreat.n_periods", panel.n_periods)
        logger.info(
            "Loaded panel",
            extra={
                "source": str(source),
                "n_treated": panel.n_treated,
                "n_control": panel.n_control,
                "n_periods": panel.n_periods,
            },
        )
        return panel


def write_panel(panel: PanelData, path: str | Path) -> None:
    """Write the long format CSV that ``load_panel`` reads with the default columns"""
    panel.to_frame().to_csv(path, index=False, lineterminator="\n")


def _unit_label(panel: PanelData, position: int) -> str:
    if position < len(panel.unit_labels):
        return panel.unit_labels[position]
    return str(position + 1)


def _describe_pairs(panel: PanelData, pairs: list[tuple[int, int]]) -> str:
    shown = []
    for unit, period in pairs[:MAX_REPORTED_PAIRS]:
        period_label = (
            panel.period_labels[period]
            if period < len(panel.period_labels)
            else str(period + 1)
        )
        shown.append(f"({_unit_label(panel, unit)}, {period_label})")

    more = len(pairs) - len(shown)
    return ", ".join(shown) + (f" and {more} more" if more > 0 else "")


def _sorted_periods(column: pd.Series) -> tuple[list[str], np.ndarray | None]:
    labels = list(dict.fromkeys(column))
    numeric = pd.to_numeric(pd.Series(labels), errors="coerce")
    if numeric.notna().all():
        order = np.argsort(numeric.to_numpy(), kind="stable")
        return [labels[i] for i in order], numeric.to_numpy()[order]

    return sorted(labels), None


def _adoption_times(
    frame: pd.DataFrame,
    column_map: ColumnMap,
    units: list[str],
    period_labels: list[str],
    period_keys: np.ndarray | None,
) -> dict[str, int | None]:
    """Map each unit to its number of pre-treatment periods, None if never treated"""
    n_periods = len(period_labels)
    raw = frame[column_map.treat_time].str.strip()
    raw = raw.where(raw.str.lower() != NEVER, "")
    values_by_unit = raw.groupby(frame[column_map.unit], sort=False).unique()

    adoption: dict[str, int | None] = {}
    for unit in units:
        values = list(values_by_unit[unit])
        if len(values) > 1:
            raise PanelValidationError(
                [
                    f"non-absorbing treatment for unit {unit}: treat_time takes "
                    f"several values {sorted(values)}"
                ]
            )

        value = values[0]
        if value == "":
            adoption[unit] = None
            continue

        if period_keys is not None:
            numeric = pd.to_numeric(pd.Series([value]), errors="coerce").iloc[0]
            if pd.isna(numeric):
                raise PanelValidationError(
                    [f"treat_time {value!r} for unit {unit} is not a period"]
                )
            inside = period_keys[0] <= numeric <= period_keys[-1]
            if inside and not np.any(period_keys == numeric):
                raise PanelValidationError(
                    [f"treat_time {value!r} for unit {unit} is not a period"]
                )
            t_star = int(np.sum(period_keys < numeric))
        else:
            if value not in period_labels:
                raise PanelValidationError(
                    [f"treat_time {value!r} for unit {unit} is not a period"]
                )
            t_star = period_labels.index(value)

        if not 1 <= t_star <= n_periods - 1:
            raise PanelValidationError(
                [
                    f"treat time out of range for unit {unit}: adoption at {value} "
                    f"leaves t*={t_star}, expected 1..{n_periods - 1}"
                ]
            )

        adoption[unit] = t_star

    return adoption


def _check_indicator(
    frame: pd.DataFrame,
    column_map: ColumnMap,
    period_index: dict[str, int],
    adoption: dict[str, int | None],
) -> None:
    indicator = pd.to_numeric(frame[column_map.treated], errors="coerce")
    for (unit, period), value in zip(
        zip(frame[column_map.unit], frame[column_map.period]), indicator
    ):
        t_star = adoption[unit]
        expected = 0 if t_star is None else int(period_index[period] >= t_star)
        if pd.isna(value) or int(value) != expected:
            raise PanelValidationError(
                [
                    f"non-absorbing or inconsistent treatment indicator for unit "
                    f"{unit} at period {period}"
                ]
            )
