from __future__ import annotations

from typing import Any, Self

import numpy as np
import pytest

from fewtreat.design import AggregationScheme, GenericWeights, build_scheme
from fewtreat.estimator import (
    ControlResiduals,
    EstimateVector,
    control_residuals,
    point_estimate,
)
from fewtreat.hetero import FittedHetero, HeteroSpec, NormalizedResiduals, fit, normalize
from fewtreat.montecarlo import DgpConfig, simulate_panel
from fewtreat.panel import PanelData, build_panel
from fewtreat.resample import ResampleDraws, draw

EXAMPLE_CSV = """unit,period,outcome,treat_time
a,2001,1.0,2002
a,2002,4.0,2002
b,2001,0.0,never
b,2002,1.0,never
c,2001,2.0,
c,2002,3.0,
"""


class BaseGiven:
    def __init__(self):
        self.data: dict[str, Any] = {}

    def panel(
        self,
        outcomes: np.ndarray | list,
        treat_time: list[int | None],
        *,
        sizes: np.ndarray | list | None = None,
    ) -> Self:
        self.data["panel"] = build_panel(
            np.asarray(outcomes, dtype=np.float64), treat_time, sizes=sizes
        )
        return self

    def example_panel(self) -> Self:
        """One treated unit, two periods, two controls"""
        return self.panel([[1, 4], [0, 1], [2, 3]], [1, None, None])

    def random_panel(
        self,
        treat_times: tuple[int, ...] = (2, 3),
        n_control: int = 6,
        n_periods: int = 5,
        *,
        seed: int = 0,
        sizes: bool = False,
    ) -> Self:
        rng = np.random.default_rng(seed)
        n_units = len(treat_times) + n_control
        outcomes = rng.normal(size=(n_units, n_periods))
        unit_sizes = rng.integers(10, 100, size=n_units) if sizes else None
        return self.panel(
            outcomes, list(treat_times) + [None] * n_control, sizes=unit_sizes
        )

    def simulated(self, config: DgpConfig, rep_seed: int = 0) -> Self:
        simulated = simulate_panel(config, rep_seed)
        self.data["panel"] = simulated.panel
        self.data["simulated"] = simulated
        return self

    def scheme(self, kind: str = "att", weights: GenericWeights | None = None) -> Self:
        self.data["scheme"] = build_scheme(kind, self.object, weights)
        return self

    @property
    def object(self) -> PanelData:
        return self.data["panel"]

    @property
    def built_scheme(self) -> AggregationScheme:
        if "scheme" not in self.data:
            self.scheme()
        return self.data["scheme"]


class BaseWhen:
    def __init__(self, given: BaseGiven):
        self.given = given

    @property
    def panel(self) -> PanelData:
        return self.given.object

    @property
    def scheme(self) -> AggregationScheme:
        return self.given.built_scheme

    def estimate(self) -> EstimateVector:
        return point_estimate(self.panel, self.scheme)

    def residuals(self) -> ControlResiduals:
        return control_residuals(self.panel, self.scheme)

    def fitted(self, kind: str = "identity", sv_floor: float | None = None) -> FittedHetero:
        return fit(HeteroSpec(kind=kind, sv_floor=sv_floor), self.residuals(), self.panel)

    def normalized(
        self, kind: str = "identity", sv_floor: float | None = None
    ) -> tuple[FittedHetero, NormalizedResiduals]:
        residuals = self.residuals()
        fitted = fit(HeteroSpec(kind=kind, sv_floor=sv_floor), residuals, self.panel)
        return fitted, normalize(residuals, fitted, self.panel)

    def draws(
        self,
        n_draws: int = 1_000,
        seed: int = 0,
        *,
        kind: str = "identity",
        n_jobs: int | None = None,
    ) -> ResampleDraws:
        fitted, normalized = self.normalized(kind)
        return draw(normalized, fitted, self.panel, n_draws, seed, n_jobs=n_jobs)


def make_draws(
    values: np.ndarray | list,
    *,
    degenerate: frozenset[int] = frozenset(),
    seed: int = 0,
) -> ResampleDraws:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    return ResampleDraws(
        draws=values,
        indices=np.zeros((values.shape[0], 1), dtype=np.int64),
        seed=seed,
        labels=tuple(str(s) for s in range(values.shape[1])),
        degenerate=degenerate,
        fitted_fingerprint="test",
    )


def make_estimate(
    values: np.ndarray | list, *, degenerate: frozenset[int] = frozenset()
) -> EstimateVector:
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    return EstimateVector(
        values=values,
        labels=tuple(str(s) for s in range(values.size)),
        scheme_fingerprint="test",
        degenerate=degenerate,
    )


@pytest.fixture
def given() -> BaseGiven:
    return BaseGiven()


@pytest.fixture
def example_csv(tmp_path) -> str:
    path = tmp_path / "panel.csv"
    path.write_text(EXAMPLE_CSV, encoding="utf-8")
    return str(path)
