"""Simulated panels and the Monte Carlo experiments run on them.

Outcomes follow y_{i,t} = theta_i + gamma_t + alpha_{i,t} + eta_{i,t}, where
eta_i is a group shock with covariance V0 plus the average of Z_i
idiosyncratic shocks with covariance V1. With per period sizes the panel is
built from repeated cross-sections and the idiosyncratic part is independent
across periods with variances diag(V1) / Z_{i,t}.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Annotated, Literal

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from opentelemetry import trace
from pydantic import BaseModel, Field, ValidationError, model_validator

from fewtreat import constants
from fewtreat.confidence import (
    ci_scalar,
    required_draws,
    uniform_band,
)
from fewtreat.design import AggregationScheme, GenericWeights, build_scheme
from fewtreat.estimator import control_residuals, point_estimate
from fewtreat.exception_handlers import (
    ConfidenceError,
    FewTreatError,
    SimulationError,
    UsageError,
)
from fewtreat.hetero import HeteroSpec, fit, normalize
from fewtreat.panel import PanelData, build_panel
from fewtreat.resample import draw, empirical_cdf, exact_cdf
from fewtreat.util import derived_seed, fingerprint, is_psd, psd_sqrt, substream

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

# First element of every random stream key
SIZES_STREAM = 0
PANEL_STREAM = 1
DRAWS_STREAM = 2
ORACLE_STREAM = 3

MAX_AVERAGED_SHOCKS = 10_000
"""Above this size scaled-t idiosyncratic means are drawn from their normal limit"""

Matrix = list[list[float]]


class DgpConfig(BaseModel):
    n_treated: int = Field(ge=1)
    n_control: int = Field(ge=2)
    n_periods: int = Field(ge=2)
    treat_times: list[int] = Field(
        description="Number of pre-treatment periods of each treated unit"
    )
    effects: Matrix | float = Field(
        default=0.0,
        description="alpha as an N1 x T matrix, or one constant for every treated cell",
    )
    fixed_effect_scale: float = Field(
        default=1.0, ge=0, description="Standard deviation of theta_i and gamma_t"
    )
    v0: Matrix | float = Field(
        default=1.0, description="Group shock covariance, a scalar means a multiple of I"
    )
    v1: Matrix | float = Field(
        default=0.0,
        description="Idiosyncratic shock covariance, a scalar means a multiple of I",
    )
    treated_size: list[float] | float | None = Field(
        default=None, description="Z of the treated units"
    )
    control_size: float | None = Field(default=None, description="Fixed Z of every control")
    control_size_range: tuple[int, int] | None = Field(
        default=None, description="Controls draw Z uniformly from these integers, inclusive"
    )
    size_mode: Literal["unit", "unit_period"] = "unit"
    shock: Literal["normal", "t"] = "normal"
    df: Annotated[float, Field(gt=2)] = 5.0
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_consistency(self) -> DgpConfig:
        if len(self.treat_times) != self.n_treated:
            raise ValueError(
                f"{len(self.treat_times)} treat times for {self.n_treated} treated units"
            )
        if any(not 1 <= t <= self.n_periods - 1 for t in self.treat_times):
            raise ValueError(f"treat times must lie in 1..{self.n_periods - 1}")

        effects = self.effect_matrix()
        for j, t_star in enumerate(self.treat_times):
            if np.any(effects[j, :t_star] != 0):
                raise ValueError(f"effects of treated unit {j} are not zero before treatment")

        for name in ("v0", "v1"):
            if not is_psd(self.covariance(name)):
                raise ValueError(f"{name} is not a symmetric positive semidefinite matrix")

        if isinstance(self.treated_size, list) and len(self.treated_size) != self.n_treated:
            raise ValueError("treated_size needs one entry per treated unit")
        sized = [self.treated_size, self.control_size, self.control_size_range]
        if any(s is not None for s in sized):
            if self.treated_size is None:
                raise ValueError("treated_size is required when controls have sizes")
            if (self.control_size is None) == (self.control_size_range is None):
                raise ValueError("give exactly one of control_size and control_size_range")
            if np.any(np.asarray(self.treated_size) <= 0):
                raise ValueError("treated sizes must be positive")
            if self.control_size is not None and self.control_size <= 0:
                raise ValueError("control_size must be positive")
            if self.control_size_range is not None:
                low, high = self.control_size_range
                if not 1 <= low <= high:
                    raise ValueError("control_size_range must satisfy 1 <= low <= high")
        elif self.size_mode == "unit_period":
            raise ValueError("size_mode unit_period needs sizes")

        return self

    @property
    def n_units(self) -> int:
        return self.n_treated + self.n_control

    @property
    def has_sizes(self) -> bool:
        return self.treated_size is not None

    def effect_matrix(self) -> np.ndarray:
        if isinstance(self.effects, list):
            effects = np.asarray(self.effects, dtype=np.float64)
            if effects.shape != (self.n_treated, self.n_periods):
                raise ValueError(
                    f"effects have shape {effects.shape}, expected "
                    f"({self.n_treated}, {self.n_periods})"
                )
            return effects

        effects = np.zeros((self.n_treated, self.n_periods))
        for j, t_star in enumerate(self.treat_times):
            effects[j, t_star:] = self.effects
        return effects

    def covariance(self, name: Literal["v0", "v1"]) -> np.ndarray:
        value = getattr(self, name)
        if isinstance(value, list):
            matrix = np.asarray(value, dtype=np.float64)
            if matrix.shape != (self.n_periods, self.n_periods):
                raise ValueError(f"{name} must be {self.n_periods} x {self.n_periods}")
            return matrix
        return float(value) * np.eye(self.n_periods)

    def sizes(self) -> np.ndarray | None:
        """Z for every unit, treated first, fixed by the config seed"""
        if not self.has_sizes:
            return None

        rng = substream(self.seed, SIZES_STREAM)
        shape = (self.n_control,) if self.size_mode == "unit" else (
            self.n_control,
            self.n_periods,
        )
        if self.control_size is not None:
            controls = np.full(shape, float(self.control_size))
        else:
            low, high = self.control_size_range
            controls = rng.integers(low, high, size=shape, endpoint=True).astype(np.float64)

        treated = np.broadcast_to(
            np.asarray(self.treated_size, dtype=np.float64), (self.n_treated,)
        )
        if self.size_mode == "unit_period":
            treated = np.repeat(treated[:, None], self.n_periods, axis=1)

        return np.concatenate([treated, controls])

    @classmethod
    def _preset(cls, overrides: dict, **values) -> DgpConfig:
        return cls(**(values | overrides))

    @classmethod
    def homoskedastic(
        cls,
        n_treated: int = 1,
        n_control: int = 50,
        n_periods: int = 8,
        treat_times: list[int] | None = None,
        seed: int = 0,
        **overrides,
    ) -> DgpConfig:
        """Normal group shocks only, constant unit effect"""
        return cls._preset(
            overrides,
            n_treated=n_treated,
            n_control=n_control,
            n_periods=n_periods,
            treat_times=treat_times or [n_periods // 2] * n_treated,
            effects=1.0,
            v0=1.0,
            v1=0.0,
            seed=seed,
        )

    @classmethod
    def heteroskedastic_panel(
        cls,
        n_treated: int = 1,
        n_control: int = 200,
        n_periods: int = 8,
        treat_times: list[int] | None = None,
        seed: int = 0,
        **overrides,
    ) -> DgpConfig:
        """Small treated units, large and varied controls, idiosyncratic noise dominant"""
        lags = np.abs(np.subtract.outer(np.arange(n_periods), np.arange(n_periods)))
        return cls._preset(
            overrides,
            n_treated=n_treated,
            n_control=n_control,
            n_periods=n_periods,
            treat_times=treat_times or [n_periods // 2] * n_treated,
            effects=1.0,
            v0=0.05,
            v1=(25 * 0.5**lags).tolist(),
            treated_size=25.0,
            control_size_range=(25, 400),
            seed=seed,
        )

    @classmethod
    def noiseless(
        cls,
        n_treated: int = 2,
        n_control: int = 20,
        n_periods: int = 6,
        treat_times: list[int] | None = None,
        seed: int = 0,
        **overrides,
    ) -> DgpConfig:
        return cls._preset(
            overrides,
            n_treated=n_treated,
            n_control=n_control,
            n_periods=n_periods,
            treat_times=treat_times or [n_periods // 2] * n_treated,
            effects=1.0,
            v0=0.0,
            v1=0.0,
            seed=seed,
        )

    def fingerprint(self) -> str:
        return fingerprint(self.model_dump(mode="json"))


def load_dgp_config(path: str | Path) -> DgpConfig:
    try:
        return DgpConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise UsageError(f"simulation config {path} does not exist") from e
    except ValidationError as e:
        raise UsageError(f"invalid simulation config {path}: {e}") from e


@dataclasses.dataclass(frozen=True)
class SimulatedPanel:
    panel: PanelData
    effects: np.ndarray
    """alpha, N1 x T, zero before treatment"""
    rep_seed: int

    def truth(self, scheme: AggregationScheme) -> np.ndarray:
        """The estimand sum_j B_j A_j alpha_j for ``scheme``"""
        values = np.einsum("jkt,jt->k", scheme.transforms(), self.effects)
        values[sorted(scheme.global_degenerate)] = 0.0
        return values


def _standard_shocks(
    rng: np.random.Generator, config: DgpConfig, shape: tuple[int, ...]
) -> np.ndarray:
    """Mean zero, unit variance draws from the configured family"""
    if config.shock == "normal":
        return rng.standard_normal(shape)
    return rng.standard_t(config.df, size=shape) * np.sqrt((config.df - 2) / config.df)


def _idiosyncratic(
    rng: np.random.Generator, config: DgpConfig, sizes: np.ndarray | None
) -> np.ndarray:
    n_units, n_periods = config.n_units, config.n_periods
    v1 = config.covariance("v1")
    if sizes is None:
        return _standard_shocks(rng, config, (n_units, n_periods)) @ psd_sqrt(v1)

    if sizes.ndim == 2:
        # Repeated cross-sections, independent across periods
        scale = np.sqrt(np.diag(v1))[None, :]
        if config.shock == "normal":
            return rng.standard_normal((n_units, n_periods)) * scale / np.sqrt(sizes)

        shocks = np.empty((n_units, n_periods))
        for i in range(n_units):
            for t in range(n_periods):
                shocks[i, t] = _mean_of_shocks(rng, config, int(sizes[i, t]), 1)[0]
        return shocks * scale

    root = psd_sqrt(v1)
    if config.shock == "normal":
        return rng.standard_normal((n_units, n_periods)) @ root / np.sqrt(sizes)[:, None]

    return np.stack(
        [_mean_of_shocks(rng, config, int(z), n_periods) for z in sizes]
    ) @ root


def _mean_of_shocks(
    rng: np.random.Generator, config: DgpConfig, size: int, width: int
) -> np.ndarray:
    size = max(size, 1)
    if size > MAX_AVERAGED_SHOCKS:
        return rng.standard_normal(width) / np.sqrt(size)
    return _standard_shocks(rng, config, (size, width)).mean(axis=0)


def simulate_panel(config: DgpConfig, rep_seed: int) -> SimulatedPanel:
    with tracer.start_as_current_span("fewtreat.montecarlo.simulate_panel") as span:
        span.set_attribute("fewtreat.rep_seed", rep_seed)
        rng = substream(config.seed, PANEL_STREAM, rep_seed)
        n_units, n_periods = config.n_units, config.n_periods

        theta = rng.standard_normal(n_units) * config.fixed_effect_scale
        gamma = rng.standard_normal(n_periods) * config.fixed_effect_scale
        group = _standard_shocks(rng, config, (n_units, n_periods)) @ psd_sqrt(
            config.covariance("v0")
        )
        sizes = config.sizes()
        eta = group + _idiosyncratic(rng, config, sizes)

        effects = config.effect_matrix()
        outcomes = theta[:, None] + gamma[None, :] + eta
        outcomes[: config.n_treated] += effects

        panel = build_panel(
            outcomes,
            list(config.treat_times) + [None] * config.n_control,
            sizes=sizes,
        )
        return SimulatedPanel(panel=panel, effects=effects, rep_seed=rep_seed)


class ReplicationRecord(BaseModel):
    replication: int
    estimate: list[float]
    truth: list[float]
    lower: list[float]
    upper: list[float]
    covered: list[bool]
    covered_all: bool


class CoverageReport(BaseModel):
    replications: int
    alpha: float
    scheme: str
    hetero: str
    normalizer: str
    n_draws: int
    labels: list[str]
    coverage: list[float] = Field(description="Per coordinate empirical coverage")
    coverage_se: list[float]
    simultaneous_coverage: float
    simultaneous_se: float
    mean_estimate: list[float]
    truth: list[float] = Field(description="Mean of the truth across replications")
    mean_width: list[float]
    config: DgpConfig
    config_fingerprint: str
    records: list[ReplicationRecord] = Field(default_factory=list, exclude=True)

    def records_frame(self) -> pd.DataFrame:
        rows = []
        for record in self.records:
            for s, label in enumerate(self.labels):
                rows.append(
                    {
                        "replication": record.replication,
                        "label": label,
                        "estimate": record.estimate[s],
                        "truth": record.truth[s],
                        "lower": record.lower[s],
                        "upper": record.upper[s],
                        "covered": record.covered[s],
                        "covered_all": record.covered_all,
                    }
                )
        return pd.DataFrame(rows)


def _mc_se(p: np.ndarray | float, replications: int) -> np.ndarray:
    return np.sqrt(np.asarray(p) * (1 - np.asarray(p)) / replications)


def _replicate(
    config: DgpConfig,
    replication: int,
    scheme_kind: str,
    hetero: HeteroSpec,
    alpha: float,
    n_draws: int,
    normalizer: str,
    weights: GenericWeights | None,
) -> ReplicationRecord:
    try:
        simulated = simulate_panel(config, replication)
        panel = simulated.panel
        scheme = build_scheme(scheme_kind, panel, weights)
        truth = simulated.truth(scheme)
        estimate = point_estimate(panel, scheme)
        residuals = control_residuals(panel, scheme)
        fitted = fit(hetero, residuals, panel)
        normalized = normalize(residuals, fitted, panel)
        draws = draw(
            normalized,
            fitted,
            panel,
            n_draws,
            derived_seed(config.seed, DRAWS_STREAM, replication),
            n_jobs=1,
        )
        if scheme.k_target == 1:
            band = ci_scalar(estimate, draws, alpha)
        else:
            band = uniform_band(estimate, draws, alpha, normalizer)
    except FewTreatError as e:
        raise SimulationError(replication, e) from e
    except Exception as e:
        e.add_note(f"in Monte Carlo replication {replication}")
        raise

    covered, covered_all = band.contains(truth, tolerance=1e-9 * (1 + np.abs(truth)))
    return ReplicationRecord(
        replication=replication,
        estimate=estimate.values.tolist(),
        truth=truth.tolist(),
        lower=band.lower.tolist(),
        upper=band.upper.tolist(),
        covered=covered.tolist(),
        covered_all=covered_all,
    )


def coverage_experiment(
    config: DgpConfig,
    scheme_kind: str = "att",
    hetero_kind: str = "identity",
    alpha: float = constants.DEFAULT_ALPHA,
    replications: int = constants.DEFAULT_REPLICATIONS,
    n_draws: int = constants.DEFAULT_COVERAGE_DRAWS,
    *,
    normalizer: str = "studentized",
    weights: GenericWeights | None = None,
    sv_floor: float | None = None,
    n_jobs: int | None = None,
) -> CoverageReport:
    """Empirical coverage of the confidence sets over simulated replications.

    One dimensional targets use ``ci_scalar`` and the rest ``uniform_band``.
    Replication ``r`` simulates with key ``r`` and resamples with a seed
    derived from ``(config.seed, r)``, so reports do not depend on ``n_jobs``.
    """
    if replications < constants.MIN_REPLICATIONS:
        raise UsageError(
            f"coverage needs at least {constants.MIN_REPLICATIONS} replications, "
            f"got {replications}"
        )
    if not 0 < alpha < 1:
        raise ConfidenceError(f"alpha must lie in (0, 1), got {alpha}")
    if n_draws < required_draws(alpha):
        raise ConfidenceError(
            f"{n_draws} draws are too few for alpha={alpha}, "
            f"at least {required_draws(alpha)} are needed"
        )

    hetero = HeteroSpec(kind=hetero_kind, sv_floor=sv_floor)
    with tracer.start_as_current_span("fewtreat.montecarlo.coverage") as span:
        span.set_attribute("fewtreat.replications", replications)
        span.set_attribute("fewtreat.scheme", scheme_kind)
        span.set_attribute("fewtreat.hetero", hetero_kind)

        records: list[ReplicationRecord] = Parallel(
            n_jobs=n_jobs or constants.THREADS, prefer="threads"
        )(
            delayed(_replicate)(
                config, r, scheme_kind, hetero, alpha, n_draws, normalizer, weights
            )
            for r in range(replications)
        )

        covered = np.array([r.covered for r in records], dtype=np.float64)
        coverage = covered.mean(axis=0)
        simultaneous = float(np.mean([r.covered_all for r in records]))
        widths = np.array([r.upper for r in records]) - np.array([r.lower for r in records])
        labels = build_scheme(
            scheme_kind, simulate_panel(config, 0).panel, weights
        ).labels

        report = CoverageReport(
            replications=replications,
            alpha=alpha,
            scheme=scheme_kind,
            hetero=hetero_kind,
            normalizer="constant" if len(labels) == 1 else normalizer,
            n_draws=n_draws,
            labels=list(labels),
            coverage=coverage.tolist(),
            coverage_se=_mc_se(coverage, replications).tolist(),
            simultaneous_coverage=simultaneous,
            simultaneous_se=float(_mc_se(simultaneous, replications)),
            mean_estimate=np.mean([r.estimate for r in records], axis=0).tolist(),
            truth=np.mean([r.truth for r in records], axis=0).tolist(),
            mean_width=widths.mean(axis=0).tolist(),
            config=config,
            config_fingerprint=config.fingerprint(),
            records=records,
        )
        logger.info(
            "Coverage experiment finished",
            extra={
                "replications": replications,
                "scheme": scheme_kind,
                "hetero": hetero_kind,
                "simultaneous_coverage": simultaneous,
            },
        )
        return report


class UnbiasednessReport(BaseModel):
    replications: int
    scheme: str
    labels: list[str]
    mean_estimate: list[float]
    truth: list[float]
    mc_se: list[float] = Field(description="Standard error of the mean estimate")

    def within(self, n_se: float = 3.0, slack: float = 1e-12) -> list[bool]:
        """Whether each coordinate's mean lies within ``n_se`` standard errors of the truth"""
        return [
            abs(m - t) <= n_se * se + slack
            for m, t, se in zip(self.mean_estimate, self.truth, self.mc_se)
        ]


def _estimate_once(
    config: DgpConfig, replication: int, scheme_kind: str, weights: GenericWeights | None
) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    try:
        simulated = simulate_panel(config, replication)
        scheme = build_scheme(scheme_kind, simulated.panel, weights)
        estimate = point_estimate(simulated.panel, scheme)
    except FewTreatError as e:
        raise SimulationError(replication, e) from e
    return estimate.values, simulated.truth(scheme), scheme.labels


def unbiasedness_experiment(
    config: DgpConfig,
    scheme_kind: str = "att",
    replications: int = constants.DEFAULT_REPLICATIONS,
    *,
    weights: GenericWeights | None = None,
    n_jobs: int | None = None,
) -> UnbiasednessReport:
    if replications < 2:
        raise UsageError("unbiasedness needs at least two replications")

    with tracer.start_as_current_span("fewtreat.montecarlo.unbiasedness"):
        results = Parallel(n_jobs=n_jobs or constants.THREADS, prefer="threads")(
            delayed(_estimate_once)(config, r, scheme_kind, weights)
            for r in range(replications)
        )
        estimates = np.array([r[0] for r in results])
        truths = np.array([r[1] for r in results])
        return UnbiasednessReport(
            replications=replications,
            scheme=scheme_kind,
            labels=list(results[0][2]),
            mean_estimate=estimates.mean(axis=0).tolist(),
            truth=truths.mean(axis=0).tolist(),
            mc_se=(estimates.std(axis=0, ddof=1) / np.sqrt(replications)).tolist(),
        )


class OracleReport(BaseModel):
    n_draws: int
    grid_size: int
    sup_distance: float = Field(
        description="Largest gap between the resampled and the enumerated CDF on the grid"
    )
    empirical: list[float]
    exact: list[float]


def oracle_check(
    config: DgpConfig,
    hetero_kind: str = "identity",
    n_draws: int = 100_000,
    grid_size: int = 100,
    rep_seed: int = 0,
    *,
    scheme_kind: str = "att",
    n_jobs: int | None = None,
) -> OracleReport:
    """Compare ``empirical_cdf`` with ``exact_cdf`` on one simulated panel.

    The grid runs along matching per coordinate quantiles of the draws.
    """
    simulated = simulate_panel(config, rep_seed)
    panel = simulated.panel
    scheme = build_scheme(scheme_kind, panel)
    residuals = control_residuals(panel, scheme)
    fitted = fit(HeteroSpec(kind=hetero_kind), residuals, panel)
    normalized = normalize(residuals, fitted, panel)
    draws = draw(
        normalized,
        fitted,
        panel,
        n_draws,
        derived_seed(config.seed, ORACLE_STREAM, rep_seed),
        n_jobs=n_jobs,
    )

    levels = np.linspace(0.005, 0.995, grid_size)
    grid = np.quantile(draws.draws, levels, axis=0)
    empirical = np.array([empirical_cdf(draws, c) for c in grid])
    exact = np.asarray(exact_cdf(normalized, fitted, panel, grid, n_jobs=n_jobs))
    sup_distance = float(np.max(np.abs(empirical - exact)))
    logger.info(
        "Oracle check finished",
        extra={"n_draws": n_draws, "sup_distance": sup_distance},
    )
    return OracleReport(
        n_draws=n_draws,
        grid_size=grid_size,
        sup_distance=sup_distance,
        empirical=empirical.tolist(),
        exact=exact.tolist(),
    )
