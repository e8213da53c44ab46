"""Parametric scale models H_j(Z; delta_j) fitted on control residuals.

Three families are available:

* ``identity``: H is the identity, the homoskedastic case.
* ``panel_agg``: outcomes average Z individuals of a panel, so
  H^2 = Lambda_0 + Lambda_1 / Z with PSD Lambda_0 and Lambda_1.
* ``repeated_cs``: outcomes come from repeated cross-sections with Z_{i,t}
  respondents per period. The pre-period mean contributes a rank one term
  scaled by Z at the last pre-treatment period and every post period its own
  term, each propagated through B_j.

Every fit works on the nondegenerate coordinates of each treated unit only.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Any, Literal

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel, Field
from scipy.optimize import lsq_linear

from fewtreat import constants
from fewtreat.design import UNIFORM_PRE_KINDS
from fewtreat.estimator import ControlResiduals
from fewtreat.exception_handlers import (
    HeteroModelError,
    InvariantViolation,
    PanelValidationError,
)
from fewtreat.panel import PanelData
from fewtreat.util import (
    canonical_json,
    fingerprint,
    min_eigenvalue,
    project_psd,
    psd_sqrt,
    symmetrize,
)

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

HeteroKind = Literal["identity", "panel_agg", "repeated_cs"]
HETERO_KINDS: tuple[str, ...] = ("identity", "panel_agg", "repeated_cs")


class HeteroSpec(BaseModel):
    kind: HeteroKind = Field(default="identity", description="Scale model family")
    sv_floor: float | None = Field(
        default=None,
        ge=0,
        description="Smallest singular value allowed for H_j at any control, "
        "None derives it from the residual scale",
    )


@dataclasses.dataclass(frozen=True)
class UnitFit:
    """Fitted scale model for one treated unit"""

    coordinates: np.ndarray
    """Nondegenerate coordinates the model lives on, length m_j"""
    treat_time: int
    lambda0: np.ndarray | None = None
    lambda1: np.ndarray | None = None
    omega: np.ndarray | None = None
    """repeated_cs weights, omega_0 first then one per post period"""
    aggregation: np.ndarray | None = None
    """repeated_cs only, B_j restricted to the nondegenerate coordinates"""
    ridge: float = 0.0
    objective: float = 0.0
    iterations: int = 0

    @property
    def dimension(self) -> int:
        return self.coordinates.size

    def to_dict(self) -> dict[str, Any]:
        def dump(matrix: np.ndarray | None) -> list | None:
            return None if matrix is None else matrix.tolist()

        return {
            "coordinates": self.coordinates.tolist(),
            "treat_time": self.treat_time,
            "lambda0": dump(self.lambda0),
            "lambda1": dump(self.lambda1),
            "omega": dump(self.omega),
            "aggregation": dump(self.aggregation),
            "ridge": self.ridge,
            "objective": self.objective,
            "iterations": self.iterations,
        }


@dataclasses.dataclass(frozen=True)
class FittedHetero:
    kind: str
    sv_floor: float
    units: tuple[UnitFit, ...]
    k_target: int
    scheme_fingerprint: str

    @property
    def n_treated(self) -> int:
        return len(self.units)

    def squared_scales(self, j: int, sizes: np.ndarray) -> np.ndarray:
        """H_j(Z)^2 before the ridge, one m_j x m_j matrix per row of ``sizes``.

        ``sizes`` holds unit sizes with shape (n,) or, for ``repeated_cs``,
        period sizes with shape (n, T).
        """
        unit = self.units[j]
        sizes = np.asarray(sizes, dtype=np.float64)
        if np.any(~np.isfinite(sizes)) or np.any(sizes <= 0):
            raise HeteroModelError("sizes must be positive to evaluate H_j")

        n = sizes.shape[0]
        m = unit.dimension
        match self.kind:
            case "identity":
                return np.broadcast_to(np.eye(m), (n, m, m)).copy()
            case "panel_agg":
                if sizes.ndim != 1:
                    raise HeteroModelError("panel_agg evaluates H_j at one size per unit")
                return unit.lambda0[None] + unit.lambda1[None] / sizes[:, None, None]
            case "repeated_cs":
                if sizes.ndim != 2:
                    raise HeteroModelError(
                        "repeated_cs evaluates H_j at one size per unit and period"
                    )
                features = _repeated_cs_features(unit.aggregation, unit.treat_time, sizes)
                return unit.lambda0[None] + np.einsum("p,ipab->iab", unit.omega, features)
            case _:
                raise InvariantViolation(f"unknown scale model {self.kind!r}")

    def scale_matrices(self, j: int, sizes: np.ndarray) -> np.ndarray:
        """H_j(Z) with the ridge applied, stacked along the first axis"""
        if self.kind == "identity":
            return self.squared_scales(j, sizes)

        roots = psd_sqrt(self.squared_scales(j, sizes))
        return roots + self.units[j].ridge * np.eye(self.units[j].dimension)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "sv_floor": self.sv_floor,
            "k_target": self.k_target,
            "scheme_fingerprint": self.scheme_fingerprint,
            "units": [unit.to_dict() for unit in self.units],
        }

    def to_json(self, *, indent: int | None = None) -> str:
        return canonical_json(self.to_dict(), indent=indent)

    def fingerprint(self) -> str:
        return fingerprint(self.to_json())


@dataclasses.dataclass(frozen=True)
class NormalizedResiduals:
    values: tuple[np.ndarray, ...]
    """Per treated unit, N0 x m_j normalized residuals"""
    coordinates: tuple[np.ndarray, ...]
    k_target: int
    labels: tuple[str, ...]
    fitted_fingerprint: str

    @property
    def n_treated(self) -> int:
        return len(self.values)

    @property
    def n_control(self) -> int:
        return self.values[0].shape[0]


def _repeated_cs_features(
    aggregation: np.ndarray, treat_time: int, sizes: np.ndarray
) -> np.ndarray:
    """Per control the matrices multiplying each omega, shape (n, 1 + K_j, m, m)"""
    pre_direction = aggregation.sum(axis=1)
    basis = np.concatenate(
        [
            np.outer(pre_direction, pre_direction)[None],
            np.einsum("ak,bk->kab", aggregation, aggregation),
        ]
    )
    post_count = aggregation.shape[1]
    inverse_sizes = np.concatenate(
        [
            1 / sizes[:, treat_time - 1 : treat_time],
            1 / sizes[:, treat_time : treat_time + post_count],
        ],
        axis=1,
    )
    return inverse_sizes[:, :, None, None] * basis[None]


def _frobenius_objective(outer: np.ndarray, fitted: np.ndarray) -> float:
    return float(np.sum((outer - fitted) ** 2))


def _fit_panel_agg(
    reduced: np.ndarray, control_sizes: np.ndarray, coordinates: np.ndarray, t_star: int
) -> UnitFit:
    n_control, m = reduced.shape
    outer = np.einsum("ia,ib->iab", reduced, reduced)
    regressors = np.column_stack([np.ones(n_control), 1 / control_sizes])
    coefficients, *_ = np.linalg.lstsq(regressors, outer.reshape(n_control, m * m), rcond=None)
    lambda0 = project_psd(symmetrize(coefficients[0].reshape(m, m)))
    lambda1 = project_psd(symmetrize(coefficients[1].reshape(m, m)))
    fitted = lambda0[None] + lambda1[None] / control_sizes[:, None, None]
    return UnitFit(
        coordinates=coordinates,
        treat_time=t_star,
        lambda0=lambda0,
        lambda1=lambda1,
        objective=_frobenius_objective(outer, fitted),
    )


def _fit_repeated_cs(
    reduced: np.ndarray,
    control_sizes: np.ndarray,
    aggregation: np.ndarray,
    coordinates: np.ndarray,
    t_star: int,
) -> UnitFit:
    n_control, m = reduced.shape
    outer = np.einsum("ia,ib->iab", reduced, reduced)
    features = _repeated_cs_features(aggregation, t_star, control_sizes)
    n_omega = features.shape[1]

    # Lambda_0 enters through its upper triangle, mirrored
    rows, cols = np.triu_indices(m)
    vech_basis = np.zeros((rows.size, m, m))
    vech_basis[np.arange(rows.size), rows, cols] = 1.0
    vech_basis[np.arange(rows.size), cols, rows] = 1.0

    design = np.concatenate(
        [
            np.broadcast_to(vech_basis[None], (n_control,) + vech_basis.shape),
            features,
        ],
        axis=1,
    )
    n_params = design.shape[1]
    design = design.transpose(0, 2, 3, 1).reshape(n_control * m * m, n_params)
    target = outer.reshape(-1)

    rank = np.linalg.matrix_rank(design)
    if rank <= rows.size:
        raise HeteroModelError(
            "repeated_cs weights are not identified: control sizes do not vary, "
            "use the identity model instead"
        )
    if rank < n_params:
        logger.warning(
            "repeated_cs weights are not separately identified, only their sum is fitted",
            extra={"rank": int(rank), "parameters": int(n_params)},
        )

    lower = np.concatenate([np.full(rows.size, -np.inf), np.zeros(n_omega)])
    upper = np.full(n_params, np.inf)
    result = lsq_linear(design, target, bounds=(lower, upper), method="trf")

    lambda0 = np.zeros((m, m))
    lambda0[rows, cols] = result.x[: rows.size]
    lambda0[cols, rows] = result.x[: rows.size]
    lambda0 = project_psd(lambda0)
    omega = np.clip(result.x[rows.size :], 0, None)
    fitted = lambda0[None] + np.einsum("p,ipab->iab", omega, features)
    return UnitFit(
        coordinates=coordinates,
        treat_time=t_star,
        lambda0=lambda0,
        omega=omega,
        aggregation=aggregation,
        objective=_frobenius_objective(outer, fitted),
        iterations=int(result.nit),
    )


def default_sv_floor(residuals: ControlResiduals) -> float:
    """A small fraction of the median singular value of the pooled residual scale"""
    singular_values = []
    for j in range(residuals.n_treated):
        reduced = residuals.reduced(j)
        if reduced.shape[1] == 0:
            continue
        pooled = reduced.T @ reduced / reduced.shape[0]
        singular_values.append(np.linalg.svd(psd_sqrt(pooled), compute_uv=False))

    if not singular_values:
        return constants.ABSOLUTE_SV_FLOOR

    median = float(np.median(np.concatenate(singular_values)))
    if median <= 0:
        return constants.ABSOLUTE_SV_FLOOR

    return constants.DEFAULT_SV_FLOOR_SCALE * median


def _control_sizes(kind: str, panel: PanelData) -> np.ndarray:
    try:
        if kind == "panel_agg":
            return panel.unit_sizes()[panel.n_treated :]
        return panel.period_sizes()[panel.n_treated :]
    except PanelValidationError as e:
        raise HeteroModelError(
            f"the {kind} model needs unit sizes Z in the panel: {'; '.join(e.violations)}"
        ) from e


def fit(spec: HeteroSpec, residuals: ControlResiduals, panel: PanelData) -> FittedHetero:
    with tracer.start_as_current_span("fewtreat.hetero.fit") as span:
        span.set_attribute("fewtreat.hetero", spec.kind)
        span.set_attribute("fewtreat.n_control", residuals.n_control)

        scheme = residuals.scheme
        treat_times = panel.treated_times
        floor = default_sv_floor(residuals) if spec.sv_floor is None else spec.sv_floor

        if spec.kind == "identity":
            units = tuple(
                UnitFit(coordinates=residuals.nondegenerate(j), treat_time=treat_times[j])
                for j in range(residuals.n_treated)
            )
            return FittedHetero(
                kind=spec.kind,
                sv_floor=floor,
                units=units,
                k_target=residuals.k_target,
                scheme_fingerprint=residuals.scheme_fingerprint,
            )

        if spec.kind == "repeated_cs":
            if scheme is None:
                raise HeteroModelError("repeated_cs needs the aggregation scheme of the residuals")
            if scheme.kind not in UNIFORM_PRE_KINDS:
                raise HeteroModelError(
                    f"unsupported combination: repeated_cs with the {scheme.kind} scheme, "
                    "use panel_agg or identity"
                )

        control_sizes = _control_sizes(spec.kind, panel)
        if spec.kind == "panel_agg" and np.unique(control_sizes).size < 2:
            raise HeteroModelError(
                "Lambda_0 and Lambda_1 are not separately identified because every "
                "control has the same size Z, use the identity model or a pooled model"
            )

        fits = []
        for j in range(residuals.n_treated):
            coordinates = residuals.nondegenerate(j)
            reduced = residuals.reduced(j)
            if coordinates.size == 0:
                fits.append(UnitFit(coordinates=coordinates, treat_time=treat_times[j]))
                continue
            if spec.kind == "panel_agg":
                unit = _fit_panel_agg(reduced, control_sizes, coordinates, treat_times[j])
            else:
                aggregation = scheme.blocks[j].aggregation[coordinates]
                unit = _fit_repeated_cs(
                    reduced, control_sizes, aggregation, coordinates, treat_times[j]
                )
            fits.append(unit)

        provisional = FittedHetero(
            kind=spec.kind,
            sv_floor=floor,
            units=tuple(fits),
            k_target=residuals.k_target,
            scheme_fingerprint=residuals.scheme_fingerprint,
        )

        # Ridge restoring the floor on H_j at every control
        units = []
        for j, unit in enumerate(fits):
            if unit.dimension == 0:
                units.append(unit)
                continue
            roots = psd_sqrt(provisional.squared_scales(j, control_sizes))
            smallest = float(np.min(min_eigenvalue(roots)))
            ridge = max(0.0, floor - smallest)
            if ridge > 0:
                logger.debug(
                    "Adding ridge to scale model",
                    extra={"treated_unit": j, "ridge": ridge, "floor": floor},
                )
            units.append(dataclasses.replace(unit, ridge=ridge))

        fitted = dataclasses.replace(provisional, units=tuple(units))
        logger.info(
            "Fitted scale model",
            extra={
                "kind": spec.kind,
                "sv_floor": floor,
                "objective": [u.objective for u in units],
            },
        )
        return fitted


def scale_matrix(fitted: FittedHetero, j: int, z: float | np.ndarray) -> np.ndarray:
    """H_j evaluated at a single size, a scalar or a length T vector"""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise HeteroModelError(f"size must be positive, got {z.tolist()}")

    return fitted.scale_matrices(j, z[None])[0]


def treated_sizes(fitted: FittedHetero, panel: PanelData) -> np.ndarray | None:
    """The sizes H_j is evaluated at for the treated units, None for identity"""
    if fitted.kind == "identity":
        return None

    if fitted.kind == "panel_agg":
        return panel.unit_sizes()[: panel.n_treated]

    return panel.period_sizes()[: panel.n_treated]


def normalize(
    residuals: ControlResiduals, fitted: FittedHetero, panel: PanelData
) -> NormalizedResiduals:
    with tracer.start_as_current_span("fewtreat.hetero.normalize"):
        values = []
        for j in range(residuals.n_treated):
            reduced = residuals.reduced(j)
            if fitted.kind == "identity" or reduced.shape[1] == 0:
                values.append(reduced.copy())
                continue

            scales = fitted.scale_matrices(j, _control_sizes(fitted.kind, panel))
            if np.any(min_eigenvalue(scales) <= 0):
                raise InvariantViolation(
                    f"scale matrix of treated unit {j} is singular at a control "
                    f"despite the floor {fitted.sv_floor:.3g}"
                )
            try:
                normalized = np.linalg.solve(scales, reduced[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError as e:
                raise InvariantViolation(
                    f"scale matrix of treated unit {j} could not be inverted"
                ) from e

            if not np.all(np.isfinite(normalized)):
                raise InvariantViolation(
                    f"normalized residuals of treated unit {j} are not finite"
                )
            values.append(normalized)

        return NormalizedResiduals(
            values=tuple(values),
            coordinates=tuple(unit.coordinates for unit in fitted.units),
            k_target=fitted.k_target,
            labels=residuals.labels,
            fitted_fingerprint=fitted.fingerprint(),
        )
