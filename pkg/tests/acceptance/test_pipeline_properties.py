import numpy as np
import pytest

from fewtreat.confidence import uniform_band
from fewtreat.design import build_scheme
from fewtreat.estimator import control_residuals, point_estimate
from fewtreat.hetero import HeteroSpec, fit, normalize
from fewtreat.resample import draw
from tests.conftest import BaseGiven


def band_for(panel, scheme_kind: str, hetero_kind: str):
    scheme = build_scheme(scheme_kind, panel)
    estimate = point_estimate(panel, scheme)
    residuals = control_residuals(panel, scheme)
    fitted = fit(HeteroSpec(kind=hetero_kind), residuals, panel)
    normalized = normalize(residuals, fitted, panel)
    draws = draw(normalized, fitted, panel, 2_000, seed=21)
    return estimate, normalized, draws, uniform_band(estimate, draws, 0.05, "studentized")


@pytest.mark.parametrize(
    "scheme_kind, hetero_kind",
    [("event_study", "identity"), ("event_study", "panel_agg"), ("pretrends", "panel_agg")],
)
def test_unit_and_period_effects_do_not_move_anything(
    given: BaseGiven, scheme_kind, hetero_kind
):
    panel = given.random_panel(
        treat_times=(2, 3, 3), n_control=15, n_periods=6, sizes=True
    ).object
    rng = np.random.default_rng(8)
    shifted = panel.with_outcomes(
        panel.outcomes
        + rng.normal(scale=50, size=(panel.n_units, 1))
        + rng.normal(scale=50, size=(1, panel.n_periods))
    )

    base = band_for(panel, scheme_kind, hetero_kind)
    moved = band_for(shifted, scheme_kind, hetero_kind)

    def close(a, b):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9 * (1 + np.max(np.abs(b))))

    close(moved[0].values, base[0].values)
    for a, b in zip(moved[1].values, base[1].values):
        close(a, b)
    close(moved[2].draws, base[2].draws)
    close(moved[3].lower, base[3].lower)
    close(moved[3].upper, base[3].upper)


def test_pipeline_is_deterministic_across_thread_counts(given: BaseGiven):
    panel = given.random_panel(
        treat_times=(2, 4), n_control=12, n_periods=6, sizes=True
    ).object
    scheme = build_scheme("event_study", panel)
    residuals = control_residuals(panel, scheme)
    fitted = fit(HeteroSpec(kind="panel_agg"), residuals, panel)
    normalized = normalize(residuals, fitted, panel)

    matrices = [
        draw(normalized, fitted, panel, 9_000, seed=5, n_jobs=n_jobs).draws
        for n_jobs in (1, 2, 8)
    ]

    for matrix in matrices[1:]:
        np.testing.assert_array_equal(matrix, matrices[0])
