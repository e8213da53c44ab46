import numpy as np
import pytest

from fewtreat.exception_handlers import ResampleError
from fewtreat.resample import draw, empirical_cdf, exact_cdf, treated_contributions
from tests.conftest import BaseGiven, BaseWhen, make_draws


def control_diffs(given: BaseGiven, diffs: list[float], n_treated: int = 1) -> BaseWhen:
    """Two periods, treated units start at zero, control i moves by diffs[i]"""
    outcomes = [[0.0, 0.0]] * n_treated + [[0.0, d] for d in diffs]
    given.panel(outcomes, [1] * n_treated + [None] * len(diffs))
    return BaseWhen(given)


def test_draws_add_residuals_of_chosen_controls(given: BaseGiven):
    when = BaseWhen(given.random_panel(treat_times=(2, 3), n_control=7).scheme("event_study"))
    residuals = when.residuals()

    draws = when.draws(n_draws=500, seed=3)

    expected = sum(
        residuals.residuals[j][draws.indices[:, j]] for j in range(residuals.n_treated)
    )
    np.testing.assert_allclose(draws.draws, expected, atol=1e-12)
    assert draws.indices.shape == (500, 2)
    assert draws.indices.min() >= 0 and draws.indices.max() < 7
    assert draws.labels == ("1", "2", "3")


def test_draws_do_not_depend_on_thread_count(given: BaseGiven):
    when = BaseWhen(given.random_panel(treat_times=(2, 3, 3), n_control=9))

    serial = when.draws(n_draws=10_000, seed=11, n_jobs=1)
    threaded = when.draws(n_draws=10_000, seed=11, n_jobs=4)

    np.testing.assert_array_equal(serial.draws, threaded.draws)
    np.testing.assert_array_equal(serial.indices, threaded.indices)


def test_draws_depend_on_seed(given: BaseGiven):
    when = BaseWhen(given.random_panel())

    assert not np.array_equal(when.draws(seed=1).indices, when.draws(seed=2).indices)


def test_indices_are_uniform_over_controls(given: BaseGiven):
    n_draws = 10_000
    when = control_diffs(given, [-2.0, -1.0, 0.0, 1.0, 2.0])

    draws = when.draws(n_draws=n_draws, seed=5)

    counts = np.bincount(draws.indices[:, 0], minlength=5)
    expected = n_draws / 5
    sd = np.sqrt(n_draws * 0.2 * 0.8)
    assert np.all(np.abs(counts - expected) <= 4 * sd)


def test_index_pairs_are_uniform_and_independent(given: BaseGiven):
    n_draws = 100_000
    when = control_diffs(given, [-1.0, 0.0, 1.0], n_treated=2)

    draws = when.draws(n_draws=n_draws, seed=5)

    pairs = np.bincount(3 * draws.indices[:, 0] + draws.indices[:, 1], minlength=9)
    p = 1 / 9
    assert np.all(np.abs(pairs / n_draws - p) <= 3 * np.sqrt(p * (1 - p) / n_draws))


@pytest.mark.parametrize("n_draws, seed", [(0, 0), (-5, 0), (10, -1)])
def test_draw_rejects_bad_arguments(given: BaseGiven, n_draws, seed):
    when = BaseWhen(given.random_panel())
    fitted, normalized = when.normalized()

    with pytest.raises(ResampleError):
        draw(normalized, fitted, when.panel, n_draws, seed)


def test_degenerate_coordinates_are_zero_in_draws(given: BaseGiven):
    when = BaseWhen(given.random_panel().scheme("pretrends"))
    zero = when.scheme.labels.index("0")

    draws = when.draws(n_draws=200)

    assert draws.degenerate == frozenset({zero})
    assert np.all(draws.draws[:, zero] == 0.0)


def test_contributions_use_treated_size(given: BaseGiven):
    root5, root2 = np.sqrt(5.0), np.sqrt(2.0)
    outcomes = [[0, 0], [0, root5], [0, -root5], [0, root2], [0, -root2]]
    when = BaseWhen(given.panel(outcomes, [1, None, None, None, None], sizes=[4, 1, 1, 4, 4]))
    fitted, normalized = when.normalized("panel_agg")

    contributions = treated_contributions(normalized, fitted, when.panel)

    np.testing.assert_allclose(
        contributions[0][:, 0], np.array([1, -1, 1, -1]) * root2, atol=1e-12
    )


@pytest.mark.parametrize(
    "c, expected", [(-10.0, 0.0), (1.0, 0.25), (2.5, 0.5), (4.0, 1.0)]
)
def test_empirical_cdf_scalar(c, expected):
    assert empirical_cdf(make_draws([1.0, 2.0, 3.0, 4.0]), [c]) == expected


def test_empirical_cdf_needs_every_coordinate_below():
    draws = make_draws([[0.0, 0.0], [1.0, -1.0], [2.0, 2.0]])

    assert empirical_cdf(draws, [1.0, 0.0]) == pytest.approx(2 / 3)

    with pytest.raises(ResampleError):
        empirical_cdf(draws, [1.0])


def test_exact_cdf_single_treated_unit(given: BaseGiven):
    when = control_diffs(given, [-3.0, -1.0, 1.0, 3.0])
    fitted, normalized = when.normalized()

    assert exact_cdf(normalized, fitted, when.panel, [-3.0]) == 0.25
    assert exact_cdf(normalized, fitted, when.panel, [0.0]) == 0.5
    assert exact_cdf(normalized, fitted, when.panel, [1.0]) == 0.75


def test_exact_cdf_enumerates_pairs(given: BaseGiven):
    # Each treated unit adds half a residual from {-1, 0, 1}
    when = control_diffs(given, [-1.0, 0.0, 1.0], n_treated=2)
    fitted, normalized = when.normalized()

    values = exact_cdf(normalized, fitted, when.panel, [[-0.5], [0.0], [1.0]], n_jobs=1)

    np.testing.assert_allclose(values, [1 / 3, 2 / 3, 1.0])


def test_exact_cdf_grid_is_monotone(given: BaseGiven):
    when = BaseWhen(given.random_panel(treat_times=(2, 3), n_control=8).scheme("event_study"))
    fitted, normalized = when.normalized()
    grid = np.linspace(-3, 3, 25)[:, None] * np.ones((1, 3))

    values = exact_cdf(normalized, fitted, when.panel, grid)

    assert values.shape == (25,)
    assert np.all(np.diff(values) >= 0)
    assert values[0] >= 0 and values[-1] <= 1


def test_exact_cdf_enumeration_limit(given: BaseGiven):
    when = BaseWhen(given.random_panel(treat_times=(1, 1, 1, 1, 1), n_control=50, n_periods=2))
    fitted, normalized = when.normalized()

    with pytest.raises(ResampleError) as e:
        exact_cdf(normalized, fitted, when.panel, [0.0])

    assert "use empirical_cdf" in str(e.value)


def test_empirical_cdf_approaches_exact(given: BaseGiven):
    when = control_diffs(given, [-3.0, -1.0, 1.0, 3.0])
    fitted, normalized = when.normalized()
    draws = draw(normalized, fitted, when.panel, 20_000, seed=0)

    for c in ([-3.0], [-1.0], [1.0]):
        exact = exact_cdf(normalized, fitted, when.panel, c)
        assert abs(empirical_cdf(draws, c) - exact) <= 0.02


def test_draws_frame(given: BaseGiven):
    when = BaseWhen(given.random_panel().scheme("event_study"))

    frame = when.draws(n_draws=10, seed=4).to_frame()

    assert list(frame.columns) == ["1", "2", "3", "seed"]
    assert (frame["seed"] == 4).all()
