"""Resampling control residuals to approximate the estimator's error law.

A draw picks one control per treated unit, uniformly and with replacement,
and adds up the normalized residuals of those controls, each rescaled with
H_j evaluated at the treated unit's own size. ``exact_cdf`` enumerates every
assignment instead and serves as the oracle for small designs.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from opentelemetry import metrics, trace

from fewtreat import constants
from fewtreat.exception_handlers import ResampleError
from fewtreat.hetero import FittedHetero, NormalizedResiduals, treated_sizes
from fewtreat.panel import PanelData
from fewtreat.util import substream

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)
meter = metrics.get_meter(__name__)
draw_counter = meter.create_counter(
    "fewtreat.resample.draws", unit="1", description="Resample draws generated"
)


@dataclasses.dataclass(frozen=True)
class ResampleDraws:
    draws: np.ndarray
    """B x K matrix of resampled errors"""
    indices: np.ndarray
    """B x N1 matrix of chosen control positions, 0 based within the controls"""
    seed: int
    labels: tuple[str, ...]
    degenerate: frozenset[int]
    fitted_fingerprint: str

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def k_target(self) -> int:
        return self.draws.shape[1]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.draws, columns=list(self.labels))
        frame["seed"] = self.seed
        return frame

    def summary(self) -> dict[str, Any]:
        return {
            "n_draws": self.n_draws,
            "seed": self.seed,
            "fitted_fingerprint": self.fitted_fingerprint,
        }


def treated_contributions(
    normres: NormalizedResiduals, fitted: FittedHetero, panel: PanelData
) -> np.ndarray:
    """H_j(Z_j) applied to every normalized residual, shape (N1, N0, K)"""
    sizes = treated_sizes(fitted, panel)
    contributions = np.zeros((normres.n_treated, normres.n_control, normres.k_target))
    for j, (values, coordinates) in enumerate(zip(normres.values, normres.coordinates)):
        if coordinates.size == 0:
            continue

        if sizes is None:
            contributions[j][:, coordinates] = values
        else:
            scale = fitted.scale_matrices(j, sizes[j : j + 1])[0]
            contributions[j][:, coordinates] = values @ scale.T

    return contributions


def _global_degenerate(normres: NormalizedResiduals) -> frozenset[int]:
    covered = set()
    for coordinates in normres.coordinates:
        covered.update(int(s) for s in coordinates)
    return frozenset(s for s in range(normres.k_target) if s not in covered)


def _draw_block(
    contributions: np.ndarray, seed: int, block: int, size: int
) -> tuple[np.ndarray, np.ndarray]:
    n_treated, n_control, k_target = contributions.shape
    rng = substream(seed, block)
    indices = rng.integers(0, n_control, size=(size, n_treated))
    draws = np.zeros((size, k_target))
    for j in range(n_treated):
        draws += contributions[j][indices[:, j]]
    return indices, draws


def draw(
    normres: NormalizedResiduals,
    fitted: FittedHetero,
    panel: PanelData,
    n_draws: int,
    seed: int,
    *,
    n_jobs: int | None = None,
) -> ResampleDraws:
    """Generate ``n_draws`` resampled errors.

    Draws come in blocks of ``constants.DRAW_BLOCK_SIZE``, each with its own
    generator keyed by ``(seed, block)``. The output is therefore identical
    for any ``n_jobs``.
    """
    if n_draws <= 0:
        raise ResampleError(f"the number of draws must be positive, got {n_draws}")
    if seed < 0:
        raise ResampleError(f"the seed must be nonnegative, got {seed}")

    with tracer.start_as_current_span("fewtreat.resample.draw") as span:
        span.set_attribute("fewtreat.draws", n_draws)
        span.set_attribute("fewtreat.seed", seed)

        contributions = treated_contributions(normres, fitted, panel)
        block_size = constants.DRAW_BLOCK_SIZE
        sizes = [
            min(block_size, n_draws - start) for start in range(0, n_draws, block_size)
        ]
        blocks = Parallel(n_jobs=n_jobs or constants.THREADS, prefer="threads")(
            delayed(_draw_block)(contributions, seed, block, size)
            for block, size in enumerate(sizes)
        )
        indices = np.concatenate([b[0] for b in blocks])
        draws = np.concatenate([b[1] for b in blocks])

        degenerate = _global_degenerate(normres)
        draws[:, sorted(degenerate)] = 0.0
        draws.flags.writeable = False
        indices.flags.writeable = False

        draw_counter.add(n_draws)
        logger.debug(
            "Generated resample draws",
            extra={"n_draws": n_draws, "seed": seed, "blocks": len(sizes)},
        )
        return ResampleDraws(
            draws=draws,
            indices=indices,
            seed=seed,
            labels=normres.labels,
            degenerate=degenerate,
            fitted_fingerprint=normres.fitted_fingerprint,
        )


def empirical_cdf(draws: ResampleDraws, c: np.ndarray) -> float:
    """Share of draws with every coordinate at or below ``c``"""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if c.size != draws.k_target:
        raise ResampleError(
            f"threshold has {c.size} coordinates, the draws have {draws.k_target}"
        )

    return float(np.mean(np.all(draws.draws <= c, axis=1)))


def _count_chunk(
    contributions: np.ndarray, start: int, stop: int, grid: np.ndarray
) -> np.ndarray:
    n_treated, n_control, _ = contributions.shape
    assignment = np.unravel_index(np.arange(start, stop), (n_control,) * n_treated)
    values = contributions[0][assignment[0]].copy()
    for j in range(1, n_treated):
        values += contributions[j][assignment[j]]

    return np.array(
        [np.count_nonzero(np.all(values <= c, axis=1)) for c in grid], dtype=np.int64
    )


def exact_cdf(
    normres: NormalizedResiduals,
    fitted: FittedHetero,
    panel: PanelData,
    c: np.ndarray,
    *,
    n_jobs: int | None = None,
) -> float | np.ndarray:
    """CDF of the resampled error over all N0^N1 control assignments.

    ``c`` is one threshold vector of length K, or a G x K grid of them, in
    which case an array of G values comes back.
    """
    grid = np.asarray(c, dtype=np.float64)
    single = grid.ndim <= 1
    grid = np.atleast_2d(grid)
    if grid.shape[1] != normres.k_target:
        raise ResampleError(
            f"threshold has {grid.shape[1]} coordinates, expected {normres.k_target}"
        )

    total = normres.n_control**normres.n_treated
    if total > constants.EXACT_ENUMERATION_LIMIT:
        raise ResampleError(
            f"exact enumeration needs {normres.n_control}^{normres.n_treated} = "
            f"{total} assignments, above the limit of {constants.EXACT_ENUMERATION_LIMIT}; "
            "use empirical_cdf with a large number of draws instead"
        )

    with tracer.start_as_current_span("fewtreat.resample.exact_cdf") as span:
        span.set_attribute("fewtreat.assignments", total)
        contributions = treated_contributions(normres, fitted, panel)
        degenerate = sorted(_global_degenerate(normres))
        contributions[:, :, degenerate] = 0.0

        chunk = constants.ENUMERATION_CHUNK
        counts = Parallel(n_jobs=n_jobs or constants.THREADS, prefer="threads")(
            delayed(_count_chunk)(contributions, start, min(start + chunk, total), grid)
            for start in range(0, total, chunk)
        )
        probabilities = np.sum(counts, axis=0) / total

    if single:
        return float(probabilities[0])
    return probabilities

