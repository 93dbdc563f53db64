"""Pearson correlation, decile summaries and the two null models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

from ._parallel import ordered_map
from ._rng import substream
from .measures import ProfileTable
from .tdist import t_sf_two_sided
from .territory import AggregateTable, UserAssignment

CORRELATION_COLUMNS = ("x", "y", "rho", "p_value", "n")
DECILE_COLUMNS = ("bin", "x_lo", "x_hi", "y_mean", "y_std", "count")


class DegenerateSampleError(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationResult:
    x_name: str
    y_name: str
    pearson_rho: float
    p_value: float
    n: int

    def row(self):
        return (self.x_name, self.y_name, self.pearson_rho, self.p_value, self.n)


def pearson(x, y, x_name: str = "x", y_name: str = "y") -> CorrelationResult:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be vectors of equal length")
    n = len(x)
    if n < 3:
        raise ValueError(f"need at least 3 observations, got {n}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("x and y must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateSampleError("degenerate sample: zero variance")
    rho = float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))
    if abs(rho) == 1.0:
        p = 0.0
    else:
        p = t_sf_two_sided(rho * np.sqrt((n - 2) / (1.0 - rho * rho)), n - 2)
    return CorrelationResult(x_name, y_name, rho, p, n)


@dataclass
class DecileSummary:
    x_lo: np.ndarray
    x_hi: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    count: np.ndarray

    def rows(self):
        for i in range(len(self.count)):
            yield i + 1, self.x_lo[i], self.x_hi[i], self.y_mean[i], self.y_std[i], int(self.count[i])


def decile_summary(x, y, bins: int = 10) -> DecileSummary:
    """Split the sample into ``bins`` groups of near-equal size ordered by x.

    Ties in x keep their original order, so bin membership is reproducible.
    Group sizes differ by at most one, larger groups first.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if len(x) < bins:
        raise ValueError(f"need at least {bins} observations, got {len(x)}")
    order = np.argsort(x, kind="stable")
    groups = np.array_split(order, bins)
    return DecileSummary(
        x_lo=np.array([x[g].min() for g in groups]),
        x_hi=np.array([x[g].max() for g in groups]),
        y_mean=np.array([y[g].mean() for g in groups]),
        y_std=np.array([y[g].std() for g in groups]),
        count=np.array([len(g) for g in groups]),
    )


Permuter = Callable[[np.random.Generator, int], np.ndarray]


def _permute(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.permutation(n)


class _UserShuffle:
    """Pool of assigned users laid out region by region (sorted region, then user)."""

    def __init__(self, profiles: ProfileTable, assignment: UserAssignment):
        if not np.array_equal(profiles.user_ids, assignment.user_ids):
            raise ValueError("assignment does not match the profile table")
        mask = assignment.assigned
        regions = assignment.region_ids[mask].astype(str)
        users = profiles.user_ids[mask].astype(str)
        values = profiles.values()[mask]
        order = np.lexsort((users, regions))
        self.values = values[order]
        self.region_ids, self.labels, self.sizes = np.unique(regions[order], return_inverse=True, return_counts=True)

    def repetition(self, rng, permute: Permuter) -> np.ndarray:
        perm = permute(rng, len(self.values))
        shuffled = self.values[perm]
        k = len(self.sizes)
        sums = np.column_stack(
            [np.bincount(self.labels, weights=shuffled[:, j], minlength=k) for j in range(shuffled.shape[1])]
        )
        return sums / self.sizes[:, None]


def user_shuffles(profiles, assignment, repetitions: int, seed: int, permute: Permuter = _permute) -> Iterator[np.ndarray]:
    """Per-repetition region means (columns SV, SD, MV, MD) with users reshuffled."""
    pool = _UserShuffle(profiles, assignment)
    for r in range(repetitions):
        yield pool.repetition(substream(seed, "nm1", r), permute)


def null_model_users(
    profiles: ProfileTable,
    assignment: UserAssignment,
    repetitions: int = 100,
    seed: int = 0,
    workers: int = 1,
    permute: Permuter = _permute,
) -> AggregateTable:
    """Redistribute users at random over regions, keeping each region's size.

    Each repetition permutes the pool of assigned users and refills the
    regions in order of their observed sizes; the result is the mean of
    the per-repetition regional means.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    pool = _UserShuffle(profiles, assignment)
    reps = ordered_map(lambda r: pool.repetition(substream(seed, "nm1", r), permute), range(repetitions), workers)
    total = np.zeros((len(pool.sizes), 4))
    for m in reps:
        total += m
    return AggregateTable(pool.region_ids.astype(object), pool.sizes, total / repetitions)


def _indicator_matrix(indicators: Mapping[str, np.ndarray]) -> np.ndarray:
    cols = [np.asarray(v, dtype=float) for v in indicators.values()]
    if not cols:
        raise ValueError("no indicators given")
    mat = np.column_stack(cols)
    if mat.shape[0] < 2:
        raise ValueError("need at least 2 regions")
    if not np.all(np.isfinite(mat)):
        raise ValueError("indicator values must be finite; drop regions with missing values first")
    return mat


def _shuffle_columns(mat: np.ndarray, rng: np.random.Generator, permute: Permuter) -> np.ndarray:
    out = np.empty_like(mat)
    for j in range(mat.shape[1]):
        out[:, j] = mat[permute(rng, mat.shape[0]), j]
    return out


def indicator_shuffles(indicators: Mapping[str, np.ndarray], repetitions: int, seed: int,
                       permute: Permuter = _permute) -> Iterator[dict[str, np.ndarray]]:
    """Per-repetition shuffled indicator columns, each column permuted independently."""
    mat = _indicator_matrix(indicators)
    names = list(indicators)
    for r in range(repetitions):
        shuffled = _shuffle_columns(mat, substream(seed, "nm2", r), permute)
        yield {name: shuffled[:, j] for j, name in enumerate(names)}


def null_model_indicators(
    indicators: Mapping[str, np.ndarray],
    repetitions: int = 100,
    seed: int = 0,
    workers: int = 1,
    permute: Permuter = _permute,
) -> dict[str, np.ndarray]:
    """Mean over repetitions of randomly permuted indicator columns, per region."""
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    mat = _indicator_matrix(indicators)
    reps = ordered_map(
        lambda r: _shuffle_columns(mat, substream(seed, "nm2", r), permute), range(repetitions), workers
    )
    total = np.zeros_like(mat)
    for m in reps:
        total += m
    total /= repetitions
    return {name: total[:, j] for j, name in enumerate(indicators)}
