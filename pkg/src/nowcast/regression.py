"""Least-squares models of regional indicators, LMG importance and cross-validation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from ._parallel import ordered_map
from ._rng import substream
from .errors import ValidationError
from .tdist import t_sf_two_sided
from .territory import AggregateTable, RegionTable

REGRESSORS = ("PD", "MD", "SD", "MV", "SV")
TARGETS = {"M1": "DI", "M2": "PCI"}
RANK_TOLERANCE = 1e-10
VIF_WARNING = 10.0
CV_COLUMNS = ("experiment", "r2", "rmse", "cv_rmse")
RELERR_COLUMNS = ("region_id", "mean_rel_err")


class RankDeficientError(ValidationError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; dependent columns: {', '.join(self.columns)}")


def _names(p: int, names: Sequence[str] | None) -> list[str]:
    if names is None:
        return [f"x{j + 1}" for j in range(p)]
    if len(names) != p:
        raise ValueError(f"{len(names)} names for {p} columns")
    return list(names)


def _as_design(X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0] or y.ndim != 1:
        raise ValueError("X must be n x p and y of length n")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    return X, y


@dataclass
class RegressionFit:
    """OLS fit with intercept. Parameter arrays start with the intercept."""

    names: list[str]
    params: np.ndarray
    std_errors: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    r2: float
    adj_r2: float
    residuals: np.ndarray
    n: int
    df_resid: int
    constant_response: bool = False

    @property
    def intercept(self) -> float:
        return float(self.params[0])

    @property
    def coefficients(self) -> np.ndarray:
        return self.params[1:]

    def coefficient(self, name: str) -> float:
        return float(self.params[1 + self.names.index(name)])

    def std_error(self, name: str) -> float:
        return float(self.std_errors[1 + self.names.index(name)])

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return self.params[0] + X @ self.params[1:]

    def as_dict(self) -> dict:
        labels = ["intercept", *self.names]
        return {
            "coefficients": dict(zip(labels, self.params.tolist())),
            "std_errors": dict(zip(labels, self.std_errors.tolist())),
            "p_values": dict(zip(labels, self.p_values.tolist())),
            "r2": self.r2,
            "adj_r2": self.adj_r2,
            "n": self.n,
        }


def _pivoted_qr(A: np.ndarray, labels: list[str]):
    """QR of the column-equilibrated design; raises if any column is dependent."""
    norms = np.linalg.norm(A, axis=0)
    zero = norms == 0
    if zero.any():
        raise RankDeficientError([labels[j] for j in np.flatnonzero(zero)])
    Q, R, piv = linalg.qr(A / norms, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOLERANCE * diag[0]))
    if rank < A.shape[1]:
        raise RankDeficientError(sorted(labels[j] for j in piv[rank:]))
    return Q, R, piv, norms


def ols_fit(X, y, names: Sequence[str] | None = None) -> RegressionFit:
    """Ordinary least squares with an intercept, via pivoted QR.

    Standard errors use the homoskedastic covariance s^2 (A'A)^-1 and the
    p-values a two-sided t-test with n - p - 1 degrees of freedom. A
    constant response gets zero slopes and R^2 = 0, with a warning.
    """
    X, y = _as_design(X, y)
    n, p = X.shape
    names = _names(p, names)
    if n <= p + 1:
        raise ValueError(f"need more than {p + 1} observations for {p} regressors, got {n}")
    A = np.column_stack([np.ones(n), X])
    Q, R, piv, norms = _pivoted_qr(A, ["intercept", *names])

    constant = bool(np.all(y == y[0]))
    if constant:
        warnings.warn("response has zero variance; slopes set to 0 and R^2 to 0", RuntimeWarning, stacklevel=2)
        params = np.zeros(p + 1)
        params[0] = y[0]
    else:
        z = linalg.solve_triangular(R, Q.T @ y)
        params = np.empty(p + 1)
        params[piv] = z
        params /= norms

    fitted = A @ params
    resid = y - fitted
    df = n - p - 1
    ssr = float(resid @ resid)
    centred = y - y.mean()
    sst = float(centred @ centred)
    r2 = 0.0 if sst == 0 else min(max(1.0 - ssr / sst, 0.0), 1.0)
    adj = 1.0 - (1.0 - r2) * (n - 1) / df

    Rinv = linalg.solve_triangular(R, np.eye(p + 1))
    cov_scaled = Rinv @ Rinv.T
    var = np.empty(p + 1)
    var[piv] = np.diag(cov_scaled)
    se = np.sqrt(ssr / df * var) / norms
    with np.errstate(divide="ignore", invalid="ignore"):
        t = params / se
    pvals = np.array([t_sf_two_sided(v, df) if not math.isnan(v) else math.nan for v in t])
    return RegressionFit(names, params, se, t, pvals, r2, adj, resid, n, df, constant)


def _r2_of(Xc: np.ndarray, yc: np.ndarray, sst: float, cols: tuple[int, ...]) -> float:
    if not cols:
        return 0.0
    sub = Xc[:, cols]
    beta, *_ = np.linalg.lstsq(sub, yc, rcond=None)
    resid = yc - sub @ beta
    return 1.0 - float(resid @ resid) / sst


@dataclass
class LmgDecomposition:
    names: list[str]
    shares: np.ndarray
    r2: float
    orderings: int
    contributions: np.ndarray = field(repr=False, default=None)

    def ranking(self) -> list[str]:
        return [self.names[j] for j in np.argsort(-self.shares, kind="stable")]

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.shares.tolist()))


def lmg(X, y, names: Sequence[str] | None = None, sampled: bool = False,
        orderings: int = 5000, seed: int | None = None) -> LmgDecomposition:
    """Share of R^2 attributed to each regressor, averaged over entry orders.

    Exact mode (p <= 10) weights every subset by the number of orderings in
    which it precedes the regressor, so only 2^p fits are needed. Sampled
    mode averages over ``orderings`` random orders from ``seed``.
    """
    X, y = _as_design(X, y)
    n, p = X.shape
    names = _names(p, names)
    ols_fit(X, y, names)  # rank and size checks
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sst = float(yc @ yc)
    if sst == 0:
        raise ValidationError("response has zero variance; LMG shares are undefined")
    cache: dict[int, float] = {}

    def r2(mask: int) -> float:
        if mask not in cache:
            cache[mask] = _r2_of(Xc, yc, sst, tuple(j for j in range(p) if mask >> j & 1))
        return cache[mask]

    contrib = np.zeros(p)
    if not sampled:
        if p > 10:
            raise ValueError(f"exact LMG enumerates {p}! orderings; use sampled=True for p > 10")
        fact = [math.factorial(k) for k in range(p + 1)]
        for mask in range(1 << p):
            k = bin(mask).count("1")
            for j in range(p):
                if mask >> j & 1:
                    continue
                weight = fact[k] * fact[p - k - 1] / fact[p]
                contrib[j] += weight * (r2(mask | 1 << j) - r2(mask))
        count = math.factorial(p)
    else:
        if seed is None:
            raise ValueError("sampled LMG needs a seed")
        rng = substream(seed, "lmg")
        for _ in range(orderings):
            mask = 0
            for j in rng.permutation(p):
                contrib[j] += r2(mask | 1 << j) - r2(mask)
                mask |= 1 << j
        contrib /= orderings
        count = orderings
    total = r2((1 << p) - 1)
    shares = np.maximum(contrib, 0.0)
    shares = shares / shares.sum()
    return LmgDecomposition(names, shares, total, count, contrib)


def vif(X, names: Sequence[str] | None = None) -> dict[str, float]:
    """Variance inflation factor of each column; warns above 10."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    names = _names(p, names)
    out = {}
    for j in range(p):
        if p == 1:
            out[names[j]] = 1.0
            continue
        others = np.delete(X, j, axis=1)
        xc = X[:, j] - X[:, j].mean()
        sst = float(xc @ xc)
        oc = others - others.mean(axis=0)
        r2 = _r2_of(oc, xc, sst, tuple(range(p - 1))) if sst > 0 else 1.0
        out[names[j]] = math.inf if r2 >= 1.0 else 1.0 / (1.0 - r2)
    high = [k for k, v in out.items() if v > VIF_WARNING]
    if high:
        warnings.warn(f"variance inflation factor above {VIF_WARNING:g} for {', '.join(high)}", RuntimeWarning,
                      stacklevel=2)
    return out


@dataclass
class CvReport:
    r2: np.ndarray
    rmse: np.ndarray
    cv_rmse: np.ndarray
    mean_rel_err: np.ndarray
    rel_err_count: np.ndarray
    undefined_cv: int
    zero_targets: int
    row_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rmse)

    def rows(self):
        for i in range(len(self)):
            yield i, self.r2[i], self.rmse[i], self.cv_rmse[i]


def _cv_experiment(X, y, n_train, seed, r):
    perm = substream(seed, "cv", r).permutation(len(y))
    train, test = perm[:n_train], perm[n_train:]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = ols_fit(X[train], y[train])
    yt = y[test]
    err = fit.predict(X[test]) - yt
    rmse = math.sqrt(float(err @ err) / len(test))
    mean = float(yt.mean())
    cv = rmse / mean if mean != 0 else math.nan
    dev = yt - mean
    sst = float(dev @ dev)
    r2 = 1.0 - float(err @ err) / sst if sst > 0 else math.nan
    return r2, rmse, cv, test, err


def cross_validate(X, y, row_ids=None, repetitions: int = 1000, train_fraction: float = 0.6,
                   seed: int = 0, workers: int = 1) -> CvReport:
    """Repeated random train/test splits.

    Each experiment fits on ``train_fraction`` of the rows and reports the
    test-set R^2, RMSE and RMSE over the test mean. Relative errors
    (prediction - truth) / truth are averaged per row over the experiments
    in which that row was in the test set; rows with a zero target are
    skipped and counted.
    """
    X, y = _as_design(X, y)
    n, p = X.shape
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    n_train = int(round(train_fraction * n))
    if n - n_train < p + 2 or n_train <= p + 1:
        raise ValueError(f"{n} rows are too few for a {train_fraction:g} split with {p} regressors")
    results = ordered_map(lambda r: _cv_experiment(X, y, n_train, seed, r), range(repetitions), workers)
    r2 = np.array([res[0] for res in results])
    rmse = np.array([res[1] for res in results])
    cv = np.array([res[2] for res in results])
    rel_sum = np.zeros(n)
    rel_cnt = np.zeros(n, dtype=np.int64)
    nonzero = y != 0
    for _, _, _, test, err in results:
        keep = nonzero[test]
        idx = test[keep]
        rel_sum[idx] += err[keep] / y[idx]
        rel_cnt[idx] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_rel = np.where(rel_cnt > 0, rel_sum / np.maximum(rel_cnt, 1), math.nan)
    return CvReport(
        r2, rmse, cv, mean_rel, rel_cnt,
        undefined_cv=int(np.isnan(cv).sum()),
        zero_targets=int((~nonzero).sum()),
        row_ids=None if row_ids is None else np.asarray(row_ids, dtype=object),
    )


@dataclass
class ModelData:
    """Regions with every regressor and the target available, sorted by id."""

    region_ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    names: tuple[str, ...]
    target: str
    dropped: int


def model_data(aggregates: AggregateTable, regions: RegionTable, target: str,
               regressors: Sequence[str] = REGRESSORS) -> ModelData:
    """Join regional measure means with the region table.

    Regions missing from either side, or lacking the target, are dropped.
    """
    ids = [rid for rid in aggregates.region_ids if rid in regions]
    if not ids:
        raise ValidationError("no region appears in both the aggregates and the region table")
    agg_index = {rid: i for i, rid in enumerate(aggregates.region_ids)}
    rows = np.array([agg_index[r] for r in ids])
    region_cols = {"PD", "DI", "PCI"}
    table_pos = {r.region_id: i for i, r in enumerate(regions)}
    tpos = np.array([table_pos[r] for r in ids])

    def column(name):
        if name in region_cols:
            return regions.column(name)[tpos]
        return aggregates.column(name)[rows]

    X = np.column_stack([column(c) for c in regressors])
    y = column(target)
    ok = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    return ModelData(np.array(ids, dtype=object)[ok], X[ok], y[ok], tuple(regressors), target,
                     dropped=len(aggregates) - int(ok.sum()))


def fit_report(data: ModelData, lmg_orderings: int | None = None, seed: int | None = None) -> dict:
    """Fit, VIFs and LMG shares as a JSON-ready mapping."""
    fit = ols_fit(data.X, data.y, data.names)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        vifs = vif(data.X, data.names)
    sampled = len(data.names) > 10
    dec = lmg(data.X, data.y, data.names, sampled=sampled, orderings=lmg_orderings or 5000, seed=seed)
    out = {"target": data.target, "regressors": list(data.names), **fit.as_dict()}
    out["vif"] = vifs
    out["vif_warnings"] = [str(w.message) for w in caught]
    out["lmg"] = dec.as_dict()
    out["lmg_ranking"] = dec.ranking()
    out["regions_dropped"] = data.dropped
    return out

