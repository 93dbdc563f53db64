"""Brute-force reference computations, written independently of nowcast.measures."""

import math
from collections import defaultdict

R_KM = 6371.0088


def entropy_over_n(counts, n_norm):
    counts = [c for c in counts if c > 0]
    if len(counts) < 2 or n_norm < 2:
        return 0.0
    total = sum(counts)
    h = 0.0
    for c in counts:
        p = c / total
        h -= p * math.log(p)
    return h / math.log(n_norm)


def md_oracle(tower_sequence):
    trips = defaultdict(int)
    for a, b in zip(tower_sequence, tower_sequence[1:]):
        if a != b:
            trips[(a, b)] += 1
    return entropy_over_n(list(trips.values()), sum(trips.values()))


def sd_oracle(calls):
    """calls: list of (caller, callee) among retained users; returns {user: SD}."""
    directed = defaultdict(int)
    for a, b in calls:
        directed[(a, b)] += 1
    weights = defaultdict(dict)
    for (a, b), n in directed.items():
        if (b, a) in directed:
            weights[a][b] = n + directed[(b, a)]
    return {u: entropy_over_n(list(w.values()), len(w)) for u, w in weights.items()}


def haversine(lat1, lon1, lat2, lon2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * R_KM * math.asin(math.sqrt(a))


def mv_oracle(tower_sequence, coords):
    """Radius of gyration: equirectangular centre of mass, haversine distances."""
    visits = defaultdict(int)
    for t in tower_sequence:
        visits[t] += 1
    lat0 = sum(coords[t][0] for t in visits) / len(visits)
    lon0 = sum(coords[t][1] for t in visits) / len(visits)
    k = math.cos(math.radians(lat0))
    n = len(tower_sequence)
    xs = ys = 0.0
    for t, c in visits.items():
        xs += c * R_KM * math.radians(coords[t][1] - lon0) * k
        ys += c * R_KM * math.radians(coords[t][0] - lat0)
    lat_cm = lat0 + math.degrees(ys / n / R_KM)
    lon_cm = lon0 + math.degrees(xs / n / (R_KM * k))
    acc = sum(c * haversine(coords[t][0], coords[t][1], lat_cm, lon_cm) ** 2 for t, c in visits.items())
    return math.sqrt(acc / n)


def home_oracle(events, night=(22 * 60, 7 * 60)):
    """events: list of (minute_of_day, tower)."""
    total, nights = defaultdict(int), defaultdict(int)
    for tod, t in events:
        total[t] += 1
        if tod >= night[0] or tod < night[1]:
            nights[t] += 1
    best = sorted(total, key=lambda t: (-nights[t], -total[t], t))
    return best[0]


def ols_oracle(X, y):
    """Normal-equations OLS with intercept; returns (beta, se, p) with scipy's t."""
    import numpy as np
    from scipy import stats

    A = np.column_stack([np.ones(len(y)), X])
    AtA = A.T @ A
    beta = np.linalg.solve(AtA, A.T @ y)
    resid = y - A @ beta
    df = len(y) - A.shape[1]
    s2 = resid @ resid / df
    se = np.sqrt(np.diag(s2 * np.linalg.inv(AtA)))
    p = 2 * stats.t.sf(np.abs(beta / se), df)
    return beta, se, p


def r2_oracle(X, y, cols):
    import numpy as np

    if not cols:
        return 0.0
    A = np.column_stack([np.ones(len(y))] + [X[:, j] for j in cols])
    beta = np.linalg.solve(A.T @ A, A.T @ y)
    resid = y - A @ beta
    dev = y - y.mean()
    return 1 - (resid @ resid) / (dev @ dev)


def lmg_oracle(X, y):
    """Average R^2 increment per column over all p! entry orders, normalised."""
    import itertools
    import numpy as np

    p = X.shape[1]
    contrib = np.zeros(p)
    orders = list(itertools.permutations(range(p)))
    for order in orders:
        prev = 0.0
        for k in range(p):
            cur = r2_oracle(X, y, sorted(order[: k + 1]))
            contrib[order[k]] += cur - prev
            prev = cur
    contrib /= len(orders)
    return contrib / contrib.sum()
