"""Classification metrics, nonparametric tests, and survival estimates.

All functions are pure and operate on plain sequences / numpy arrays.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateError, UndefinedMetricError, ValidationError

CLIFF_BANDS = ((0.147, "negligible"), (0.33, "small"), (0.474, "medium"))
EXACT_MWU_MAX_N = 16


@dataclass
class TestResult:
    statistic: float
    p_raw: float
    p_adjusted: float | None = None
    effect_size: float | None = None
    effect_band: str | None = None
    note: str | None = None

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class SurvivalCurve:
    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    @property
    def median(self) -> float | None:
        hit = np.nonzero(self.survival <= 0.5)[0]
        return float(self.event_times[hit[0]]) if hit.size else None

    def at(self, t: float) -> float:
        """Right-continuous step value S(t)."""
        k = np.searchsorted(self.event_times, t, side="right")
        return 1.0 if k == 0 else float(self.survival[k - 1])

    def steps(self) -> list[tuple[float, float, int]]:
        """(time, survival, at_risk) rows starting from (0, 1, n), for plotting."""
        n0 = int(self.at_risk[0]) if self.at_risk.size else 0
        rows = [(0.0, 1.0, n0)]
        rows += [(float(t), float(s), int(r)) for t, s, r in zip(self.event_times, self.survival, self.at_risk)]
        return rows


@dataclass
class CvSummary:
    repetition_means: list
    mean: float
    se: float
    fold_se: float
    n_folds_used: int


def _check_scored(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValidationError(f"{s.size} scores vs {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0/1")
    return s, y.astype(int)


def effect_band(delta: float) -> str:
    d = abs(delta)
    for cut, name in CLIFF_BANDS:
        if d < cut:
            return name
    return "large"


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    ranks = np.empty(v.size)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


# --------------------------------------------------------------------------
# metrics


def auroc(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counting one half (rank-sum form)."""
    s, y = _check_scored(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    r = midranks(s)
    u = r[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def auprc(scores, labels) -> float:
    """Average precision over descending distinct thresholds; tied scores enter as one block."""
    s, y = _check_scored(scores, labels)
    npos = int(y.sum())
    if npos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]  # final index of each tie block
    tp = np.cumsum(y)[last]
    n_sel = last + 1
    recall = tp / npos
    precision = tp / n_sel
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s, y = _check_scored(scores, labels)
    if s.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(np.mean((s >= threshold).astype(int) == y))


# --------------------------------------------------------------------------
# special functions


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def gammaincc(a: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    """Regularized upper incomplete gamma Q(a, x): series below a+1, Lentz continued fraction above."""
    if a <= 0:
        raise ValidationError("gammaincc needs a > 0")
    if x <= 0:
        return 1.0
    log_pref = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(max_iter):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * tol:
                break
        return max(0.0, 1.0 - total * math.exp(log_pref))
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, max_iter):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return math.exp(log_pref) * h


def chi2_sf(x: float, dof: int = 1) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return gammaincc(dof / 2.0, x / 2.0)


def kolmogorov_sf(lam: float) -> float:
    """P(K > lam) for the limiting Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # theta-function form converges fast for small lam
        s = sum(math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam * lam)) for k in range(1, 50))
        return min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * s))
    s = sum((-1) ** (k - 1) * math.exp(-2 * k * k * lam * lam) for k in range(1, 100))
    return min(1.0, max(0.0, 2.0 * s))


# --------------------------------------------------------------------------
# tests


def _u_statistic(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    r = midranks(np.r_[a, b])
    return float(r[: a.size].sum() - a.size * (a.size + 1) / 2.0), r


def _exact_u_counts(n1: int, n2: int) -> np.ndarray:
    """Number of rank arrangements giving each U in 0..n1*n2 (no ties)."""
    # f[i][j] = counts for samples of size i, j; recurrence on which sample holds the largest value
    prev = [np.ones(1, dtype=np.int64) for _ in range(n2 + 1)]  # i = 0
    for i in range(1, n1 + 1):
        cur = [np.ones(1, dtype=np.int64)]  # j = 0
        for j in range(1, n2 + 1):
            out = np.zeros(i * j + 1, dtype=np.int64)
            with_top_in_a = prev[j]  # largest element in a adds j to U
            out[j:j + with_top_in_a.size] += with_top_in_a
            left = cur[j - 1]
            out[:left.size] += left
            cur.append(out)
        prev = cur
    return prev[n2]


def _exact_p_with_ties(a: np.ndarray, b: np.ndarray, u_obs: float, ranks: np.ndarray) -> float:
    n1 = a.size
    n = ranks.size
    mean = n1 * (n - n1) / 2.0
    dev = abs(u_obs - mean)
    offset = n1 * (n1 + 1) / 2.0
    hits = total = 0
    for idx in itertools.combinations(range(n), n1):
        total += 1
        if abs(ranks[list(idx)].sum() - offset - mean) >= dev - 1e-9:
            hits += 1
    return hits / total


def mann_whitney_u(a, b, mode: str = "auto") -> TestResult:
    """Two-sided Mann-Whitney U test; the statistic is U of ``a`` (#a>b plus half-ties).

    ``auto`` uses the exact null distribution when the pooled size is at most 16
    and there are no ties, otherwise the normal approximation with tie-corrected
    variance and continuity correction. ``exact`` forces enumeration (ties handled
    by permuting midranks).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValidationError("Mann-Whitney needs two non-empty samples")
    if mode not in ("auto", "exact", "asymptotic"):
        raise ValidationError(f"unknown mode {mode!r}")
    n1, n2 = a.size, b.size
    n = n1 + n2
    u, ranks = _u_statistic(a, b)
    has_ties = np.unique(ranks).size < n
    exact = mode == "exact" or (mode == "auto" and n <= EXACT_MWU_MAX_N and not has_ties)
    mean = n1 * n2 / 2.0
    if exact and not has_ties:
        counts = _exact_u_counts(n1, n2)
        grid = np.arange(counts.size)
        dev = abs(u - mean)
        p = counts[np.abs(grid - mean) >= dev - 1e-9].sum() / counts.sum()
        note = "exact"
    elif exact:
        p = _exact_p_with_ties(a, b, u, ranks)
        note = "exact (ties)"
    else:
        _, tie_counts = np.unique(np.r_[a, b], return_counts=True)
        tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (n * (n - 1))
        var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
        if var <= 0:
            p = 1.0
        else:
            z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
            p = 2.0 * normal_sf(z)
        note = "normal approximation"
    delta = 2.0 * u / (n1 * n2) - 1.0
    return TestResult(u, float(min(1.0, p)), effect_size=delta, effect_band=effect_band(delta), note=note)


def bonferroni(p_values, m: int | None = None) -> np.ndarray:
    p = np.asarray(p_values, dtype=np.float64)
    m = p.size if m is None else m
    if m < 1:
        raise ValidationError("Bonferroni needs m >= 1")
    return np.minimum(p * m, 1.0)


def cliffs_delta(a, b) -> TestResult:
    """Cliff's delta (#a>b - #a<b)/(n1 n2) with its magnitude band; p_raw is the Mann-Whitney p."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValidationError("Cliff's delta needs two non-empty samples")
    sb = np.sort(b)
    greater = np.searchsorted(sb, a, side="left").sum()
    less = (b.size - np.searchsorted(sb, a, side="right")).sum()
    delta = float(greater - less) / (a.size * b.size)
    p = mann_whitney_u(a, b).p_raw
    return TestResult(delta, p, effect_size=delta, effect_band=effect_band(delta))


def _log_hypergeom(x: int, r1: int, r2: int, c1: int) -> float:
    lf = math.lgamma
    return (lf(r1 + 1) - lf(x + 1) - lf(r1 - x + 1) + lf(r2 + 1) - lf(c1 - x + 1) - lf(r2 - c1 + x + 1)
            - (lf(r1 + r2 + 1) - lf(c1 + 1) - lf(r1 + r2 - c1 + 1)))


def fisher_exact_2x2(table) -> TestResult:
    """Two-sided Fisher exact test: total probability of tables no more likely than the observed one.

    A table with an empty row or column carries no information; it returns p = 1
    with a note instead of raising, so summary tables keep their rows.
    """
    t = np.asarray(table)
    if t.shape != (2, 2) or np.any(t < 0) or np.any(t != np.round(t)):
        raise ValidationError("Fisher's test needs a 2x2 table of non-negative integers")
    (a, b), (c, d) = (int(v) for v in t[0]), (int(v) for v in t[1])
    r1, r2, c1, c2 = a + b, c + d, a + c, b + d
    odds = (a * d) / (b * c) if b * c else (math.inf if a * d else math.nan)
    if min(r1, r2, c1, c2) == 0:
        return TestResult(odds, 1.0, note="degenerate table (zero margin)")
    lo, hi = max(0, c1 - r2), min(r1, c1)
    logp = np.array([_log_hypergeom(x, r1, r2, c1) for x in range(lo, hi + 1)])
    obs = logp[a - lo]
    keep = logp <= obs + math.log1p(1e-7)
    p = float(np.exp(logp[keep]).sum())
    return TestResult(odds, min(1.0, p))


# --------------------------------------------------------------------------
# survival


def kaplan_meier(times, events=None) -> SurvivalCurve:
    """Product-limit estimate. With every event observed this is 1 - ECDF."""
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    if t.size == 0:
        raise ValidationError("Kaplan-Meier needs at least one time")
    if np.any(t <= 0) or not np.all(np.isfinite(t)):
        raise ValidationError("survival times must be positive and finite")
    e = np.ones(t.size, dtype=bool) if events is None else np.asarray(events, dtype=bool).reshape(-1)
    if e.shape != t.shape:
        raise ValidationError("times and events differ in length")
    uniq = np.unique(t[e])
    at_risk = np.array([(t >= u).sum() for u in uniq])
    d = np.array([((t == u) & e).sum() for u in uniq])
    surv = np.cumprod(1.0 - d / at_risk)
    return SurvivalCurve(uniq, surv, at_risk, d)


def logrank_test(group_a, group_b, events_a=None, events_b=None) -> TestResult:
    """Two-group log-rank test; chi-square with one degree of freedom."""
    ta = np.asarray(group_a, dtype=np.float64).reshape(-1)
    tb = np.asarray(group_b, dtype=np.float64).reshape(-1)
    if ta.size == 0 or tb.size == 0:
        raise ValidationError("log-rank needs two non-empty groups")
    ea = np.ones(ta.size, bool) if events_a is None else np.asarray(events_a, bool)
    eb = np.ones(tb.size, bool) if events_b is None else np.asarray(events_b, bool)
    o_minus_e = 0.0
    var = 0.0
    for u in np.unique(np.r_[ta[ea], tb[eb]]):
        na = float((ta >= u).sum())
        nb = float((tb >= u).sum())
        n = na + nb
        da = float(((ta == u) & ea).sum())
        d = da + float(((tb == u) & eb).sum())
        o_minus_e += da - d * na / n
        if n > 1:
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1)
    if var <= 0:
        return TestResult(0.0, 1.0, note="zero variance")
    stat = o_minus_e ** 2 / var
    return TestResult(float(stat), chi2_sf(stat, 1))


# --------------------------------------------------------------------------
# cross-validation aggregation


def summarize_cv(fold_values, repetitions: int = 5, folds: int = 3) -> CvSummary:
    """Mean and standard error over repetition means.

    ``fold_values`` is a repetitions x folds grid; NaN marks a failed fold,
    which is left out of its repetition's mean.
    """
    v = np.asarray(fold_values, dtype=np.float64)
    if v.shape != (repetitions, folds):
        raise ValidationError(f"expected {repetitions}x{folds} fold results, got shape {v.shape}")
    ok = ~np.isnan(v)
    if not ok.any(axis=1).all():
        raise DegenerateError("a repetition has no successful folds")
    # fsum over sorted values: the summary must not depend on fold order
    rep_means = np.array([math.fsum(np.sort(row[m])) / m.sum() for row, m in zip(v, ok)])
    mean = math.fsum(rep_means) / repetitions
    se = float(rep_means.std(ddof=1) / math.sqrt(repetitions)) if repetitions > 1 else 0.0
    flat = np.sort(v[ok])
    fold_se = float(flat.std(ddof=1) / math.sqrt(flat.size)) if flat.size > 1 else 0.0
    return CvSummary([float(x) for x in rep_means], mean, se, fold_se, int(flat.size))
