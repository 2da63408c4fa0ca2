"""Descriptive statistics, distribution functions and hypothesis tests.

Everything here is written against the standard library and numpy only;
scipy is used solely as an independent oracle in the test-suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Sequence

import numpy as np

DEFAULT_ALPHA = 0.05

_EPS = 1e-16
_TINY = 1e-300


class UndefinedStatisticError(ValueError):
    """The statistic is undefined for this sample size (e.g. n < 2 with Bessel's correction)."""


class DegenerateSampleError(ValueError):
    """The input has zero variance where the test needs some."""


@dataclass(frozen=True)
class SampleGroup:
    label: str
    values: tuple

    def __init__(self, label, values):
        object.__setattr__(self, "label", str(label))
        object.__setattr__(self, "values", tuple(float(v) for v in values))

    def __len__(self):
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True)
class TestResult:
    test_name: str
    statistic: float
    p_value: float
    alpha: float = DEFAULT_ALPHA

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        p = min(1.0, max(0.0, float(self.p_value)))
        object.__setattr__(self, "p_value", p)
        object.__setattr__(self, "statistic", float(self.statistic))

    @property
    def reject_null(self) -> bool:
        return self.p_value < self.alpha

    def to_json(self) -> dict:
        return {
            "test": self.test_name,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "alpha": self.alpha,
            "reject_null": self.reject_null,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TestResult":
        return cls(obj["test"], obj["statistic"], obj["p_value"], obj.get("alpha", DEFAULT_ALPHA))


@dataclass(frozen=True)
class SemCurvePoint:
    n: int
    sem: float


def _values(values) -> np.ndarray:
    if isinstance(values, SampleGroup):
        values = values.values
    return np.asarray(values, dtype=np.float64).ravel()


# -- descriptive ----------------------------------------------------------------


def sample_std(values) -> float:
    """Sample standard deviation with Bessel's (n - 1) divisor."""
    x = _values(values)
    n = x.size
    if n < 2:
        raise UndefinedStatisticError(f"sample standard deviation is undefined for n={n} (needs n >= 2)")
    if np.all(x == x[0]):
        return 0.0  # the mean of a constant sample can round off c
    d = x - x.mean()
    return math.sqrt(float(d @ d) / (n - 1))


def sem(values) -> float:
    """Estimated standard error of the mean, s / sqrt(n)."""
    n = _values(values).size
    return sample_std(values) / math.sqrt(n)


def sem_curve(values) -> list[SemCurvePoint]:
    """SEM of every prefix of ``values`` of length 2..n, in collection order."""
    x = _values(values)
    if x.size < 2:
        raise UndefinedStatisticError(f"SEM curve needs n >= 2, got {x.size}")
    return [SemCurvePoint(m, sem(x[:m])) for m in range(2, x.size + 1)]


# -- special functions --------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = _TINY if abs(d) < _TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _betainc_upper(a: float, b: float, x: float) -> float:
    """1 - I_x(a, b) without cancellation."""
    return betainc(b, a, 1.0 - x) if 0.0 < x < 1.0 else (1.0 if x <= 0.0 else 0.0)


def gammainc(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("gammainc needs a > 0")
    if x <= 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if a <= 0:
        raise ValueError("gammaincc needs a > 0")
    if x <= 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def _gamma_series(a: float, x: float) -> float:
    ap = a
    total = delta = 1.0 / a
    for _ in range(100000):
        ap += 1.0
        delta *= x / ap
        total += delta
        if abs(delta) < abs(total) * _EPS:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise ArithmeticError(f"gamma series did not converge (a={a}, x={x})")


def _gamma_cf(a: float, x: float) -> float:
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 100000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = _TINY if abs(d) < _TINY else d
        c = b + an / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    raise ArithmeticError(f"gamma continued fraction did not converge (a={a}, x={x})")


# -- distributions ----------------------------------------------------------------


def _check_df(*dfs):
    for df in dfs:
        if not (df >= 1 and math.isfinite(df)):
            raise ValueError(f"degrees of freedom must be >= 1, got {df}")


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def norm_sf(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def t_cdf(x: float, df: float) -> float:
    _check_df(df)
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + x * x))
    return 1.0 - tail if x > 0 else tail


def t_sf(x: float, df: float) -> float:
    return t_cdf(-x, df)


def f_cdf(x: float, d1: float, d2: float) -> float:
    _check_df(d1, d2)
    if x <= 0:
        return 0.0
    return betainc(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))


def f_sf(x: float, d1: float, d2: float) -> float:
    _check_df(d1, d2)
    if x <= 0:
        return 1.0
    return _betainc_upper(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))


def chi2_cdf(x: float, df: float) -> float:
    _check_df(df)
    return gammainc(df / 2.0, x / 2.0) if x > 0 else 0.0


def chi2_sf(x: float, df: float) -> float:
    _check_df(df)
    return gammaincc(df / 2.0, x / 2.0) if x > 0 else 1.0


def cdf(dist: str, x: float, *params: float) -> float:
    """CDF of ``normal``, ``student_t(df)``, ``f(d1, d2)`` or ``chi2(df)`` at ``x``."""
    if dist == "normal":
        return norm_cdf(x)
    if dist == "student_t":
        return t_cdf(x, *params)
    if dist == "f":
        return f_cdf(x, *params)
    if dist == "chi2":
        return chi2_cdf(x, *params)
    raise ValueError(f"unknown distribution {dist!r}")


# -- Shapiro-Wilk (Royston 1995) --------------------------------------------------

_SW_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_SW_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_SW_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_SW_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_SW_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_SW_C6 = (-0.4803, -0.082676, 0.0030302)
_SW_G = (-2.273, 0.459)


def _poly(coef, x):
    result = 0.0
    for c in reversed(coef):
        result = result * x + c
    return result


def shapiro_weights(n: int) -> np.ndarray:
    """Royston's approximation of the Shapiro-Wilk coefficients (ascending order)."""
    if n < 3:
        raise UndefinedStatisticError("Shapiro-Wilk needs n >= 3")
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    inv = NormalDist().inv_cdf
    m = np.array([inv((i - 0.375) / (n + 0.25)) for i in range(1, n + 1)])
    summ2 = float(m @ m)
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = m / ssumm2
    an = a[-1] + _poly(_SW_C1, rsn)
    if n > 5:
        an1 = a[-2] + _poly(_SW_C2, rsn)
        phi = (summ2 - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an ** 2 - 2 * an1 ** 2)
        a = m / math.sqrt(phi)
        a[-1], a[-2] = an, an1
        a[0], a[1] = -an, -an1
    else:
        phi = (summ2 - 2 * m[-1] ** 2) / (1 - 2 * an ** 2)
        a = m / math.sqrt(phi)
        a[-1], a[0] = an, -an
    return a


def shapiro_wilk(group, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Shapiro-Wilk normality test; rejecting the null means "not normal"."""
    x = np.sort(_values(group))
    n = x.size
    if n < 3 or n > 5000:
        raise UndefinedStatisticError(f"Shapiro-Wilk needs 3 <= n <= 5000, got n={n}")
    if x[-1] - x[0] <= 0:
        raise DegenerateSampleError("Shapiro-Wilk: all values identical")
    a = shapiro_weights(n)
    xc = x - x.mean()
    w = float(a @ x) ** 2 / float(xc @ xc)
    w = min(w, 1.0)
    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return TestResult("shapiro_wilk", w, max(p, 0.0), alpha)
    w1 = math.log1p(-w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_SW_G, n)
        if w1 >= gamma:
            return TestResult("shapiro_wilk", w, 1e-99, alpha)
        y = -math.log(gamma - w1)
        mean, sd = _poly(_SW_C3, n), math.exp(_poly(_SW_C4, n))
    else:
        ln_n = math.log(n)
        y = w1
        mean, sd = _poly(_SW_C5, ln_n), math.exp(_poly(_SW_C6, ln_n))
    if y == -math.inf:
        return TestResult("shapiro_wilk", w, 1.0, alpha)
    return TestResult("shapiro_wilk", w, norm_sf((y - mean) / sd), alpha)


# -- variance homogeneity and means ---------------------------------------------------


def _groups(groups, min_n: int, name: str) -> list[np.ndarray]:
    arrays = [_values(g) for g in groups]
    if len(arrays) < 2:
        raise ValueError(f"{name} needs at least 2 groups")
    for i, g in enumerate(arrays):
        if g.size < min_n:
            raise UndefinedStatisticError(f"{name}: group {i} has n={g.size} (needs >= {min_n})")
    return arrays


def _oneway_f(arrays: list[np.ndarray], name: str) -> tuple[float, int, int]:
    k = len(arrays)
    big_n = sum(g.size for g in arrays)
    grand = np.concatenate(arrays).mean()
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in arrays)
    ss_within = sum(float(((g - g.mean()) ** 2).sum()) for g in arrays)
    if ss_within <= 0:
        raise DegenerateSampleError(f"{name}: zero within-group variance")
    df1, df2 = k - 1, big_n - k
    return (ss_between / df1) / (ss_within / df2), df1, df2


def levene(groups, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Mean-centred Levene test; rejecting means the variances differ."""
    arrays = _groups(groups, 2, "Levene")
    z = [np.abs(g - g.mean()) for g in arrays]
    stat, df1, df2 = _oneway_f(z, "Levene")
    return TestResult("levene", stat, f_sf(stat, df1, df2), alpha)


def anova_oneway(groups, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """One-way ANOVA F test for equal group means."""
    arrays = _groups(groups, 2, "ANOVA")
    stat, df1, df2 = _oneway_f(arrays, "ANOVA")
    return TestResult("anova", stat, f_sf(stat, df1, df2), alpha)


def welch_anova(groups, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Welch's heteroscedastic one-way ANOVA."""
    arrays = _groups(groups, 2, "Welch ANOVA")
    k = len(arrays)
    n = np.array([g.size for g in arrays], dtype=float)
    means = np.array([g.mean() for g in arrays])
    var = np.array([g.var(ddof=1) for g in arrays])
    if np.any(var <= 0):
        raise DegenerateSampleError("Welch ANOVA: a group has zero variance")
    w = n / var
    mw = float(w @ means) / w.sum()
    lam = float(((1 - w / w.sum()) ** 2 / (n - 1)).sum())
    num = float(w @ (means - mw) ** 2) / (k - 1)
    den = 1 + 2 * (k - 2) * lam / (k * k - 1)
    stat = num / den
    df2 = (k * k - 1) / (3 * lam)
    return TestResult("welch_anova", stat, f_sf(stat, k - 1, df2), alpha)


def t_test_one_tailed(a, b, alpha: float = DEFAULT_ALPHA, equal_var: bool = True) -> TestResult:
    """Two-sample t test with alternative mean(a) > mean(b).

    Pooled variance by default; ``equal_var=False`` gives Welch's test.
    """
    xa, xb = _values(a), _values(b)
    na, nb = xa.size, xb.size
    if na < 2 or nb < 2:
        raise UndefinedStatisticError("t test needs n >= 2 in both groups")
    va, vb = xa.var(ddof=1), xb.var(ddof=1)
    diff = xa.mean() - xb.mean()
    if equal_var:
        df = na + nb - 2
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        if pooled <= 0:
            raise DegenerateSampleError("t test: zero pooled variance")
        t = diff / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
        name = "t_test_pooled"
    else:
        sa, sb = va / na, vb / nb
        if sa + sb <= 0:
            raise DegenerateSampleError("Welch t test: zero variance")
        t = diff / math.sqrt(sa + sb)
        df = (sa + sb) ** 2 / (sa ** 2 / (na - 1) + sb ** 2 / (nb - 1))
        name = "t_test_welch"
    return TestResult(name, t, t_sf(t, df), alpha)


# -- rank-based fallback ------------------------------------------------------------


def rankdata(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based), ties share the mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _tie_term(x: np.ndarray) -> float:
    _, counts = np.unique(x, return_counts=True)
    counts = counts.astype(float)
    return float((counts ** 3 - counts).sum())


def mann_whitney_one_tailed(a, b, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Mann-Whitney U test with alternative "a tends to exceed b".

    The statistic is U for ``a``; p comes from the normal approximation with
    tie and continuity corrections.
    """
    xa, xb = _values(a), _values(b)
    na, nb = xa.size, xb.size
    if na < 2 or nb < 2:
        raise UndefinedStatisticError("Mann-Whitney needs n >= 2 in both groups")
    both = np.concatenate([xa, xb])
    n = na + nb
    ranks = rankdata(both)
    u = float(ranks[:na].sum()) - na * (na + 1) / 2.0
    var = na * nb / 12.0 * ((n + 1) - _tie_term(both) / (n * (n - 1)))
    if var <= 0:
        raise DegenerateSampleError("Mann-Whitney: all values identical")
    z = (u - na * nb / 2.0 - 0.5) / math.sqrt(var)
    return TestResult("mann_whitney", u, norm_sf(z), alpha)


def kruskal_wallis(groups, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Kruskal-Wallis H test with tie correction."""
    arrays = _groups(groups, 1, "Kruskal-Wallis")
    both = np.concatenate(arrays)
    n = both.size
    ranks = rankdata(both)
    h, start = 0.0, 0
    for g in arrays:
        r = ranks[start:start + g.size].sum()
        h += r * r / g.size
        start += g.size
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    correction = 1.0 - _tie_term(both) / (n ** 3 - n)
    if correction <= 0:
        raise DegenerateSampleError("Kruskal-Wallis: all values identical")
    h /= correction
    return TestResult("kruskal_wallis", h, chi2_sf(h, len(arrays) - 1), alpha)
