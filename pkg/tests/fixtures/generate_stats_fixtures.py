"""Regenerate stats_oracle.json from scipy / statsmodels.

Run once; the JSON is committed and the tests compare against it, so the
reference libraries are only needed to rebuild it.
"""

import json
from pathlib import Path

import numpy as np
from scipy import stats as ss
from statsmodels.stats.oneway import anova_oneway as sm_oneway

N_FIXTURES = 24


def draw(rng, n, kind):
    if kind == "normal":
        return rng.normal(rng.uniform(-2, 2), rng.uniform(0.2, 3), n)
    if kind == "lognormal":
        return rng.lognormal(0, rng.uniform(0.3, 1.2), n)
    if kind == "uniform":
        return rng.uniform(0, 1, n)
    if kind == "ties":
        return np.round(rng.normal(0.8, 0.05, n), 2)
    return rng.exponential(1.0, n)


KINDS = ("normal", "lognormal", "uniform", "ties", "exponential")


def groups(rng, i, k=None, lo=3, hi=40):
    k = k or int(rng.integers(2, 6))
    kind = KINDS[i % len(KINDS)]
    return [draw(rng, int(rng.integers(lo, hi)), kind) + rng.uniform(-0.3, 0.3) for _ in range(k)]


def main():
    rng = np.random.default_rng(20240611)
    out = {k: [] for k in ("shapiro", "levene", "anova", "welch_anova", "t_pooled", "t_welch", "mann_whitney",
                           "kruskal", "cdf")}
    sizes = [3, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 15, 20, 25, 30, 40, 50, 75, 100, 150, 200, 500, 1000]
    for i, n in enumerate(sizes):
        x = draw(rng, n, KINDS[i % len(KINDS)])
        w, p = ss.shapiro(x)
        out["shapiro"].append({"x": x.tolist(), "W": float(w), "p": float(p)})
    for i in range(N_FIXTURES):
        g = groups(rng, i)
        r = ss.levene(*g, center="mean")
        out["levene"].append({"groups": [a.tolist() for a in g], "stat": float(r.statistic), "p": float(r.pvalue)})
        g = groups(rng, i)
        r = ss.f_oneway(*g)
        out["anova"].append({"groups": [a.tolist() for a in g], "stat": float(r.statistic), "p": float(r.pvalue)})
        g = groups(rng, i)
        r = sm_oneway(g, use_var="unequal", welch_correction=True)
        out["welch_anova"].append({"groups": [a.tolist() for a in g], "stat": float(r.statistic),
                                   "p": float(r.pvalue)})
        for key, eq in (("t_pooled", True), ("t_welch", False)):
            a, b = groups(rng, i, k=2)
            r = ss.ttest_ind(a, b, equal_var=eq, alternative="greater")
            out[key].append({"a": a.tolist(), "b": b.tolist(), "stat": float(r.statistic), "p": float(r.pvalue)})
        a, b = groups(rng, i, k=2, lo=4)
        r = ss.mannwhitneyu(a, b, alternative="greater", method="asymptotic", use_continuity=True)
        out["mann_whitney"].append({"a": a.tolist(), "b": b.tolist(), "stat": float(r.statistic),
                                    "p": float(r.pvalue)})
        g = groups(rng, i, lo=4)
        r = ss.kruskal(*g)
        out["kruskal"].append({"groups": [a.tolist() for a in g], "stat": float(r.statistic), "p": float(r.pvalue)})
    for i in range(N_FIXTURES):
        df1, df2 = float(rng.integers(1, 40)), float(rng.integers(1, 200))
        x = float(rng.uniform(-4, 4))
        out["cdf"].append({"dist": "student_t", "x": x, "params": [df1], "cdf": float(ss.t.cdf(x, df1))})
        x = float(rng.uniform(0, 8))
        out["cdf"].append({"dist": "f", "x": x, "params": [df1, df2], "cdf": float(ss.f.cdf(x, df1, df2))})
        x = float(rng.uniform(0, 3 * df1))
        out["cdf"].append({"dist": "chi2", "x": x, "params": [df1], "cdf": float(ss.chi2.cdf(x, df1))})
        x = float(rng.uniform(-5, 5))
        out["cdf"].append({"dist": "normal", "x": x, "params": [], "cdf": float(ss.norm.cdf(x))})
    path = Path(__file__).with_name("stats_oracle.json")
    path.write_text(json.dumps(out, indent=1) + "\n")
    print({k: len(v) for k, v in out.items()})


if __name__ == "__main__":
    main()
