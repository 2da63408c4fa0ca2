"""Decision procedures: sample size, split-ratio selection, sweeps and augmentation selection."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import stats
from .augment import FAMILIES, AugmentSpec
from .core import Dataset, RngStream
from .model import FreezeMask, ModelParams, unfreeze_boundaries
from .splitting import FoldAssignment, fold_view
from .train import ConfusionMatrix, OptimizerSpec, ScheduleSpec, TrainConfig, evaluate, train_loop

log = logging.getLogger(__name__)

# mean accuracies closer than this are ties; two fold lists with the same exact
# mean can differ in the last bit after float summation
TIE_TOL = 1e-9


def beats(a: float, b: float) -> bool:
    return a > b + TIE_TOL


def ratio_label(ratio: float) -> str:
    return f"{100 * ratio:g}%"


# -- sample size --------------------------------------------------------------------


@dataclass
class RatioCandidate:
    label: str
    test_ratio: float
    samples: stats.SampleGroup
    chosen_n: int
    curve: list = field(default_factory=list)
    converged: bool = True

    @property
    def mean(self) -> float:
        return self.samples.mean

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "test_ratio": self.test_ratio,
            "samples": list(self.samples.values),
            "chosen_n": self.chosen_n,
            "converged": self.converged,
            "sem_curve": [[p.n, p.sem] for p in self.curve],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RatioCandidate":
        return cls(obj["label"], obj["test_ratio"], stats.SampleGroup(obj["label"], obj["samples"]),
                   obj["chosen_n"], [stats.SemCurvePoint(n, s) for n, s in obj.get("sem_curve", [])],
                   obj.get("converged", True))


def sample_size_procedure(ratios: Sequence[float], trainer: Callable[[float, RngStream], float], tau: float,
                          n_min: int, n_max: int, rng: RngStream) -> list[RatioCandidate]:
    """Repeat ``trainer`` per ratio until the SEM of its accuracies drops to ``tau``.

    Each call gets a fresh derived stream, so every trial sees a new split.
    A ratio that reaches ``n_max`` first is kept but flagged unconverged.
    """
    if n_min < 3 or not tau > 0 or n_max < n_min:
        raise ValueError("need n_min >= 3, tau > 0 and n_max >= n_min")
    out = []
    for ratio in ratios:
        label = ratio_label(ratio)
        accs: list[float] = []
        converged = False
        while len(accs) < n_max:
            accs.append(float(trainer(ratio, rng.child(f"ratio:{label}:trial:{len(accs)}"))))
            if len(accs) >= n_min and stats.sem(accs) <= tau:
                converged = True
                break
        log.info("ratio %s: n=%d sem=%.5f converged=%s", label, len(accs), stats.sem(accs), converged)
        out.append(RatioCandidate(label, float(ratio), stats.SampleGroup(label, accs), len(accs),
                                  stats.sem_curve(accs), converged))
    return out


# -- split-ratio decision --------------------------------------------------------------------


class LiveTests:
    """Runs the hypothesis tests on the candidates' accuracy samples."""

    def __init__(self, alpha: float = stats.DEFAULT_ALPHA):
        self.alpha = alpha

    def top_group(self, candidates):
        # highest mean; ties go to the smaller ratio
        return max(candidates, key=lambda c: (c.mean, -c.test_ratio))

    def normality(self, c):
        return stats.shapiro_wilk(c.samples, self.alpha)

    def levene(self, cs):
        return stats.levene([c.samples for c in cs], self.alpha)

    def anova(self, cs):
        return stats.anova_oneway([c.samples for c in cs], self.alpha)

    def welch_anova(self, cs):
        return stats.welch_anova([c.samples for c in cs], self.alpha)

    def kruskal(self, cs):
        return stats.kruskal_wallis([c.samples for c in cs], self.alpha)

    def t_test(self, top, other, equal_var):
        return stats.t_test_one_tailed(top.samples, other.samples, self.alpha, equal_var=equal_var)

    def mann_whitney(self, top, other):
        return stats.mann_whitney_one_tailed(top.samples, other.samples, self.alpha)


def _parse_p(value) -> float:
    # "<0.001" is kept as its bound; the decision only needs p versus alpha
    if isinstance(value, str):
        return float(value.lstrip("<").strip())
    return float(value)


class RecordedTests:
    """Replays a recorded trail of p-values instead of computing tests.

    ``trail`` maps ``normality`` -> {label: p}, ``levene`` / ``anova`` /
    ``welch_anova`` / ``kruskal_wallis`` -> p, ``pairwise`` -> {label: p}
    (top group versus that label) and ``top_group`` -> label.
    """

    def __init__(self, trail: dict, alpha: float = stats.DEFAULT_ALPHA):
        self.trail = trail
        self.alpha = alpha

    def _result(self, name, p):
        if p is None:
            raise KeyError(f"recorded trail has no entry for {name}")
        return stats.TestResult(name, math.nan, _parse_p(p), self.alpha)

    def top_group(self, candidates):
        label = self.trail["top_group"]
        return next(c for c in candidates if c.label == label)

    def normality(self, c):
        return self._result("shapiro_wilk", self.trail["normality"].get(c.label))

    def levene(self, cs):
        return self._result("levene", self.trail.get("levene"))

    def anova(self, cs):
        return self._result("anova", self.trail.get("anova"))

    def welch_anova(self, cs):
        return self._result("welch_anova", self.trail.get("welch_anova"))

    def kruskal(self, cs):
        return self._result("kruskal_wallis", self.trail.get("kruskal_wallis"))

    def t_test(self, top, other, equal_var):
        return self._result("t_test_pooled" if equal_var else "t_test_welch", self.trail["pairwise"].get(other.label))

    def mann_whitney(self, top, other):
        return self._result("mann_whitney", self.trail["pairwise"].get(other.label))


@dataclass
class RatioDecision:
    trail: list
    candidates: list
    selected: str
    selected_ratio: float
    branch: str
    alpha: float

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "branch": self.branch,
            "trail": self.trail,
            "candidate_set": self.candidates,
            "selected": self.selected,
            "selected_ratio": self.selected_ratio,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RatioDecision":
        return cls(obj["trail"], obj["candidate_set"], obj["selected"], obj["selected_ratio"], obj["branch"],
                   obj["alpha"])


def _run(trail: list, stage: str, groups: list, fn):
    """Execute one test and append it to the trail; errors are recorded, not raised."""
    entry = {"stage": stage, "groups": groups}
    try:
        result = fn()
    except (stats.DegenerateSampleError, stats.UndefinedStatisticError, ValueError) as exc:
        entry["error"] = str(exc)
        trail.append(entry)
        return None
    entry["result"] = result.to_json()
    trail.append(entry)
    return result


def select_split_ratio(candidates: Sequence[RatioCandidate], alpha: float = stats.DEFAULT_ALPHA,
                       tests=None) -> RatioDecision:
    """Pick the split ratio whose mean accuracy is not beaten by any other.

    Normality of every group decides between the parametric (Levene, then
    ANOVA or Welch ANOVA, then one-tailed t tests) and the rank-based branch
    (Kruskal-Wallis, then one-tailed Mann-Whitney). Pairwise tests compare
    the top-mean group with each other group; the groups it does not beat
    join it in the candidate set, whose smallest ratio is selected.
    """
    cands = list(candidates)
    if len(cands) < 2:
        raise ValueError("need at least two candidates")
    tests = tests if tests is not None else LiveTests(alpha)
    trail: list = []

    normal = True
    for c in cands:
        res = _run(trail, "normality", [c.label], lambda c=c: tests.normality(c))
        if res is None or res.reject_null:
            normal = False
    labels = [c.label for c in cands]
    branch = "parametric" if normal else "nonparametric"
    omnibus = None
    equal_var = True
    if normal:
        lev = _run(trail, "homogeneity", labels, lambda: tests.levene(cands))
        if lev is None:
            branch = "nonparametric"
        else:
            equal_var = not lev.reject_null
            omnibus = _run(trail, "omnibus", labels,
                           (lambda: tests.anova(cands)) if equal_var else (lambda: tests.welch_anova(cands)))
            if omnibus is None:
                branch = "nonparametric"
    if branch == "nonparametric":
        omnibus = _run(trail, "omnibus", labels, lambda: tests.kruskal(cands))

    if omnibus is None or not omnibus.reject_null:
        chosen = cands
    else:
        top = tests.top_group(cands)
        chosen = [top]
        for c in cands:
            if c is top:
                continue
            if branch == "parametric":
                res = _run(trail, "pairwise", [top.label, c.label], lambda c=c: tests.t_test(top, c, equal_var))
            else:
                res = _run(trail, "pairwise", [top.label, c.label], lambda c=c: tests.mann_whitney(top, c))
            if res is None or not res.reject_null:
                chosen.append(c)
    best = min(chosen, key=lambda c: c.test_ratio)
    order = {c.label: i for i, c in enumerate(cands)}
    return RatioDecision(trail, sorted((c.label for c in chosen), key=order.get), best.label, best.test_ratio,
                         branch, alpha)


# -- cross-validated evaluation ---------------------------------------------------------------


@dataclass
class FoldRun:
    fold: int
    val_acc: float | None
    confusion: ConfusionMatrix | None
    best_epoch: int | None
    error: str | None = None


def _train_fold(args):
    init, dataset, assignment, fold, config, rng = args
    train_idx, val_idx = fold_view(assignment, fold)
    try:
        best, hist = train_loop(init, dataset, train_idx, val_idx, config, rng)
        acc, _, cm = evaluate(best, dataset, val_idx)
    except (FloatingPointError, ValueError) as exc:
        return FoldRun(fold, None, None, None, f"{type(exc).__name__}: {exc}")
    return FoldRun(fold, acc, cm, hist.best_epoch)


def _map(fn, tasks, parallelism: int):
    if parallelism <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, tasks))


@dataclass
class CVResult:
    per_fold: list
    errors: dict
    confusion: ConfusionMatrix | None

    @property
    def ok(self) -> bool:
        return bool(self.per_fold)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_fold)) if self.per_fold else math.nan

    @property
    def std(self) -> float:
        return stats.sample_std(self.per_fold) if len(self.per_fold) >= 2 else 0.0


def cross_validate(init: ModelParams, dataset: Dataset, folds: FoldAssignment, config: TrainConfig,
                   rng: RngStream, parallelism: int = 1) -> CVResult:
    """Train one model per fold; every setting reuses the same per-fold streams."""
    tasks = [(init, dataset, folds, i, config, rng.child(f"fold:{i}")) for i in range(folds.k)]
    runs = sorted(_map(_train_fold, tasks, parallelism), key=lambda r: r.fold)
    good = [r for r in runs if r.error is None]
    cm = None
    for r in good:
        cm = r.confusion if cm is None else cm + r.confusion
    return CVResult([r.val_acc for r in good], {r.fold: r.error for r in runs if r.error}, cm)


# -- parameter sweeps -------------------------------------------------------------------------

SWEEP_ORDER = ("schedule", "optimizer", "patience", "freezing", "head", "batch_size", "learning_rate")


def apply_setting(config: TrainConfig, name: str, value) -> TrainConfig:
    """Return ``config`` with one named training parameter replaced."""
    if name == "schedule":
        return config.with_(schedule=value if isinstance(value, ScheduleSpec) else ScheduleSpec(**value))
    if name == "optimizer":
        if isinstance(value, str):
            value = {"kind": value}
        return config.with_(optimizer=value if isinstance(value, OptimizerSpec) else OptimizerSpec(**value))
    if name == "freezing":
        names = value.trainable_layers if isinstance(value, FreezeMask) else tuple(value)
        return config.with_(trainable=names)
    if name == "augment":
        return config.with_(augment=value if isinstance(value, AugmentSpec) else AugmentSpec(**value))
    if name in ("patience", "batch_size", "max_epochs"):
        return config.with_(**{name: int(value)})
    if name == "learning_rate":
        return config.with_(learning_rate=float(value))
    if name == "head":
        return config.with_(head=str(value))
    raise ValueError(f"unknown training parameter {name!r}")


def setting_label(name: str, value) -> str:
    if isinstance(value, (FreezeMask, AugmentSpec)):
        return value.label()
    if name == "augment" and isinstance(value, dict):
        return AugmentSpec(**value).label()
    if name == "freezing":
        return "+".join(value) if value else "none"
    if isinstance(value, dict):
        if "kind" in value:
            rest = ",".join(f"{k}={v}" for k, v in sorted(value.items()) if k != "kind")
            return f"{value['kind']}({rest})" if rest else str(value["kind"])
        return ",".join(f"{k}={v}" for k, v in sorted(value.items()))
    return str(value)


@dataclass
class SettingResult:
    name: str
    value: object
    label: str
    mean: float
    per_fold: list
    std: float
    errors: dict
    confusion: ConfusionMatrix | None = None

    @property
    def disqualified(self) -> bool:
        return not self.per_fold

    def to_json(self) -> dict:
        value = self.value
        if isinstance(value, FreezeMask):
            value = list(value.trainable_layers)
        elif hasattr(value, "to_dict"):
            value = value.to_dict()
        return {
            "name": self.name,
            "value": value,
            "label": self.label,
            "mean": None if self.disqualified else self.mean,
            "std": self.std,
            "per_fold": self.per_fold,
            "errors": {str(k): v for k, v in self.errors.items()},
        }


@dataclass
class SweepResult:
    name: str
    settings: list
    winner: int
    baseline: float
    config: TrainConfig

    @property
    def winner_setting(self) -> SettingResult:
        return self.settings[self.winner]

    @property
    def increase(self) -> float:
        """Gain of the winning mean over the running baseline before this sweep."""
        return self.winner_setting.mean - self.baseline

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "baseline": self.baseline,
            "winner": self.winner,
            "winner_label": self.winner_setting.label,
            "increase": self.increase,
            "settings": [s.to_json() for s in self.settings],
            "config": self.config.to_dict(),
        }


def _pick_winner(settings: list) -> int:
    best, best_i = -math.inf, None
    for i, s in enumerate(settings):
        # strict comparison keeps the earlier value on ties
        if not s.disqualified and (best_i is None or beats(s.mean, best)):
            best, best_i = s.mean, i
    if best_i is None:
        raise RuntimeError("every value of the sweep failed on every fold")
    return best_i


def evaluate_setting(name, value, config, init, dataset, folds, rng, parallelism=1) -> SettingResult:
    cv = cross_validate(init, dataset, folds, apply_setting(config, name, value), rng, parallelism)
    return SettingResult(name, value, setting_label(name, value), cv.mean, cv.per_fold, cv.std, cv.errors,
                         cv.confusion)


def sweep_parameter(name: str, values: Sequence, base_config: TrainConfig, folds: FoldAssignment,
                    dataset: Dataset, init: ModelParams, rng: RngStream, baseline: float | None = None,
                    parallelism: int = 1) -> SweepResult:
    """k-fold evaluate each value with all else fixed; the best mean wins.

    The returned config has the winner folded in, ready for the next sweep.
    """
    if not values:
        raise ValueError(f"sweep {name!r} has no values")
    settings = [evaluate_setting(name, v, base_config, init, dataset, folds, rng, parallelism) for v in values]
    winner = _pick_winner(settings)
    if baseline is None:
        baseline = settings[winner].mean
    log.info("sweep %s: winner %s (%.4f)", name, settings[winner].label, settings[winner].mean)
    return SweepResult(name, settings, winner, baseline, apply_setting(base_config, name, values[winner]))


@dataclass
class FreezeCurve:
    points: list  # SettingResult per cumulative unfreeze state
    best: int

    def to_json(self) -> dict:
        return {"best": self.best, "points": [p.to_json() for p in self.points]}


def freezing_sweep(pretrained: ModelParams, boundaries, folds: FoldAssignment, dataset: Dataset,
                   config: TrainConfig, rng: RngStream, parallelism: int = 1) -> FreezeCurve:
    """k-fold accuracy of each cumulative unfreeze state, head first."""
    boundaries = list(boundaries) if boundaries is not None else unfreeze_boundaries()
    points = [evaluate_setting("freezing", FreezeMask.unfrozen(b.trainable_layers if isinstance(b, FreezeMask) else b),
                               config, pretrained, dataset, folds, rng, parallelism) for b in boundaries]
    return FreezeCurve(points, _pick_winner(points))


# -- augmentation selection ------------------------------------------------------------------


@dataclass
class AugmentSelection:
    benchmark: SettingResult
    results: dict  # family -> list of SettingResult
    best: dict  # family -> index into results[family]
    included: list
    spec: AugmentSpec

    def to_json(self) -> dict:
        return {
            "benchmark": self.benchmark.to_json(),
            "families": {
                fam: {"best": self.best[fam], "included": fam in self.included,
                      "settings": [s.to_json() for s in res]}
                for fam, res in self.results.items()
            },
            "included": self.included,
            "spec": self.spec.to_dict(),
        }

    def confusions(self) -> dict:
        """Summed validation confusion matrices: benchmark and each family's best magnitude."""
        out = {"benchmark": self.benchmark.confusion}
        for fam, res in self.results.items():
            out[fam] = res[self.best[fam]].confusion
        return out


def augmentation_select(candidates: dict, folds: FoldAssignment, dataset: Dataset, config: TrainConfig,
                        init: ModelParams, rng: RngStream, benchmark: SettingResult | None = None,
                        parallelism: int = 1) -> AugmentSelection:
    """Best magnitude per family, then the union of families that beat the benchmark.

    ``candidates`` maps a family name to its list of AugmentSpec magnitudes.
    A family enters the final spec only if its best mean validation accuracy
    is strictly above the no-augmentation benchmark.
    """
    base = config.with_(augment=AugmentSpec())
    if benchmark is None:
        benchmark = evaluate_setting("augment", AugmentSpec(), base, init, dataset, folds, rng, parallelism)
    results, best, included = {}, {}, []
    spec = AugmentSpec()
    for fam in sorted(candidates, key=lambda f: FAMILIES.index(f) if f in FAMILIES else len(FAMILIES)):
        specs = [s if isinstance(s, AugmentSpec) else AugmentSpec(**s) for s in candidates[fam]]
        if not specs:
            continue
        res = [evaluate_setting("augment", s, base, init, dataset, folds, rng, parallelism) for s in specs]
        results[fam] = res
        best[fam] = _pick_winner(res)
        if beats(res[best[fam]].mean, benchmark.mean):
            included.append(fam)
            spec = spec.merge(specs[best[fam]])
    return AugmentSelection(benchmark, results, best, included, spec)
