"""Hold-out and k-fold partitioning with simple-random and stratified sampling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, RngStream

SIMPLE = "simple_random"
STRATIFIED = "stratified_random"
STRATEGIES = (SIMPLE, STRATIFIED)


class SplitError(ValueError):
    pass


def round_half_up(x: float) -> int:
    # the epsilon absorbs representation error such as 0.15 * 10 = 1.4999999999999998
    return int(math.floor(x + 0.5 + 1e-9))


def _check_strategy(strategy: str) -> None:
    if strategy not in STRATEGIES:
        raise SplitError(f"unknown sampling strategy {strategy!r}; expected one of {STRATEGIES}")


@dataclass(frozen=True)
class SplitPlan:
    test_ratio: float
    strategy: str
    seed: dict
    test_indices: tuple
    rest_indices: tuple

    def to_json(self) -> dict:
        return {
            "test_ratio": self.test_ratio,
            "strategy": self.strategy,
            "seed": self.seed,
            "test_indices": list(self.test_indices),
            "rest_indices": list(self.rest_indices),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitPlan":
        return cls(obj["test_ratio"], obj["strategy"], dict(obj["seed"]),
                   tuple(obj["test_indices"]), tuple(obj["rest_indices"]))


@dataclass(frozen=True)
class FoldAssignment:
    """Fold id for every index in ``indices`` (parallel arrays)."""

    k: int
    strategy: str
    seed: dict
    indices: tuple
    fold_of: tuple
    warnings: tuple = field(default=())

    def fold_sizes(self) -> list[int]:
        return np.bincount(np.asarray(self.fold_of, dtype=np.int64), minlength=self.k).tolist()

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "strategy": self.strategy,
            "seed": self.seed,
            "indices": list(self.indices),
            "fold_of": list(self.fold_of),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FoldAssignment":
        return cls(obj["k"], obj["strategy"], dict(obj["seed"]), tuple(obj["indices"]),
                   tuple(obj["fold_of"]), tuple(obj.get("warnings", ())))


def largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``quotas`` summing to ``total``.

    Floors first, then hands the leftover units to the largest fractional
    parts; ties go to the lower index.
    """
    base = np.floor(quotas).astype(np.int64)
    left = total - int(base.sum())
    if left < 0 or left > len(quotas):
        raise SplitError(f"cannot apportion {total} over quotas {quotas.tolist()}")
    frac = quotas - base
    order = sorted(range(len(quotas)), key=lambda i: (-frac[i], i))
    for i in order[:left]:
        base[i] += 1
    return base


def holdout_split(dataset: Dataset, ratio: float, strategy: str, rng: RngStream,
                  indices=None) -> SplitPlan:
    """Split off a test portion of size round_half_up(ratio * N).

    ``indices`` restricts the split to a subset of the dataset (all by default).
    """
    _check_strategy(strategy)
    if not 0.0 < ratio < 1.0:
        raise SplitError(f"ratio must be in (0, 1), got {ratio}")
    pool = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    n = pool.size
    if n < 2:
        raise SplitError("hold-out split needs at least 2 samples")
    n_test = round_half_up(ratio * n)
    if n_test == 0 or n_test == n:
        raise SplitError(f"ratio {ratio} on N={n} leaves an empty side")
    if strategy == SIMPLE:
        perm = pool[rng.permutation(n)]
        test = perm[:n_test]
    else:
        labels = dataset.labels[pool]
        counts = np.bincount(labels, minlength=dataset.n_classes)
        present = np.flatnonzero(counts)
        quotas = largest_remainder(ratio * counts[present].astype(float), n_test)
        test_parts = []
        for c, q in zip(present, quotas):
            members = pool[labels == c]
            if q >= members.size:
                raise SplitError(f"stratified split empties class {dataset.class_names[c]!r} from the rest set")
            members = members[rng.permutation(members.size)]
            test_parts.append(members[:q])
        test = np.concatenate(test_parts)
    test_set = set(test.tolist())
    rest = [int(i) for i in pool if int(i) not in test_set]
    return SplitPlan(float(ratio), strategy, rng.provenance(), tuple(sorted(int(i) for i in test)), tuple(sorted(rest)))


def kfold_partition(dataset: Dataset, rest, k: int, strategy: str, rng: RngStream) -> FoldAssignment:
    """Assign each index in ``rest`` to one of ``k`` folds by shuffled round-robin."""
    _check_strategy(strategy)
    rest = np.asarray(sorted(int(i) for i in rest), dtype=np.int64)
    n = rest.size
    if k < 2 or k > n:
        raise SplitError(f"k must satisfy 2 <= k <= {n}, got {k}")
    fold_of = np.empty(n, dtype=np.int64)
    notes = []
    if strategy == SIMPLE:
        perm = rng.permutation(n)
        fold_of[perm] = np.arange(n) % k
    else:
        labels = dataset.labels[rest]
        offset = 0
        for c in range(dataset.n_classes):
            pos = np.flatnonzero(labels == c)
            if pos.size == 0:
                continue
            if pos.size < k:
                msg = (f"class {dataset.class_names[c]!r} has {pos.size} < k={k} samples; "
                       "assigned without stratification")
                notes.append(msg)
                warnings.warn(msg, stacklevel=2)
            pos = pos[rng.permutation(pos.size)]
            # continuing the counter across classes keeps overall fold sizes balanced
            fold_of[pos] = (offset + np.arange(pos.size)) % k
            offset = (offset + pos.size) % k
    return FoldAssignment(k, strategy, rng.provenance(), tuple(rest.tolist()),
                          tuple(fold_of.tolist()), tuple(notes))


def fold_view(assignment: FoldAssignment, i: int) -> tuple[np.ndarray, np.ndarray]:
    """(train, val) dataset indices for fold ``i``, both sorted ascending."""
    if not 0 <= i < assignment.k:
        raise IndexError(f"fold {i} out of range for k={assignment.k}")
    idx = np.asarray(assignment.indices, dtype=np.int64)
    fold_of = np.asarray(assignment.fold_of, dtype=np.int64)
    return np.sort(idx[fold_of != i]), np.sort(idx[fold_of == i])
