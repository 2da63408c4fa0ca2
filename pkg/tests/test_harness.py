import json
from importlib import resources

import numpy as np
import pytest

from trainbench import stats
from trainbench.augment import AugmentSpec
from trainbench.core import derive_rng
from trainbench.harness import (
    SettingResult,
    _pick_winner,
    RatioCandidate,
    RecordedTests,
    apply_setting,
    augmentation_select,
    cross_validate,
    freezing_sweep,
    sample_size_procedure,
    select_split_ratio,
    setting_label,
    sweep_parameter,
)
from trainbench.model import LAYERS, Architecture, FreezeMask, init_model, unfreeze_boundaries
from trainbench.splitting import STRATIFIED, kfold_partition
from trainbench.train import TrainConfig


def _noise_trainer(sigma, mean=0.8):
    return lambda ratio, rng: mean + sigma * rng.normal()


def test_sample_size_constant_trainer_stops_at_n_min():
    out = sample_size_procedure([0.1, 0.25], lambda r, rng: 0.9, 0.003, 5, 60, derive_rng(0, "ss"))
    assert [c.chosen_n for c in out] == [5, 5]
    assert all(c.converged and c.curve[-1].sem == 0.0 for c in out)
    assert [c.label for c in out] == ["10%", "25%"]


def test_sample_size_noise_matches_sem_inversion():
    # s / sqrt(n) <= tau  =>  n ~ (sigma / tau)^2 = 100
    ns = []
    for seed in range(20):
        (cand,) = sample_size_procedure([0.2], _noise_trainer(0.03), 0.003, 5, 400, derive_rng(seed, "ss"))
        assert cand.converged and len(cand.samples.values) == cand.chosen_n
        ns.append(cand.chosen_n)
    assert 60 <= np.median(ns) <= 160


def test_sample_size_unconverged_flagged_and_paper_sizes_representable():
    (cand,) = sample_size_procedure([0.25], _noise_trainer(0.2), 0.001, 3, 15, derive_rng(1, "ss"))
    assert cand.chosen_n == 15 and not cand.converged
    back = RatioCandidate.from_json(cand.to_json())
    assert back.chosen_n == 15 and back.samples.values == cand.samples.values
    with pytest.raises(ValueError):
        sample_size_procedure([0.1], _noise_trainer(0.1), 0.0, 5, 10, derive_rng(0, "ss"))
    with pytest.raises(ValueError):
        sample_size_procedure([0.1], _noise_trainer(0.1), 0.01, 2, 10, derive_rng(0, "ss"))


def _cand(label, ratio, values):
    return RatioCandidate(label, ratio, stats.SampleGroup(label, list(values)), len(values))


def _placeholder_groups(fixture):
    return [_cand(g["label"], g["test_ratio"], [0.0] * g["n"]) for g in fixture["groups"]]


def test_recorded_trail_fixture():
    path = resources.files("trainbench") / "fixtures" / "ratio_trail_published.json"
    fixture = json.loads(path.read_text())
    decision = select_split_ratio(_placeholder_groups(fixture), fixture["alpha"],
                                  RecordedTests(fixture["trail"], fixture["alpha"]))
    assert decision.candidates == ["10%", "15%"]
    assert decision.selected == "10%" and decision.selected_ratio == 0.1
    assert decision.branch == "parametric"
    stages = [t["stage"] for t in decision.trail]
    assert stages == ["normality"] * 4 + ["homogeneity", "omnibus"] + ["pairwise"] * 3
    assert decision.trail[6]["groups"] == ["10%", "15%"]


def test_identical_groups_keep_everyone():
    rng = derive_rng(3, "groups")
    base = 0.85 + 0.01 * rng.normal(size=30)
    cands = [_cand(f"{p}%", p / 100, base) for p in (25, 10, 20, 15)]
    d = select_split_ratio(cands)
    assert set(d.candidates) == {"10%", "15%", "20%", "25%"}
    assert d.selected == "10%"
    assert not any(t["stage"] == "pairwise" for t in d.trail)


def test_lognormal_group_takes_rank_branch():
    rng = derive_rng(11, "lognormal")
    cands = [
        _cand("10%", 0.1, 0.9 + 0.01 * rng.normal(size=30)),
        _cand("15%", 0.15, 0.5 + 0.05 * np.exp(1.5 * rng.normal(size=30))),
        _cand("20%", 0.2, 0.85 + 0.01 * rng.normal(size=30)),
    ]
    d = select_split_ratio(cands)
    assert d.branch == "nonparametric"
    assert [t["stage"] for t in d.trail] == ["normality"] * 3 + ["omnibus"] + ["pairwise"] * 2
    assert d.trail[3]["result"]["test"] == "kruskal_wallis"
    assert all(t["result"]["test"] == "mann_whitney" for t in d.trail[4:])
    assert d.selected in d.candidates and d.candidates == ["10%"]


def test_unequal_variances_use_welch_branch():
    rng = derive_rng(5, "welch")
    cands = [_cand("10%", 0.1, 0.90 + 0.002 * rng.normal(size=30)),
             _cand("20%", 0.2, 0.86 + 0.05 * rng.normal(size=30))]
    d = select_split_ratio(cands)
    omnibus = next(t for t in d.trail if t["stage"] == "omnibus")
    assert d.branch == "parametric" and omnibus["result"]["test"] == "welch_anova"


def test_degenerate_groups_recorded_in_trail():
    cands = [_cand("10%", 0.1, [0.9] * 5), _cand("20%", 0.2, [0.8, 0.81, 0.79, 0.8, 0.82])]
    d = select_split_ratio(cands)
    assert "error" in d.trail[0]
    assert d.branch == "nonparametric" and d.selected in d.candidates
    with pytest.raises(ValueError):
        select_split_ratio(cands[:1])


@pytest.fixture(scope="module")
def cv_setup(small_synthetic):
    ds = small_synthetic
    folds = kfold_partition(ds, np.arange(len(ds)), 3, STRATIFIED, derive_rng(0, "folds"))
    init = init_model(Architecture(height=16, width=16, n_classes=ds.n_classes), derive_rng(0, "init"))
    cfg = TrainConfig(batch_size=8, learning_rate=3e-3, trainable=LAYERS, patience=2, max_epochs=3)
    return ds, folds, init, cfg


def test_cross_validate_common_random_numbers(cv_setup):
    ds, folds, init, cfg = cv_setup
    a = cross_validate(init, ds, folds, cfg, derive_rng(0, "cv"))
    b = cross_validate(init, ds, folds, cfg, derive_rng(0, "cv"))
    assert a.per_fold == b.per_fold and len(a.per_fold) == 3
    assert a.mean == pytest.approx(np.mean(a.per_fold)) and a.confusion.total == len(ds)


def test_sweep_single_value_and_tie_break(cv_setup):
    ds, folds, init, cfg = cv_setup
    single = sweep_parameter("batch_size", [8], cfg, folds, ds, init, derive_rng(0, "cv"))
    assert single.winner == 0 and single.config.batch_size == 8
    frozen = cfg.with_(trainable=())
    tie = sweep_parameter("batch_size", [32, 8, 16], frozen, folds, ds, init, derive_rng(0, "cv"))
    assert len({s.mean for s in tie.settings}) == 1
    assert tie.winner == 0 and tie.config.batch_size == 32 and tie.increase == 0.0
    # the winner is recomputable from the per-fold table
    means = [np.mean(s.per_fold) for s in tie.settings]
    assert tie.winner == int(np.argmax(means))
    with pytest.raises(ValueError):
        sweep_parameter("batch_size", [], cfg, folds, ds, init, derive_rng(0, "cv"))


def test_equal_means_with_float_noise_tie():
    # 40+42+45 and 41+41+45 correct of 70 per fold: the same mean, one ulp apart as floats
    a, b = [40 / 70, 42 / 70, 45 / 70], [41 / 70, 41 / 70, 45 / 70]
    assert np.mean(a) < np.mean(b)
    settings = [SettingResult("x", i, str(i), float(np.mean(f)), f, 0.0, {}) for i, f in enumerate((a, b))]
    assert _pick_winner(settings) == 0


def test_apply_setting_and_labels():
    cfg = TrainConfig()
    assert apply_setting(cfg, "optimizer", "sgd").optimizer.kind == "sgd"
    assert apply_setting(cfg, "schedule", {"kind": "step_decay", "gamma": 0.5, "every": 5}).schedule.every == 5
    assert apply_setting(cfg, "freezing", ["head"]).trainable == ("head",)
    assert apply_setting(cfg, "learning_rate", "0.01").learning_rate == 0.01
    with pytest.raises(ValueError):
        apply_setting(cfg, "dropout", 0.5)
    assert setting_label("freezing", []) == "none"
    assert setting_label("schedule", {"kind": "step_decay", "gamma": 0.5}) == "step_decay(gamma=0.5)"
    assert setting_label("augment", {"rotation_range": 180.0}) == "rot180"


def test_freezing_sweep_curve(cv_setup):
    ds, folds, init, cfg = cv_setup
    curve = freezing_sweep(init, unfreeze_boundaries(), folds, ds, cfg, derive_rng(0, "cv"))
    assert len(curve.points) == len(unfreeze_boundaries())
    assert [p.label for p in curve.points][:2] == ["none", "head"]
    assert curve.best == int(np.argmax([p.mean for p in curve.points]))
    masks = freezing_sweep(init, [FreezeMask.all_frozen()], folds, ds, cfg, derive_rng(0, "cv"))
    assert masks.points[0].mean == curve.points[0].mean


def test_augmentation_select_tie_gives_empty_spec(cv_setup):
    ds, folds, init, cfg = cv_setup
    frozen = cfg.with_(trainable=())
    cands = {"flip": [{"horizontal_flip": True}], "brightness": [{"brightness_range": 0.1}, {"brightness_range": 0.5}]}
    sel = augmentation_select(cands, folds, ds, frozen, init, derive_rng(0, "cv"))
    assert sel.spec == AugmentSpec() and sel.included == []
    assert set(sel.confusions()) == {"benchmark", "flip", "brightness"}
    assert json.loads(json.dumps(sel.to_json()))["spec"] == AugmentSpec().to_dict()


def test_augmentation_select_never_includes_a_loser(cv_setup):
    ds, folds, init, cfg = cv_setup
    cands = {"flip": [{"horizontal_flip": True, "vertical_flip": True}], "rotation": [{"rotation_range": 90.0}],
             "brightness": [{"brightness_range": 0.25}]}
    sel = augmentation_select(cands, folds, ds, cfg, init, derive_rng(0, "cv"))
    for fam, res in sel.results.items():
        beats = res[sel.best[fam]].mean > sel.benchmark.mean
        assert (fam in sel.included) == beats
    merged = AugmentSpec()
    for fam in sel.included:
        merged = merged.merge(AugmentSpec(**cands[fam][sel.best[fam]]))
    assert sel.spec == merged
