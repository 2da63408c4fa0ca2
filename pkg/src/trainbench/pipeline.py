"""End-to-end campaign: every stage reads and writes its artifacts in one directory.

Stage order: test hold-out -> source pretraining -> sample size -> ratio
selection -> k-fold setup -> LR finder -> parameter sweeps (with the
freezing sweep in place) -> benchmark train/test -> augmentation selection
-> final train/test -> report. The test split is evaluated exactly twice.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .augment import AugmentSpec
from .core import Dataset, SyntheticSpec, derive_rng, generate_synthetic, load_dataset
from .harness import (
    AugmentSelection,
    RatioCandidate,
    RatioDecision,
    RecordedTests,
    SweepResult,
    apply_setting,
    augmentation_select,
    cross_validate,
    freezing_sweep,
    sample_size_procedure,
    select_split_ratio,
    sweep_parameter,
)
from .model import Architecture, init_model, load_checkpoint, pretrain_source, save_checkpoint
from .splitting import FoldAssignment, SplitPlan, fold_view, holdout_split, kfold_partition, round_half_up
from .train import ConfusionMatrix, LRFinderDivergedError, TrainConfig, evaluate, lr_finder, train_loop, write_history_csv

log = logging.getLogger(__name__)


class MissingArtifactError(FileNotFoundError):
    pass


class ArtifactMismatchError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, message, partial=None):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
        self.partial = partial


def _clean(obj):
    """JSON-safe copy: NaN becomes null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    return obj


class Campaign:
    """A configured campaign bound to an output directory."""

    def __init__(self, config: dict, out_dir, parallelism: int | None = None):
        self.config = config
        self.out = Path(out_dir)
        self.parallelism = parallelism or config.get("parallelism", 1)
        self.seed = int(config["master_seed"])
        self.hash = cfgmod.config_hash(config)
        self._dataset = None
        self.test_usage: list[str] = []

    # -- plumbing --------------------------------------------------------------------

    def rng(self, key: str):
        return derive_rng(self.seed, key)

    def path(self, name: str) -> Path:
        return self.out / name

    def stamp(self) -> dict:
        return {"campaign_seed": self.seed, "config_hash": self.hash}

    def header(self) -> str:
        return f"campaign_seed={self.seed} config_hash={self.hash}"

    def write_json(self, name: str, payload: dict) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        body = {**self.stamp(), **_clean(payload)}
        self.path(name).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

    def write_csv(self, name: str, header: list, rows: list) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        buf.write(f"# {self.header()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if (isinstance(v, float) and math.isnan(v)) else (repr(v) if isinstance(v, float) else v)
                        for v in row])
        self.path(name).write_text(buf.getvalue())

    def read_json(self, name: str) -> dict:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(f"missing upstream artifact: {p}")
        obj = json.loads(p.read_text())
        if obj.get("config_hash") != self.hash:
            raise ArtifactMismatchError(
                f"{p} was produced by config {obj.get('config_hash')}, current config is {self.hash}")
        return obj

    def has(self, name: str) -> bool:
        return self.path(name).exists()

    # -- data ----------------------------------------------------------------------------

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            ds = self.config["dataset"]
            if "synthetic" in ds:
                self._dataset = generate_synthetic(SyntheticSpec(**ds["synthetic"]), self.rng("data:target"))
            else:
                self._dataset = load_dataset(ds["path"])
        return self._dataset

    def arch(self, n_classes: int | None = None) -> Architecture:
        h, w, c = self.dataset.image_shape
        return Architecture(height=h, width=w, channels=c, n_classes=n_classes or self.dataset.n_classes)

    def train_config(self, key: str) -> TrainConfig:
        return TrainConfig.from_dict(self.config[key])

    # -- stages ----------------------------------------------------------------------------

    def stage_split(self) -> SplitPlan:
        plan = holdout_split(self.dataset, self.config["test_ratio"], self.config["test_strategy"],
                             self.rng("split:test"))
        self.write_json("split_test.json", {"plan": plan.to_json(), "dataset": self.dataset.fingerprint()})
        return plan

    def load_split(self) -> SplitPlan:
        return SplitPlan.from_json(self.read_json("split_test.json")["plan"])

    def stage_pretrain(self):
        rng = self.rng("pretrain")
        init = init_model(self.arch(), rng.child("init"))
        src = self.config["source"]
        info = {"source": src, "source_accuracy": None}
        if src is not None:
            spec = SyntheticSpec(**src)
            source = generate_synthetic(spec, self.rng("data:source"))
            if source.image_shape != self.dataset.image_shape:
                raise StageError("pretrain", "source and target images differ in shape")
            init, _, acc = pretrain_source(init, source, self.train_config("pretrain"), rng,
                                           self.dataset.n_classes)
            info["source_accuracy"] = acc
        save_checkpoint(init, self.path("pretrained.ckpt"), self.stamp())
        self.write_json("pretrain.json", info)
        return init

    def load_pretrained(self):
        self.read_json("pretrain.json")
        if not self.has("pretrained.ckpt"):
            raise MissingArtifactError(f"missing upstream artifact: {self.path('pretrained.ckpt')}")
        return load_checkpoint(self.path("pretrained.ckpt"))

    def _pilot_trainer(self, rest, init):
        cfg = TrainConfig.from_dict(self.config["sample_size"]["trainer"])
        dataset = self.dataset
        strategy = self.config["ratio_strategy"]
        # a fixed-length run: patience never triggers, and the final epoch's
        # held-out accuracy is the trial's sample
        cfg = cfg.with_(patience=cfg.max_epochs)

        def trainer(ratio, rng):
            plan = holdout_split(dataset, ratio, strategy, rng.child("split"), indices=rest)
            _, hist = train_loop(init, dataset, plan.rest_indices, plan.test_indices, cfg, rng.child("train"))
            return hist.records[-1].val_acc

        return trainer

    def stage_sample_size(self) -> list[RatioCandidate]:
        rest = self.load_split().rest_indices
        init = self.load_pretrained()
        ss = self.config["sample_size"]
        cands = sample_size_procedure(self.config["candidate_ratios"], self._pilot_trainer(rest, init),
                                      ss["tau"], ss["n_min"], ss["n_max"], self.rng("sample-size"))
        for c in cands:
            self.write_csv(f"sem_curve_{c.test_ratio:g}.csv", ["n", "sem"], [[p.n, p.sem] for p in c.curve])
        self.write_json("sample_size.json", {"candidates": [c.to_json() for c in cands]})
        return cands

    def stage_select_ratio(self, fixture: dict | None = None) -> RatioDecision:
        alpha = self.config["alpha"]
        if fixture is not None:
            cands = [RatioCandidate(g["label"], g["test_ratio"], None, g.get("n", 0)) for g in fixture["groups"]]
            decision = select_split_ratio(cands, fixture.get("alpha", alpha),
                                          RecordedTests(fixture["trail"], fixture.get("alpha", alpha)))
        else:
            cands = [RatioCandidate.from_json(c) for c in self.read_json("sample_size.json")["candidates"]]
            decision = select_split_ratio(cands, alpha)
        self.write_json("ratio_decision.json", {**decision.to_json(), "fixture": fixture is not None})
        return decision

    def fold_count(self) -> int:
        if self.config["k"] is not None:
            return int(self.config["k"])
        ratio = self.read_json("ratio_decision.json")["selected_ratio"]
        return max(2, round_half_up(1.0 / ratio))

    def stage_folds(self) -> FoldAssignment:
        rest = self.load_split().rest_indices
        folds = kfold_partition(self.dataset, rest, self.fold_count(), self.config["fold_strategy"],
                                self.rng("split:folds"))
        self.write_json("folds.json", {"folds": folds.to_json()})
        return folds

    def load_folds(self) -> FoldAssignment:
        return FoldAssignment.from_json(self.read_json("folds.json")["folds"])

    def stage_lr_find(self, config: TrainConfig | None = None):
        folds = self.load_folds()
        init = self.load_pretrained()
        cfg = config or self.train_config("base_config")
        lf = self.config["lr_finder"]
        train_idx, _ = fold_view(folds, 0)
        try:
            res = lr_finder(init, self.dataset, train_idx, cfg, self.rng("lr-finder"), lf["lr_min"], lf["lr_max"],
                            lf["n_steps"])
            payload = {**res.to_json(), "diverged": False}
        except LRFinderDivergedError as exc:
            res = None
            payload = {**exc.result.to_json(), "diverged": True}
        self.write_csv("lr_finder.csv", ["lr", "loss", "smoothed"],
                       list(zip(payload["lrs"], payload["losses"], payload["smoothed"])))
        self.write_json("lr_finder.json", payload)
        return res

    def _write_settings_csv(self, name, settings, k):
        rows = []
        for s in settings:
            ok = iter(s.per_fold)
            folds = [math.nan if (i in s.errors or str(i) in s.errors) else next(ok, math.nan) for i in range(k)]
            rows.append([s.label, s.mean if s.per_fold else math.nan, s.std, len(s.errors)] + folds)
        self.write_csv(name, ["setting", "mean_val_acc", "std", "failed_folds"] + [f"fold_{i}" for i in range(k)],
                       rows)

    def stage_sweeps(self):
        folds = self.load_folds()
        init = self.load_pretrained()
        config = self.train_config("base_config")
        rng = self.rng("cv")
        base = cross_validate(init, self.dataset, folds, config, rng, self.parallelism)
        running = base.mean
        results = []
        freeze_curve = None
        for sweep in self.config["sweeps"]:
            name, values = sweep["name"], list(sweep["values"])
            if name == "learning_rate" and sweep.get("use_lr_finder"):
                found = self.stage_lr_find(config)
                if found is not None and found.suggested_lr not in values:
                    values.append(found.suggested_lr)
            if not values:
                continue
            if name == "freezing":
                freeze_curve = freezing_sweep(init, [tuple(v) for v in values], folds, self.dataset, config, rng,
                                              self.parallelism)
                settings, winner = freeze_curve.points, freeze_curve.best
                res = SweepResult(name, settings, winner, running, apply_setting(config, name, values[winner]))
                self._write_freeze_curve(freeze_curve, folds.k)
            else:
                res = sweep_parameter(name, values, config, folds, self.dataset, init, rng, baseline=running,
                                      parallelism=self.parallelism)
            self._write_settings_csv(f"sweep_{name}.csv", res.settings, folds.k)
            results.append(res)
            config = res.config
            running = res.winner_setting.mean
        payload = {
            "baseline": {"mean": base.mean, "per_fold": base.per_fold},
            "sweeps": [r.to_json() for r in results],
            "increases": [{"parameter": r.name, "increase": r.increase} for r in results],
            "final_config": config.to_dict(),
            "final_mean": running,
        }
        self.write_json("sweeps.json", payload)
        return config, results, freeze_curve

    def _write_freeze_curve(self, curve, k):
        self._write_settings_csv("freeze_curve.csv", curve.points, k)

    def stage_freeze_sweep(self):
        folds = self.load_folds()
        init = self.load_pretrained()
        values = next((s["values"] for s in self.config["sweeps"] if s["name"] == "freezing"), None)
        curve = freezing_sweep(init, [tuple(v) for v in values] if values else None, folds, self.dataset,
                               self.train_config("base_config"), self.rng("cv"), self.parallelism)
        self._write_freeze_curve(curve, folds.k)
        self.write_json("freeze_curve.json", curve.to_json())
        return curve

    def tuned_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.read_json("sweeps.json")["final_config"])

    def _train_and_test(self, stage: str, config: TrainConfig):
        """Train on fold 0's view and evaluate once on the held-out test split."""
        folds = self.load_folds()
        plan = self.load_split()
        init = self.load_pretrained()
        train_idx, val_idx = fold_view(folds, 0)
        # benchmark and final share this stream so an empty augmentation spec reproduces the benchmark
        best, hist = train_loop(init, self.dataset, train_idx, val_idx, config, self.rng("final-train"))
        self.test_usage.append(stage)
        acc, err, cm = evaluate(best, self.dataset, plan.test_indices)
        save_checkpoint(best, self.path(f"{stage}.ckpt"), self.stamp())
        write_history_csv(hist, self.path(f"history_{stage}.csv"), self.header())
        self.write_json(f"confusion_{stage}.json", cm.to_json())
        self.write_json(f"{stage}.json", {"config": config.to_dict(), "test_accuracy": acc,
                                          "best_epoch": hist.best_epoch, "best_val_acc": hist.best_val_acc,
                                          "epochs_run": len(hist)})
        return acc, cm

    def stage_benchmark(self):
        return self._train_and_test("benchmark", self.tuned_config().with_(augment=AugmentSpec()))

    def stage_augment_select(self) -> AugmentSelection:
        folds = self.load_folds()
        init = self.load_pretrained()
        config = self.tuned_config()
        sel = augmentation_select(self.config["augmentation"], folds, self.dataset, config, init, self.rng("cv"),
                                  parallelism=self.parallelism)
        rows = [["benchmark", "none", sel.benchmark.mean, sel.benchmark.std, "", ""]]
        for fam, res in sel.results.items():
            for i, s in enumerate(res):
                rows.append([fam, s.label, s.mean, s.std, int(i == sel.best[fam]),
                             int(i == sel.best[fam] and fam in sel.included)])
        self.write_csv("augment_select.csv", ["family", "setting", "mean_val_acc", "std", "best_of_family",
                                              "included"], rows)
        for fam, cm in sel.confusions().items():
            if fam != "benchmark" and cm is not None:
                self.write_json(f"confusion_augment_{fam}.json", cm.to_json())
        self.write_json("augment_select.json", sel.to_json())
        return sel

    def stage_final(self):
        spec = AugmentSpec.from_dict(self.read_json("augment_select.json")["spec"])
        return self._train_and_test("final", self.tuned_config().with_(augment=spec))

    def stage_report(self) -> dict:
        bench = self.read_json("benchmark.json")
        final = self.read_json("final.json")
        cm_b = ConfusionMatrix.from_json(self.read_json("confusion_benchmark.json"))
        cm_f = ConfusionMatrix.from_json(self.read_json("confusion_final.json"))
        deltas = []
        for name, eb, ef in zip(cm_b.class_names, cm_b.per_class_error(), cm_f.per_class_error()):
            deltas.append({"class": name, "benchmark_error": eb, "final_error": ef})
        sample = self.read_json("sample_size.json")
        decision = self.read_json("ratio_decision.json")
        sweeps = self.read_json("sweeps.json")
        augment = self.read_json("augment_select.json")
        usage = [s for s in ("benchmark", "final") if self.has(f"{s}.json")]
        report = {
            "config": self.config,
            "dataset": self.dataset.fingerprint(),
            "pretrain": self.read_json("pretrain.json"),
            "splits": {
                "test": self.read_json("split_test.json")["plan"],
                "folds": self.read_json("folds.json")["folds"],
            },
            "sample_size": sample["candidates"],
            "ratio_decision": {k: v for k, v in decision.items() if k not in ("campaign_seed", "config_hash")},
            "sweeps": {k: v for k, v in sweeps.items() if k not in ("campaign_seed", "config_hash")},
            "freeze_curve": next((s for s in sweeps["sweeps"] if s["name"] == "freezing"), None),
            "augmentation": {k: v for k, v in augment.items() if k not in ("campaign_seed", "config_hash")},
            "final_config": final["config"],
            "benchmark": {"test_accuracy": bench["test_accuracy"], "confusion": cm_b.to_json()},
            "final": {"test_accuracy": final["test_accuracy"], "confusion": cm_f.to_json()},
            "per_class_error": deltas,
            "test_set_usage": usage,
        }
        self.write_json("report.json", report)
        return report

    def run_all(self) -> dict:
        stages = [
            ("split", self.stage_split),
            ("pretrain", self.stage_pretrain),
            ("sample-size", self.stage_sample_size),
            ("select-ratio", self.stage_select_ratio),
            ("folds", self.stage_folds),
            ("sweep", self.stage_sweeps),
            ("benchmark", self.stage_benchmark),
            ("augment-select", self.stage_augment_select),
            ("final", self.stage_final),
            ("report", self.stage_report),
        ]
        done = []
        result = None
        for name, fn in stages:
            log.info("stage %s", name)
            try:
                result = fn()
            except (MissingArtifactError, ArtifactMismatchError):
                raise
            except Exception as exc:
                self.write_json("partial_report.json", {"completed": done, "failed_stage": name,
                                                        "error": f"{type(exc).__name__}: {exc}"})
                raise StageError(name, str(exc), done) from exc
            done.append(name)
        return result


def run_full_pipeline(campaign_config: dict, out_dir, parallelism: int | None = None) -> dict:
    """Run every stage of ``campaign_config`` and return the report."""
    return Campaign(campaign_config, out_dir, parallelism).run_all()
