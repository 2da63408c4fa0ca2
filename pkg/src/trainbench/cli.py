"""Command-line driver: one subcommand per campaign stage plus ``run-all``.

Exit codes: 0 success, 1 invalid config / missing or mismatched artifact,
2 failure while running an experiment.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

from . import config as cfgmod
from .augment import AugmentSpec, augment_batch
from .core import Dataset, DatasetError, SyntheticSpec, default_output_dir, derive_rng, generate_synthetic, save_dataset
from .model import load_checkpoint
from .pipeline import ArtifactMismatchError, Campaign, MissingArtifactError, StageError
from .train import ConfusionMatrix, TrainConfig, evaluate

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

REPORT_KEYS = ("config", "sample_size", "ratio_decision", "sweeps", "augmentation", "final_config", "benchmark",
               "final", "per_class_error", "test_set_usage", "campaign_seed", "config_hash")


class ReportSchemaError(ValueError):
    pass


def published_trail_path() -> Path:
    """The recorded p-value trail shipped with the package."""
    return Path(str(resources.files("trainbench") / "fixtures" / "ratio_trail_published.json"))


# -- report rendering ---------------------------------------------------------------------


def _fmt(v, pct=False):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if pct:
        return f"{100 * v:.2f}%"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def render_report(report: dict) -> tuple[str, dict]:
    """Text rendering plus a ``{filename: csv text}`` bundle of every table."""
    missing = [k for k in REPORT_KEYS if k not in report]
    if missing:
        raise ReportSchemaError(f"report is missing {', '.join(missing)}")
    out, bundle = [], {}
    stamp = f"campaign_seed={report['campaign_seed']} config_hash={report['config_hash']}"

    def section(title, body):
        out.append(f"== {title} ==\n{body}\n")

    def emit(name, header, rows):
        bundle[name] = f"# {stamp}\n" + _csv(header, rows)
        return _table(header, [[_fmt(v) for v in r] for r in rows])

    section("campaign", f"{stamp}\ndataset fingerprint {report.get('dataset', 'n/a')}")

    rows = [[c["label"], c["test_ratio"], c["chosen_n"], sum(c["samples"]) / len(c["samples"]) if c["samples"] else None,
             c["sem_curve"][-1][1] if c["sem_curve"] else None, c["converged"]] for c in report["sample_size"]]
    body = emit("sample_size.csv", ["ratio", "test_ratio", "n", "mean_acc", "final_sem", "converged"], rows)
    curve_rows = [[c["label"], n, s] for c in report["sample_size"] for n, s in c["sem_curve"]]
    emit("sem_curves.csv", ["ratio", "n", "sem"], curve_rows)
    section("sample size", body)

    rd = report["ratio_decision"]
    rows = []
    for e in rd["trail"]:
        res = e.get("result")
        rows.append([e["stage"], "/".join(e["groups"]), res["test"] if res else "error",
                     res["statistic"] if res else None, res["p_value"] if res else None,
                     res["reject_null"] if res else e.get("error")])
    body = emit("ratio_trail.csv", ["stage", "groups", "test", "statistic", "p_value", "reject_or_error"], rows)
    body += (f"\nbranch {rd['branch']}; candidate set {{{', '.join(rd['candidate_set'])}}}; "
             f"selected {rd['selected']} (test ratio {rd['selected_ratio']})")
    section("split ratio decision", body)

    sw = report["sweeps"]
    if not sw.get("sweeps"):
        section("parameter sweeps", "no sweeps run")
    else:
        rows, inc = [], []
        for s in sw["sweeps"]:
            for i, st in enumerate(s["settings"]):
                rows.append([s["name"], st["label"], st["mean"], st["std"], " ".join(_fmt(v) for v in st["per_fold"]),
                             i == s["winner"]])
            inc.append([s["name"], s["winner_label"], s["baseline"], s["increase"]])
        body = f"cross-validated baseline {_fmt(sw['baseline']['mean'])}\n"
        body += emit("sweeps.csv", ["parameter", "setting", "mean_val_acc", "std", "per_fold", "winner"], rows)
        body += "\n\nincrease in validation accuracy per parameter\n"
        body += emit("sweep_increase.csv", ["parameter", "winner", "baseline", "increase"], inc)
        section("parameter sweeps", body)
    fc = report.get("freeze_curve")
    if fc:
        rows = [[st["label"], st["mean"], st["std"]] for st in fc["settings"]]
        section("freezing curve", emit("freeze_curve.csv", ["trainable", "mean_val_acc", "std"], rows))

    aug = report["augmentation"]
    rows = [["benchmark", aug["benchmark"]["label"], aug["benchmark"]["mean"], aug["benchmark"]["std"], "", ""]]
    for fam, f in aug["families"].items():
        for i, st in enumerate(f["settings"]):
            rows.append([fam, st["label"], st["mean"], st["std"], i == f["best"], i == f["best"] and f["included"]])
    body = emit("augmentation.csv", ["family", "setting", "mean_val_acc", "std", "best", "included"], rows)
    body += f"\nfinal spec {AugmentSpec.from_dict(aug['spec']).label()} (families: {', '.join(aug['included']) or 'none'})"
    section("augmentation selection", body)

    fcfg = report["final_config"]
    rows = [[k, json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v] for k, v in sorted(fcfg.items())]
    section("final training configuration", emit("final_config.csv", ["parameter", "value"], rows))

    b, f = report["benchmark"], report["final"]
    rows = [["benchmark", b["test_accuracy"]], ["final", f["test_accuracy"]]]
    body = emit("test_accuracy.csv", ["model", "test_accuracy"], rows)
    body += f"\ntest set evaluations: {len(report['test_set_usage'])} ({', '.join(report['test_set_usage'])})"
    section("test results", body)
    for stage in ("benchmark", "final"):
        cm = ConfusionMatrix.from_json(report[stage]["confusion"])
        names = list(cm.class_names)
        rows = [[names[i]] + list(map(int, cm.counts[i])) + [int(cm.counts[i].sum())] for i in range(len(names))]
        emit(f"confusion_{stage}.csv", ["true\\pred"] + names + ["total"], rows)
        section(f"confusion matrix ({stage})", cm.to_text())
    rows = [[d["class"], d["benchmark_error"], d["final_error"],
             None if d["benchmark_error"] is None or d["final_error"] is None
             else d["final_error"] - d["benchmark_error"]] for d in report["per_class_error"]]
    section("per-class error", emit("per_class_error.csv", ["class", "benchmark_error", "final_error", "delta"], rows))
    return "\n".join(out), bundle


def write_rendered(report_path: Path, out_dir: Path) -> Path:
    try:
        report = json.loads(report_path.read_text())
    except FileNotFoundError:
        raise MissingArtifactError(f"missing upstream artifact: {report_path}") from None
    text, bundle = render_report(report)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(text)
    tables = out_dir / "report_tables"
    tables.mkdir(exist_ok=True)
    for name, body in sorted(bundle.items()):
        (tables / name).write_text(body)
    return out_dir / "report.txt"


# -- commands -------------------------------------------------------------------------------


def _campaign(args) -> Campaign:
    return Campaign(args.cfg, args.out_dir, args.parallelism)


def cmd_gen_data(args):
    cfg = args.cfg
    out = Path(args.out_dir) / "data"
    ds = cfg["dataset"]
    if "synthetic" not in ds:
        raise cfgmod.ConfigError("gen-data needs a synthetic dataset in the config")
    spec = SyntheticSpec(**ds["synthetic"])
    target = generate_synthetic(spec, derive_rng(cfg["master_seed"], "data:target"))
    save_dataset(target, out / "target", spec, cfg["master_seed"])
    if cfg["source"] is not None:
        sspec = SyntheticSpec(**cfg["source"])
        save_dataset(generate_synthetic(sspec, derive_rng(cfg["master_seed"], "data:source")), out / "source", sspec,
                     cfg["master_seed"])
    if args.stage_input:
        # materialize one augmented copy of the target set for inspection
        aug = AugmentSpec.from_dict(json.loads(Path(args.stage_input).read_text()))
        imgs = augment_batch(target, range(len(target)), aug, derive_rng(cfg["master_seed"], "inspect-augment"))
        import numpy as np

        save_dataset(Dataset(np.stack([im.data for im in imgs]), target.labels, target.class_names),
                     out / f"augmented_{aug.label()}")
    print(f"wrote {out}")


def cmd_split(args):
    plan = _campaign(args).stage_split()
    print(f"test split: {len(plan.test_indices)} held out, {len(plan.rest_indices)} remaining")


def cmd_pretrain(args):
    c = _campaign(args)
    c.stage_pretrain()
    print(json.dumps(c.read_json("pretrain.json"), indent=2, sort_keys=True))


def cmd_sample_size(args):
    for c in _campaign(args).stage_sample_size():
        flag = "" if c.converged else " (unconverged)"
        print(f"{c.label}: n={c.chosen_n} mean={c.mean:.4f} sem={c.curve[-1].sem:.5f}{flag}")


def cmd_select_ratio(args):
    fixture = json.loads(Path(args.stage_input).read_text()) if args.stage_input else None
    d = _campaign(args).stage_select_ratio(fixture)
    print(f"branch {d.branch}; candidate set {{{', '.join(d.candidates)}}}; selected {d.selected}")


def cmd_folds(args):
    f = _campaign(args).stage_folds()
    print(f"{f.k} folds of sizes {f.fold_sizes()}")
    for w in f.warnings:
        print(f"warning: {w}")


def cmd_lr_find(args):
    c = _campaign(args)
    res = c.stage_lr_find()
    print("lr finder diverged immediately" if res is None else f"suggested learning rate {res.suggested_lr:.3g}")


def cmd_sweep(args):
    config, results, _ = _campaign(args).stage_sweeps()
    if not results:
        print("no sweeps run")
    for r in results:
        print(f"{r.name}: winner {r.winner_setting.label} mean {r.winner_setting.mean:.4f} "
              f"increase {100 * r.increase:+.2f} points")


def cmd_freeze_sweep(args):
    curve = _campaign(args).stage_freeze_sweep()
    for i, p in enumerate(curve.points):
        print(f"{p.label:>30}  {p.mean:.4f}{'  <- best' if i == curve.best else ''}")


def cmd_augment_select(args):
    sel = _campaign(args).stage_augment_select()
    print(f"benchmark {sel.benchmark.mean:.4f}; included {', '.join(sel.included) or 'none'}; "
          f"final spec {sel.spec.label()}")


def cmd_train(args):
    c = _campaign(args)
    stage = args.stage
    if stage == "final" and c.has("augment_select.json"):
        cfg = c.tuned_config().with_(augment=AugmentSpec.from_dict(c.read_json("augment_select.json")["spec"]))
    elif c.has("sweeps.json"):
        cfg = c.tuned_config()
    else:
        cfg = TrainConfig.from_dict(args.cfg["base_config"])
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    if args.dry_run:
        return
    acc, cm = c.stage_benchmark() if stage == "benchmark" else c.stage_final()
    print(cm.to_text())
    print(f"{stage} test accuracy {acc:.4f}")


def cmd_evaluate(args):
    c = _campaign(args)
    ckpt = Path(args.stage_input) if args.stage_input else c.path("final.ckpt")
    if not ckpt.exists():
        raise MissingArtifactError(f"missing upstream artifact: {ckpt}")
    params = load_checkpoint(ckpt)
    acc, _, cm = evaluate(params, c.dataset, c.load_split().test_indices)
    c.write_json(f"evaluate_{ckpt.stem}.json", {"checkpoint": ckpt.name, "confusion": cm.to_json(),
                                                 "test_accuracy": acc})
    print(cm.to_text())


def cmd_report(args):
    c = _campaign(args)
    if args.stage_input:
        path = Path(args.stage_input)
    else:
        path = c.path("report.json")
        if not path.exists():
            c.stage_report()
    print(write_rendered(path, Path(args.out_dir)).read_text())


def cmd_run_all(args):
    report = _campaign(args).run_all()
    write_rendered(Path(args.out_dir) / "report.json", Path(args.out_dir))
    print(f"benchmark test accuracy {report['benchmark']['test_accuracy']:.4f}; "
          f"final {report['final']['test_accuracy']:.4f}; output in {args.out_dir}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the synthetic dataset(s) to <out>/data; --stage-input augments a copy"),
    "split": (cmd_split, "hold out the test split"),
    "pretrain": (cmd_pretrain, "train on the source task and save the initial weights"),
    "sample-size": (cmd_sample_size, "repeat pilot runs per candidate ratio until the SEM settles"),
    "select-ratio": (cmd_select_ratio, "pick the split ratio (--stage-input replays a recorded p-value trail)"),
    "folds": (cmd_folds, "build the k-fold partition of the non-test data"),
    "lr-find": (cmd_lr_find, "run the learning-rate range test on fold 0"),
    "sweep": (cmd_sweep, "one-at-a-time cross-validated parameter sweeps"),
    "freeze-sweep": (cmd_freeze_sweep, "cross-validated accuracy per unfrozen layer set"),
    "augment-select": (cmd_augment_select, "per-family magnitude search and final augmentation spec"),
    "train": (cmd_train, "echo the training config, then train and test the benchmark or final model"),
    "evaluate": (cmd_evaluate, "evaluate a checkpoint (--stage-input) on the test split"),
    "report": (cmd_report, "build report.json and render it to text and CSV"),
    "run-all": (cmd_run_all, "run every stage in order"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trainbench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="campaign config JSON, merged over the preset")
        s.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS))
        s.add_argument("--seed", type=int, help="override master_seed")
        s.add_argument("--out", help="output directory (default: config output_dir, then $TRAINBENCH_OUT)")
        s.add_argument("--parallelism", type=int, help="worker processes for fold training")
        s.add_argument("--stage-input", help="extra input file for the stage")
        if name == "train":
            s.add_argument("--stage", choices=("benchmark", "final"), default="final")
            s.add_argument("--dry-run", action="store_true", help="only echo the resolved training config")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors are validation errors in the exit-code contract
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        user = {}
        if args.config:
            user = json.loads(cfgmod.dumps(cfgmod.load_config(args.config, args.preset)))
        if args.seed is not None:
            user["master_seed"] = args.seed
        if args.parallelism is not None:
            if args.parallelism < 1:
                raise cfgmod.ConfigError("--parallelism must be >= 1")
            user["parallelism"] = args.parallelism
        args.cfg = cfgmod.build_config(user, args.preset)
        args.out_dir = Path(args.out or args.cfg.get("output_dir") or default_output_dir())
        args.parallelism = args.cfg["parallelism"]
        if args.stage_input and not Path(args.stage_input).exists():
            raise MissingArtifactError(f"missing stage input: {args.stage_input}")
        COMMANDS[args.command][0](args)
    except (cfgmod.ConfigError, MissingArtifactError, ArtifactMismatchError, ReportSchemaError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.__cause__
        if isinstance(cause, (MissingArtifactError, ArtifactMismatchError)):
            return EXIT_INVALID
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - anything else is an experiment failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
