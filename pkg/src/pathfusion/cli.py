"""Command-line interface.

Subcommands: synth, train-teacher, warmup-student, distill, evaluate,
gradcheck, cluster-export, report. Global flags: --config (JSON file with
optional "synth" and "run" sections), --seed, --out. Errors exit nonzero
with a machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    RunConfig,
    SynthConfig,
    load_config_file,
    run_config_from_dict,
    synth_config_from_dict,
)
from .ingest import AccessAudit, load_cohort, write_cohort
from .metrics import aggregate_reports
from .synth import generate_cohort
from . import pipeline

_STAGE_FILES = {"teacher": "teacher.ckpt", "warmup": "warmup.ckpt", "distilled": "distilled.ckpt"}
_SETTING_CKPT = {"unimodal": "warmup", "missing": "distilled", "multimodal": "teacher"}
_SETTING_NAMES = {"unimodal": "unimodal", "missing": "missing_modality", "multimodal": "multimodal"}


def _load_configs(args) -> tuple[SynthConfig, RunConfig]:
    data = load_config_file(args.config) if args.config else {}
    synth_cfg = synth_config_from_dict(data.get("synth", {}))
    run_cfg = run_config_from_dict(data.get("run", {}))
    if args.seed is not None:
        synth_cfg = dataclasses.replace(synth_cfg, seed=args.seed)
        run_cfg = dataclasses.replace(run_cfg, seed=args.seed)
    return synth_cfg, run_cfg


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _fold_dir(out: Path, fold: int) -> Path:
    return out / f"fold{fold}"


def cmd_synth(args) -> int:
    synth_cfg, _ = _load_configs(args)
    cohort = generate_cohort(synth_cfg)
    out = write_cohort(cohort, args.out)
    print(json.dumps({"written": str(out), "n_cases": len(cohort)}))
    return 0


def _train_stage(args, stage: str) -> int:
    _, run_cfg = _load_configs(args)
    out = Path(args.out)
    needs_genes = stage in ("teacher", "distilled")
    audit = AccessAudit()
    cohort = load_cohort(args.data, with_genes=needs_genes, audit=audit)
    results = {}
    for fold in range(run_cfg.n_folds):
        cfg = dataclasses.replace(run_cfg, fold_index=fold)
        if stage == "teacher":
            ckpt = pipeline.train_teacher(cohort, cfg, audit)
        elif stage == "warmup":
            ckpt = pipeline.warmup_student(cohort, cfg, audit)
        else:
            teacher = load_checkpoint(_fold_dir(out, fold) / _STAGE_FILES["teacher"])
            warmup = load_checkpoint(_fold_dir(out, fold) / _STAGE_FILES["warmup"])
            ckpt = pipeline.distill_student(cohort, teacher, warmup, cfg, audit)
        path = save_checkpoint(ckpt, _fold_dir(out, fold) / _STAGE_FILES[stage])
        results[f"fold{fold}"] = {
            "checkpoint": str(path),
            "final_val_metric": ckpt.train_log["val_metric"][-1],
            "best_val_metric": max(ckpt.train_log["val_metric"]),
        }
    (out / f"audit_{stage}.json").write_text(audit.to_json(), encoding="utf-8")
    print(json.dumps(results, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    _, run_cfg = _load_configs(args)
    out = Path(args.out)
    setting = _SETTING_NAMES[args.setting]
    needs_genes = args.setting == "multimodal"
    audit = AccessAudit()
    cohort = load_cohort(args.data, with_genes=needs_genes, audit=audit)
    reports = []
    for fold in range(run_cfg.n_folds):
        ckpt = load_checkpoint(_fold_dir(out, fold) / _STAGE_FILES[_SETTING_CKPT[args.setting]])
        report = pipeline.evaluate(ckpt, cohort, setting, audit)
        reports.append(report)
        _write_json(out / f"eval_{setting}_fold{fold}.json", report.to_dict())
    summary = aggregate_reports(reports)
    _write_json(out / f"eval_{setting}_summary.json", summary)
    (out / f"audit_eval_{setting}.json").write_text(audit.to_json(), encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    results = pipeline.gradcheck(args.module, args.epsilon)
    payload = {name: {"max_rel_err": err, "pass": err < 1e-4} for name, err in results.items()}
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def cmd_cluster_export(args) -> int:
    out = Path(args.out)
    _, run_cfg = _load_configs(args)
    audit = AccessAudit()
    cohort = load_cohort(args.data, with_genes=False, audit=audit)
    all_rows = []
    summaries = {}
    for fold in range(run_cfg.n_folds):
        ckpt = load_checkpoint(_fold_dir(out, fold) / _STAGE_FILES["distilled"])
        rows, summary = pipeline.cluster_export(ckpt, cohort, split=args.split)
        for row in rows:
            row["fold"] = fold
        all_rows.extend(rows)
        summaries[f"fold{fold}"] = summary
    csv_path = out / "cluster_assignments.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["fold", "case_id", "row", "col", "cluster", "label"])
        writer.writeheader()
        writer.writerows(all_rows)
    dices = [s["mean_dice"] for s in summaries.values()]
    recalls = [s["mean_recall"] for s in summaries.values()]
    overall = {
        "folds": summaries,
        "mean_dice": sum(dices) / len(dices),
        "mean_recall": sum(recalls) / len(recalls),
        "assignments_csv": str(csv_path),
    }
    _write_json(out / "cluster_summary.json", overall)
    print(json.dumps({"mean_dice": overall["mean_dice"], "mean_recall": overall["mean_recall"]}))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    rows = []
    summaries = []
    for path in sorted(out.glob("eval_*_summary.json")):
        with open(path, "r", encoding="utf-8") as fh:
            summary = json.load(fh)
        summaries.append(summary)
        for metric, stats in summary["metrics"].items():
            for fold, value in enumerate(stats["per_fold"]):
                rows.append(
                    {
                        "task": summary["task"],
                        "setting": summary["setting"],
                        "metric": metric,
                        "fold": fold,
                        "value": value,
                    }
                )
    if not summaries:
        raise FileNotFoundError(f"no eval_*_summary.json files under {out}")
    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["task", "setting", "metric", "fold", "value"])
        writer.writeheader()
        writer.writerows(rows)
    _write_json(out / "report.json", summaries)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4.5))
    labels, means, stds = [], [], []
    for summary in summaries:
        for metric, stats in summary["metrics"].items():
            labels.append(f"{summary['setting']}\n{metric}")
            means.append(stats["mean"])
            stds.append(stats["std"])
    ax.bar(range(len(labels)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=7, rotation=45, ha="right")
    ax.set_ylabel("metric (mean ± std across folds)")
    ax.set_title(f"{summaries[0]['task']} evaluation")
    fig.tight_layout()
    plot_path = out / "report.png"
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)
    print(json.dumps({"csv": str(csv_path), "json": str(out / 'report.json'), "plot": str(plot_path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathfusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=True):
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seeds")
        if data:
            p.add_argument("--data", type=str, required=True, help="cohort directory")
        if out:
            p.add_argument("--out", type=str, required=True, help="output directory")

    common(sub.add_parser("synth", help="write a synthetic cohort"))
    common(sub.add_parser("train-teacher", help="stage I teacher, all folds"), data=True)
    common(sub.add_parser("warmup-student", help="stage II warmup, all folds"), data=True)
    common(sub.add_parser("distill", help="stage II distillation, all folds"), data=True)
    p_eval = sub.add_parser("evaluate", help="evaluate checkpoints on held-out folds")
    common(p_eval, data=True)
    p_eval.add_argument("--setting", choices=list(_SETTING_CKPT), required=True)
    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p_grad.add_argument("--module", default="all")
    p_grad.add_argument("--epsilon", type=float, default=1e-5)
    p_export = sub.add_parser("cluster-export", help="per-patch cluster ids and subspace labels")
    common(p_export, data=True)
    p_export.add_argument("--split", choices=["test", "all"], default="test")
    p_report = sub.add_parser("report", help="aggregate fold metrics to CSV/JSON/plots")
    common(p_report)
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train-teacher": lambda a: _train_stage(a, "teacher"),
    "warmup-student": lambda a: _train_stage(a, "warmup"),
    "distill": lambda a: _train_stage(a, "distilled"),
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "cluster-export": cmd_cluster_export,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
