"""Command-line entry points: run experiments, compare reports, self-check.

``petcl run`` executes a preset or a config file, one full run per
class-order seed, writing ``<label>.seed<k>.report.json`` / ``.csv`` plus
the resolved ``<label>.config.json`` into the output directory.
``petcl compare`` aggregates report files by label into a ranking table.
``petcl verify`` runs the numerical self-checks and fails loudly if any
identity breaks.  ``petcl presets`` lists the bundled experiment grids.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

from .bench import (
    MetricsReport,
    aggregate_reports,
    prepare_backbone,
    run_dual_expert,
    run_naive_pet_baseline,
    run_seqft_baseline,
    split_tasks,
)
from .checkpoint import atomic_write_text
from .config import (
    ExperimentConfig,
    build_preset,
    preset_description,
    preset_names,
)
from .verify import run_checks

ABLATE_KEYS = ("learning", "accumulation", "ensemble", "calibration", "scales")
_TRUTHY = {"on": True, "true": True, "1": True,
           "off": False, "false": False, "0": False}


def parse_ablate(text: str) -> dict[str, bool]:
    """Parse ``learning=off,ensemble=on`` style feature switches."""
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        key, sep, value = item.partition("=")
        if not sep or key not in ABLATE_KEYS:
            raise ValueError(f"bad ablation switch {item!r}; keys: "
                             f"{', '.join(ABLATE_KEYS)}")
        if value.lower() not in _TRUTHY:
            raise ValueError(f"bad ablation value {value!r}; use on/off")
        out[key] = _TRUTHY[value.lower()]
    return out


def apply_ablations(cfg: ExperimentConfig, switches: dict[str, bool]) -> None:
    for key, value in switches.items():
        if key == "calibration":
            cfg.pet.prefix_compensate = value
        elif key == "scales":
            cfg.pet.prefix_scales = value
        else:
            setattr(cfg.flags, key, value)


class _BackboneCache:
    """One pretrained backbone per (model seed, data seed, shapes) tuple."""

    def __init__(self):
        self._cache = {}

    def get(self, cfg: ExperimentConfig, quiet: bool):
        bb_cfg = cfg.backbone_config()
        d = cfg.data
        key = (tuple(sorted(vars(bb_cfg).items())),
               cfg.seeds.data, d.pretext_classes, d.cl_classes,
               d.per_class_train, d.per_class_test, d.mean_scale, d.noise_std,
               d.pretrain_epochs, d.pretrain_lr, d.pretrain_batch)
        if key not in self._cache:
            if not quiet:
                print(f"pretraining backbone (model seed {cfg.seeds.model}, "
                      f"data seed {cfg.seeds.data}) ...", flush=True)
            backbone, cl_ds, acc = prepare_backbone(
                bb_cfg, cfg.seeds.data, d.pretext_classes, d.cl_classes,
                d.per_class_train, d.per_class_test, d.mean_scale, d.noise_std,
                d.pretrain_epochs, d.pretrain_lr, d.pretrain_batch)
            if not quiet:
                print(f"  pretext accuracy {acc:.3f}", flush=True)
            self._cache[key] = (backbone, cl_ds)
        return self._cache[key]


def run_experiment(cfg: ExperimentConfig, out_dir: str,
                   backbones: _BackboneCache | None = None,
                   checkpoints: bool = False, resume: bool = False,
                   quiet: bool = False) -> list[str]:
    """Execute one config over all its class-order seeds; returns report paths."""
    cfg.validate()
    backbones = backbones or _BackboneCache()
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, f"{cfg.label}.config.json"),
                      cfg.to_json())
    backbone, cl_ds = backbones.get(cfg, quiet)
    train_cfg = cfg.train_config()
    written = []
    for cs in cfg.seeds.class_orders:
        stream = split_tasks(cl_ds, cfg.split_spec(cs))
        seeds = {"model": cfg.seeds.model, "data": cfg.seeds.data,
                 "class_order": cs}
        ckpt_dir = os.path.join(out_dir, f"{cfg.label}.seed{cs}.ckpt") \
            if checkpoints else None
        if cfg.pipeline == "dual":
            report = run_dual_expert(backbone, stream, cfg.pet, train_cfg,
                                     cfg.flags, seeds, cfg.label,
                                     checkpoint_dir=ckpt_dir, resume=resume)
        elif cfg.pipeline == "naive":
            report = run_naive_pet_baseline(backbone, stream, cfg.pet,
                                            train_cfg, seeds, cfg.label)
        else:
            report = run_seqft_baseline(backbone, stream, train_cfg, seeds,
                                        cfg.label)
        base = os.path.join(out_dir, f"{cfg.label}.seed{cs}")
        atomic_write_text(base + ".report.json", report.to_json())
        atomic_write_text(base + ".csv", report.to_csv())
        written.append(base + ".report.json")
        if not quiet:
            print(f"{cfg.label} [order seed {cs}] final accuracy "
                  f"{report.final_a:.3f}, forgetting {report.forgetting:.3f}",
                  flush=True)
    return written


def _collect_reports(paths: list[str]) -> list[MetricsReport]:
    files = []
    for path in paths:
        if os.path.isdir(path):
            files.extend(sorted(glob.glob(os.path.join(path, "*.report.json"))))
        else:
            files.append(path)
    reports = []
    for path in files:
        with open(path, "r", encoding="utf-8") as fh:
            reports.append(MetricsReport.from_dict(json.load(fh)))
    return reports


def _format_table(rows: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for r, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i])
                               for i, cell in enumerate(row)).rstrip())
        if r == 0:
            lines.append("  ".join("-" * widths[i]
                                   for i in range(len(row))))
    return "\n".join(lines)


def cmd_run(args) -> int:
    if bool(args.preset) == bool(args.config):
        print("error: pass exactly one of --preset or --config", file=sys.stderr)
        return 2
    try:
        configs = build_preset(args.preset) if args.preset \
            else [ExperimentConfig.load(args.config)]
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    switches = {}
    if args.ablate:
        try:
            switches = parse_ablate(args.ablate)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2

    for cfg in configs:
        if args.seed is not None:
            cfg.seeds.model = args.seed
        if args.data_seed is not None:
            cfg.seeds.data = args.data_seed
        if args.class_orders:
            cfg.seeds.class_orders = [int(s) for s in args.class_orders.split(",")]
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
        if args.pet_size is not None:
            cfg.pet.size = args.pet_size
        if args.label:
            if len(configs) > 1:
                print("error: --label needs a single-config preset or file",
                      file=sys.stderr)
                return 2
            cfg.label = args.label
        apply_ablations(cfg, switches)

    out_dir = args.out or os.path.join("runs", args.preset or configs[0].label)
    backbones = _BackboneCache()
    try:
        for cfg in configs:
            run_experiment(cfg, out_dir, backbones,
                           checkpoints=args.checkpoints, resume=args.resume,
                           quiet=args.quiet)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        print(f"reports written to {out_dir}")
    return 0


def cmd_compare(args) -> int:
    try:
        reports = _collect_reports(args.paths)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not reports:
        print("error: no report files found", file=sys.stderr)
        return 2
    groups: dict[str, list[MetricsReport]] = {}
    for report in reports:
        groups.setdefault(report.label, []).append(report)
    try:
        aggregates = {label: aggregate_reports(rs) for label, rs in groups.items()}
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    ranked = sorted(aggregates.items(),
                    key=lambda kv: -kv[1]["final_a_pooled"]["mean"])
    rows = [["label", "runs", "final-acc", "avg-acc", "forgetting"]]
    csv_rows = ["label,runs,final_a_mean,final_a_std,avg_a_mean,avg_a_std,"
                "forgetting_mean,forgetting_std"]
    for label, agg in ranked:
        fin, avg, fgt = (agg["final_a_pooled"], agg["avg_a_pooled"],
                         agg["forgetting"])
        rows.append([label, str(agg["runs"]),
                     f"{fin['mean']:.3f}±{fin['std']:.3f}",
                     f"{avg['mean']:.3f}±{avg['std']:.3f}",
                     f"{fgt['mean']:.3f}±{fgt['std']:.3f}"])
        csv_rows.append(f"{label},{agg['runs']},{fin['mean']!r},{fin['std']!r},"
                        f"{avg['mean']!r},{avg['std']!r},"
                        f"{fgt['mean']!r},{fgt['std']!r}")
    print(_format_table(rows))
    if args.csv:
        atomic_write_text(args.csv, "\n".join(csv_rows) + "\n")
        print(f"table written to {args.csv}")
    return 0


def cmd_verify(args) -> int:
    results = run_checks(inject_lambda_bug=args.inject_lambda_bug)
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks FAILED")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_presets(args) -> int:
    for name in preset_names():
        configs = build_preset(name)
        print(f"{name:26s} {preset_description(name)} "
              f"({len(configs)} config{'s' if len(configs) != 1 else ''})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="petcl",
        description="Class-incremental learning with parameter-efficient "
                    "modules on a frozen transformer backbone.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a preset or config file")
    run.add_argument("--preset", help="named preset (see `petcl presets`)")
    run.add_argument("--config", help="path to a config JSON file")
    run.add_argument("--out", help="output directory (default runs/<name>)")
    run.add_argument("--label", help="override the run label (single config only)")
    run.add_argument("--seed", type=int, help="override seeds.model")
    run.add_argument("--data-seed", type=int, help="override seeds.data")
    run.add_argument("--class-orders",
                     help="comma-separated class-order seeds, e.g. 0,1,2")
    run.add_argument("--epochs", type=int, help="override train.epochs")
    run.add_argument("--pet-size", type=int, help="override pet.size")
    run.add_argument("--ablate",
                     help="feature switches, e.g. learning=off,ensemble=off "
                          "(keys: " + ", ".join(ABLATE_KEYS) + ")")
    run.add_argument("--checkpoints", action="store_true",
                     help="save learner state after every task")
    run.add_argument("--resume", action="store_true",
                     help="resume from saved checkpoints (with --checkpoints)")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(fn=cmd_run)

    compare = sub.add_parser("compare", help="rank report files by final accuracy")
    compare.add_argument("paths", nargs="+",
                         help="report files or directories containing them")
    compare.add_argument("--csv", help="also write the table as CSV")
    compare.set_defaults(fn=cmd_compare)

    verify = sub.add_parser("verify", help="run the numerical self-checks")
    verify.add_argument("--inject-lambda-bug", action="store_true",
                        help="deliberately miswire the gradient calibration "
                             "to prove the check catches it")
    verify.set_defaults(fn=cmd_verify)

    presets = sub.add_parser("presets", help="list bundled experiment presets")
    presets.set_defaults(fn=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
