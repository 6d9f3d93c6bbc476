"""Command line entry point: generate, run, stats, explain, report.

Exit codes: 0 success, 1 validation error (bad input, config or usage), 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment as X
from . import models as M
from . import synthcohort as S
from .errors import ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1), keeping exit 2 for I/O failures."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _load_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError("config must be a JSON object")
    return cfg


def _experiment_config(args) -> X.ExperimentConfig:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.models:
        cfg["models"] = [m.strip() for m in args.models.split(",") if m.strip()]
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    if args.batch_size is not None:
        cfg["batch_size"] = args.batch_size
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    if getattr(args, "cohort", None):
        cfg["cohort"] = args.cohort
    try:
        return X.ExperimentConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    allowed = {"n_patients", "short_fraction", "seed"}
    if set(cfg) - allowed:
        raise ValidationError(f"generate accepts config keys {sorted(allowed)}")
    seed = args.seed if args.seed is not None else cfg.get("seed", 42)
    manifest = S.generate_cohort(cfg.get("n_patients", 116), cfg.get("short_fraction", 0.36), seed)
    path = S.write_cohort(manifest, args.out, jobs=args.jobs or 1)
    print(f"wrote {len(manifest.records)} patients to {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    result = X.run_experiment(cfg)
    X.save_result(result, args.out)
    X.export_reports(result, args.out)
    sys.stdout.write(X.metrics_csv(result))
    return EXIT_OK


def _result_or_none(out: str) -> X.ExperimentResult | None:
    path = Path(out) / X.RESULT_FILE
    return X.load_result(path) if path.exists() else None


def cmd_stats(args) -> int:
    result = _result_or_none(args.out)
    if args.cohort:
        manifest = S.load_cohort(args.cohort)
    elif result is not None:
        manifest = result.manifest
    else:
        raise ValidationError(f"no {X.RESULT_FILE} in {args.out} and no --cohort given")
    summary = S.cohort_summary(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cohort_summary.csv").write_text(summary.to_csv())
    print(summary.to_text())
    if result is not None and all(k.value in result.kinds() for k in M.ALL_KINDS):
        comps = X.compare_families(result)
        (out / "family_tests.json").write_text(json.dumps([c.to_dict() for c in comps], indent=1, sort_keys=True) + "\n")
        for c in comps:
            mw = c.mann_whitney
            print(f"{c.family.value} vs {c.baseline.value}: U={mw.statistic:.1f} p={mw.p_raw:.3g} "
                  f"p_bonferroni={mw.p_adjusted:.3g} delta={c.cliffs.statistic:.3f} ({c.cliffs.effect_band})")
    return EXIT_OK


def _need_result(out: str) -> X.ExperimentResult:
    result = _result_or_none(out)
    if result is None:
        raise FileNotFoundError(f"{Path(out) / X.RESULT_FILE} not found; run the experiment first")
    return result


def cmd_explain(args) -> int:
    result = _need_result(args.out)
    X.export_reports(result, args.out, sections=("explain",))
    dist = X.saliency_distances(result)
    if dist is not None:
        print(dist.to_json())
    sys.stdout.write(X.importance_csv(result))
    return EXIT_OK


def cmd_report(args) -> int:
    result = _need_result(args.out)
    files = X.export_reports(result, args.out)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pfsfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, experiment: bool):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, help="worker processes")
        if experiment:
            p.add_argument("--models", help="comma-separated model kinds")
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int, dest="batch_size")
            p.add_argument("--cohort", help="cohort directory written by 'generate' (default: generate in memory)")

    common(sub.add_parser("generate", help="write a synthetic cohort (manifest plus volumes)"), False)
    common(sub.add_parser("run", help="run the cross-validated benchmark and write all reports"), True)
    p = sub.add_parser("stats", help="cohort summary table and model-family tests")
    p.add_argument("--out", required=True, help="run directory (or destination when --cohort is given)")
    p.add_argument("--cohort", help="cohort directory")
    for name, help_ in (("explain", "saliency distances, overlays, projections, lab importance"),
                        ("report", "re-export every report from a saved run")):
        sub.add_parser(name, help=help_).add_argument("--out", required=True, help="run directory")
    return parser


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "stats": cmd_stats, "explain": cmd_explain,
            "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2 ** 64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
