"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or format
error, 4 numeric or domain error. Messages go to standard error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from .errors import ConfigError, DomainError, FormatError, NumericError, ValidationError
from .perturb import DEFAULT_LAMBDA, NoiseSpec, perturb_checkpoint
from .tensorstore import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse already exits 2; keep the prefix short
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v


def _overrides(args) -> dict[str, Any]:
    from .expbench.scenario import parse_value

    return {k: parse_value(v) for k, v in (args.set or [])}


def _scenario(args, extra: dict[str, Any] | None = None):
    from .expbench.scenario import load_scenario

    ov = _overrides(args)
    if getattr(args, "lam", None) is not None:
        ov["lambda"] = args.lam
    if getattr(args, "seed", None) is not None:
        ov["world_seed"] = args.seed
    ov.update(extra or {})
    return load_scenario(args.config, ov)


# --- subcommands --------------------------------------------------------------


def cmd_perturb(args) -> int:
    from .expbench.scenario import read_config

    d: dict[str, Any] = {"lambda": DEFAULT_LAMBDA, "seed": 0}
    if args.config is not None:
        d.update(read_config(args.config))
    d.update(_overrides(args))
    for key, attr in (("lambda", "lam"), ("seed", "seed"), ("distribution", "distribution"), ("scope", "scope")):
        if getattr(args, attr) is not None:
            d[key] = getattr(args, attr)
    if args.exclude:
        d["exclude"] = list(args.exclude)
    spec = NoiseSpec.from_dict(d)
    ckpt = load_checkpoint(args.input)
    out, report = perturb_checkpoint(ckpt, spec)
    out_path = Path(args.output)
    save_checkpoint(out, out_path)
    Path(f"{out_path}.report.json").write_text(report.to_json(), encoding="utf-8")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .expbench.studies import pretrain

    scenario = _scenario(args)
    save_checkpoint(pretrain(scenario), args.out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .expbench.studies import get_pretrained
    from .toymodel import params_to_checkpoint
    from .trainkit import finetune, method_from_dict

    scenario = _scenario(args)
    seed = args.run_seed
    method = {"vanilla": method_from_dict({"variant": "vanilla"}), "mixout": scenario.mixout, "recadam": scenario.recadam}[
        args.method
    ]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = load_checkpoint(args.init) if args.init else get_pretrained(scenario, out_dir / "cache")
    if not args.no_noise:
        start, report = perturb_checkpoint(start, NoiseSpec(scenario.lam, args.distribution, args.scope, scenario.exclude, seed))
        (out_dir / "perturb.report.json").write_text(report.to_json(), encoding="utf-8")
    train, eval_ = scenario.downstream_data(seed)
    params, traj = finetune(start, method, train, eval_, replace(scenario.finetune, seed=seed), scenario.model)
    save_checkpoint(params_to_checkpoint(params, {"kind": "finetuned", "seed": str(seed)}), out_dir / "finetuned.ntk")
    (out_dir / "trajectory.json").write_text(traj.to_json(), encoding="utf-8")
    (out_dir / "trajectory.csv").write_text(traj.to_csv(), encoding="utf-8")
    print(f"final accuracy {traj.final_accuracy:.4f} (start {traj.initial_accuracy:.4f})")
    return EXIT_OK


def cmd_study(args) -> int:
    from .expbench.studies import STUDIES, get_pretrained, run_study, write_study

    if args.study not in STUDIES:
        print(f"error: unknown study {args.study!r}; valid studies: {', '.join(STUDIES)}", file=sys.stderr)
        return EXIT_CONFIG
    scenario = _scenario(args)
    out_dir = Path(args.out)
    pretrained = get_pretrained(scenario, out_dir / "cache")
    table = run_study(args.study, scenario, pretrained=pretrained, jobs=args.jobs)
    run_dir = write_study(table, scenario, out_dir)
    print(table.render())
    print(f"wrote {run_dir}")
    failed = [k for k, ok in table.checks.items() if not ok]
    if failed:
        print(f"error: consistency checks failed: {failed}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(args) -> int:
    from .expbench.studies import load_tables

    run_dir = Path(args.run_dir)
    if not (run_dir / "manifest.json").is_file():
        raise FileNotFoundError(2, f"no manifest.json in {run_dir}", str(run_dir / "manifest.json"))
    try:
        tables = load_tables(run_dir)
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{run_dir}: malformed run directory ({exc})") from None
    print("\n\n".join(t.render() for t in tables))
    return EXIT_OK


# --- wiring -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ckptnoise", description="Perturb pretrained checkpoints and run finetuning studies.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, lam=True, jobs=False):
        sp.add_argument("--set", action="append", type=_kv, metavar="KEY=VALUE", help="dotted-key override, value parsed as JSON")
        sp.add_argument("--seed", type=int, default=None, help="world seed for scenario-based commands, noise seed for perturb")
        if lam:
            sp.add_argument("--lambda", dest="lam", type=float, default=None, help=f"noise intensity (default {DEFAULT_LAMBDA})")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")

    sp = sub.add_parser("perturb", help="add noise to a checkpoint")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--config", help="noise spec file (.toml or .json)")
    sp.add_argument("--distribution", choices=["uniform", "gaussian"])
    sp.add_argument("--scope", choices=["matrix", "global"])
    sp.add_argument("--exclude", action="append", metavar="PATTERN", help="tensor name pattern, * is the only wildcard")
    common(sp)
    sp.set_defaults(func=cmd_perturb)

    sp = sub.add_parser("pretrain", help="pretrain the toy model on the scenario corpus")
    sp.add_argument("config", nargs="?")
    sp.add_argument("--out", required=True, help="checkpoint path")
    common(sp, lam=False)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="finetune one seed, optionally from a perturbed start")
    sp.add_argument("config", nargs="?")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--init", help="starting checkpoint (default: pretrain from the scenario)")
    sp.add_argument("--run-seed", type=int, default=0, help="seed for data, data order and noise")
    sp.add_argument("--method", choices=["vanilla", "mixout", "recadam"], default="vanilla")
    sp.add_argument("--no-noise", action="store_true")
    sp.add_argument("--distribution", choices=["uniform", "gaussian"], default="uniform")
    sp.add_argument("--scope", choices=["matrix", "global"], default="matrix")
    common(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("study", help="run one comparison study")
    sp.add_argument("study")
    sp.add_argument("config", nargs="?")
    sp.add_argument("--out", default="runs", help="output directory (default: runs)")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("report", help="print the tables of a run directory")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DomainError, NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
