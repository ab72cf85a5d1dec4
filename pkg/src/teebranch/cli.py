"""Command-line entry point: profile | search | train | attack | report.

Exit codes: 0 success, 1 usage/parse error, 2 empty feasible search space,
3 training divergence, 4 latency-oracle mismatch, 5 missing upstream
artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .experiment import (
    MissingArtifact,
    OracleMismatch,
    SpecError,
    cmd_attack,
    cmd_profile,
    cmd_report,
    cmd_search,
    cmd_train,
    load_experiment_spec,
    write_default_spec,
)
from .search import PoolExhausted
from .training import TrainingDiverged

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EMPTY_FRONT = 2
EXIT_DIVERGED = 3
EXIT_ORACLE_MISMATCH = 4
EXIT_MISSING_ARTIFACT = 5


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--spec", required=True, help="experiment spec YAML")
    parser.add_argument("--out", required=True, help="run output directory")
    parser.add_argument("--seed-override", type=int, default=None,
                        help="replace the search/train base seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teebranch",
        description="search, train, and attack-test enclave side-branch networks")
    parser.add_argument("--write-default-spec", metavar="DIR",
                        help="write a runnable spec template into DIR and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("profile", help="latency model report with oracle cross-check")
    _add_common(p)

    p = sub.add_parser("search", help="run the architecture search")
    _add_common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in the output directory")
    p.add_argument("--stop-after", type=int, default=None,
                   help="pause after this many optimization iterations")

    p = sub.add_parser("train", help="teacher, control, and poisoned training")
    _add_common(p)
    p.add_argument("--config", default=None,
                   help="configuration YAML (defaults to the search output)")
    p.add_argument("--sweep-lambdas", default=None,
                   help="comma-separated lambda values for a sweep run")

    p = sub.add_parser("attack", help="model-stealing suite against the victims")
    _add_common(p)

    p = sub.add_parser("report", help="consolidated summary for a run directory")
    p.add_argument("--out", required=True, help="run output directory")
    return parser


def _apply_seed_override(spec, seed: int | None):
    if seed is None:
        return spec
    search = dataclasses.replace(spec.search, seed=seed)
    train = dataclasses.replace(spec.train, seed=seed)
    attack = dataclasses.replace(
        spec.attack, seeds=tuple(seed + i for i in range(len(spec.attack.seeds))))
    return dataclasses.replace(spec, search=search, train=train, attack=attack)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.write_default_spec:
        path = write_default_spec(args.write_default_spec)
        print(f"wrote spec template to {path}")
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_ERROR

    try:
        if args.command == "report":
            summary = cmd_report(args.out)
            print((Path(args.out) / "summary.txt").read_text(), end="")
            if summary["missing_stages"]:
                return EXIT_MISSING_ARTIFACT
            return EXIT_OK

        spec = load_experiment_spec(args.spec)
        spec = _apply_seed_override(spec, args.seed_override)

        if args.command == "profile":
            report = cmd_profile(spec, args.out)
            print(f"profile report written to {report}")
        elif args.command == "search":
            result = cmd_search(spec, args.out, resume=args.resume,
                                stop_after_iterations=args.stop_after)
            if result.empty:
                print("search produced an empty front: no feasible configuration",
                      file=sys.stderr)
                return EXIT_EMPTY_FRONT
            best = result.best.objectives
            print(f"search done: {len(result.records)} evaluations, "
                  f"front size {len(result.front)}, selected accuracy {best.accuracy:.4f}"
                  f" latency {best.latency_ms:.4f} ms")
        elif args.command == "train":
            sweep = None
            if args.sweep_lambdas:
                sweep = tuple(float(v) for v in args.sweep_lambdas.split(","))
            out = cmd_train(spec, args.out, config_path=args.config, sweep_lambdas=sweep)
            control, poisoned = out["control"], out["poisoned"]
            print(f"train done: control combined {control.combined_acc[-1]:.4f}, "
                  f"poisoned combined {poisoned.combined_acc[-1]:.4f}, "
                  f"poisoned backbone {poisoned.backbone_acc[-1]:.4f}")
        elif args.command == "attack":
            reports = cmd_attack(spec, args.out)
            print(f"attack done: {len(reports)} reports written")
        return EXIT_OK
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except PoolExhausted as exc:
        print(f"search space exhausted: {exc}", file=sys.stderr)
        return EXIT_EMPTY_FRONT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OracleMismatch as exc:
        print(f"latency oracle mismatch: {exc}", file=sys.stderr)
        return EXIT_ORACLE_MISMATCH
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
