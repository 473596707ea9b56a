"""
Kinetic Lab command line.

Usage:
    python -m kinetic_lab.cli all --config config/scenario.yaml --out artifacts/desk
    python -m kinetic_lab.cli spectrum --config config/smoke.yaml --threads 4
    python -m kinetic_lab.cli report artifacts/desk

Exit codes: 0 success, 1 lab error, 2 invalid configuration.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from kinetic_lab.errors import LabError, ScenarioError
from kinetic_lab.pipeline import MODES, run_scenario
from kinetic_lab.report import emit_report
from kinetic_lab.scenario import load_scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_LAB_ERROR = 1
EXIT_INVALID_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kinetic-lab",
        description="Linearized hard-sphere Boltzmann experiments on a periodic box",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for mode in MODES:
        stage = sub.add_parser(mode, help=f"Run the {mode} pipeline")
        stage.add_argument("--config", type=Path, help="Scenario file (YAML or JSON)")
        stage.add_argument("--out", type=Path, help="Artifact directory (overrides output_dir)")
        stage.add_argument("--seed", type=int, help="Initial-data seed (overrides the config)")
        stage.add_argument("--threads", type=int, help="Parallel workers (overrides the config)")
        stage.add_argument("--delta", type=float, help="Gap width replacing the scanned one")
        stage.add_argument("--verbose", action="store_true", help="Debug logging")

    report = sub.add_parser("report", help="Render the markdown report of a finished run")
    report.add_argument("artifact_dir", type=Path, help="Directory written by a pipeline run")
    report.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main execution function."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.command == "report":
        try:
            print(emit_report(args.artifact_dir))
        except LabError as e:
            print(f"❌ {e}")
            return EXIT_LAB_ERROR
        return EXIT_OK

    try:
        scenario = load_scenario(
            args.config, seed=args.seed, threads=args.threads, delta_override=args.delta
        )
    except ScenarioError as e:
        print(f"❌ Invalid configuration: {'; '.join(e.problems)}")
        return EXIT_INVALID_CONFIG

    print(f"🔬 Running {args.command} (R={scenario.radius}, n={scenario.points_per_axis}, "
          f"eps={scenario.eps}, seed={scenario.seed})")
    try:
        out = run_scenario(scenario, args.command, args.out)
    except ScenarioError as e:
        print(f"❌ Invalid configuration: {'; '.join(e.problems)}")
        return EXIT_INVALID_CONFIG
    except LabError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return EXIT_LAB_ERROR

    print(f"✓ Artifacts written to {out}")
    print("✅ Done")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
