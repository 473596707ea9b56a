#!/usr/bin/env python3
"""
Kinetic Lab Runner

Runs a scenario pipeline or renders the report of a finished run.

Usage:
    python scripts/run_lab.py all --config config/scenario.yaml [--out DIR] [--seed N] [--threads N]
    python scripts/run_lab.py report DIR

Configuration: YAML or JSON scenario file; flags override file values.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from kinetic_lab.cli import main  # noqa: E402

if __name__ == '__main__':
    sys.exit(main())
