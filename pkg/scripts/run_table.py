"""Re-run one table: stress test for table1, detection grid otherwise.

    python3 scripts/run_table.py table4 [--set eval.n_eval=100 ...]
"""

import argparse
import sys
from pathlib import Path

from aegis import cli

CONFIGS = Path(__file__).resolve().parent / "configs"


def main():
    p = argparse.ArgumentParser()
    p.add_argument("table", choices=sorted(c.stem for c in CONFIGS.glob("*.yaml")))
    p.add_argument("--set", action="append", default=[])
    args = p.parse_args()
    command = "stress-test" if args.table == "table1" else "evaluate"
    argv = [command, "--config", str(CONFIGS / f"{args.table}.yaml")]
    for s in args.set:
        argv += ["--set", s]
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())
