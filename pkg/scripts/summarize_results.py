#!/usr/bin/env python3
"""Print a table of mean test AUCs from a results directory written by ``hivestate run``."""

import json
import sys
from pathlib import Path


def main(results_dir: str = "results") -> int:
    rows = {}
    for path in sorted(Path(results_dir).glob("*.json")):
        data = json.loads(path.read_text())
        rows.setdefault(data["experiment"], {})[data["scheme"]] = data["mean_test_auc"]
    if not rows:
        print(f"no results in {results_dir}", file=sys.stderr)
        return 2
    print(f"{'experiment':<24} {'random':>8} {'hive-independent':>17}")
    for name, by_scheme in rows.items():
        cells = [by_scheme.get(s) for s in ("random", "hive-independent")]
        print(f"{name:<24} " + " ".join(f"{'-' if c is None else f'{c:.3f}':>{w}}" for c, w in zip(cells, (8, 17))))
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
