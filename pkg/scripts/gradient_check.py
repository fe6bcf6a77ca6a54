#!/usr/bin/env python3
"""Compare CNN backprop with central differences over every parameter.

    python3 scripts/gradient_check.py [--batch 3] [--seed 0] [--sample 0]

``--sample N`` checks only N random entries per tensor (0 = all).
"""

import argparse
import sys
import time

import numpy as np

from hivestate.cnn import CnnArchitecture, init_model
from hivestate.gradcheck import STEP, check_gradients


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sample", type=int, default=0)
    ap.add_argument("--step", type=float, default=STEP)
    ap.add_argument("--threshold", type=float, default=1e-4)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    model = init_model(CnnArchitecture(), (30, 20), seed=args.seed)
    x = rng.normal(size=(args.batch, 30, 20))
    labels = rng.integers(0, 2, args.batch).astype(float)

    t0 = time.perf_counter()
    res = check_gradients(model, x, labels, max_per_tensor=args.sample or None, rng=rng, step=args.step)
    for name, err in res.errors.items():
        print(f"{name:<10} {model.params[name].size:>7} params  rel error {err:.3e}")
    name, worst = res.worst
    print(f"checked {res.checked} entries in {time.perf_counter() - t0:.1f} s; worst {name} {worst:.3e}; "
          f"{res.shrunk} needed a smaller step, {res.unresolved} unresolved")
    return 0 if worst < args.threshold and not res.unresolved else 1


if __name__ == "__main__":
    sys.exit(main())
