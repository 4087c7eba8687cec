"""Compare every hand-written backward pass with central finite differences.

Each row probes one operation along random directions in float64; the last
two rows push gradients through the whole miniature encoder and renderer.

    python demos/04_gradient_checks.py [--seed 0]
"""
import argparse

from bevlocate.gradcheck import format_table, run_composed_checks, run_op_checks

ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

results = run_op_checks(args.seed) + run_composed_checks(args.seed)
print(format_table(results))
print(f"\n{sum(r.passed for r in results)}/{len(results)} checks passed")
