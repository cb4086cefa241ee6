"""Standard-loss excess variance against the target sample size N.

Prints a CSV (n_target, mean_squared_residual, exact_loss, excess, predicted)
for a fixed network and ball of the 2-D Poisson residual; the excess should
track V[g] / N.
"""

import argparse
import csv
import sys

import numpy as np

from intpinn.streams import stream
from intpinn.suites import bias_fixtures


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--fixture", type=int, default=0, choices=range(len(bias_fixtures())))
    args = p.parse_args(argv)
    fx = bias_fixtures()[args.fixture]
    loss, v_g = fx.exact()
    w = csv.writer(sys.stdout)
    w.writerow(["n_target", "mean_squared_residual", "exact_loss", "excess", "predicted"])
    for n in (1, 2, 4, 8, 16, 32, 64, 128):
        r2 = fx.residuals(n, args.draws, stream(n, "curve")) ** 2
        w.writerow([n, repr(float(r2.mean())), repr(loss), repr(float(r2.mean() - loss)), repr(v_g / n)])


if __name__ == "__main__":
    main()
