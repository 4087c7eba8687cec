"""Train the miniature encoder + renderer on a single sample until it memorizes it.

Memorizing one sample is the quickest end-to-end check that the forward pass,
every hand-written backward pass and the optimizer agree with each other.

    python demos/03_overfit_miniature.py [--steps 500] [--optimizer adam]
"""
import argparse
import time

import numpy as np

from bevlocate.dataset import synth_raster
from bevlocate.geometry import Pose2
from bevlocate.gradcheck import miniature_window
from bevlocate.mapstore import label_for_pose
from bevlocate.model import BevModel
from bevlocate.training import TrainConfig, overfit_demo


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--optimizer", choices=("sgd", "momentum", "adam"), default="adam")
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = BevModel.miniature(seed=args.seed, dtype=np.float64, offset_scale=0.05)
    counts = model.parameter_counts()
    print(f"miniature model: {counts['encoder']:,} encoder + {counts['renderer']:,} renderer parameters")

    # a three-frame window of random camera images and a 64 px map crop to reproduce
    frames = miniature_window(model, np.random.default_rng(args.seed + 100))
    raster = synth_raster(args.seed, 40.0)
    centre = Pose2(raster.geo.origin_easting + 20.0, raster.geo.origin_northing - 20.0, 0.4)
    label = label_for_pose(raster, centre, 64)

    t0 = time.perf_counter()
    cfg = TrainConfig(lr=args.lr, optimizer=args.optimizer, seed=args.seed)
    losses = overfit_demo(model, frames, label, cfg, steps=args.steps)
    for step in range(0, args.steps, max(args.steps // 10, 1)):
        print(f"step {step:4d}  loss {losses[step]:.6f}")
    print(f"final loss {losses[-1]:.6f} = {100 * losses[-1] / losses[0]:.1f}% of initial "
          f"({time.perf_counter() - t0:.1f} s)")


if __name__ == "__main__":
    main()
