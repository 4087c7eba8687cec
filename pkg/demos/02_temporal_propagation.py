"""Carry a BEV feature map from one vehicle pose to the next.

A feature grid painted with a ramp is warped into the frame of a vehicle that
has driven forward and turned right, then warped back. Cells that stay in view
come back unchanged; cells that left the grid come back as zeros.

    python demos/02_temporal_propagation.py
"""
import math

import numpy as np

from bevlocate import encoder as enc
from bevlocate.geometry import BevGridSpec, Pose2

spec = BevGridSpec()
cell = spec.cell_size[0]
print(f"grid {spec.cells_l} x {spec.cells_w} cells of {cell:.3f} m, covering {spec.length:.3f} m")

rows, cols = np.meshgrid(np.arange(28.0), np.arange(28.0), indexing="ij")
ramp = np.stack([rows, cols])  # channel 0 = row index, channel 1 = col index

start = Pose2(500000.0, 4480000.0, 0.0)
# three cells north and a quarter turn clockwise
moved = Pose2(start.easting, start.northing + 3 * cell, math.pi / 2)

there, grid = enc.propagate_tensor(ramp, spec, start, moved)
back, _ = enc.propagate_tensor(there, spec, moved, start)

print("\nsource row index seen by the first 6 output cells of row 0:")
print(np.round(there[0, 0, :6], 3))
print("source col index seen by the same cells:")
print(np.round(there[1, 0, :6], 3))
print(f"\ncells still in view after the move: {int(grid.inside.sum())} of {28 * 28}")

kept = np.abs(back - ramp).max(axis=0) < 1e-9
print(f"cells reproduced exactly after the round trip: {int(kept.sum())}")
print(f"cells lost to the field of view:               {int((~kept).sum())}")
