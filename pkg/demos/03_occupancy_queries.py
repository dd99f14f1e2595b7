"""
Occupancy queries along the sensor rays
=======================================

Every sampled surface point spawns three queries: one just in front of the
surface (empty), one just behind it (occupied) and one somewhere on the line
of sight (empty). The decoder only ever sees these queries.
"""

import numpy as np

from xdistill.occupancy import BEHIND, FRONT, SIGHT, generate_queries, remove_ground, temporal_pairs
from xdistill.synthworld import DatasetConfig, generate_dataset

frames = list(generate_dataset(DatasetConfig(num_frames=4)))
pc = frames[0].cloud
qs = generate_queries(pc, delta=0.1, rng=np.random.default_rng(0))
print(f"{pc.num_points} points -> {qs.num_queries} queries "
      f"(front {np.sum(qs.kind == FRONT)}, behind {np.sum(qs.kind == BEHIND)}, sight {np.sum(qs.kind == SIGHT)})")

p = pc.xyz[qs.parent_index]
o = pc.sensor_origin
r_q = np.linalg.norm(qs.queries - o, axis=1)
r_p = np.linalg.norm(p - o, axis=1)
for kind, name in ((FRONT, "front"), (BEHIND, "behind"), (SIGHT, "sight")):
    m = qs.kind == kind
    print(f"  {name:6s}: label {qs.occupancy_label[m][0]}, range minus parent range "
          f"in [{(r_q - r_p)[m].min():+.3f}, {(r_q - r_p)[m].max():+.3f}] m")

# Temporal pairs: the same static surface seen from two nearby poses.
a, b = frames[0], frames[1]
tp = temporal_pairs(a, b, r_match=0.1)
print(f"\nground-free points: {remove_ground(a.cloud).num_points} and {remove_ground(b.cloud).num_points}; "
      f"{tp.num_pairs} matched within 0.1 m")
