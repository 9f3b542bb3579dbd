"""Walk a synthetic room from raw points to the four scan orders the SSM sees."""

import numpy as np

from meepo.pointcloud import SceneSpec, generate_scene, grid_pool, morton_decode, voxelize
from meepo.ssm import direction_order

pc = generate_scene(seed=3, spec=SceneSpec(num_points=4000))
print(f"{len(pc)} points, {pc.num_channels} feature channels, labels {np.unique(pc.labels)}")

# Voxelize at 10 cm. Rows come back sorted by Morton key, so neighbours in
# the list tend to be neighbours in space.
v = voxelize(pc, 0.1)
print(f"{len(v)} voxels; first keys {v.keys[:8]}")
assert np.array_equal(morton_decode(v.keys), v.coords)

steps = np.abs(np.diff(v.coords, axis=0)).sum(axis=1)
print(f"median L1 hop between consecutive voxels: {np.median(steps):.0f} cells")

# Each coarser level doubles the cell edge; occupied cells drop several-fold.
level = v
for s in range(3):
    level, pmap = grid_pool(level, 2)
    print(f"pool level {s + 1}: {pmap.num_fine} -> {pmap.num_coarse} voxels")

# The four visiting orders over the first 8 serialized voxels.
for d in ("forward", "backward", "strided_forward", "strided_backward"):
    print(f"{d:>17}: {direction_order(8, d, 2)}")
