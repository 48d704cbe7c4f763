"""Grow a synthetic artery/vein tree and compare its thinned centerline to the analytic one.

    python3 demos/01_phantom_and_centerlines.py
"""
import numpy as np

from pulmovessel import class_skeletons, default_spec, generate_tree
from pulmovessel.synthgen import segment_distance

# A phantom is a pair of binary trees (artery = 1, vein = 2) rasterized from
# capsules. Each generation splits in two inside a cone, with radii shrunk by
# radius_decay and lengths by length_decay.
spec = default_spec(seed=7, generations=3)
ph = generate_tree(spec)
print(f"volume {ph.labels.shape}, {len(ph.tubes)} tubes")
for cls, name in ((1, "artery"), (2, "vein")):
    print(f"  {name}: {(ph.labels.data == cls).sum()} voxels")

# The generator also knows where the true axes are, so a thinned skeleton can
# be checked voxel by voxel against the segments it came from.
skels = class_skeletons(ph.labels)
for cls, name in ((1, "artery"), (2, "vein")):
    pts = np.argwhere(skels[cls].data).astype(float)
    tubes = [t for t in ph.tubes if t.cls == cls]
    dist = np.min([segment_distance(pts, t.start, t.end) for t in tubes], axis=0)
    print(f"{name} skeleton: {len(pts)} voxels, median distance to axis {np.median(dist):.2f},"
          f" 95th percentile {np.percentile(dist, 95):.2f}")

# Near bifurcations the union of two tubes has its own medial axis, which is
# where the few larger distances come from.
