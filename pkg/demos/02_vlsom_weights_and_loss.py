"""Centerline-weighted losses on a phantom: how much does a missed centerline cost?

    python3 demos/02_vlsom_weights_and_loss.py
"""
import numpy as np

from pulmovessel import ProbVolume, WeightConfig, class_skeletons, composite_loss, default_spec, generate_tree
from pulmovessel.vlsom import build_weight_map

ph = generate_tree(default_spec(seed=0, generations=2))
gt, lung = ph.labels, ph.lung_mask
skels = class_skeletons(gt)

# Vessel voxels get weight 3, their centerlines 15, everything else 1.
w = build_weight_map(gt, skels, lung, kind="cldice")
values, counts = np.unique(w.data, return_counts=True)
print("weight histogram:", dict(zip(values.tolist(), counts.tolist())))

cfg = WeightConfig()


def report(title, prob):
    total, _, br = composite_loss(ProbVolume(prob, gt.geometry), gt, skels, lung, cfg)
    print(f"{title:<28} ce={br['ce']:.4f} dice={br['dice']:.4f} cldice={br['cldice']:.4f} total={total:.4f}")


onehot = np.eye(3)[gt.data]
report("perfect prediction", onehot)

# Soften the prediction everywhere. Dice suffers most, because the leaked
# probability over the large background adds to every class's soft volume.
soft = 0.8 * onehot + 0.2 / 3
report("uniformly softened", soft)

# Erase the same number of vessel voxels twice, once on the centerline and
# once on the wall. The weighted loss notices the centerline damage more.
rng = np.random.default_rng(0)
vessel = gt.data > 0
on_axis = np.argwhere((skels[1].data | skels[2].data) != 0)
off_axis = np.argwhere(vessel & ((skels[1].data | skels[2].data) == 0))
k = len(on_axis) // 2
for title, pts in (("centerline voxels missed", on_axis[rng.choice(len(on_axis), k, replace=False)]),
                   ("wall voxels missed", off_axis[rng.choice(len(off_axis), k, replace=False)])):
    p = onehot.copy()
    p[tuple(pts.T)] = (1.0, 0.0, 0.0)
    report(title, p)
