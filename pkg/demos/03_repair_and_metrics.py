"""Corrupt a phantom like a network would, then repair it and score both versions.

    python3 demos/03_repair_and_metrics.py
"""
from pulmovessel import RepairConfig, default_spec, evaluate, generate_tree, repair
from pulmovessel.synthgen import perturb_labels

ph = generate_tree(default_spec(seed=0, generations=2))

# The surrogate prediction swaps artery and vein inside a few small balls and
# adds a blob outside the lung. Both are typical segmentation failure modes.
pred = perturb_labels(ph, seed=3, n_swaps=4, n_outliers=2)
before = evaluate(pred, ph.labels, "noisy")

fixed, log = repair(pred, ph.lung_mask, RepairConfig(size_threshold=800))
after = evaluate(fixed, ph.labels, "repaired")

print("repair log:")
for line in log.lines():
    print("  " + line)

print(f"\n{'':10}{'metric':<10}{'noisy':>8}{'repaired':>10}")
for name in ("artery", "vein"):
    for metric in ("dice", "recall", "cl_dice", "cl_recall"):
        a = getattr(before.classes[name], metric)
        b = getattr(after.classes[name], metric)
        print(f"{name:10}{metric:<10}{a:8.4f}{b:10.4f}")
