"""Turn a phantom into a fake CT and run the preprocessing chain on it.

    python3 demos/04_preprocess_ct.py
"""
import numpy as np

from pulmovessel import ScalarVolume, default_spec, generate_tree, preprocess_case
from pulmovessel.volume import LabelVolume, VolumeGeometry

ph = generate_tree(default_spec(seed=1, generations=2))

# Lung parenchyma around -850 HU, contrast-filled vessels around +150 HU,
# soft tissue outside. Scanner spacing is coarser in z than the target grid.
rng = np.random.default_rng(1)
hu = np.where(ph.lung_mask.data > 0, -850.0, 40.0)
hu[ph.labels.data > 0] = 150.0
hu += rng.normal(0, 60, hu.shape)
hu[rng.random(hu.shape) < 1e-3] = 3000.0  # a few metal-like outliers
geom = VolumeGeometry(hu.shape, (0.9, 0.9, 1.25))
ct = ScalarVolume(hu, geom)
lung = LabelVolume(ph.lung_mask.data, geom)

res = preprocess_case(ct, lung)
for line in res.report_lines():
    print(line)
print(f"input range  {hu.min():8.1f} .. {hu.max():8.1f}")
print(f"output range {res.volume.data.min():8.1f} .. {res.volume.data.max():8.1f}")
