# A colored-glyph dataset where color almost always gives away the class.
import numpy as np

from mdn.data import DatasetConfig, make_bundle, summarize

cfg = DatasetConfig(kind="colored_glyphs", n_classes=3, n_bias=3, rho=0.99,
                    n_train=3000, n_test=600, noise=0.3, seed=0)
bundle = make_bundle(cfg)
print(summarize(bundle, cfg.rho))

# train counts per (class, color) cell: the diagonal dominates
print(bundle.groups.counts)
print("aligned cells\n", bundle.groups.aligned.astype(int))

# the test split is balanced, so every cell has roughly the same support
_, counts = np.unique(bundle.test.y * 3 + bundle.test.b, return_counts=True)
print("test cell counts", counts)

# the mean image of class 0 in its aligned and a conflicting color
X = bundle.train.X
for color in (0, 1):
    sel = (bundle.train.y == 0) & (bundle.train.b == color)
    if sel.any():
        img = X[sel].mean(0).reshape(3, 8, 8)
        print(f"class 0, color {color}: channel means", np.round(img.mean(axis=(1, 2)), 3))
