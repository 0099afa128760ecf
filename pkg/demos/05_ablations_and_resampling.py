# Biased blobs: all five training modes side by side on a few seeds.
import numpy as np

from mdn.data import DatasetConfig, make_bundle
from mdn.meta import TrainConfig, train

modes = ["vanilla", "resample", "mdn", "mdn_no_mel", "mdn_no_msl"]
rows = {m: [] for m in modes}
for seed in range(3):
    bundle = make_bundle(DatasetConfig(kind="blobs", rho=0.99, n_train=5000, n_test=2000,
                                       bias_strength=3.0, seed=seed))
    for mode in modes:
        rep = train(TrainConfig(mode=mode, alpha=0.05, beta=100.0, epochs=30, seed=seed), bundle).best_test
        rows[mode].append([rep.unbiased_acc, rep.worst_group_acc, rep.eod, rep.spread])

print(f"{'mode':12s} unbiased  worst   EOD    spread")
for mode in modes:
    u, w, e, s = np.mean(rows[mode], axis=0)
    print(f"{mode:12s} {u:.3f}    {w:.3f}  {e:5.2f}  {s:.3f}")

# resampling fixes the counts but not the boundary, dropping the equalized
# outer loss weakens the worst group, and adding it straight to the model
# loss tends to leave a wider spread between groups
