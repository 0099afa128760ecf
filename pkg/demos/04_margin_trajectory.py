# How the margins move during training. Conflicting cells have far fewer
# samples and end up with the larger margins.
import numpy as np

from mdn.data import DatasetConfig, make_bundle
from mdn.meta import TrainConfig, train

bundle = make_bundle(DatasetConfig(kind="colored_glyphs", rho=0.999, n_train=10000,
                                   n_test=1000, noise=0.3, seed=1))
res = train(TrainConfig(mode="mdn", alpha=0.1, beta=5.0, epochs=10, seed=1), bundle)

traj = np.array([h["margins"] for h in res.state.history])
print("iterations", len(traj))
for t in np.linspace(0, len(traj) - 1, 6).astype(int):
    print(f"step {t + 1:5d}", np.round(traj[t].ravel(), 3))

print("counts\n", bundle.groups.counts)
print("margins at the best epoch\n", np.round(res.best_margins, 3))
