# Margin-shifted softmax and the meta equalized loss on a toy batch,
# followed by the finite-difference suites.
import numpy as np

from mdn import losses
from mdn.data import GroupTable
from mdn.gradcheck import run_all

# two classes, two bias values, four samples
logits = np.array([[2.0, 0.5], [1.5, 1.0], [0.2, 1.7], [0.4, 0.3]])
y = np.array([0, 0, 1, 1])
b = np.array([0, 1, 1, 0])

# with zero margins the marginal softmax loss is plain cross-entropy
m = np.zeros((2, 2))
print("CE  ", losses.ce_loss(logits, y).mean)
print("MSL ", losses.msl_loss(logits, y, b, m).mean)

# raising the margin of a conflicting cell (class 0, bias 1) lowers that
# sample's shifted logit, so its loss goes up and training pushes harder on it
m[0, 1] = 1.0
res = losses.msl_loss(logits, y, b, m)
print("per-sample MSL with m[0,1]=1:", np.round(res.losses, 4))

# aligned cells are the majority cell of each class in the training counts
groups = GroupTable(np.array([[900, 10], [12, 880]]))
value, gaps = losses.mel_loss(logits, y, b, groups)
print("MEL", round(value, 4), "per-class gaps", np.round(gaps, 4))

# every analytic gradient against central differences
for r in run_all(seed=0, instances=20, meta_instances=10):
    print(f"{r.name:15s} {r.max_rel_error:.2e}  tol {r.tolerance:.0e}")
