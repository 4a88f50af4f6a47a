"""Decision cells around a test image in a random two-dimensional slice.

Each character is the predicted class at one grid point; the center is the
test image itself.  The regularized model usually keeps the center's class
over a wider region.
"""

import sys

from jrlab import TrainConfig, build_model, load_mnist5k, train
from jrlab.slices import decision_slice

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 15_000
train_set, test_set = load_mnist5k()
x = test_set.images[0]

for lam in (0.0, 0.01):
    cfg = TrainConfig(lambda_jr=lam, total_iters=iters, quench_every=max(iters // 3, 1), log_every=iters)
    model, _ = train(build_model(cfg, train_set.width, 10), train_set, cfg)
    sl = decision_slice(model, x, extent=30.0, resolution=31, seed=0)
    print(f"\nlambda_jr = {lam}: label {test_set.labels[0]}, boundary radius {sl.boundary_radius:.2f}")
    for row in sl.classes:
        print("  " + "".join(str(c) for c in row))
