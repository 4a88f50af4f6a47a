"""Train the desk MLP with and without Jacobian regularization.

Uses the bundled 5k MNIST subset (4000 train / 1000 test).  Pass a smaller
iteration count as the first argument for a quick look, e.g.
``python demos/train_and_compare.py 1500``.
"""

import sys

from jrlab import TrainConfig, build_model, load_mnist5k, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 15_000
train_set, test_set = load_mnist5k()
print(f"{len(train_set)} training and {len(test_set)} test images")

for lam in (0.0, 0.01):
    cfg = TrainConfig(lambda_jr=lam, total_iters=iters, quench_every=max(iters // 3, 1), log_every=max(iters // 5, 1))
    model, hist = train(build_model(cfg, train_set.width, 10), train_set, cfg, test_set)
    print(f"\nlambda_jr = {lam}")
    for t, loss, acc, jf in zip(hist.iteration, hist.loss, hist.test_acc, hist.jf_norm):
        print(f"  iter {t:>6d}  loss {loss:.4f}  test acc {acc:6.2f}%  ||J||_F {jf:.3f}")
