"""Accuracy under white noise and fooling distances for PGD and CW.

Trains a bare and a regularized model on the 5k MNIST subset, then prints
accuracy as the noise level grows and the median L2 distance each attack
needs to flip a prediction.  Curves are also written as CSV files.
"""

import sys

from jrlab import AttackConfig, TrainConfig, build_model, load_mnist5k, train
from jrlab.robust import accuracy_under_noise, fooling_distance_sweep

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 15_000
n_attack = 100
train_set, test_set = load_mnist5k()
sigmas = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]

for lam in (0.0, 0.01):
    cfg = TrainConfig(lambda_jr=lam, total_iters=iters, quench_every=max(iters // 3, 1), log_every=iters)
    model, _ = train(build_model(cfg, train_set.width, 10), train_set, cfg)
    noise = accuracy_under_noise(model, test_set, sigmas, seed=0)
    noise.to_csv(f"noise_lambda{lam:g}.csv")
    print(f"\nlambda_jr = {lam}")
    print("  noise sigma  " + "  ".join(f"{s:5.1f}" for s in sigmas))
    print("  accuracy %   " + "  ".join(f"{a:5.1f}" for a in noise.values))
    for kind in ("fgsm", "pgd", "cw"):
        curve = fooling_distance_sweep(model, test_set, AttackConfig(kind=kind), n_attack)
        curve.to_csv(f"{kind}_lambda{lam:g}.csv")
        print(f"  {kind:4s} median fooling distance {curve.median_distance():.3f}")
