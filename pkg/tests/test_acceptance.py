"""Acceptance criteria 1-10 at their stated tolerances.

Each test records one PASS/FAIL line, printed in the terminal summary.  The
MNIST-scale tests use full MNIST when ``$JRLAB_DATA_DIR`` holds the IDX files
(5,000 training images drawn from it) and the bundled 5k subset otherwise.
"""

import time

import numpy as np
import pytest

from jrlab.checks import check_equivalence, check_gradients, random_tanh_mlp
from jrlab.data import find_mnist, load_mnist5k
from jrlab.jacreg import jacreg_estimate, jacreg_exact, estimator_stats
from jrlab.nn import ParamGrads
from jrlab.robust import AttackConfig, accuracy_under_noise, curve_from_distances, fooling_distances
from jrlab.slices import decision_slice
from jrlab.train import TrainConfig, build_model, evaluate, joint_loss_grads, sgd_step, subsample_per_class, train

pytestmark = pytest.mark.slow

SEEDS = range(5)
LAMBDA = 0.01
DESK = TrainConfig(hidden=(128, 64), total_iters=15000, quench_every=5000, batch_size=100, log_every=15000)
# shortened schedule for the three-method comparison
METHODS_SCHEDULE = dict(total_iters=3000, quench_every=1000, log_every=3000)
FEW_SHOT = dict(batch_size="full", eta0=0.01, quench_every=10**9, total_iters=2000, log_every=2000, n_eval_jac=0)
SLICE_EXTENT = 60.0


@pytest.fixture(scope="module")
def mnist():
    found = find_mnist()
    if found is not None:
        train_set, test_set = found
        return subsample_per_class(train_set, 500, seed=0), test_set.subset(np.arange(1000))
    return load_mnist5k()


@pytest.fixture(scope="module")
def desk_models(mnist):
    """Desk MLPs with and without the regularizer, five seeds each."""
    train_set, test_set = mnist
    t0 = time.perf_counter()
    models = {}
    for lam in (0.0, LAMBDA):
        for s in SEEDS:
            cfg = DESK.replace(lambda_jr=lam, seed=s)
            model, hist = train(build_model(cfg, train_set.width, 10), train_set, cfg, test_set)
            models[lam, s] = (model, hist.test_acc[-1], hist.jf_norm[-1])
    return models, time.perf_counter() - t0


# --- 1 ---------------------------------------------------------------------------------


def test_criterion_1_estimator_unbiased_with_root_n_error(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    ns = [10**2, 10**3, 10**4, 10**5]
    worst_z = 0.0
    sq_err = {n: [] for n in ns}
    for k in range(20):
        depth = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(3, 25, depth + 1)] + [int(rng.integers(2, 11))]
        model = random_tanh_mlp(dims, 100 + k)
        x = rng.standard_normal(dims[0])
        exact = jacreg_exact(model, x[None, :], with_grads=False).value
        X = np.repeat(x[None, :], ns[-1], axis=0)
        est = jacreg_estimate(model, X, 1, np.random.default_rng(500 + k), with_grads=False).per_sample
        first = est[: 10**4]
        worst_z = max(worst_z, abs(first.mean() - exact) / (first.std(ddof=1) / 100.0))
        for n in ns:
            # every disjoint block of size n contributes one error sample
            means = est.reshape(-1, n).mean(axis=1)
            sq_err[n].extend(((means - exact) / exact) ** 2)
    rms = [np.sqrt(np.mean(sq_err[n])) for n in ns]
    slope = np.polyfit(np.log10(ns), np.log10(rms), 1)[0]
    elapsed = time.perf_counter() - t0
    ok = worst_z < 3 and abs(slope + 0.5) <= 0.1 and elapsed < 120
    record(1, ok, f"worst |mean-exact| {worst_z:.2f} SE (<3), error slope {slope:.3f} (-0.5+-0.1), {elapsed:.0f}s (<120s)")
    assert worst_z < 3
    assert abs(slope + 0.5) <= 0.1
    assert elapsed < 120


# --- 2 ---------------------------------------------------------------------------------


def test_criterion_2_variance_bound(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_margin, worst_z, n_cases = np.inf, 0.0, 0
    for C in (2, 5, 10, 50):
        for k in range(50):
            width = int(rng.integers(1, 2 * C + 1))
            if k == 0:
                J = np.outer(rng.standard_normal(C), rng.standard_normal(width))
            else:
                J = rng.standard_normal((C, width)) * rng.uniform(0.05, 3.0, (C, 1)) ** 2
            st = estimator_stats(J, 20_000, rng)
            mc_err = st.relative_variance_se
            worst_margin = min(worst_margin, st.bound + 3 * mc_err - st.relative_variance)
            worst_z = max(worst_z, abs(st.variance - st.closed_form_variance) / st.variance_se)
            n_cases += 1
    st = estimator_stats(np.diag([1.0, 0.0]), 20_000, rng)
    saturated = st.closed_form_variance / st.exact_value**2
    mc_ok = abs(st.relative_variance - 0.5) <= 3 * st.relative_variance_se
    elapsed = time.perf_counter() - t0
    ok = worst_margin >= 0 and worst_z < 5 and abs(saturated - 0.5) < 1e-12 and mc_ok and elapsed < 60
    record(
        2, ok,
        f"{n_cases} Jacobians, min bound margin {worst_margin:.4f} (>=0), closed form off by <= {worst_z:.2f} SE (<5), "
        f"rank-1 C=2 ratio {saturated:.3f} / MC {st.relative_variance:.3f} (0.5), {elapsed:.0f}s (<60s)",
    )
    assert worst_margin >= 0
    assert worst_z < 5
    assert saturated == pytest.approx(0.5, abs=1e-12)
    assert mc_ok
    assert elapsed < 60


# --- 3, 4 ------------------------------------------------------------------------------


def test_criterion_3_cyclopropagation_equivalence(record):
    t0 = time.perf_counter()
    value, grads = check_equivalence(n_models=20, seed=3)
    elapsed = time.perf_counter() - t0
    ok = value.passed and grads.passed and elapsed < 60
    record(3, ok, f"value rel err {value.measured:.2e} (<1e-10), grad abs err {grads.measured:.2e} (<1e-8), {elapsed:.1f}s")
    assert value.passed and grads.passed and elapsed < 60


def test_criterion_4_gradients_match_finite_differences(record):
    t0 = time.perf_counter()
    results = [r for seed in range(3) for r in check_gradients(seed=seed)]
    elapsed = time.perf_counter() - t0
    worst = max(r.measured for r in results)
    ok = all(r.passed for r in results) and elapsed < 120
    record(4, ok, f"{len(results)} gradient checks, worst rel err {worst:.2e} (<1e-5), {elapsed:.1f}s")
    for r in results:
        assert r.passed, r.line()
    assert elapsed < 120


# --- 5 ---------------------------------------------------------------------------------


def test_criterion_5_exact_and_projection_methods_agree(mnist, record):
    train_set, test_set = mnist
    t0 = time.perf_counter()
    acc = {m: [] for m in ("exact", 1, 3)}
    logjf = {m: [] for m in acc}
    for s in SEEDS:
        for m in acc:
            cfg = DESK.replace(lambda_jr=LAMBDA, n_proj=m, seed=s, **METHODS_SCHEDULE)
            _, hist = train(build_model(cfg, train_set.width, 10), train_set, cfg, test_set)
            acc[m].append(hist.test_acc[-1])
            logjf[m].append(np.log10(hist.jf_norm[-1]))
    elapsed = time.perf_counter() - t0
    mean_acc = [np.mean(v) for v in acc.values()]
    mean_jf = [np.mean(v) for v in logjf.values()]
    acc_spread = max(mean_acc) - min(mean_acc)
    jf_spread = max(mean_jf) - min(mean_jf)
    ok = acc_spread < 1.0 and jf_spread < 0.15 and elapsed < 20 * 60
    detail = ", ".join(f"{m}: {a:.2f}% log10J {j:.3f}" for m, a, j in zip(acc, mean_acc, mean_jf))
    record(5, ok, f"acc spread {acc_spread:.2f}pp (<1), log10 J spread {jf_spread:.3f} (<0.15) [{detail}], {elapsed / 60:.1f} min")
    assert acc_spread < 1.0
    assert jf_spread < 0.15
    assert elapsed < 20 * 60


# --- 6 ---------------------------------------------------------------------------------


def test_criterion_6_jacobian_shrinks_and_few_shot_ordering(mnist, desk_models, record):
    train_set, test_set = mnist
    models, desk_time = desk_models
    t0 = time.perf_counter()
    jf0 = np.mean([models[0.0, s][2] for s in SEEDS])
    jf1 = np.mean([models[LAMBDA, s][2] for s in SEEDS])
    acc0 = np.mean([models[0.0, s][1] for s in SEEDS])
    acc1 = np.mean([models[LAMBDA, s][1] for s in SEEDS])
    ratio, drop = jf0 / jf1, acc0 - acc1

    combined = dict(lambda_jr=LAMBDA, lambda_wd=5e-4, dropout_rate=0.5)
    few = {}
    for k in (1, 3, 10, 30):
        means = []
        for extra in ({}, combined):
            accs = []
            for s in SEEDS:
                cfg = DESK.replace(seed=s, samples_per_class=k, **FEW_SHOT, **extra)
                model, _ = train(build_model(cfg, train_set.width, 10), train_set, cfg)
                accs.append(evaluate(model, test_set, 0)[0])
            means.append(np.mean(accs))
        few[k] = means
    elapsed = desk_time + time.perf_counter() - t0
    ordered = all(c >= n for n, c in few.values())
    ok = ratio >= 10 and drop <= 1.5 and ordered and elapsed < 30 * 60
    shots = ", ".join(f"k={k}: {n:.1f}%->{c:.1f}%" for k, (n, c) in few.items())
    record(
        6, ok,
        f"||J||_F {jf0:.2f} -> {jf1:.2f} ({ratio:.1f}x, need >=10x), acc {acc0:.2f}% -> {acc1:.2f}% "
        f"(drop {drop:.2f}pp, <=1.5), few-shot none->combined [{shots}], {elapsed / 60:.1f} min",
    )
    assert ratio >= 10
    assert drop <= 1.5
    assert ordered
    assert elapsed < 30 * 60


# --- 7 ---------------------------------------------------------------------------------


def test_criterion_7_regularized_curves_lie_above(mnist, desk_models, record):
    _, test_set = mnist
    models, desk_time = desk_models
    t0 = time.perf_counter()
    sigmas = [0.3, 0.4, 0.5, 0.6, 0.8, 1.0]
    noise = {lam: [] for lam in (0.0, LAMBDA)}
    dist = {(kind, lam): [] for kind in ("pgd", "cw") for lam in (0.0, LAMBDA)}
    for lam in (0.0, LAMBDA):
        for s in SEEDS:
            model = models[lam, s][0]
            noise[lam].append(accuracy_under_noise(model, test_set, sigmas, seed=s).values)
            for kind in ("pgd", "cw"):
                dist[kind, lam].append(fooling_distances(model, test_set, AttackConfig(kind=kind, seed=s), 200))
    noise_gap = np.mean(noise[LAMBDA], axis=0) - np.mean(noise[0.0], axis=0)
    gaps, cw_medians = {}, {}
    for kind in ("pgd", "cw"):
        finite = np.concatenate([d[np.isfinite(d)] for lam in (0.0, LAMBDA) for d in dist[kind, lam]])
        grid = np.linspace(0.0, finite.max(), 201)
        mean_acc = {
            lam: np.mean([100.0 - curve_from_distances(kind, d, grid=grid).values for d in dist[kind, lam]], axis=0)
            for lam in (0.0, LAMBDA)
        }
        gaps[kind] = float(np.mean(mean_acc[LAMBDA] - mean_acc[0.0]))
    for lam in (0.0, LAMBDA):
        cw_medians[lam] = [curve_from_distances("cw", d).median_distance() for d in dist["cw", lam]]
    cw_larger = all(b > a for a, b in zip(cw_medians[0.0], cw_medians[LAMBDA]))
    elapsed = desk_time + time.perf_counter() - t0
    ok = np.all(noise_gap > 0) and gaps["pgd"] > 0 and gaps["cw"] > 0 and cw_larger and elapsed < 30 * 60
    record(
        7, ok,
        f"noise gaps {np.round(noise_gap, 1).tolist()}pp, mean curve gap pgd {gaps['pgd']:.2f}pp cw {gaps['cw']:.2f}pp, "
        f"cw medians {np.round(cw_medians[0.0], 3).tolist()} -> {np.round(cw_medians[LAMBDA], 3).tolist()}, "
        f"{elapsed / 60:.1f} min",
    )
    assert np.all(noise_gap > 0)
    assert gaps["pgd"] > 0 and gaps["cw"] > 0
    assert cw_larger
    assert elapsed < 30 * 60


# --- 8 ---------------------------------------------------------------------------------


def test_criterion_8_attack_strength_ordering(mnist, desk_models, record):
    _, test_set = mnist
    models, _ = desk_models
    lines, ok = [], True
    for lam in (0.0, LAMBDA):
        model = models[lam, 0][0]
        med = {}
        for kind in ("cw", "pgd", "fgsm", "white"):
            d = fooling_distances(model, test_set, AttackConfig(kind=kind), 100)
            med[kind] = curve_from_distances(kind, d).median_distance()
        good = med["cw"] <= med["pgd"] <= med["fgsm"] <= med["white"]
        ok &= good
        lines.append(f"lambda {lam:g}: " + " <= ".join(f"{k} {v:.3f}" for k, v in med.items()))
    record(8, ok, "; ".join(lines))
    assert ok


# --- 9 ---------------------------------------------------------------------------------


def _step_time(model, X, y, cfg, velocity, proj_rng, n):
    t0 = time.perf_counter()
    for _ in range(n):
        _, _, g = joint_loss_grads(model, X, y, cfg, proj_rng=proj_rng)
        sgd_step(model, velocity, g, 1e-6, cfg.momentum, cfg.lambda_wd)
    return (time.perf_counter() - t0) / n


def test_criterion_9_overhead(mnist, record):
    train_set, _ = mnist
    X, y = train_set.inputs[:100], train_set.labels[:100]
    bare, reg = DESK, DESK.replace(lambda_jr=LAMBDA)
    model = build_model(DESK, train_set.width, 10)
    velocity = ParamGrads.zeros_like(model)
    rng = np.random.default_rng(0)
    ratios = []
    for _ in range(9):
        tb = _step_time(model, X, y, bare, velocity, rng, 20)
        tr = _step_time(model, X, y, reg, velocity, rng, 20)
        ratios.append(tr / tb)
    ratio = float(np.median(ratios))

    Cs = [10, 100, 1000]
    Xs = np.random.default_rng(1).standard_normal((8, 784))
    costs = []
    for C in Cs:
        net = random_tanh_mlp([784, 128, 64, C], C)
        jacreg_exact(net, Xs)
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            jacreg_exact(net, Xs)
            times.append(time.perf_counter() - t0)
        costs.append(np.median(times))
    slope = np.polyfit(np.log10(Cs), np.log10(costs), 1)[0]
    ok = ratio <= 2.5 and 0.8 <= slope <= 1.2
    record(9, ok, f"step ratio n_proj=1 / bare {ratio:.2f}x (<=2.5), exact cost vs C log-log slope {slope:.2f} (0.8-1.2)")
    assert ratio <= 2.5
    assert 0.8 <= slope <= 1.2


# --- 10 --------------------------------------------------------------------------------


def test_criterion_10_decision_cells_grow(mnist, desk_models, record):
    _, test_set = mnist
    models, _ = desk_models
    means = {}
    censored = 0
    for lam in (0.0, LAMBDA):
        per_seed = []
        for s in SEEDS:
            model = models[lam, s][0]
            radii = [
                decision_slice(model, test_set.images[i], extent=SLICE_EXTENT, resolution=3, seed=i).boundary_radius
                for i in range(20)
            ]
            censored += sum(r >= SLICE_EXTENT for r in radii)
            per_seed.append(np.mean(radii))
        means[lam] = float(np.mean(per_seed))
    ok = means[LAMBDA] > means[0.0]
    record(
        10, ok,
        f"mean boundary radius {means[0.0]:.3f} -> {means[LAMBDA]:.3f} (extent {SLICE_EXTENT:g}, {censored} censored rays-min)",
    )
    assert ok
