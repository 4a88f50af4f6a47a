"""Property suites run by ``jrlab check``.

Each suite returns :class:`CheckResult` rows with the measured value next to
its tolerance.  Sizes are kept small so the whole report takes seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .jacreg import (
    cyclopropagation,
    estimator_stats,
    jacreg_estimate,
    jacreg_exact,
)
from .nn import Mlp, backprop_params, forward, softmax_cross_entropy, xavier_init
from .train import TrainConfig, joint_loss_grads


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    details: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: measured {self.measured:.3e} (tolerance {self.tolerance:.1e})"


def random_tanh_mlp(dims, seed, bias_scale=0.3) -> Mlp:
    """Xavier weights plus random biases so no layer sits at tanh(0)."""
    model = xavier_init(dims, "tanh", seed=seed)
    rng = np.random.default_rng(seed + 10_000)
    for layer in model.layers:
        layer.b[:] = bias_scale * rng.standard_normal(layer.b.shape)
    return model


def fd_param_grad(fn, model: Mlp, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every parameter, flattened."""
    out = []
    for p in model.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = fn()
            p[idx] = orig - h
            down = fn()
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g.ravel())
    return np.concatenate(out)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entrywise error relative to the largest gradient magnitude."""
    scale = max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    dims = [5, 7, 6, 4]
    model = random_tanh_mlp(dims, seed)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((3, dims[0]))
    y = rng.integers(0, dims[-1], 3)

    def sup():
        return softmax_cross_entropy(forward(model, X)[0], y)[0]

    logits, trace = forward(model, X)
    _, dl = softmax_cross_entropy(logits, y)
    results = []
    err = max_rel_error(backprop_params(model, trace, dl).flat(), fd_param_grad(sup, model))
    results.append(CheckResult("gradient: supervised loss", err, tol, err < tol))

    exact = jacreg_exact(model, X)
    fd = fd_param_grad(lambda: jacreg_exact(model, X, with_grads=False).value, model)
    err = max_rel_error(exact.grads.flat(), fd)
    results.append(CheckResult("gradient: exact regularizer", err, tol, err < tol))

    est = jacreg_estimate(model, X, 2, np.random.default_rng(seed + 1))
    fd = fd_param_grad(
        lambda: jacreg_estimate(
            model, X, 2, np.random.default_rng(seed + 1), with_grads=False
        ).value,
        model,
    )
    err = max_rel_error(est.grads.flat(), fd)
    results.append(CheckResult("gradient: estimated regularizer (frozen rng)", err, tol, err < tol))

    cfg = TrainConfig(lambda_jr=0.3, n_proj=1)

    def joint():
        loss, reg, _ = joint_loss_grads(model, X, y, cfg, proj_rng=np.random.default_rng(7))
        return loss + cfg.lambda_jr / 2 * reg

    _, _, g = joint_loss_grads(model, X, y, cfg, proj_rng=np.random.default_rng(7))
    err = max_rel_error(g.flat(), fd_param_grad(joint, model))
    results.append(CheckResult("gradient: joint loss (frozen rng)", err, tol, err < tol))
    return results


def check_equivalence(cyclo=cyclopropagation, n_models: int = 5, seed: int = 0) -> list[CheckResult]:
    worst_val, worst_grad = 0.0, 0.0
    rng = np.random.default_rng(seed)
    for k in range(n_models):
        depth = int(rng.integers(1, 5))
        dims = [int(d) for d in rng.integers(2, 33, depth + 1)]
        model = random_tanh_mlp(dims, seed + k)
        x = rng.standard_normal(dims[0])
        ex = jacreg_exact(model, x[None, :])
        cy = cyclo(model, x)
        worst_val = max(worst_val, abs(cy.value - ex.value) / max(ex.value, 1e-300))
        worst_grad = max(worst_grad, cy.grads.max_abs_diff(ex.grads))
    return [
        CheckResult("equivalence: cyclopropagation value", worst_val, 1e-10, worst_val < 1e-10),
        CheckResult("equivalence: cyclopropagation grads", worst_grad, 1e-8, worst_grad < 1e-8),
    ]


def check_unbiasedness(n_models: int = 3, n: int = 10_000, seed: int = 0) -> list[CheckResult]:
    worst = 0.0
    details = []
    for k in range(n_models):
        model = random_tanh_mlp([8, 16, 10], seed + k)
        x = np.random.default_rng(seed + k).standard_normal(8)
        exact = jacreg_exact(model, x[None, :], with_grads=False).value
        est = jacreg_estimate(
            model, np.repeat(x[None, :], n, axis=0), 1, np.random.default_rng(seed + 100 + k),
            with_grads=False,
        ).per_sample
        z = abs(est.mean() - exact) / (est.std(ddof=1) / np.sqrt(n))
        worst = max(worst, z)
        details.append(f"model {k}: |mean - exact| = {z:.2f} standard errors")
    return [CheckResult("unbiasedness: estimator mean vs exact (in SE)", worst, 3.0, worst < 3.0, details)]


def check_variance_bound(n_samples: int = 20_000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for C in (2, 5, 10):
        J = rng.standard_normal((C, 12)) * rng.uniform(0.1, 2.0, (C, 1))
        st = estimator_stats(J, n_samples, rng)
        rel_se = st.relative_variance_se
        margin = st.bound + 3 * rel_se - st.relative_variance
        z = abs(st.variance - st.closed_form_variance) / max(st.variance_se, 1e-300)
        results.append(
            CheckResult(
                f"variance bound C={C}: var/mean^2 vs 2(C-1)/(C+2)",
                st.relative_variance,
                st.bound,
                margin >= 0 and z < 5,
                [f"margin {margin:.4f}", f"closed form off by {z:.2f} SE"],
            )
        )
    return results


def run_checks(cyclo=cyclopropagation) -> list[CheckResult]:
    return (
        check_gradients()
        + check_equivalence(cyclo)
        + check_unbiasedness()
        + check_variance_bound()
    )
