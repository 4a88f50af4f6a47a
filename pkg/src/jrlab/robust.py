"""Input corruptions and adversarial attacks, all in raw ``[0, 1]`` pixel space.

Every attack takes raw images and a :class:`~jrlab.data.Normalizer`; the
preprocessing scale is chained into input gradients so that perturbation
budgets and fooling distances are measured before preprocessing.  Functions
are batched: ``x_raw`` is ``(n, I)`` and ``labels`` is ``(n,)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Normalizer
from .nn import Mlp, backward, forward, predict, softmax_cross_entropy

ATTACK_KINDS = ("white", "fgsm", "pgd", "cw")


class AttackConfigError(ValueError):
    pass


@dataclass
class AttackConfig:
    kind: str = "pgd"
    # pgd
    pgd_step: float = 1.0 / 255
    linf_ball: float = 32.0 / 255
    max_iters: int = 100
    # cw
    adam_lr: float = 0.005
    c_init: float = 0.01
    binary_search_steps: int = 10
    max_opt_iters: int = 1000
    # minimal-perturbation searches
    white_sigma0: float = 0.01
    white_sigma_max: float = 100.0
    white_bisect_steps: int = 20
    fgsm_eps_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackConfigError(
                f"unknown attack kind {self.kind!r}; choose from {', '.join(ATTACK_KINDS)}"
            )
        for name in ("pgd_step", "linf_ball", "adam_lr", "c_init", "white_sigma0", "fgsm_eps_tol"):
            if getattr(self, name) < 0:
                raise AttackConfigError(f"{name} must be non-negative")
        if self.pgd_step > self.linf_ball:
            raise AttackConfigError("pgd_step must not exceed linf_ball")


@dataclass
class RobustnessCurve:
    """Accuracy (or test error) in percent against a perturbation magnitude."""

    kind: str
    abscissa: np.ndarray
    values: np.ndarray
    n_test: int
    metric: str = "accuracy"
    seed: int = 0
    distances: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.abscissa = np.asarray(self.abscissa, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(np.diff(self.abscissa) <= 0):
            raise ValueError("abscissa must be strictly increasing")

    def accuracy(self) -> np.ndarray:
        return self.values if self.metric == "accuracy" else 100.0 - self.values

    def accuracy_at(self, d) -> np.ndarray:
        """Accuracy at arbitrary distances, from the per-point fooling distances."""
        if self.distances is None:
            raise ValueError("curve carries no per-point distances")
        d = np.atleast_1d(np.asarray(d, dtype=np.float64))
        return 100.0 * np.mean(self.distances[None, :] > d[:, None], axis=1)

    def median_distance(self) -> float:
        """Median over all points, unfooled ones counting as infinitely far.

        This is where the cumulative error curve reaches 50%; it is ``inf``
        when the attack fails on half the points or more.
        """
        if self.distances is None:
            raise ValueError("curve carries no per-point distances")
        return float(np.median(self.distances))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["abscissa", self.metric, "n", "seed"])
            for a, v in zip(self.abscissa, self.values):
                w.writerow([repr(float(a)), repr(float(v)), self.n_test, self.seed])


def crop(x):
    return np.clip(x, 0.0, 1.0)


def white_noise_perturb(x_raw, sigma: float, rng: np.random.Generator):
    """``crop(x + eps)`` with i.i.d. ``N(0, sigma^2)`` noise."""
    if sigma < 0:
        raise AttackConfigError("sigma must be non-negative")
    x_raw = np.asarray(x_raw, dtype=np.float64)
    if sigma == 0:
        return x_raw.copy()
    return crop(x_raw + sigma * rng.standard_normal(x_raw.shape))


def loss_input_gradient(model: Mlp, x_raw, labels, norm: Normalizer = Normalizer()):
    """Per-example gradient of the cross-entropy w.r.t. the raw pixels."""
    x_raw = np.atleast_2d(x_raw)
    labels = np.atleast_1d(labels)
    logits, trace = forward(model, norm(x_raw))
    _, dlogits = softmax_cross_entropy(logits, labels)
    dlogits *= x_raw.shape[0]  # undo the batch mean: one loss per example
    bars = [None] * len(model.layers)
    bars[-1] = dlogits
    _, x_bar = backward(model, trace, bars, need_input=True, need_params=False)
    return x_bar * norm.input_scale


def fgsm_attack(model: Mlp, x_raw, labels, eps, norm: Normalizer = Normalizer()):
    """One signed-gradient step of size ``eps`` (scalar or per example), then crop."""
    x_raw = np.atleast_2d(np.asarray(x_raw, dtype=np.float64))
    eps = np.asarray(eps, dtype=np.float64)
    if np.all(eps == 0):
        return x_raw.copy()
    g = loss_input_gradient(model, x_raw, labels, norm)
    eps = eps.reshape(-1, 1) if eps.ndim else eps
    return crop(x_raw + eps * np.sign(g))


def pgd_attack(model: Mlp, x_raw, labels, cfg: AttackConfig, norm: Normalizer = Normalizer()):
    """Iterated FGSM inside an l-infinity ball; stops each point once fooled.

    Returns ``(x_adv, fooled, iters_used)``.
    """
    x0 = np.atleast_2d(np.asarray(x_raw, dtype=np.float64))
    labels = np.atleast_1d(labels)
    x = x0.copy()
    fooled = predict(model, norm(x)) != labels
    iters = np.zeros(x.shape[0], dtype=np.int64)
    active = ~fooled
    for _ in range(cfg.max_iters):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        g = loss_input_gradient(model, x[idx], labels[idx], norm)
        step = x[idx] + cfg.pgd_step * np.sign(g)
        step = np.clip(step, x0[idx] - cfg.linf_ball, x0[idx] + cfg.linf_ball)
        x[idx] = crop(step)
        iters[idx] += 1
        now = predict(model, norm(x[idx])) != labels[idx]
        fooled[idx] = now
        active[idx[now]] = False
    return x, fooled, iters


def _margin_and_grad(model, x, labels, norm):
    """CW margin ``max(z_true - max_other, 0)`` and its raw-input gradient."""
    logits, trace = forward(model, norm(x))
    n = x.shape[0]
    rows = np.arange(n)
    real = logits[rows, labels]
    masked = logits.copy()
    masked[rows, labels] = -np.inf
    other_idx = np.argmax(masked, axis=1)
    margin = real - logits[rows, other_idx]
    f = np.maximum(margin, 0.0)
    V = np.zeros_like(logits)
    pos = margin > 0
    V[rows[pos], labels[pos]] = 1.0
    V[rows[pos], other_idx[pos]] = -1.0
    bars = [None] * len(model.layers)
    bars[-1] = V
    _, x_bar = backward(model, trace, bars, need_input=True, need_params=False)
    pred = np.argmax(logits, axis=1)
    return f, x_bar * norm.input_scale, pred


def cw_attack(model: Mlp, x_raw, labels, cfg: AttackConfig, norm: Normalizer = Normalizer()):
    """Carlini-Wagner L2 attack with the logit-margin loss, batched.

    Optimizes ``||x - x0||^2 + c * margin`` in tanh space with Adam and
    binary-searches ``c`` per example.  Returns ``(x_adv, fooled, l2)`` with
    ``l2 = inf`` where no adversarial example was found.
    """
    x0 = np.atleast_2d(np.asarray(x_raw, dtype=np.float64))
    labels = np.atleast_1d(labels)
    n = x0.shape[0]
    w0 = np.arctanh((2.0 * x0 - 1.0) * (1.0 - 1e-6))
    c = np.full(n, cfg.c_init)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    best_l2 = np.full(n, np.inf)
    best_x = x0.copy()

    clean = predict(model, norm(x0)) != labels
    best_l2[clean] = 0.0
    todo = ~clean
    b1, b2, eps = 0.9, 0.999, 1e-8
    check_every = max(cfg.max_opt_iters // 10, 1)
    for _ in range(cfg.binary_search_steps):
        idx = np.flatnonzero(todo)
        if idx.size == 0:
            break
        w = w0[idx].copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        ci = c[idx]
        found = np.zeros(idx.size, dtype=bool)
        prev = np.inf
        for it in range(1, cfg.max_opt_iters + 1):
            t = np.tanh(w)
            x = (t + 1.0) / 2.0
            diff = x - x0[idx]
            l2sq = np.einsum("ij,ij->i", diff, diff)
            f, fgrad, pred = _margin_and_grad(model, x, labels[idx], norm)
            success = pred != labels[idx]
            found |= success
            l2 = np.sqrt(l2sq)
            better = success & (l2 < best_l2[idx])
            if better.any():
                best_l2[idx[better]] = l2[better]
                best_x[idx[better]] = x[better]
            loss = float(np.sum(l2sq + ci * f))
            if it % check_every == 0:
                if loss > prev * 0.9999:
                    break
                prev = loss
            dx = 2.0 * diff + ci[:, None] * fgrad
            dw = dx * (1.0 - t * t) / 2.0
            m = b1 * m + (1 - b1) * dw
            v = b2 * v + (1 - b2) * dw * dw
            mhat = m / (1 - b1**it)
            vhat = v / (1 - b2**it)
            w -= cfg.adam_lr * mhat / (np.sqrt(vhat) + eps)
        hi[idx[found]] = np.minimum(hi[idx[found]], ci[found])
        lo[idx[~found]] = np.maximum(lo[idx[~found]], ci[~found])
        bounded = np.isfinite(hi[idx])
        c[idx] = np.where(bounded, (lo[idx] + hi[idx]) / 2.0, c[idx] * 10.0)
    fooled = np.isfinite(best_l2)
    return best_x, fooled, best_l2


def accuracy_under_noise(
    model: Mlp,
    testset: Dataset,
    sigmas,
    n_test: int | None = None,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> RobustnessCurve:
    """Accuracy with one white-noise draw per test point per sigma."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(seed)
    n = len(testset) if n_test is None else min(n_test, len(testset))
    x, y = testset.images[:n], testset.labels[:n]
    acc = []
    for s in sigmas:
        xn = white_noise_perturb(x, float(s), rng)
        acc.append(100.0 * np.mean(predict(model, testset.normalizer(xn)) == y))
    return RobustnessCurve("white", sigmas, np.array(acc), n, "accuracy", seed)


def _white_min_distance(model, x0, y, cfg, norm, rng):
    n = x0.shape[0]
    direction = rng.standard_normal(x0.shape)
    fooled_at = lambda s, rows: (  # noqa: E731
        predict(model, norm(crop(x0[rows] + s[:, None] * direction[rows]))) != y[rows]
    )
    hi = np.full(n, cfg.white_sigma0)
    found = np.zeros(n, dtype=bool)
    live = np.ones(n, dtype=bool)
    while live.any():
        rows = np.flatnonzero(live)
        f = fooled_at(hi[rows], rows)
        found[rows[f]] = True
        live[rows[f]] = False
        grow = rows[~f]
        hi[grow] *= 2.0
        live[grow[hi[grow] > cfg.white_sigma_max]] = False
    lo = np.where(hi > cfg.white_sigma0, hi / 2.0, 0.0)
    rows = np.flatnonzero(found)
    for _ in range(cfg.white_bisect_steps):
        if rows.size == 0:
            break
        mid = (lo[rows] + hi[rows]) / 2.0
        f = fooled_at(mid, rows)
        hi[rows[f]] = mid[f]
        lo[rows[~f]] = mid[~f]
    xs = crop(x0 + hi[:, None] * direction)
    d = np.linalg.norm(xs - x0, axis=1)
    d[~found] = np.inf
    return d


def _fgsm_min_distance(model, x0, y, cfg, norm):
    n = x0.shape[0]
    sign = np.sign(loss_input_gradient(model, x0, y, norm))
    fooled_at = lambda e, rows: (  # noqa: E731
        predict(model, norm(crop(x0[rows] + e[:, None] * sign[rows]))) != y[rows]
    )
    grid = np.array([2.0**-k for k in range(10, -1, -1)])  # 1/1024 ... 1
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    for e in grid:
        rows = np.flatnonzero(~np.isfinite(hi))
        if rows.size == 0:
            break
        f = fooled_at(np.full(rows.size, e), rows)
        hi[rows[f]] = e
        lo[rows[~f]] = e
    found = np.isfinite(hi)
    rows = np.flatnonzero(found)
    while rows.size:
        wide = hi[rows] - lo[rows] > cfg.fgsm_eps_tol
        rows = rows[wide]
        if rows.size == 0:
            break
        mid = (lo[rows] + hi[rows]) / 2.0
        f = fooled_at(mid, rows)
        hi[rows[f]] = mid[f]
        lo[rows[~f]] = mid[~f]
    eps = np.where(found, hi, 0.0)
    d = np.linalg.norm(crop(x0 + eps[:, None] * sign) - x0, axis=1)
    d[~found] = np.inf
    return d


def fooling_distances(
    model: Mlp, testset: Dataset, cfg: AttackConfig, n_test: int | None = None
) -> np.ndarray:
    """Minimal successful L2 perturbation per test point (raw space).

    0 for points already misclassified, ``inf`` for points the attack could
    not fool within its budget.
    """
    n = len(testset) if n_test is None else min(n_test, len(testset))
    x0, y = testset.images[:n], testset.labels[:n]
    norm = testset.normalizer
    d = np.full(n, np.inf)
    clean_wrong = predict(model, norm(x0)) != y
    d[clean_wrong] = 0.0
    rows = np.flatnonzero(~clean_wrong)
    if rows.size == 0:
        return d
    xs, ys = x0[rows], y[rows]
    if cfg.kind == "white":
        d[rows] = _white_min_distance(model, xs, ys, cfg, norm, np.random.default_rng(cfg.seed))
    elif cfg.kind == "fgsm":
        d[rows] = _fgsm_min_distance(model, xs, ys, cfg, norm)
    elif cfg.kind == "pgd":
        xa, fooled, _ = pgd_attack(model, xs, ys, cfg, norm)
        dd = np.linalg.norm(xa - xs, axis=1)
        dd[~fooled] = np.inf
        d[rows] = dd
    else:
        _, _, l2 = cw_attack(model, xs, ys, cfg, norm)
        d[rows] = l2
    return d


def curve_from_distances(kind, distances, seed=0, grid=None) -> RobustnessCurve:
    """Cumulative test error (percent) versus fooling distance."""
    distances = np.asarray(distances, dtype=np.float64)
    n = distances.size
    if grid is None:
        fin = distances[np.isfinite(distances)]
        grid = np.unique(np.concatenate([[0.0], fin]))
    grid = np.asarray(grid, dtype=np.float64)
    err = 100.0 * np.mean(distances[None, :] <= grid[:, None], axis=1)
    return RobustnessCurve(kind, grid, err, n, "error", seed, distances)


def fooling_distance_sweep(
    model: Mlp,
    testset: Dataset,
    attack_cfg: AttackConfig,
    n_test: int | None = None,
    grid=None,
) -> RobustnessCurve:
    d = fooling_distances(model, testset, attack_cfg, n_test)
    return curve_from_distances(attack_cfg.kind, d, attack_cfg.seed, grid)
