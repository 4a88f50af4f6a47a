"""Squared Frobenius norm of the input-output Jacobian and its gradient.

Three routes to the same quantity:

* :func:`jacreg_exact` -- one backward pass per output basis vector.
* :func:`jacreg_estimate` -- random unit-sphere projections, unbiased.
* :func:`cyclopropagation` -- closed-form parameter gradient for an MLP.

All three report ``value`` as the batch mean of ``||J(x)||_F^2`` and ``grads``
as the gradient of that value with respect to the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .nn import (
    DimensionError,
    ForwardTrace,
    Mlp,
    ParamGrads,
    activation_derivs,
    backward,
    forward,
    vjp_tape,
)


class ConfigError(ValueError):
    pass


class UnsupportedActivationError(ValueError):
    pass


@dataclass
class JacobianResult:
    value: float
    grads: ParamGrads | None
    method: str
    per_sample: np.ndarray = field(repr=False, default=None)
    rng_state_used: Any = field(repr=False, default=None)

    @property
    def frobenius_norms(self) -> np.ndarray:
        """Per-sample ``||J||_F`` (or its estimate)."""
        return np.sqrt(self.per_sample)


@dataclass
class EstimatorStats:
    mean: float
    variance: float
    n_samples: int
    closed_form_variance: float
    exact_value: float
    variance_se: float
    C: int
    relative_variance_se: float = float("nan")

    @property
    def relative_variance(self) -> float:
        return self.variance / self.mean**2 if self.mean else 0.0

    @property
    def bound(self) -> float:
        """Upper bound on var/mean^2 that holds for every J."""
        return 2.0 * (self.C - 1) / (self.C + 2)


def sample_unit_sphere(batch: int, C: int, rng: np.random.Generator, dtype=np.float64):
    """``batch`` independent uniform draws from the unit sphere in ``R^C``."""
    if C < 1:
        raise ValueError("C must be at least 1")
    v = rng.standard_normal((batch, C))
    norms = np.linalg.norm(v, axis=1)
    bad = norms == 0.0
    while np.any(bad):
        v[bad] = rng.standard_normal((int(bad.sum()), C))
        norms = np.linalg.norm(v, axis=1)
        bad = norms == 0.0
    return (v / norms[:, None]).astype(dtype, copy=False)


def _penalty(model: Mlp, trace: ForwardTrace, V: np.ndarray, weight: float, grads, inj, onehot=None):
    """Add ``weight * sum_alpha ||v^alpha J||^2`` to grads/injections.

    Returns the per-row squared norms.  ``inj`` is a per-layer list that is
    extended in place so several penalties can share one backward pass.
    """
    tape = vjp_tape(model, trace, V, onehot)
    sq = np.einsum("ij,ij->i", tape.G, tape.G)
    if grads is not None:
        new = tape.zhat_adjoints(2.0 * weight * tape.G, grads)
        for i, a in enumerate(new):
            if a is not None:
                inj[i] = a if inj[i] is None else inj[i] + a
    return sq


def jacobian_terms(
    model: Mlp,
    trace: ForwardTrace,
    *,
    n_proj: int | str = 1,
    rng: np.random.Generator | None = None,
    weight: float = 1.0,
    grads: ParamGrads | None = None,
    inj: list | None = None,
    projections: str = "random",
) -> np.ndarray:
    """Core shared by the exact and projection methods.

    Adds ``weight`` times the gradient of the batch-mean regularizer into
    ``grads`` (direct weight terms) and ``inj`` (preactivation injections),
    leaving the final :func:`backward` to the caller so it can be fused with
    the supervised loss.  Returns per-sample values.
    """
    B, C = trace.logits.shape
    dtype = trace.logits.dtype
    if n_proj == "exact":
        big = trace.repeat(C, include_output=False)
        onehot = np.repeat(np.arange(C), B)
        inj_big = [None] * len(model.layers)
        sq = _penalty(model, big, None, weight / B, grads, inj_big, onehot)
        if grads is not None:
            for i, a in enumerate(inj_big):
                if a is not None:
                    a = a.reshape(C, B, -1).sum(axis=0)
                    inj[i] = a if inj[i] is None else inj[i] + a
        return sq.reshape(C, B).sum(axis=0)
    if not isinstance(n_proj, (int, np.integer)) or n_proj < 1:
        raise ConfigError(f"n_proj must be a positive integer or 'exact', got {n_proj!r}")
    if projections == "basis":
        if n_proj != C:
            raise ConfigError("basis projections need n_proj == C")
    elif projections != "random":
        raise ConfigError(f"unknown projection mode {projections!r}")
    elif rng is None:
        raise ConfigError("random projections need an rng")
    scale = C / n_proj
    per = np.zeros(B, dtype=dtype)
    for k in range(n_proj):
        if projections == "basis":
            V = np.zeros((B, C), dtype=dtype)
            V[:, k] = 1.0
        else:
            V = sample_unit_sphere(B, C, rng, dtype)
        per += scale * _penalty(model, trace, V, weight * scale / B, grads, inj)
    return per


def _result(model, trace, per, method, grads, inj, state):
    if grads is not None:
        backward(model, trace, inj, grads)
    return JacobianResult(float(per.mean()), grads, method, per, state)


def jacreg_exact(model: Mlp, X: np.ndarray, with_grads: bool = True) -> JacobianResult:
    """Batch mean of ``||J(x)||_F^2`` by iterating over the output basis."""
    _, trace = forward(model, X)
    grads = ParamGrads.zeros_like(model) if with_grads else None
    inj = [None] * len(model.layers)
    per = jacobian_terms(model, trace, n_proj="exact", grads=grads, inj=inj)
    return _result(model, trace, per, "exact", grads, inj, None)


def jacreg_estimate(
    model: Mlp,
    X: np.ndarray,
    n_proj: int = 1,
    rng: np.random.Generator | None = None,
    with_grads: bool = True,
    projections: str = "random",
) -> JacobianResult:
    """Random-projection estimate of the batch-mean ``||J||_F^2``.

    One fresh unit vector per example per projection; each projection costs
    one vector-Jacobian product.  ``projections="basis"`` swaps the random
    vectors for the ``C`` output basis vectors, reproducing the exact value.
    """
    if not isinstance(n_proj, (int, np.integer)) or n_proj < 1:
        raise ConfigError(f"n_proj must be a positive integer, got {n_proj!r}")
    if projections == "random" and rng is None:
        raise ConfigError("random projections need an rng")
    state = rng.bit_generator.state if rng is not None else None
    _, trace = forward(model, X)
    grads = ParamGrads.zeros_like(model) if with_grads else None
    inj = [None] * len(model.layers)
    per = jacobian_terms(
        model, trace, n_proj=n_proj, rng=rng, grads=grads, inj=inj, projections=projections
    )
    return _result(model, trace, per, f"projection({n_proj})", grads, inj, state)


def cyclopropagation(model: Mlp, x: np.ndarray) -> JacobianResult:
    """Closed-form gradient of ``||J(x)||_F^2`` for one input.

    Works with ``R = 1/2 ||J||^2`` internally and doubles value and grads on
    return.  Requires every layer to be tanh or identity.
    """
    for layer in model.layers:
        if layer.activation not in ("tanh", "identity"):
            raise UnsupportedActivationError(
                f"cyclopropagation needs twice-differentiable activations, got {layer.activation}"
            )
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != model.n_in:
        raise DimensionError(f"x has {x.shape[1]} entries, model expects {model.n_in}")
    _, trace = forward(model, x)
    L = len(model.layers)
    d1, d2, Jl = [], [], []
    for i, layer in enumerate(model.layers):
        a, b = activation_derivs(layer.activation, trace.zhat[i][0], trace.z[i][0])
        d1.append(a)
        d2.append(b)
        Jl.append(a[:, None] * layer.W)  # layer-wise Jacobian

    # prefix[l] = J^(l) ... J^(1), shape (n_l, I); prefix[0] = identity
    prefix = [np.eye(model.n_in)]
    for i in range(L):
        prefix.append(Jl[i] @ prefix[-1])
    J = prefix[-1]
    # suffix[l] = J^(L) ... J^(l+1), shape (C, n_l); suffix[L] = identity
    suffix = [None] * (L + 1)
    suffix[L] = np.eye(model.n_out)
    for i in range(L, 0, -1):
        suffix[i - 1] = suffix[i] @ Jl[i - 1]

    dW = [None] * L
    db = [None] * L
    B_next = None
    for ell in range(L, 0, -1):
        i = ell - 1
        layer = model.layers[i]
        # Omega^(l) = [J^(l-1)...J^(1)] J^T [J^(L)...J^(l+1)], shape (n_{l-1}, n_l)
        omega = prefix[ell - 1] @ (J.T @ suffix[ell])
        # B~^(l+1)/sigma'(zhat^(l+1)) J^(l+1) == B~^(l+1) W^(l+1)
        back = 0.0 if B_next is None else (B_next @ model.layers[ell].W) * d1[i]
        B = back + d2[i] * np.einsum("jk,kj->j", layer.W, omega)
        dW[i] = np.outer(B, trace.inputs[i][0]) + d1[i][:, None] * omega.T
        db[i] = B
        B_next = B
    half = 0.5 * float(np.sum(J * J))
    grads = ParamGrads(dW, db).scaled(2.0)
    return JacobianResult(2.0 * half, grads, "cyclo", np.array([2.0 * half]), None)


def cyclopropagation_batch(model: Mlp, X: np.ndarray) -> JacobianResult:
    """Batch mean of :func:`cyclopropagation` over the rows of ``X``."""
    X = np.atleast_2d(X)
    results = [cyclopropagation(model, x) for x in X]
    grads = results[0].grads
    for r in results[1:]:
        grads = grads + r.grads
    per = np.array([r.value for r in results])
    return JacobianResult(float(per.mean()), grads.scaled(1.0 / len(results)), "cyclo", per)


def estimator_stats(J: np.ndarray, n_samples: int, rng: np.random.Generator) -> EstimatorStats:
    """Monte Carlo statistics of ``C ||v J||^2`` over unit-sphere ``v``.

    The closed-form variance is
    ``2C/(C+2) Tr((J J^T)^2) - 2/(C+2) ||J||_F^4``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    J = np.atleast_2d(np.asarray(J, dtype=np.float64))
    C = J.shape[0]
    JJt = J @ J.T
    fro2 = float(np.trace(JJt))
    closed = 2.0 * C / (C + 2) * float(np.sum(JJt * JJt)) - 2.0 / (C + 2) * fro2**2
    samples = np.empty(n_samples)
    chunk = 100_000
    for s in range(0, n_samples, chunk):
        n = min(chunk, n_samples - s)
        v = sample_unit_sphere(n, C, rng)
        vJ = v @ J
        samples[s : s + n] = C * np.einsum("ij,ij->i", vJ, vJ)
    mean = float(samples.mean())
    var = float(samples.var(ddof=1))
    # standard error of the sample variance via the fourth central moment
    m4 = float(np.mean((samples - mean) ** 4))
    se = np.sqrt(max(m4 - var**2, 0.0) / n_samples)
    # delta method for var/mean^2, keeping the mean's own noise and covariance
    m3 = float(np.mean((samples - mean) ** 3))
    g_var, g_mean = 1.0 / mean**2, -2.0 * var / mean**3
    ratio_var = (g_var**2 * (m4 - var**2) + 2 * g_var * g_mean * m3 + g_mean**2 * var) / n_samples
    ratio_se = np.sqrt(max(ratio_var, 0.0))
    return EstimatorStats(mean, var, n_samples, closed, fro2, float(se), C, float(ratio_se))
