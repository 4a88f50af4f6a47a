"""Two-dimensional cross sections of decision cells around a test point."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .data import Normalizer
from .nn import Mlp, forward, predict, softmax


class BasisError(ValueError):
    """Slice directions are degenerate (zero or collinear)."""


@dataclass
class DecisionSlice:
    center: np.ndarray
    basis: np.ndarray  # (2, I), orthonormal rows
    extent: float
    resolution: int
    coords: np.ndarray  # (G,) offsets along each basis vector
    classes: np.ndarray  # (G, G) predicted class, [i, j] -> coords[i] * u + coords[j] * v
    max_prob: np.ndarray  # (G, G)
    boundary_radius: float
    radii: np.ndarray  # (n_angles,) per-direction distance to a class change
    seed: int | None = None

    @property
    def center_cell(self) -> int:
        g = self.resolution // 2
        return int(self.classes[g, g])

    def center_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.center, "<f8").tobytes()).hexdigest()[:16]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(
                f"# center_hash={self.center_hash()} basis_seed={self.seed} "
                f"extent={self.extent!r} resolution={self.resolution} "
                f"boundary_radius={self.boundary_radius!r}\n"
            )
            fh.write("i,j,a,b,pred,max_prob\n")
            for i, a in enumerate(self.coords):
                for j, b in enumerate(self.coords):
                    fh.write(
                        f"{i},{j},{float(a)!r},{float(b)!r},{self.classes[i, j]},"
                        f"{float(self.max_prob[i, j])!r}\n"
                    )


def orthonormal_basis(d1, d2, tol: float = 1e-10) -> np.ndarray:
    """Gram-Schmidt on two directions (applied twice for accuracy)."""
    d1 = np.asarray(d1, dtype=np.float64).ravel()
    d2 = np.asarray(d2, dtype=np.float64).ravel()
    n1 = np.linalg.norm(d1)
    if n1 < tol:
        raise BasisError("first direction has zero norm")
    u = d1 / n1
    v = d2 - (u @ d2) * u
    v = v - (u @ v) * u
    n2 = np.linalg.norm(v)
    if n2 < tol * max(np.linalg.norm(d2), 1.0):
        raise BasisError("directions are collinear")
    return np.stack([u, v / n2])


def random_basis(width: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return orthonormal_basis(rng.standard_normal(width), rng.standard_normal(width))


def _classify(model, norm, center, label, pts):
    return predict(model, norm(np.clip(pts, 0.0, 1.0))) != label


def boundary_radii(
    model: Mlp,
    center: np.ndarray,
    basis: np.ndarray,
    extent: float,
    n_angles: int = 64,
    tol: float = 1e-3,
    norm: Normalizer = Normalizer(),
    n_march: int = 64,
) -> np.ndarray:
    """Distance along each of ``n_angles`` in-plane rays to the first class change.

    Rays are marched outward in ``n_march`` steps up to ``extent`` to bracket
    the first change, then bisected to ``tol``.  Rays without a change inside
    the extent report ``extent``.
    """
    center = np.asarray(center, dtype=np.float64).ravel()
    label = predict(model, norm(np.clip(center, 0, 1))[None, :])[0]
    theta = 2 * np.pi * np.arange(n_angles) / n_angles
    dirs = np.cos(theta)[:, None] * basis[0] + np.sin(theta)[:, None] * basis[1]
    steps = extent * np.arange(1, n_march + 1) / n_march
    pts = center + steps[None, :, None] * dirs[:, None, :]
    changed = _classify(model, norm, center, label, pts.reshape(-1, center.size))
    changed = changed.reshape(n_angles, n_march)
    hit = changed.any(axis=1)
    first = np.argmax(changed, axis=1)
    hi = np.where(hit, steps[first], extent)
    lo = np.where(hit & (first > 0), steps[np.maximum(first - 1, 0)], 0.0)
    rows = np.flatnonzero(hit)
    while rows.size:
        rows = rows[hi[rows] - lo[rows] > tol]
        if rows.size == 0:
            break
        mid = (lo[rows] + hi[rows]) / 2
        f = _classify(model, norm, center, label, center + mid[:, None] * dirs[rows])
        hi[rows[f]] = mid[f]
        lo[rows[~f]] = mid[~f]
    return hi


def decision_slice(
    model: Mlp,
    center: np.ndarray,
    *,
    mode: str = "random",
    directions=None,
    extent: float = 10.0,
    resolution: int = 101,
    seed: int = 0,
    n_angles: int = 64,
    tol: float = 1e-3,
    norm: Normalizer = Normalizer(),
) -> DecisionSlice:
    """Evaluate the classifier on a ``resolution x resolution`` grid in a plane.

    ``mode="random"`` draws two Gaussian directions from ``seed``;
    ``mode="given-basis"`` orthonormalizes the two ``directions`` supplied.
    The grid lives in raw pixel space, each point cropped to ``[0, 1]``.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be odd and at least 3")
    center = np.asarray(center, dtype=np.float64).ravel()
    if mode == "random":
        basis = random_basis(center.size, seed)
    elif mode == "given-basis":
        if directions is None or len(directions) != 2:
            raise BasisError("given-basis mode needs two direction vectors")
        basis = orthonormal_basis(*directions)
    else:
        raise ValueError(f"unknown slice mode {mode!r}")
    coords = np.linspace(-extent, extent, resolution)
    coords[resolution // 2] = 0.0
    A, B = np.meshgrid(coords, coords, indexing="ij")
    pts = center + A.reshape(-1, 1) * basis[0] + B.reshape(-1, 1) * basis[1]
    pts = np.clip(pts, 0.0, 1.0)
    classes = np.empty(pts.shape[0], dtype=np.int64)
    probs = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], 2000):
        logits, _ = forward(model, norm(pts[s : s + 2000]))
        classes[s : s + 2000] = np.argmax(logits, axis=1)
        probs[s : s + 2000] = softmax(logits).max(axis=1)
    radii = boundary_radii(model, center, basis, extent, n_angles, tol, norm)
    return DecisionSlice(
        center,
        basis,
        float(extent),
        resolution,
        coords,
        classes.reshape(resolution, resolution),
        probs.reshape(resolution, resolution),
        float(radii.min()),
        radii,
        seed if mode == "random" else None,
    )
