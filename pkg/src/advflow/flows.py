"""Synthetic mixtures, linear interpolation, the exact 1D transport oracle and
distribution metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

SUPPORT_SIGMAS = 12.0


@dataclass(frozen=True)
class MixtureSpec:
    """Diagonal Gaussian mixture. ``means`` and ``stds`` have shape (k, n)."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64)
        sd = np.asarray(self.stds, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        if sd.ndim == 1:
            sd = sd[:, None]
        sd = np.broadcast_to(sd, mu.shape).copy()
        if w.shape[0] != mu.shape[0]:
            raise ValueError("one weight per component required")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(sd < 0):
            raise ValueError("component stds must be nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)

    @classmethod
    def of(cls, *components):
        """Build from ``(weight, mean, std)`` tuples; scalars mean 1D."""
        w, mu, sd = zip(*components)
        return cls(np.array(w, dtype=float), np.atleast_2d(np.array(mu, dtype=float).reshape(len(w), -1)),
                   np.atleast_2d(np.array(sd, dtype=float).reshape(len(w), -1)))

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.shape[0]

    def mean(self):
        return self.weights @ self.means

    def std(self):
        """Per-dimension standard deviation of the whole mixture."""
        m = self.mean()
        second = self.weights @ (self.stds ** 2 + self.means ** 2)
        return np.sqrt(second - m ** 2)

    def cdf(self, x):
        """Mixture CDF for 1D mixtures; vectorized over ``x``."""
        if self.dim != 1:
            raise ValueError("cdf is only defined for 1D mixtures")
        if np.any(self.stds <= 0):
            raise ValueError("cdf needs strictly positive stds")
        x = np.asarray(x, dtype=np.float64)
        u = (x[..., None] - self.means[:, 0]) / self.stds[:, 0]
        return ndtr(u) @ self.weights

    def support(self):
        lo = np.min(self.means - SUPPORT_SIGMAS * self.stds, axis=0)
        hi = np.max(self.means + SUPPORT_SIGMAS * self.stds, axis=0)
        return lo, hi


@dataclass(frozen=True)
class ConditionalDataset:
    """One mixture per class plus class prior weights."""

    classes: tuple
    class_weights: np.ndarray

    def __post_init__(self):
        cw = np.asarray(self.class_weights, dtype=np.float64)
        if len(self.classes) != cw.shape[0]:
            raise ValueError("one weight per class required")
        if np.any(cw <= 0) or abs(cw.sum() - 1.0) > 1e-9:
            raise ValueError("class weights must be positive and sum to 1")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "class_weights", cw)

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def dim(self):
        return self.classes[0].dim

    def marginal(self):
        """The unconditional data mixture."""
        w, mu, sd = [], [], []
        for cw, spec in zip(self.class_weights, self.classes):
            w.extend(cw * spec.weights)
            mu.extend(spec.means)
            sd.extend(spec.stds)
        return MixtureSpec(np.array(w), np.array(mu), np.array(sd))

    def sample(self, count, rng):
        labels = rng.choice(self.n_classes, size=count, p=self.class_weights)
        x = np.empty((count, self.dim))
        for c, spec in enumerate(self.classes):
            idx = np.flatnonzero(labels == c)
            if idx.size:
                x[idx] = sample(spec, idx.size, rng)
        return x, labels


def sample(spec, count, rng):
    """Draw ``count`` i.i.d. rows from ``spec``."""
    if count <= 0:
        raise ValueError("count must be positive")
    comp = rng.choice(spec.n_components, size=count, p=spec.weights)
    noise = rng.standard_normal((count, spec.dim))
    return spec.means[comp] + spec.stds[comp] * noise


def interp(x, z, t):
    """Linear path ``(1 - t) x + t z`` with ``t`` scalar or one value per row."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {z.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1 and x.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x + t * z


def _bisect_quantile(spec, u, tol=1e-10):
    lo_b, hi_b = spec.support()
    lo = np.full(u.shape, lo_b[0])
    hi = np.full(u.shape, hi_b[0])
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        below = spec.cdf(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def ot_map_1d(data, prior, z):
    """Monotone rearrangement ``F_data^-1(F_prior(z))``, the W2-optimal map in 1D."""
    if data.dim != 1 or prior.dim != 1:
        raise ValueError("ot_map_1d needs 1D mixtures")
    z = np.asarray(z, dtype=np.float64)
    lo, hi = prior.support()
    if np.any(z < lo[0]) or np.any(z > hi[0]):
        raise ValueError("z outside the prior's 12-sigma support window")
    return _bisect_quantile(data, prior.cdf(z))


def wasserstein_1d(a, b):
    """Empirical W1 between equal-size 1D samples (sorted matching)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size != b.size:
        raise ValueError("sample counts must match")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def transport_cost(z, gz):
    """Mean per-dimension squared displacement ``E ||G(z) - z||^2 / n``."""
    z = np.asarray(z, dtype=np.float64)
    gz = np.asarray(gz, dtype=np.float64)
    if z.shape != gz.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {gz.shape}")
    if z.ndim == 1:
        return float(np.mean((gz - z) ** 2))
    return float(np.mean(np.sum((gz - z) ** 2, axis=1) / z.shape[1]))


def mode_coverage(samples, spec, k=3.0):
    """Fraction of samples within ``k`` standardized units of each component mean."""
    if k <= 0:
        raise ValueError("k must be positive")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    fractions = np.empty(spec.n_components)
    for i in range(spec.n_components):
        sd = np.where(spec.stds[i] > 0, spec.stds[i], np.finfo(float).tiny)
        d = np.sqrt(np.sum(((x - spec.means[i]) / sd) ** 2, axis=1))
        fractions[i] = np.mean(d <= k)
    return fractions


def monotonicity_violation_rate(z_grid, G):
    """Fraction of adjacent grid pairs where ``G`` decreases.

    ``G`` is either a callable or the already-evaluated outputs on the grid.
    """
    z = np.asarray(z_grid, dtype=np.float64).ravel()
    if z.size < 2:
        raise ValueError("need at least two grid points")
    if np.any(np.diff(z) < 0):
        raise ValueError("z_grid must be sorted ascending")
    gz = np.asarray(G(z) if callable(G) else G, dtype=np.float64).ravel()
    return float(np.mean(np.diff(gz) < 0))


# canonical benchmarks ------------------------------------------------------

def three_mode_1d():
    """Data mixture of the 1D map benchmark: modes at -2, 0, 2 with std 0.2."""
    third = 1.0 / 3.0
    return MixtureSpec.of((third, -2.0, 0.2), (third, 0.0, 0.2), (1.0 - 2 * third, 2.0, 0.2))


def standard_normal(dim=1):
    return MixtureSpec(np.array([1.0]), np.zeros((1, dim)), np.ones((1, dim)))


def isolated_pair_data():
    return MixtureSpec.of((0.3, -1.5, 0.1), (0.7, 2.0, 0.1))


def isolated_pair_prior():
    return MixtureSpec.of((0.5, -2.0, 0.1), (0.5, 2.0, 0.1))


def two_class_1d():
    """Two overlapping 1D classes, N(-1, 0.5^2) and N(1, 0.5^2), equally likely."""
    return ConditionalDataset(
        (MixtureSpec.of((1.0, -1.0, 0.5)), MixtureSpec.of((1.0, 1.0, 0.5))),
        np.array([0.5, 0.5]),
    )


BENCHMARKS = {
    "three_mode": three_mode_1d,
    "normal": standard_normal,
    "isolated_data": isolated_pair_data,
    "isolated_prior": isolated_pair_prior,
}

CONDITIONAL_BENCHMARKS = {
    "two_class": two_class_1d,
}
