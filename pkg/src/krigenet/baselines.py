"""Non-learned kriging baselines: interval mean, KNN, and ordinary kriging.

All three interpolate per time interval from the observed nodes' values.
KNN averages the k nearest observed nodes without distance weighting.
Ordinary kriging solves the unbiasedness-constrained linear system with a
Gaussian variogram; because the variogram depends only on distance, the
weights are solved once per target node and reused across intervals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError


@dataclass
class Variogram:
    """Gaussian variogram: nugget + sill * (1 - exp(-h^2 / range^2)), 0 at h=0."""

    range_: float
    sill: float
    nugget: float = 0.0

    def __post_init__(self):
        if self.sill <= 0.0:
            raise ConfigError(f"sill must be positive, got {self.sill}")
        if self.nugget < 0.0:
            raise ConfigError(f"nugget must be nonnegative, got {self.nugget}")
        if self.range_ <= 0.0:
            raise ConfigError(f"range must be positive, got {self.range_}")

    def __call__(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        gamma = self.nugget + self.sill * (1.0 - np.exp(-(h**2) / self.range_**2))
        return np.where(h == 0.0, 0.0, gamma)


def default_variogram(x_obs: np.ndarray, dists_obs: np.ndarray, nugget_scale: float = 1e-6) -> Variogram:
    """Data-driven defaults: sill = value variance, range = half the largest
    finite observed-to-observed distance, nugget = 1e-6 * sill."""
    sill = float(np.var(x_obs))
    if sill <= 0.0:
        raise DataError("observed values are constant; kriging variogram undefined")
    finite = dists_obs[np.isfinite(dists_obs)]
    if finite.size == 0 or finite.max() <= 0.0:
        raise DataError("no positive finite distances to derive a variogram range from")
    return Variogram(range_=float(finite.max()) / 2.0, sill=sill, nugget=nugget_scale * sill)


def mean_impute(x_obs: np.ndarray, n_targets: int) -> np.ndarray:
    """Every target at interval i receives the mean of interval i's readings."""
    x_obs = np.asarray(x_obs, dtype=np.float64)
    if x_obs.ndim != 2 or x_obs.shape[1] == 0:
        raise DataError(f"need a (time, observed) matrix with >=1 column, got {x_obs.shape}")
    means = x_obs.mean(axis=1, keepdims=True)
    return np.repeat(means, n_targets, axis=1)


def knn_krige(x_obs: np.ndarray, dists: np.ndarray, k: int = 10) -> np.ndarray:
    """Unweighted mean of the k nearest observed nodes, per interval.

    ``dists`` is (targets, observed); inf marks unknown distances. Targets
    with fewer than k finite distances use all they have.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    x_obs = np.asarray(x_obs, dtype=np.float64)
    dists = np.asarray(dists, dtype=np.float64)
    if dists.ndim != 2 or dists.shape[1] != x_obs.shape[1]:
        raise DataError(f"distance matrix {dists.shape} does not match {x_obs.shape[1]} observed nodes")
    n_targets = dists.shape[0]
    out = np.empty((x_obs.shape[0], n_targets))
    for u in range(n_targets):
        finite = np.flatnonzero(np.isfinite(dists[u]))
        if finite.size == 0:
            raise DataError(f"target node {u} has no finite distance to any observed node")
        order = finite[np.argsort(dists[u, finite], kind="stable")]
        chosen = order[: min(k, order.size)]
        out[:, u] = x_obs[:, chosen].mean(axis=1)
    return out


def okriging(
    x_obs: np.ndarray,
    dists_obs: np.ndarray,
    dists_targets: np.ndarray,
    variogram: Variogram | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Ordinary-kriging estimates and weights for every target node.

    Returns (estimates (time, targets), weights (observed, targets)); the
    weights of each target sum to one by the Lagrange constraint.
    """
    x_obs = np.asarray(x_obs, dtype=np.float64)
    dists_obs = np.asarray(dists_obs, dtype=np.float64)
    dists_targets = np.asarray(dists_targets, dtype=np.float64)
    n_obs = x_obs.shape[1]
    if dists_obs.shape != (n_obs, n_obs):
        raise DataError(f"observed distance matrix {dists_obs.shape} must be ({n_obs}, {n_obs})")
    if dists_targets.ndim != 2 or dists_targets.shape[1] != n_obs:
        raise DataError(
            f"target distance matrix {dists_targets.shape} does not match {n_obs} observed nodes"
        )
    if not (np.all(np.isfinite(dists_obs)) and np.all(np.isfinite(dists_targets))):
        raise DataError("ordinary kriging needs full finite distance information")
    if variogram is None:
        variogram = default_variogram(x_obs, dists_obs)

    n_targets = dists_targets.shape[0]
    system = np.empty((n_obs + 1, n_obs + 1))
    system[:n_obs, :n_obs] = variogram(dists_obs)
    system[n_obs, :] = 1.0
    system[:, n_obs] = 1.0
    system[n_obs, n_obs] = 0.0

    rhs = np.empty((n_obs + 1, n_targets))
    rhs[:n_obs] = variogram(dists_targets).T
    rhs[n_obs] = 1.0
    try:
        solution = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        raise NumericalError("singular ordinary-kriging system; increase the nugget") from None
    weights = solution[:n_obs]
    estimates = x_obs @ weights
    return estimates, weights
