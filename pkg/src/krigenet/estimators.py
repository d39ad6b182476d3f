"""Scikit-learn style estimators wrapping the kriging network and baselines.

The estimators follow the BaseEstimator protocol (constructor args stored
verbatim, ``get_params``/``set_params``/``clone`` supported, fitted state in
trailing-underscore attributes) so they compose with the wider ecosystem.
Readings matrices are (time, nodes); graphs travel as fit/predict keywords
because they are data, not hyperparameters.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import baselines
from .data import Dataset, Splits, normalize
from .errors import ConfigError, DataError
from .graphs import SpatialGraph, remove_self_loops
from .network import kriging_forward, load_checkpoint, save_checkpoint
from .training import TrainConfig, consecutive_windows, train


def _check_readings(X, min_rows: int = 1) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"readings must be 2-D (time, nodes), got shape {X.shape}")
    if X.shape[0] < min_rows:
        raise DataError(f"need at least {min_rows} time steps, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise DataError("readings contain non-finite values")
    return X


class KrigingNetwork(BaseEstimator):
    """Inductive spatio-temporal kriging network.

    fit(X, graph=...) trains on the observed nodes' readings (columns aligned
    with the graph's nodes), holding out the trailing eighth of the rows for
    validation-based early stopping. predict(X, graph=..., hidden=...) runs a
    single forward pass over the full inference graph and returns estimates
    for the hidden nodes in original units.

    Parameters mirror the training configuration; ``strategy`` selects how
    training batches mimic inference ("increment" inserts virtual nodes,
    "decrement" masks observed values, "transductive" attaches the real
    unobserved topology, which then must be supplied to fit via ``graph`` +
    ``hidden``).
    """

    def __init__(
        self,
        dim: int = 64,
        window: int = 24,
        m: int = 1,
        n_layers: int = 2,
        pseudo_label_weight: float = 1.0,
        lr: float = 2e-4,
        batch_size: int = 32,
        max_epochs: int = 300,
        patience: int = 50,
        grad_clip_norm: float = 1.0,
        alpha: float = 0.5,
        epsilon_range: tuple[float, float] = (0.0, 0.2),
        strategy: str = "increment",
        normalization: str = "zscore",
        max_batches_per_epoch: int = 50,
        windows_per_chunk: int | None = None,
        seed: int = 1,
    ):
        self.dim = dim
        self.window = window
        self.m = m
        self.n_layers = n_layers
        self.pseudo_label_weight = pseudo_label_weight
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.grad_clip_norm = grad_clip_norm
        self.alpha = alpha
        self.epsilon_range = epsilon_range
        self.strategy = strategy
        self.normalization = normalization
        self.max_batches_per_epoch = max_batches_per_epoch
        self.windows_per_chunk = windows_per_chunk
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            strategy=self.strategy,
            window=self.window,
            batch_size=self.batch_size,
            dim=self.dim,
            m=self.m,
            n_layers=self.n_layers,
            lam=self.pseudo_label_weight,
            lr=self.lr,
            max_epochs=self.max_epochs,
            patience=self.patience,
            grad_clip_norm=self.grad_clip_norm,
            epsilon_range=tuple(self.epsilon_range),
            seed=self.seed,
            max_batches_per_epoch=self.max_batches_per_epoch,
            windows_per_chunk=self.windows_per_chunk,
        )

    def fit(self, X, y=None, *, graph: SpatialGraph, hidden=None):
        X = _check_readings(X, min_rows=self.window + 1)
        n_visible = X.shape[1] if hidden is None else int((~np.asarray(hidden, bool)).sum())
        if X.shape[1] != n_visible:
            raise DataError(f"{X.shape[1]} reading columns for {n_visible} visible nodes")
        if hidden is None and X.shape[1] != graph.n_nodes:
            raise DataError(f"{X.shape[1]} reading columns for {graph.n_nodes} graph nodes")
        if self.strategy == "transductive" and hidden is None:
            raise ConfigError("transductive strategy needs hidden= marking value-less nodes")

        dataset = Dataset(readings=X, node_ids=[f"c{i}" for i in range(X.shape[1])])
        n_train = int(X.shape[0] * 7 / 8)
        dataset.splits = Splits(
            train=slice(0, n_train), val=slice(n_train, X.shape[0]), test=slice(0, 0)
        )
        dataset = normalize(dataset, self.normalization)

        result = train(dataset, graph, self._config(), hidden=hidden)
        self.params_ = result.params
        self.scaler_ = dataset.normalization
        self.history_ = result.history
        self.best_val_mae_ = result.best_val_mae
        self.best_epoch_ = result.best_epoch
        self.n_epochs_ = len(result.history)
        self.skipped_batches_ = result.skipped_batches
        return self

    def predict(self, X, *, graph: SpatialGraph, hidden) -> np.ndarray:
        """Estimates for the hidden nodes, shape (time, n_hidden)."""
        check_is_fitted(self, "params_")
        hidden = np.asarray(hidden, dtype=bool)
        if hidden.shape != (graph.n_nodes,):
            raise DataError(f"hidden mask shape {hidden.shape} != ({graph.n_nodes},)")
        if not hidden.any():
            raise DataError("no hidden nodes to predict")
        X = _check_readings(X)
        visible_idx = np.flatnonzero(~hidden)
        if X.shape[1] != visible_idx.size:
            raise DataError(f"{X.shape[1]} reading columns for {visible_idx.size} visible nodes")

        scaler = self.scaler_
        x_norm = scaler.transform(X) if scaler is not None else X
        a_minus = remove_self_loops(graph.weights)
        out = np.empty((X.shape[0], graph.n_nodes))
        for win in consecutive_windows(X.shape[0], self.window):
            frame = np.zeros((x_norm[win].shape[0], graph.n_nodes))
            frame[:, visible_idx] = x_norm[win]
            pred = kriging_forward(frame[:, :, None], a_minus, self.params_, hidden)
            out[win] = pred.data[..., 0]
        if scaler is not None:
            out = scaler.inverse(out)
        return out[:, hidden]

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_)

    def load_params(self, path) -> "KrigingNetwork":
        """Adopt a trained checkpoint (weights only; set a scaler separately)."""
        self.params_ = load_checkpoint(path)
        if not hasattr(self, "scaler_"):
            self.scaler_ = None
        return self


class MeanInterpolator(BaseEstimator):
    """Per-interval mean of the visible readings, copied to every target."""

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, X, *, n_targets: int) -> np.ndarray:
        check_is_fitted(self, "fitted_")
        return baselines.mean_impute(_check_readings(X), n_targets)


class KNNInterpolator(BaseEstimator):
    """Unweighted mean of the k nearest visible nodes, per interval."""

    def __init__(self, k: int = 10):
        self.k = k

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, X, *, dists) -> np.ndarray:
        """``dists`` is (targets, visible); inf marks unknown distances."""
        check_is_fitted(self, "fitted_")
        return baselines.knn_krige(_check_readings(X), dists, k=self.k)


class OrdinaryKriging(BaseEstimator):
    """Gaussian-variogram ordinary kriging over the visible nodes.

    Variogram parameters default to data-driven values at fit time:
    sill = variance of the fit readings, nugget = 1e-6 * sill, and
    range = half the largest observed-to-observed distance.
    """

    def __init__(self, range_: float | None = None, sill: float | None = None,
                 nugget: float | None = None):
        self.range_ = range_
        self.sill = sill
        self.nugget = nugget

    def fit(self, X, *, dists_obs):
        """``X`` is (time, visible) readings; ``dists_obs`` their distances."""
        X = _check_readings(X)
        dists_obs = np.asarray(dists_obs, dtype=np.float64)
        defaults = baselines.default_variogram(X, dists_obs)
        self.variogram_ = baselines.Variogram(
            range_=self.range_ if self.range_ is not None else defaults.range_,
            sill=self.sill if self.sill is not None else defaults.sill,
            nugget=self.nugget if self.nugget is not None else defaults.nugget,
        )
        self.dists_obs_ = dists_obs
        return self

    def predict(self, X, *, dists) -> np.ndarray:
        """``dists`` is (targets, visible) distances from targets."""
        check_is_fitted(self, "variogram_")
        estimates, self.weights_ = baselines.okriging(
            _check_readings(X), self.dists_obs_, dists, self.variogram_
        )
        return estimates
