"""Estimator-protocol conformance and fit/predict behavior."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from krigenet import data, graphs
from krigenet.errors import DataError
from krigenet.estimators import (
    KNNInterpolator,
    KrigingNetwork,
    MeanInterpolator,
    OrdinaryKriging,
)


@pytest.fixture(scope="module")
def corpus():
    ds = data.synth_generate(14, 400, topology_seed=1, dynamics_seed=2, scale=40.0, offset=50.0)
    splits = data.split_7_1_2(ds)
    g = graphs.graph_from_edges(ds.edges, 14, coords=ds.coords)
    roles = graphs.apply_missing(g, graphs.MissingPattern("random", 0.5, seed=1))
    obs = np.flatnonzero(roles == graphs.OBSERVED)
    unobs = np.flatnonzero(roles == graphs.UNOBSERVED)
    return ds, splits, g, obs, unobs


@pytest.fixture(scope="module")
def fitted_network(corpus):
    ds, splits, g, obs, unobs = corpus
    net = KrigingNetwork(dim=6, window=6, batch_size=4, max_epochs=2, patience=2,
                         max_batches_per_epoch=2, seed=1)
    net.fit(ds.readings[: splits.val.stop][:, obs], graph=g.subgraph(obs))
    return net


class TestProtocol:
    def test_get_set_params_round_trip(self):
        net = KrigingNetwork(dim=12, seed=7)
        params = net.get_params()
        assert params["dim"] == 12 and params["seed"] == 7
        net.set_params(dim=24)
        assert net.dim == 24

    def test_clone(self):
        net = KrigingNetwork(dim=12, alpha=0.3)
        twin = clone(net)
        assert twin.get_params() == net.get_params()

    def test_unfitted_predict_raises(self, corpus):
        ds, splits, g, obs, unobs = corpus
        hidden = np.zeros(g.n_nodes, bool)
        hidden[unobs] = True
        with pytest.raises(NotFittedError):
            KrigingNetwork().predict(ds.readings[:10][:, obs], graph=g, hidden=hidden)

    def test_baseline_estimators_clone(self):
        assert clone(KNNInterpolator(k=3)).k == 3
        assert clone(OrdinaryKriging(range_=2.0)).range_ == 2.0
        clone(MeanInterpolator())


class TestNetworkFitPredict:
    def test_predict_shape_and_units(self, corpus, fitted_network):
        ds, splits, g, obs, unobs = corpus
        hidden = np.zeros(g.n_nodes, bool)
        hidden[unobs] = True
        x_test = ds.readings[splits.test][:, obs]
        pred = fitted_network.predict(x_test, graph=g, hidden=hidden)
        assert pred.shape == (x_test.shape[0], unobs.size)
        # original units: same order of magnitude as the raw readings
        assert np.abs(pred.mean() - ds.readings.mean()) < 3 * ds.readings.std()

    def test_history_and_fitted_attributes(self, fitted_network):
        assert fitted_network.n_epochs_ == 2
        assert len(fitted_network.history_) == 2
        assert np.isfinite(fitted_network.best_val_mae_)

    def test_save_load_round_trip(self, corpus, fitted_network, tmp_path):
        ds, splits, g, obs, unobs = corpus
        hidden = np.zeros(g.n_nodes, bool)
        hidden[unobs] = True
        x_test = ds.readings[splits.test][:, obs]
        base = fitted_network.predict(x_test, graph=g, hidden=hidden)

        path = tmp_path / "model.ckpt"
        fitted_network.save(path)
        restored = KrigingNetwork(dim=6, window=6).load_params(path)
        restored.scaler_ = fitted_network.scaler_
        again = restored.predict(x_test, graph=g, hidden=hidden)
        assert np.array_equal(base, again)

    def test_column_count_validation(self, corpus):
        ds, splits, g, obs, unobs = corpus
        net = KrigingNetwork(dim=4, window=6, max_epochs=1)
        with pytest.raises(DataError):
            net.fit(ds.readings[:100], graph=g.subgraph(obs))  # too many columns

    def test_short_series_rejected(self, corpus):
        ds, splits, g, obs, unobs = corpus
        net = KrigingNetwork(dim=4, window=24)
        with pytest.raises(DataError):
            net.fit(ds.readings[:10][:, obs], graph=g.subgraph(obs))


class TestBaselineEstimators:
    def test_mean_interpolator(self):
        x = np.array([[2.0, 4.0], [1.0, 3.0]])
        out = MeanInterpolator().fit().predict(x, n_targets=2)
        assert np.array_equal(out, [[3.0, 3.0], [2.0, 2.0]])

    def test_knn_interpolator(self):
        x = np.array([[1.0, 5.0, 9.0]])
        dists = np.array([[0.5, 1.0, 9.0]])
        out = KNNInterpolator(k=2).fit().predict(x, dists=dists)
        assert np.allclose(out, [[3.0]])

    def test_ordinary_kriging_estimator(self, corpus):
        ds, splits, g, obs, unobs = corpus
        dists = graphs.pairwise_distances(ds.coords)
        ok = OrdinaryKriging().fit(
            ds.readings[splits.train][:, obs], dists_obs=dists[np.ix_(obs, obs)]
        )
        est = ok.predict(ds.readings[splits.test][:, obs], dists=dists[np.ix_(unobs, obs)])
        assert est.shape == (ds.readings[splits.test].shape[0], unobs.size)
        assert np.allclose(ok.weights_.sum(axis=0), 1.0, atol=1e-9)
