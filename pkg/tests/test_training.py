"""Batch construction, optimizer, schedule, validation, and the train loop."""

import numpy as np
import pytest

from krigenet import data as data_mod
from krigenet import graphs
from krigenet.autodiff import Tensor
from krigenet.data import Dataset, normalize, split_7_1_2
from krigenet.errors import ConfigError, ContractError, DataError, NumericalError
from krigenet.graphs import OBSERVED, VIRTUAL, virtual_node_count
from krigenet.network import init_params, save_checkpoint
from krigenet.training import (
    AdamState,
    TrainConfig,
    adam_step,
    batch_loss_and_grads,
    clip_gradients,
    consecutive_windows,
    cosine_lr,
    make_batch,
    stream_rng,
    train,
    validate,
    validation_nodes,
)


def observed_graph(n=12, seed=0, delta=0.5):
    coords = np.random.default_rng(seed).uniform(size=(n, 2))
    return graphs.graph_from_coords(coords, delta=delta)


def toy_config(**overrides):
    base = dict(
        alpha=0.5,
        window=6,
        batch_size=4,
        dim=6,
        m=1,
        lam=1.0,
        lr=1e-3,
        max_epochs=3,
        patience=3,
        seed=1,
        max_batches_per_epoch=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


def toy_dataset(n_nodes=12, n_steps=120, seed=0):
    rng = np.random.default_rng(seed)
    readings = rng.normal(size=(n_steps, n_nodes)).cumsum(axis=0) * 0.1 + rng.normal(
        50.0, 5.0, size=n_nodes
    )
    ds = Dataset(readings, [f"n{i}" for i in range(n_nodes)])
    split_7_1_2(ds)
    return normalize(ds, "zscore")


class TestMakeBatch:
    def test_increment_node_count_follows_formula(self):
        g = observed_graph(36)
        cfg = toy_config(epsilon_range=(0.0, 0.0))
        readings = np.random.default_rng(1).normal(size=(50, 36))
        batch = make_batch(readings, g, cfg, stream_rng(1, "augmentation"), stream_rng(1, "batching"))
        assert batch.inputs.shape[2] == 36 + virtual_node_count(36, 0.5, 0.0) == 72
        assert (batch.roles == VIRTUAL).sum() == 36

    def test_decrement_keeps_node_count(self):
        g = observed_graph(10)
        cfg = toy_config(strategy="decrement")
        readings = np.random.default_rng(1).normal(size=(40, 10))
        batch = make_batch(readings, g, cfg, stream_rng(1, "augmentation"), stream_rng(1, "batching"))
        assert batch.inputs.shape[2] == 10
        assert batch.hidden.sum() == 5
        # masked nodes are zeroed in inputs but still supervised
        assert np.all(batch.inputs[:, :, batch.hidden] == 0.0)
        assert np.all(batch.target_mask == 1.0)
        assert np.all(batch.targets[:, :, batch.hidden] != 0.0)

    def test_same_rng_state_gives_identical_batches(self):
        g = observed_graph(9)
        cfg = toy_config()
        readings = np.random.default_rng(2).normal(size=(30, 9))
        b1 = make_batch(readings, g, cfg, stream_rng(5, "augmentation"), stream_rng(5, "batching"))
        b2 = make_batch(readings, g, cfg, stream_rng(5, "augmentation"), stream_rng(5, "batching"))
        assert np.array_equal(b1.inputs, b2.inputs)
        assert np.array_equal(b1.a_minus, b2.a_minus)
        assert np.array_equal(b1.hidden, b2.hidden)

    def test_observed_block_constant_across_increment_batches(self):
        g = observed_graph(8)
        cfg = toy_config()
        readings = np.random.default_rng(3).normal(size=(30, 8))
        rng_a, rng_b = stream_rng(1, "augmentation"), stream_rng(1, "batching")
        base = graphs.remove_self_loops(g.weights)
        for _ in range(5):
            batch = make_batch(readings, g, cfg, rng_a, rng_b)
            assert np.array_equal(batch.a_minus[:8, :8], base)

    def test_transductive_attaches_real_hidden_nodes(self):
        full = observed_graph(10)
        hidden = np.zeros(10, bool)
        hidden[[2, 5, 7]] = True
        cfg = toy_config(strategy="transductive")
        readings = np.random.default_rng(4).normal(size=(30, 7))
        batch = make_batch(
            readings, full, cfg, stream_rng(1, "augmentation"), stream_rng(1, "batching"),
            hidden=hidden,
        )
        assert batch.inputs.shape[2] == 10
        assert np.all(batch.inputs[:, :, hidden] == 0.0)
        assert np.all(batch.mask[:, :, hidden] == 0.0)
        assert np.all(batch.target_mask[:, :, ~hidden] == 1.0)

    def test_transductive_requires_hidden(self):
        with pytest.raises(ConfigError):
            make_batch(
                np.zeros((30, 10)), observed_graph(10), toy_config(strategy="transductive"),
                stream_rng(1, "augmentation"), stream_rng(1, "batching"),
            )

    def test_too_short_series(self):
        with pytest.raises(DataError):
            make_batch(
                np.zeros((3, 8)), observed_graph(8), toy_config(window=6),
                stream_rng(1, "augmentation"), stream_rng(1, "batching"),
            )

    def test_mask_marks_real_readings_only(self):
        g = observed_graph(8)
        cfg = toy_config()
        readings = np.random.default_rng(5).normal(size=(30, 8))
        batch = make_batch(readings, g, cfg, stream_rng(1, "augmentation"), stream_rng(1, "batching"))
        assert np.all(batch.mask[:, :, ~batch.hidden] == 1.0)
        assert np.all(batch.mask[:, :, batch.hidden] == 0.0)


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        params = init_params(dim=3, rng=np.random.default_rng(0))
        before = [t.data.copy() for t in params.tensors()]
        state = AdamState.for_params(params)
        for t in params.tensors():
            t.grad = np.zeros_like(t.data)
        adam_step(params, state, lr=0.1)
        for b, t in zip(before, params.tensors()):
            assert np.array_equal(b, t.data)
        assert state.step == 1

    def test_clipping_scales_by_ratio(self):
        t = Tensor(np.zeros(4), requires_grad=True)
        t.grad = np.array([6.0, 0.0, 0.0, 8.0])  # norm 10
        norm = clip_gradients([t], 1.0)
        assert np.isclose(norm, 10.0)
        assert np.allclose(t.grad, [0.6, 0.0, 0.0, 0.8])

    def test_clipping_never_increases_norm(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            t = Tensor(np.zeros(7), requires_grad=True)
            t.grad = rng.normal(size=7) * rng.uniform(0.1, 5.0)
            clip_gradients([t], 1.0)
            assert np.linalg.norm(t.grad) <= 1.0 + 1e-12

    def test_quadratic_descent(self):
        # single-parameter quadratic; 200 steps drive the loss below 1e-3
        w = Tensor(np.array([1.0]), requires_grad=True)

        class P:
            def tensors(self):
                return [w]

        params = P()
        state = AdamState(m=[np.zeros(1)], v=[np.zeros(1)])
        losses = []
        for _ in range(200):
            losses.append(float(w.data[0] ** 2))
            w.grad = 2.0 * w.data
            adam_step(params, state, lr=0.01)
        assert losses[-1] < 1e-3
        assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_non_finite_grads_rejected(self):
        params = init_params(dim=2, rng=np.random.default_rng(0))
        state = AdamState.for_params(params)
        for t in params.tensors():
            t.grad = np.full(t.shape, np.nan)
        with pytest.raises(NumericalError):
            adam_step(params, state, lr=0.1)


class TestCosine:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 2e-4) == 2e-4
        assert cosine_lr(100, 100, 2e-4) == 0.0
        assert np.isclose(cosine_lr(50, 100, 2e-4), 1e-4)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            cosine_lr(101, 100, 1e-3)


class TestValidate:
    def test_constant_zero_predictor_scores_mean_deviation(self):
        ds = toy_dataset()
        g = observed_graph(12)
        cfg = toy_config()
        params = init_params(cfg.dim, m=cfg.m, rng=np.random.default_rng(0))
        for _, t in params.named_tensors():
            t.data[:] = 0.0  # network outputs exactly 0 in normalized space
        masked = validation_nodes(12, 0.2, stream_rng(cfg.seed, "validation"))
        mae = validate(params, ds, g, cfg, masked_nodes=masked)
        raw = ds.normalization.inverse(ds.readings[ds.splits.val])
        expected = np.abs(raw[:, masked] - ds.normalization.mean).mean()
        assert np.isclose(mae, expected)

    def test_perfect_on_constant_masked_columns(self):
        # masked columns sit exactly at the train mean, so a zero-output
        # network reconstructs them exactly in original units
        rng = np.random.default_rng(0)
        n = 10
        cfg = toy_config()
        masked = validation_nodes(n, 0.2, stream_rng(cfg.seed, "validation"))
        values = rng.normal(50.0, 5.0, size=(120, n))
        other = np.setdiff1d(np.arange(n), masked)
        train_rows = slice(0, int(120 * 0.7))
        # fixpoint: masked columns equal the unmasked train mean, which then
        # equals the global train mean the scaler will compute
        values[:, masked] = values[train_rows][:, other].mean()
        ds = Dataset(values, [f"n{i}" for i in range(n)])
        split_7_1_2(ds)
        ds = normalize(ds, "zscore")
        params = init_params(cfg.dim, m=cfg.m, rng=rng)
        for _, t in params.named_tensors():
            t.data[:] = 0.0
        mae = validate(params, ds, observed_graph(n), cfg, masked_nodes=masked)
        assert mae < 1e-9

    def test_repeated_calls_identical(self):
        ds = toy_dataset()
        g = observed_graph(12)
        cfg = toy_config()
        params = init_params(cfg.dim, m=cfg.m, rng=np.random.default_rng(1))
        first = validate(params, ds, g, cfg)
        second = validate(params, ds, g, cfg)
        assert first == second

    def test_consecutive_windows_cover_segment(self):
        wins = consecutive_windows(50, 12)
        covered = np.concatenate([np.arange(50)[w] for w in wins])
        assert np.array_equal(np.unique(covered), np.arange(50))
        assert consecutive_windows(5, 12) == [slice(0, 5)]


class TestTrainLoop:
    def test_patience_zero_runs_exactly_one_epoch(self):
        ds = toy_dataset()
        result = train(ds, observed_graph(12), toy_config(patience=0, max_epochs=5))
        assert len(result.history) == 1

    def test_history_length_matches_epochs_run(self):
        ds = toy_dataset()
        result = train(ds, observed_graph(12), toy_config(max_epochs=3, patience=3))
        assert len(result.history) == 3
        assert [h["epoch"] for h in result.history] == [1, 2, 3]

    def test_best_checkpoint_dominates_history(self):
        ds = toy_dataset()
        result = train(ds, observed_graph(12), toy_config(max_epochs=4, patience=4))
        assert result.best_val_mae <= min(h["val_mae"] for h in result.history)

    def test_loss_decreases_on_diffusion_toy(self):
        ds = data_mod.synth_generate(8, 360, topology_seed=3, dynamics_seed=4)
        split_7_1_2(ds)
        ds = normalize(ds, "zscore")
        g = graphs.graph_from_edges(ds.edges, 8, coords=ds.coords)
        cfg = toy_config(alpha=0.4, window=6, batch_size=8, dim=6,
                         max_epochs=50, patience=50, max_batches_per_epoch=8, lr=2e-4)
        result = train(ds, g, cfg)
        first = np.mean([h["train_loss"] for h in result.history[:2]])
        last = np.mean([h["train_loss"] for h in result.history[-5:]])
        assert last < first

    def test_reproducible_history_and_checkpoint_bytes(self, tmp_path):
        ds = toy_dataset()
        cfg = toy_config(max_epochs=2, patience=2)
        r1 = train(ds, observed_graph(12), cfg)
        r2 = train(ds, observed_graph(12), cfg)
        assert r1.history == r2.history
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, r1.params)
        save_checkpoint(p2, r2.params)
        assert p1.read_bytes() == p2.read_bytes()

    def test_gradients_accumulate_like_unchunked(self):
        ds = toy_dataset()
        g = observed_graph(12)
        cfg_small = toy_config(windows_per_chunk=1)
        cfg_full = toy_config(windows_per_chunk=4)
        params1 = init_params(cfg_small.dim, m=1, rng=np.random.default_rng(3))
        params2 = params1.copy()
        readings = ds.readings[ds.splits.train]
        batch = make_batch(readings, g, cfg_small, stream_rng(2, "augmentation"), stream_rng(2, "batching"))
        l1 = batch_loss_and_grads(params1, batch, cfg_small)
        l2 = batch_loss_and_grads(params2, batch, cfg_full)
        assert np.isclose(l1, l2, rtol=1e-12)
        for t1, t2 in zip(params1.tensors(), params2.tensors()):
            assert np.allclose(t1.grad, t2.grad, atol=1e-12)


class TestStreams:
    def test_named_streams_differ_and_are_stable(self):
        a1 = stream_rng(1, "mask").uniform(size=4)
        a2 = stream_rng(1, "mask").uniform(size=4)
        b = stream_rng(1, "batching").uniform(size=4)
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)

    def test_unknown_stream_rejected(self):
        with pytest.raises(ConfigError):
            stream_rng(1, "coffee")
