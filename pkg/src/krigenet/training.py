"""Batch construction, the optimization loop, and the validation protocol.

Three batch strategies share one loss shape:

* increment: a fresh virtual-node augmentation per batch, so the training
  graph varies batch to batch; virtual entries are zero inputs with no labels.
* decrement: no insertion; a random fraction of observed nodes have their
  values zeroed in the input and the network reconstructs them (labels stay
  available for every observed node).
* transductive: the real unobserved topology is attached with zero values.

Validation re-masks a fixed, seeded 20% of observed nodes, reconstructs them
over the validation windows, and reports their MAE in original units; early
stopping and checkpoint selection track that score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward
from .data import Dataset
from .errors import ConfigError, ContractError, DataError, NumericalError
from .graphs import VIRTUAL, SpatialGraph, insert_virtual_nodes, remove_self_loops
from .network import ModelParams, init_params, kriging_forward, ncr_pass

STRATEGIES = ("increment", "decrement", "transductive")

_STREAMS = {"mask": 0, "augmentation": 1, "init": 2, "batching": 3, "validation": 4}


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Named substream of the root seed, so ablations can vary one at a time."""
    if name not in _STREAMS:
        raise ConfigError(f"unknown rng stream {name!r}")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(_STREAMS[name],))
    return np.random.default_rng(seq)


@dataclass
class TrainConfig:
    alpha: float = 0.5
    strategy: str = "increment"
    window: int = 24
    batch_size: int = 32
    dim: int = 64
    m: int = 1
    n_layers: int = 2
    lam: float = 1.0
    lr: float = 2e-4
    max_epochs: int = 300
    patience: int = 50
    grad_clip_norm: float = 1.0
    epsilon_range: tuple[float, float] = (0.0, 0.2)
    seed: int = 1
    max_batches_per_epoch: int = 50
    windows_per_chunk: int | None = None  # None sizes chunks to bound tape memory
    val_mask_fraction: float = 0.2

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        positive = {
            "window": self.window,
            "batch_size": self.batch_size,
            "dim": self.dim,
            "lr": self.lr,
            "max_epochs": self.max_epochs,
            "grad_clip_norm": self.grad_clip_norm,
            "max_batches_per_epoch": self.max_batches_per_epoch,
        }
        if self.windows_per_chunk is not None:
            positive["windows_per_chunk"] = self.windows_per_chunk
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.m < 0 or self.n_layers < 1:
            raise ConfigError("m must be >= 0 and n_layers >= 1")
        if self.lam < 0.0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.patience < 0 or self.patience > self.max_epochs:
            raise ConfigError("patience must lie in [0, max_epochs]")
        lo, hi = self.epsilon_range
        if lo < 0.0 or hi < lo:
            raise ConfigError(f"bad epsilon range {self.epsilon_range}")


@dataclass
class AugmentedBatch:
    """One training batch; node axis covers visible plus hidden nodes."""

    inputs: np.ndarray  # (b, t, n, 1), hidden entries zeroed
    targets: np.ndarray  # (b, t, n, 1), zeros where unsupervised
    mask: np.ndarray  # (b, t, n), 1 iff the inputs entry holds a real reading
    target_mask: np.ndarray  # (b, t, n), 1 iff the targets entry is supervised
    a_minus: np.ndarray  # (n, n), self-loop-free adjacency
    hidden: np.ndarray  # (n,) bool, nodes without input values
    roles: np.ndarray  # (n,) role labels


def make_batch(
    readings: np.ndarray,
    graph: SpatialGraph,
    config: TrainConfig,
    rng_aug: np.random.Generator,
    rng_batch: np.random.Generator,
    hidden: np.ndarray | None = None,
) -> AugmentedBatch:
    """Sample windows and assemble the strategy-specific node set.

    ``readings`` holds normalized values for the graph's visible nodes, in
    graph order (for transductive, in order of the non-hidden graph nodes).
    """
    t = config.window
    n_steps = readings.shape[0]
    if n_steps < t:
        raise DataError(f"series of length {n_steps} is shorter than window {t}")

    if config.strategy == "increment":
        aug, _ = insert_virtual_nodes(graph, config.alpha, rng_aug, config.epsilon_range)
        n = aug.n_nodes
        node_hidden = aug.roles == VIRTUAL
        a_minus = remove_self_loops(aug.weights)
        roles = aug.roles
        column_of = np.arange(readings.shape[1])  # visible nodes lead the order
    elif config.strategy == "decrement":
        n = graph.n_nodes
        n_masked = int(np.clip(round(config.alpha * n), 1, n - 1))
        masked = rng_aug.choice(n, size=n_masked, replace=False)
        node_hidden = np.zeros(n, dtype=bool)
        node_hidden[masked] = True
        a_minus = remove_self_loops(graph.weights)
        roles = graph.roles
        column_of = np.arange(n)
    else:  # transductive
        if hidden is None:
            raise ConfigError("transductive strategy needs the full graph's hidden mask")
        node_hidden = np.asarray(hidden, dtype=bool)
        n = graph.n_nodes
        if node_hidden.shape != (n,):
            raise ConfigError(f"hidden mask shape {node_hidden.shape} != ({n},)")
        a_minus = remove_self_loops(graph.weights)
        roles = graph.roles
        column_of = np.full(n, -1)
        column_of[~node_hidden] = np.arange((~node_hidden).sum())

    starts = rng_batch.integers(0, n_steps - t + 1, size=config.batch_size)
    b = config.batch_size
    inputs = np.zeros((b, t, n))
    targets = np.zeros((b, t, n))
    mask = np.zeros((b, t, n))
    target_mask = np.zeros((b, t, n))

    if config.strategy == "increment":
        n_vis = readings.shape[1]
        for w, s in enumerate(starts):
            inputs[w, :, :n_vis] = readings[s : s + t]
        targets[:, :, :n_vis] = inputs[:, :, :n_vis]
        mask[:, :, :n_vis] = 1.0
        target_mask[:, :, :n_vis] = 1.0
    elif config.strategy == "decrement":
        for w, s in enumerate(starts):
            window = readings[s : s + t]
            targets[w] = window
            inputs[w] = window
        inputs[:, :, node_hidden] = 0.0
        mask[:, :, ~node_hidden] = 1.0
        target_mask[:] = 1.0  # every node is observed; masked ones get reconstructed
    else:
        vis_cols = column_of[~node_hidden]
        for w, s in enumerate(starts):
            inputs[w][:, ~node_hidden] = readings[s : s + t][:, vis_cols]
        targets[:] = inputs
        mask[:, :, ~node_hidden] = 1.0
        target_mask[:, :, ~node_hidden] = 1.0

    return AugmentedBatch(
        inputs=inputs[..., None],
        targets=targets[..., None],
        mask=mask,
        target_mask=target_mask,
        a_minus=a_minus,
        hidden=node_hidden,
        roles=roles,
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m=[np.zeros_like(t.data) for t in params.tensors()],
            v=[np.zeros_like(t.data) for t in params.tensors()],
        )


def clip_gradients(tensors: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad**2).sum())
    total = float(np.sqrt(total))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for t in tensors:
            if t.grad is not None:
                t.grad *= factor
    return total


def adam_step(
    params: ModelParams,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Standard Adam with bias correction; missing gradients count as zero."""
    beta1, beta2 = betas
    state.step += 1
    t = state.step
    for i, tensor in enumerate(params.tensors()):
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient in adam_step")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad * grad
        m_hat = state.m[i] / (1.0 - beta1**t)
        v_hat = state.v[i] / (1.0 - beta2**t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total_steps)) / 2."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return float(lr0)
    return float(lr0 * (1.0 + np.cos(np.pi * step / total_steps)) / 2.0)


# ---------------------------------------------------------------------------
# loss over a batch (chunked over windows; gradients accumulate exactly)


def _chunk_windows(config: TrainConfig, n_nodes: int) -> int:
    """Windows per forward chunk; sized so a stacked feature tensor stays
    around 8 MB, which keeps the whole tape comfortably in memory."""
    if config.windows_per_chunk is not None:
        return config.windows_per_chunk
    slice_bytes = config.window * n_nodes * (2 * config.m + 1) * config.dim * 8
    return int(np.clip(8_000_000 // max(slice_bytes, 1), 1, config.batch_size))


def batch_loss_and_grads(params: ModelParams, batch: AugmentedBatch, config: TrainConfig) -> float:
    """Backward the two-term loss through the whole batch; returns its value.

    Windows are processed in chunks to bound memory; each chunk's terms are
    weighted by the full-batch counts, so the accumulated gradient equals the
    single-pass gradient exactly.
    """
    total_obs = float(batch.target_mask.sum())
    if total_obs == 0.0:
        raise ContractError("batch has no supervised entries")
    total_all = float(batch.targets.size)
    b = batch.inputs.shape[0]
    chunk = _chunk_windows(config, batch.inputs.shape[2])
    loss_value = 0.0
    for s in range(0, b, chunk):
        e = min(s + chunk, b)
        x = Tensor(batch.inputs[s:e])
        out = ncr_pass(
            x, batch.mask[s:e], batch.a_minus, params, batch.hidden, window=config.window
        )
        diff_obs = (out.x_hat - Tensor(batch.targets[s:e])).abs()
        term_obs = (diff_obs * Tensor(batch.target_mask[s:e][..., None])).sum() * (1.0 / total_obs)
        diff_cycle = (out.x_hat_cycle - out.x_hat.detach()).abs()
        term_cycle = diff_cycle.sum() * (config.lam / total_all)
        chunk_loss = term_obs + term_cycle
        backward(chunk_loss)
        loss_value += chunk_loss.item()
    return loss_value


# ---------------------------------------------------------------------------
# validation


def validation_nodes(n_visible: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    count = max(1, int(round(fraction * n_visible)))
    count = min(count, n_visible - 1) if n_visible > 1 else 1
    return np.sort(rng.choice(n_visible, size=count, replace=False))


def consecutive_windows(n_steps: int, window: int) -> list[slice]:
    """Non-overlapping windows covering the segment; short tail kept."""
    if n_steps <= 0:
        return []
    if n_steps <= window:
        return [slice(0, n_steps)]
    out = [slice(s, s + window) for s in range(0, n_steps - window + 1, window)]
    tail = out[-1].stop
    if tail < n_steps:
        out.append(slice(tail, n_steps))
    return out


def validate(
    params: ModelParams,
    dataset: Dataset,
    graph: SpatialGraph,
    config: TrainConfig,
    masked_nodes: np.ndarray | None = None,
    hidden: np.ndarray | None = None,
) -> float:
    """Re-mask the fixed validation subset, reconstruct, MAE in original units.

    ``masked_nodes`` indexes the readings columns (visible nodes); ``hidden``
    marks graph nodes that never carry values (transductive only).
    """
    if dataset.splits is None:
        raise DataError("dataset has no splits")
    readings = dataset.readings[dataset.splits.val]
    if readings.shape[0] == 0:
        raise DataError("validation segment is empty")
    n_visible = readings.shape[1]
    if masked_nodes is None:
        masked_nodes = validation_nodes(
            n_visible, config.val_mask_fraction, stream_rng(config.seed, "validation")
        )
    if hidden is None:
        hidden = np.zeros(graph.n_nodes, dtype=bool)
    visible_graph_idx = np.flatnonzero(~hidden)
    if visible_graph_idx.size != n_visible:
        raise DataError(
            f"{n_visible} reading columns for {visible_graph_idx.size} visible graph nodes"
        )
    masked_graph_idx = visible_graph_idx[masked_nodes]
    forward_hidden = hidden.copy()
    forward_hidden[masked_graph_idx] = True
    a_minus = remove_self_loops(graph.weights)

    scaler = dataset.normalization
    raw = scaler.inverse(readings) if scaler is not None else readings
    abs_err = 0.0
    count = 0
    for win in consecutive_windows(readings.shape[0], config.window):
        x = np.zeros((readings[win].shape[0], graph.n_nodes))
        x[:, visible_graph_idx] = readings[win]
        x[:, forward_hidden] = 0.0
        pred = kriging_forward(x[:, :, None], a_minus, params, forward_hidden).data[..., 0]
        pred_visible = pred[:, visible_graph_idx]
        pred_visible = scaler.inverse(pred_visible) if scaler is not None else pred_visible
        abs_err += float(np.abs(pred_visible[:, masked_nodes] - raw[win][:, masked_nodes]).sum())
        count += masked_nodes.size * x.shape[0]
    return abs_err / count


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = float("inf")
    skipped_batches: int = 0


def train(
    dataset: Dataset,
    graph: SpatialGraph,
    config: TrainConfig,
    hidden: np.ndarray | None = None,
) -> TrainResult:
    """Run the optimization loop and return the best-by-validation parameters.

    ``dataset`` must be split and normalized; its readings columns align with
    the graph's visible nodes. ``hidden`` is only used by the transductive
    strategy, marking the value-less nodes of the (full) graph.
    """
    if dataset.splits is None:
        raise DataError("dataset has no splits")
    train_rows = dataset.readings[dataset.splits.train]
    if train_rows.shape[0] < config.window:
        raise DataError(
            f"train segment ({train_rows.shape[0]} steps) is shorter than window {config.window}"
        )

    rng_aug = stream_rng(config.seed, "augmentation")
    rng_batch = stream_rng(config.seed, "batching")
    rng_init = stream_rng(config.seed, "init")
    masked_nodes = validation_nodes(
        dataset.readings.shape[1], config.val_mask_fraction, stream_rng(config.seed, "validation")
    )

    params = init_params(config.dim, m=config.m, n_layers=config.n_layers, rng=rng_init)
    state = AdamState.for_params(params)

    n_windows = train_rows.shape[0] - config.window + 1
    batches_per_epoch = max(1, min(config.max_batches_per_epoch, n_windows // config.batch_size))
    total_steps = config.max_epochs * batches_per_epoch

    result = TrainResult(params=params)
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_losses = []
        for _ in range(batches_per_epoch):
            batch = make_batch(train_rows, graph, config, rng_aug, rng_batch, hidden=hidden)
            params.zero_grad()
            loss = batch_loss_and_grads(params, batch, config)
            if not np.isfinite(loss):
                raise NumericalError(f"training diverged: non-finite loss at epoch {epoch}")
            finite = all(
                t.grad is None or np.all(np.isfinite(t.grad)) for t in params.tensors()
            )
            lr_t = cosine_lr(step, total_steps, config.lr)
            step += 1
            if not finite:
                result.skipped_batches += 1
                continue
            clip_gradients(params.tensors(), config.grad_clip_norm)
            adam_step(params, state, lr_t)
            epoch_losses.append(loss)

        val_mae = validate(params, dataset, graph, config, masked_nodes=masked_nodes, hidden=hidden)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
            "val_mae": val_mae,
            "lr": cosine_lr(step, total_steps, config.lr),
        }
        result.history.append(record)
        if val_mae < result.best_val_mae:
            result.best_val_mae = val_mae
            result.best_epoch = epoch
            result.params = params.copy()
        if epoch - result.best_epoch >= config.patience:
            break
    return result
