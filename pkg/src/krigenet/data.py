"""Dataset ingestion, normalization, temporal splits, and synthetic corpora.

Canonical readings file: a CSV with a header row of node ids (optionally
preceded by a ``time`` column) and one row per time step. Topology arrives
either as an edge list ``from,to,dist`` or a coordinates file ``id,lat,lon``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import graphs
from .errors import DataError


class Splits(NamedTuple):
    train: slice
    val: slice
    test: slice


@dataclass
class ZScore:
    """Global zero-mean normalization; stats from observed train readings."""

    mean: float
    std: float

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


@dataclass
class MinMax:
    """Per-node range normalization (each node scaled by its own capacity).

    ``lo``/``hi`` are per-column arrays aligned with the readings the scaler
    was fitted on. Columns beyond the fitted set fall back to the median
    range so inductive targets can still be mapped back to original units.
    """

    lo: np.ndarray
    hi: np.ndarray

    def _aligned(self, n_cols: int) -> tuple[np.ndarray, np.ndarray]:
        if n_cols == self.lo.size:
            return self.lo, self.hi
        lo_fb = float(np.median(self.lo))
        hi_fb = float(np.median(self.hi))
        return np.full(n_cols, lo_fb), np.full(n_cols, hi_fb)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        lo, hi = self._aligned(x.shape[-1])
        return (x - lo) / (hi - lo)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        lo, hi = self._aligned(x.shape[-1])
        return x * (hi - lo) + lo


Normalization = ZScore | MinMax


@dataclass
class Dataset:
    """Readings table plus topology and optional normalization state."""

    readings: np.ndarray
    node_ids: list[str]
    coords: np.ndarray | None = None
    edges: list[tuple[int, int, float]] | None = None
    timestamps: np.ndarray | None = None
    normalization: Normalization | None = None
    splits: Splits | None = None

    def __post_init__(self):
        self.readings = np.asarray(self.readings, dtype=np.float64)
        if self.readings.ndim != 2:
            raise DataError(f"readings must be 2-D (time x nodes), got {self.readings.shape}")
        if len(self.node_ids) != self.readings.shape[1]:
            raise DataError(
                f"{len(self.node_ids)} node ids for {self.readings.shape[1]} reading columns"
            )

    @property
    def n_steps(self) -> int:
        return self.readings.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.readings.shape[1]


# ---------------------------------------------------------------------------
# file io


def load_readings(path) -> tuple[np.ndarray, list[str], np.ndarray | None]:
    """Parse the canonical readings CSV; returns (values, node_ids, timestamps)."""
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        raise DataError(f"{path}: empty readings file")
    header = [h.strip() for h in lines[0].split(",")]
    has_time = bool(header) and header[0].lower() in ("time", "timestamp")
    node_ids = header[1:] if has_time else header
    if not node_ids:
        raise DataError(f"{path}: header row has no node ids")
    values = np.empty((len(lines) - 1, len(node_ids)))
    timestamps = [] if has_time else None
    for r, line in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != len(header):
            raise DataError(f"{path}:{r}: expected {len(header)} fields, got {len(parts)}")
        if has_time:
            timestamps.append(parts[0])
            parts = parts[1:]
        for c, cell in enumerate(parts):
            try:
                values[r - 2, c] = float(cell)
            except ValueError:
                raise DataError(f"{path}:{r}: non-numeric cell {cell!r} in column {c + 1}") from None
    ts = np.array(timestamps, dtype="datetime64[s]") if has_time else None
    return values, node_ids, ts


def save_readings(path, readings: np.ndarray, node_ids: list[str], timestamps=None) -> None:
    readings = np.asarray(readings, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        header = (["time"] if timestamps is not None else []) + list(node_ids)
        fh.write(",".join(header) + "\n")
        for r in range(readings.shape[0]):
            row = [repr(float(v)) for v in readings[r]]  # shortest exact form
            if timestamps is not None:
                row = [str(timestamps[r])] + row
            fh.write(",".join(row) + "\n")


def load(readings_path, topology_path=None, topology_kind: str | None = None) -> Dataset:
    """Load readings plus topology, aligning topology ids to reading columns.

    topology_kind is "edges" or "coords"; inferred from the file when None
    (three columns with string first field that parses as an id either way,
    so the second field decides: numeric pairs mean coords).
    """
    values, node_ids, ts = load_readings(readings_path)
    coords = None
    edges = None
    if topology_path is not None:
        kind = topology_kind or _sniff_topology(topology_path, node_ids)
        if kind == "edges":
            edges = graphs.read_edge_list(topology_path, node_ids)
        elif kind == "coords":
            coords = graphs.read_coords(topology_path, node_ids)
        else:
            raise DataError(f"unknown topology kind {kind!r}")
    return Dataset(values, node_ids, coords=coords, edges=edges, timestamps=ts)


def _sniff_topology(path, node_ids: list[str]) -> str:
    ids = set(node_ids)

    def numeric(s: str) -> bool:
        try:
            float(s)
            return True
        except ValueError:
            return False

    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = [p.strip() for p in line.strip().split(",")]
            if len(parts) != 3 or parts[0] not in ids:
                continue
            if parts[1] in ids:
                return "edges"
            if numeric(parts[1]):
                return "coords"
            return "edges"  # second field is neither numeric nor a known id
    raise DataError(f"{path}: could not identify topology format against reading columns")


# ---------------------------------------------------------------------------
# temporal splits


def split_7_1_2(dataset: Dataset) -> Splits:
    """Contiguous, unshuffled 70/10/20 segments; attached to the dataset."""
    t = dataset.n_steps
    if t < 10:
        raise DataError(f"need at least 10 time steps to split, got {t}")
    n_train = int(t * 0.7)
    n_val = int(t * 0.1)
    splits = Splits(
        train=slice(0, n_train),
        val=slice(n_train, n_train + n_val),
        test=slice(n_train + n_val, t),
    )
    dataset.splits = splits
    return splits


def split_by_months(dataset: Dataset, test_months=(3, 6, 9, 12)) -> np.ndarray:
    """Boolean test-row mask for a month-based hold-out; needs timestamps."""
    if dataset.timestamps is None:
        raise DataError("month-based split requires timestamps in the readings file")
    months = dataset.timestamps.astype("datetime64[M]").astype(int) % 12 + 1
    return np.isin(months, list(test_months))


# ---------------------------------------------------------------------------
# normalization


def normalize(dataset: Dataset, scheme: str = "zscore", observed=None) -> Dataset:
    """New dataset with transformed readings and the scaler stored for inverse.

    Statistics come from the train split. zscore uses the observed columns
    only; minmax is per-node over all columns (a node's range plays the role
    of its capacity, which is metadata also known for inference targets).
    """
    if dataset.splits is None:
        raise DataError("split the dataset before normalizing")
    train_rows = dataset.readings[dataset.splits.train]
    if train_rows.size == 0:
        raise DataError("train segment is empty")
    if scheme == "none":
        return replace(dataset, normalization=None)
    if scheme == "zscore":
        cols = train_rows if observed is None else train_rows[:, np.asarray(observed, bool)]
        if cols.size == 0:
            raise DataError("no observed columns to compute normalization from")
        mean = float(cols.mean())
        std = float(cols.std())
        if std == 0.0:
            raise DataError("constant readings: zscore std is zero")
        scaler: Normalization = ZScore(mean=mean, std=std)
    elif scheme == "minmax":
        lo = train_rows.min(axis=0)
        hi = train_rows.max(axis=0)
        if np.any(hi - lo == 0.0):
            flat = [dataset.node_ids[i] for i in np.flatnonzero(hi - lo == 0.0)]
            raise DataError(f"zero range for nodes {flat[:5]}: minmax undefined")
        scaler = MinMax(lo=lo, hi=hi)
    else:
        raise DataError(f"unknown normalization scheme {scheme!r}")
    return replace(dataset, readings=scaler.transform(dataset.readings), normalization=scaler)


# ---------------------------------------------------------------------------
# synthetic corpus


def synth_generate(
    n_nodes: int,
    n_steps: int,
    topology_seed: int = 1,
    dynamics_seed: int = 2,
    mean_degree: float = 6.0,
    season_period: int = 24,
    scale: float = 1.0,
    offset: float = 0.0,
) -> Dataset:
    """Random geometric graph in the unit square plus diffusion readings.

    Readings follow X[t+1] = 0.7 * rownorm(A) X[t] + 0.25 * season(t)
    + 0.05 * noise with a seasonal phase that varies smoothly in space, then
    get mapped through ``offset + scale * x``.
    """
    if n_nodes < 4:
        raise DataError(f"need at least 4 nodes, got {n_nodes}")
    rng_topo = np.random.default_rng(topology_seed)
    radius = float(np.sqrt(mean_degree / ((n_nodes - 1) * np.pi)))
    coords = None
    graph = None
    for _ in range(5):
        coords = rng_topo.uniform(size=(n_nodes, 2))
        graph = graphs.graph_from_coords(coords, delta=radius)
        if _connected(graph.weights):
            break
        radius *= 1.25
        graph = None
    if graph is None:
        raise DataError("could not generate a connected geometric graph in 5 attempts")

    weights = graph.weights
    row_sums = weights.sum(axis=1, keepdims=True)
    transition = weights / np.where(row_sums == 0.0, 1.0, row_sums)

    rng_dyn = np.random.default_rng(dynamics_seed)
    phase = np.pi * (coords[:, 0] + coords[:, 1])
    x = rng_dyn.normal(size=n_nodes)
    rows = np.empty((n_steps, n_nodes))
    for t in range(n_steps):
        rows[t] = x
        season = np.sin(2.0 * np.pi * t / season_period + phase)
        x = 0.7 * (transition @ x) + 0.25 * season + 0.05 * rng_dyn.normal(size=n_nodes)

    edges = []
    dists = graphs.pairwise_distances(coords)
    for i in range(n_nodes):
        for j in range(n_nodes):
            if i != j and dists[i, j] <= radius:
                edges.append((i, j, float(dists[i, j])))

    node_ids = [f"n{i:03d}" for i in range(n_nodes)]
    return Dataset(
        readings=offset + scale * rows,
        node_ids=node_ids,
        coords=coords,
        edges=edges,
    )


def _connected(weights: np.ndarray) -> bool:
    n = weights.shape[0]
    adj = (weights > 0.0) | (weights.T > 0.0)
    seen = np.zeros(n, dtype=bool)
    frontier = [0]
    seen[0] = True
    while frontier:
        i = frontier.pop()
        for j in np.flatnonzero(adj[i]):
            if not seen[j]:
                seen[j] = True
                frontier.append(int(j))
    return bool(seen.all())
