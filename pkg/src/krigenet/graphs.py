"""Spatial graphs: adjacency construction, missing patterns, virtual nodes.

Adjacency weights follow the thresholded Gaussian kernel
``A[i, j] = exp(-dist(i, j)^2 / gamma)`` for ``dist <= delta`` and 0 beyond,
with ``gamma`` defaulting to the squared standard deviation of the pairwise
distances. Virtual-node insertion grows the observed graph one virtual node
at a time: each new node attaches to a uniformly chosen existing node, to
each of that node's first-order neighbors independently with a probability
drawn once per insertion, and every created edge gets a random direction
status (forward / backward / both). Previously inserted virtual nodes join
the candidate pool, so virtual-virtual edges can occur.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError

OBSERVED = "observed"
VIRTUAL = "virtual"
UNOBSERVED = "unobserved"

EARTH_RADIUS_KM = 6371.0


@dataclass
class SpatialGraph:
    """Weighted adjacency over nodes with role labels and optional coordinates."""

    weights: np.ndarray
    roles: np.ndarray
    coords: np.ndarray | None = None
    node_ids: list[str] | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.weights.shape[0]
        if self.weights.shape != (n, n):
            raise DataError(f"adjacency must be square, got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise DataError("adjacency contains non-finite weights")
        if self.weights.min() < 0.0 or self.weights.max() > 1.0:
            raise DataError("adjacency weights must lie in [0, 1]")
        self.roles = np.asarray(self.roles, dtype=object)
        if self.roles.shape != (n,):
            raise DataError(f"roles length {self.roles.shape} != node count {n}")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float64)
            if self.coords.shape != (n, 2):
                raise DataError(f"coords must be ({n}, 2), got {self.coords.shape}")

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    def role_indices(self, role: str) -> np.ndarray:
        return np.flatnonzero(self.roles == role)

    def neighbor_map(self) -> list[list[int]]:
        """Per-node first-order out-neighbors: j with weights[i, j] > 0, j != i."""
        out = []
        for i in range(self.n_nodes):
            row = np.flatnonzero(self.weights[i] > 0.0)
            out.append([int(j) for j in row if j != i])
        return out

    def subgraph(self, indices) -> "SpatialGraph":
        idx = np.asarray(indices, dtype=np.intp)
        return SpatialGraph(
            weights=self.weights[np.ix_(idx, idx)],
            roles=self.roles[idx].copy(),
            coords=None if self.coords is None else self.coords[idx].copy(),
            node_ids=None if self.node_ids is None else [self.node_ids[i] for i in idx],
        )


@dataclass
class MissingPattern:
    """How inference-time unobserved nodes are chosen from the full node set."""

    kind: str = "random"
    alpha: float = 0.5
    seed: int = 1
    center: int | None = None  # region pattern only; default = node nearest the centroid

    def __post_init__(self):
        if self.kind not in ("random", "fine_to_coarse", "region"):
            raise ConfigError(f"unknown missing pattern kind {self.kind!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass
class DegreeStats:
    """Largest-degree statistics over a batch of graphs (undirected view)."""

    avg: float
    median: float
    min: int
    max: int
    mean_degree: float
    n_graphs: int

    def to_dict(self) -> dict:
        return {
            "avg": self.avg,
            "median": self.median,
            "min": self.min,
            "max": self.max,
            "mean_degree": self.mean_degree,
            "n_graphs": self.n_graphs,
        }


# ---------------------------------------------------------------------------
# adjacency construction


def pairwise_distances(coords: np.ndarray, haversine: bool = False) -> np.ndarray:
    """Dense symmetric distance matrix; haversine treats columns as (lat, lon)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DataError(f"coords must be (n, 2), got {coords.shape}")
    if haversine:
        lat = np.radians(coords[:, 0])[:, None]
        lon = np.radians(coords[:, 1])[:, None]
        dlat = lat - lat.T
        dlon = lon - lon.T
        a = np.sin(dlat / 2.0) ** 2 + np.cos(lat) * np.cos(lat.T) * np.sin(dlon / 2.0) ** 2
        a = np.clip(a, 0.0, 1.0)
        return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a))
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def gaussian_kernel_weights(
    dists: np.ndarray, gamma: float | None = None, delta: float | None = None
) -> np.ndarray:
    """Thresholded Gaussian kernel on a dense distance matrix.

    Entries that are inf/nan mean "no connection". When gamma is None it
    defaults to (std of the finite pairwise distances)^2.
    """
    dists = np.asarray(dists, dtype=np.float64)
    n = dists.shape[0]
    if n == 0:
        raise DataError("empty distance matrix")
    if dists.shape != (n, n):
        raise DataError(f"distance matrix must be square, got {dists.shape}")
    finite = np.isfinite(dists)
    if np.any(dists[finite] < 0.0):
        raise DataError("negative distance in adjacency input")
    if gamma is None:
        offdiag = finite.copy()
        np.fill_diagonal(offdiag, False)
        vals = dists[offdiag]
        if vals.size == 0:
            raise DataError("no pairwise distances to derive gamma from")
        std = float(vals.std())
        if std <= 0.0:
            raise DataError("pairwise distances are constant; pass gamma explicitly")
        gamma = std**2
    if gamma <= 0.0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if delta is not None and delta <= 0.0:
        raise ConfigError(f"delta must be positive, got {delta}")
    weights = np.zeros_like(dists)
    keep = finite.copy()
    if delta is not None:
        keep &= dists <= delta
    weights[keep] = np.exp(-(dists[keep] ** 2) / gamma)
    return weights


def graph_from_coords(
    coords: np.ndarray,
    delta: float,
    gamma: float | None = None,
    haversine: bool = False,
    node_ids: list[str] | None = None,
) -> SpatialGraph:
    dists = pairwise_distances(coords, haversine=haversine)
    weights = gaussian_kernel_weights(dists, gamma=gamma, delta=delta)
    n = weights.shape[0]
    return SpatialGraph(weights, np.array([OBSERVED] * n, dtype=object), coords, node_ids)


def graph_from_edges(
    edges,
    n_nodes: int,
    gamma: float | None = None,
    delta: float | None = None,
    coords: np.ndarray | None = None,
    node_ids: list[str] | None = None,
) -> SpatialGraph:
    """Build from (i, j, distance) triples; unlisted pairs stay disconnected."""
    if n_nodes <= 0:
        raise DataError("n_nodes must be positive")
    edges = list(edges)
    if not edges:
        raise DataError("empty edge list")
    dists = np.full((n_nodes, n_nodes), np.inf)
    np.fill_diagonal(dists, 0.0)
    for i, j, d in edges:
        if d < 0:
            raise DataError(f"negative distance on edge ({i}, {j}): {d}")
        dists[i, j] = d
    weights = gaussian_kernel_weights(dists, gamma=gamma, delta=delta)
    return SpatialGraph(weights, np.array([OBSERVED] * n_nodes, dtype=object), coords, node_ids)


def remove_self_loops(weights: np.ndarray) -> np.ndarray:
    """Zero the diagonal, leaving everything else untouched. Idempotent."""
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    if weights.shape != (n, n):
        raise DataError(f"adjacency must be square, got {weights.shape}")
    out = weights.copy()
    np.fill_diagonal(out, 0.0)
    return out


# ---------------------------------------------------------------------------
# missing patterns


def _hilbert_order(coords: np.ndarray, order: int = 10) -> np.ndarray:
    """Sort order of nodes along a Hilbert curve over the bounding box."""
    span = coords.max(axis=0) - coords.min(axis=0)
    span[span == 0.0] = 1.0
    side = 2**order
    grid = ((coords - coords.min(axis=0)) / span * (side - 1)).astype(np.int64)
    keys = np.empty(len(coords), dtype=np.int64)
    for k, (gx, gy) in enumerate(grid):
        x, y, d = int(gx), int(gy), 0
        s = side // 2
        while s > 0:
            rx = 1 if (x & s) > 0 else 0
            ry = 1 if (y & s) > 0 else 0
            d += s * s * ((3 * rx) ^ ry)
            if ry == 0:
                if rx == 1:
                    x = s - 1 - x
                    y = s - 1 - y
                x, y = y, x
            s //= 2
        keys[k] = d
    return np.argsort(keys, kind="stable")


def apply_missing(graph: SpatialGraph, pattern: MissingPattern) -> np.ndarray:
    """Role assignment over graph nodes: OBSERVED / UNOBSERVED.

    random: each node is unobserved when its Uniform[0,1] draw falls below
    alpha (count is binomial, matching the seeded-draw convention).
    fine_to_coarse: evenly spaced positions along a Hilbert-curve sort of the
    coordinates (plain node order when coords are absent).
    region: observed nodes form a ball grown around a center node; the far
    region is unobserved. Requires coords.
    """
    n = graph.n_nodes
    roles = np.array([OBSERVED] * n, dtype=object)
    if pattern.kind == "random":
        rng = np.random.default_rng(pattern.seed)
        draws = rng.uniform(size=n)
        roles[draws < pattern.alpha] = UNOBSERVED
        return roles

    n_unobs = int(round(pattern.alpha * n))
    if pattern.kind == "fine_to_coarse":
        if graph.coords is not None:
            order = _hilbert_order(graph.coords)
        else:
            order = np.arange(n)
        if n_unobs > 0:
            positions = np.floor(np.arange(n_unobs) * n / n_unobs).astype(np.intp)
            roles[order[positions]] = UNOBSERVED
        return roles

    # region
    if graph.coords is None:
        raise ConfigError("region missing pattern requires node coordinates")
    if pattern.center is None:
        centroid = graph.coords.mean(axis=0)
        center = int(np.argmin(((graph.coords - centroid) ** 2).sum(axis=1)))
    else:
        center = int(pattern.center)
        if not 0 <= center < n:
            raise ConfigError(f"region center {center} out of range for {n} nodes")
    dist_to_center = np.sqrt(((graph.coords - graph.coords[center]) ** 2).sum(axis=1))
    order = np.argsort(dist_to_center, kind="stable")
    roles[order[n - n_unobs :]] = UNOBSERVED
    return roles


# ---------------------------------------------------------------------------
# virtual-node insertion


def virtual_node_count(n_obs: int, alpha: float, epsilon: float) -> int:
    """int(N_o / (1 - alpha + epsilon)) - N_o."""
    return int(n_obs / (1.0 - alpha + epsilon)) - n_obs


def insert_virtual_nodes(
    graph: SpatialGraph,
    alpha: float,
    rng: np.random.Generator,
    epsilon_range: tuple[float, float] = (0.0, 0.2),
) -> tuple[SpatialGraph, np.ndarray]:
    """Augment an all-observed graph with virtual nodes.

    Returns the augmented graph (observed block first, then virtual nodes,
    virtual edges at weight 1.0) and the edge indicator mask M with the
    observed block all ones and virtual edges set per their direction status.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    if np.any(graph.roles != OBSERVED):
        raise ContractError("insert_virtual_nodes expects an all-observed graph")
    n_obs = graph.n_nodes
    lo, hi = epsilon_range
    eps = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    n_virtual = virtual_node_count(n_obs, alpha, eps)
    n = n_obs + n_virtual

    weights = np.zeros((n, n))
    weights[:n_obs, :n_obs] = graph.weights
    mask = np.zeros((n, n))
    mask[:n_obs, :n_obs] = 1.0

    neighbors = graph.neighbor_map()
    for e in range(n_obs, n):
        v = int(rng.integers(0, e))
        candidates = [v]
        base = neighbors[v]
        p = float(rng.uniform())
        if base:
            draws = rng.uniform(size=len(base))
            candidates.extend(u for u, d in zip(base, draws) if d < p)
        for c in candidates:
            status = int(rng.integers(0, 3))
            if status in (0, 2):
                mask[c, e] = 1.0
                weights[c, e] = 1.0
            if status in (1, 2):
                mask[e, c] = 1.0
                weights[e, c] = 1.0
        neighbors.append(list(candidates))
        for c in candidates:
            neighbors[c].append(e)

    roles = np.array([OBSERVED] * n_obs + [VIRTUAL] * n_virtual, dtype=object)
    return SpatialGraph(weights, roles, coords=None, node_ids=None), mask


# ---------------------------------------------------------------------------
# degree statistics


def largest_degree(weights: np.ndarray) -> int:
    """Largest node degree, counting an edge if either direction is present."""
    adj = np.asarray(weights) > 0.0
    und = adj | adj.T
    np.fill_diagonal(und, False)
    return int(und.sum(axis=1).max()) if und.shape[0] else 0


def degree_stats(graphs) -> DegreeStats:
    """Aggregate the per-graph largest degree over a batch of adjacencies."""
    mats = [np.asarray(g.weights if isinstance(g, SpatialGraph) else g) for g in graphs]
    if not mats:
        raise DataError("degree_stats needs at least one graph")
    largest = []
    degree_sum = 0.0
    node_count = 0
    for w in mats:
        adj = w > 0.0
        und = adj | adj.T
        np.fill_diagonal(und, False)
        deg = und.sum(axis=1)
        largest.append(int(deg.max()) if deg.size else 0)
        degree_sum += float(deg.sum())
        node_count += deg.size
    arr = np.array(largest, dtype=np.float64)
    return DegreeStats(
        avg=float(arr.mean()),
        median=float(np.median(arr)),
        min=int(arr.min()),
        max=int(arr.max()),
        mean_degree=degree_sum / max(node_count, 1),
        n_graphs=len(mats),
    )


# ---------------------------------------------------------------------------
# text ingestion


def read_edge_list(path, node_ids: list[str]) -> list[tuple[int, int, float]]:
    """Rows ``from_id,to_id,distance``; an optional header row is skipped."""
    index = {nid: i for i, nid in enumerate(node_ids)}
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'from,to,distance', got {line!r}")
            try:
                dist = float(parts[2])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise DataError(f"{path}:{lineno}: non-numeric distance {parts[2]!r}") from None
            for nid in parts[:2]:
                if nid not in index:
                    raise DataError(f"{path}:{lineno}: unknown node id {nid!r}")
            edges.append((index[parts[0]], index[parts[1]], dist))
    if not edges:
        raise DataError(f"{path}: no edges found")
    return edges


def read_coords(path, node_ids: list[str]) -> np.ndarray:
    """Rows ``node_id,lat,lon``; an optional header row is skipped."""
    index = {nid: i for i, nid in enumerate(node_ids)}
    coords = np.full((len(node_ids), 2), np.nan)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'id,lat,lon', got {line!r}")
            try:
                lat, lon = float(parts[1]), float(parts[2])
            except ValueError:
                if lineno == 1:
                    continue
                raise DataError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
            if parts[0] not in index:
                raise DataError(f"{path}:{lineno}: unknown node id {parts[0]!r}")
            coords[index[parts[0]]] = (lat, lon)
    missing = [node_ids[i] for i in np.flatnonzero(np.isnan(coords[:, 0]))]
    if missing:
        raise DataError(f"{path}: missing coordinates for nodes {missing[:5]}")
    return coords
