"""Command-line surface for experiments, ablations, and graph-gap analysis.

Commands: train, evaluate, baseline, graph-gap, synth, transfer. A JSON
config file (flat keys, optionally prefixed ``<command>.``) supplies values
that explicit flags override; remaining gaps fall back to built-in defaults.
All randomness flows from --seed through named streams, and exit codes are
1 for configuration errors, 2 for data errors, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import Dataset, Splits, normalize, save_readings, split_7_1_2
from .errors import ConfigError, DataError, NumericalError
from .estimators import KNNInterpolator, KrigingNetwork, MeanInterpolator, OrdinaryKriging
from .graphs import (
    OBSERVED,
    UNOBSERVED,
    MissingPattern,
    SpatialGraph,
    apply_missing,
    degree_stats,
    graph_from_coords,
    graph_from_edges,
    insert_virtual_nodes,
    largest_degree,
    pairwise_distances,
)
from .metrics import evaluate
from .network import load_checkpoint
from .training import stream_rng

PATTERN_NAMES = {"random": "random", "f2c": "fine_to_coarse", "region": "region"}


def derive_seed(seed: int, key: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(key,)).generate_state(1)[0])


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are configuration errors
        raise ConfigError(message)


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--dataset", help="readings CSV, or 'synth' for a generated corpus")
    p.add_argument("--topology", help="edge list from,to,dist or coords id,lat,lon")
    p.add_argument("--alpha", type=float, help="missing ratio in (0,1)")
    p.add_argument("--pattern", choices=sorted(PATTERN_NAMES), help="missing pattern")
    p.add_argument("--seed", type=int, help="root random seed")
    p.add_argument("--delta", type=float, help="adjacency distance threshold")
    p.add_argument("--gamma", type=float, help="adjacency kernel width")
    p.add_argument("--haversine", action="store_true", default=None,
                   help="treat coords as lat/lon")
    p.add_argument("--normalization", choices=["zscore", "minmax", "none"])
    p.add_argument("--synth-nodes", type=int, help="node count for --dataset synth")
    p.add_argument("--synth-steps", type=int, help="step count for --dataset synth")
    p.add_argument("--out", help="output directory")


_COMMON_DEFAULTS = {
    "alpha": 0.5,
    "pattern": "random",
    "seed": 1,
    "delta": None,
    "gamma": None,
    "haversine": False,
    "normalization": "zscore",
    "synth_nodes": 60,
    "synth_steps": 2880,
    "out": "out",
}

_TRAIN_DEFAULTS = {
    "strategy": "increment",
    "epochs": 300,
    "dim": 64,
    "lam": 1.0,
    "window": 24,
    "batch_size": 32,
    "patience": 50,
    "lr": 2e-4,
    "m": 1,
    "max_batches_per_epoch": 50,
    "windows_per_chunk": None,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="krigenet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the kriging network end to end")
    _add_common(p_train)
    p_train.add_argument("--strategy", choices=["increment", "decrement", "transductive"])
    p_train.add_argument("--epochs", type=int, help="maximum training epochs")
    p_train.add_argument("--dim", type=int, help="feature dimension")
    p_train.add_argument("--lambda", dest="lam", type=float, help="pseudo-label weight")
    p_train.add_argument("--window", type=int, help="temporal window length")
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--patience", type=int, help="early-stopping patience")
    p_train.add_argument("--lr", type=float, help="initial learning rate")
    p_train.add_argument("--m", type=int, help="temporal neighborhood radius")
    p_train.add_argument("--max-batches-per-epoch", type=int)
    p_train.add_argument("--windows-per-chunk", type=int)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", help="model checkpoint path")
    p_eval.add_argument("--window", type=int)

    p_base = sub.add_parser("baseline", help="run a non-learned baseline")
    _add_common(p_base)
    p_base.add_argument("--method", choices=["mean", "knn", "okriging"])
    p_base.add_argument("--k", type=int, help="neighbor count for knn")

    p_gap = sub.add_parser("graph-gap", help="training-vs-inference degree statistics")
    _add_common(p_gap)
    p_gap.add_argument("--batches", type=int, help="training graphs per strategy")

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus on disk")
    _add_common(p_synth)
    p_synth.add_argument("--scale", type=float, help="reading scale factor")
    p_synth.add_argument("--offset", type=float, help="reading offset")
    p_synth.add_argument("--mean-degree", type=float, help="target mean degree")

    p_transfer = sub.add_parser("transfer", help="apply a checkpoint to another dataset")
    _add_common(p_transfer)
    p_transfer.add_argument("--checkpoint", help="checkpoint trained elsewhere")
    p_transfer.add_argument("--window", type=int)
    return parser


def _apply_config(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Fill unset flags from the config file, then from built-in defaults."""
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        prefix = f"{args.command}."
        for key, value in raw.items():
            plain = key[len(prefix):] if key.startswith(prefix) else key
            if "." in plain:
                continue  # another command's namespaced key
            file_values[plain.replace("-", "_")] = value
    merged = {**defaults, **file_values}
    for key, value in merged.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _resolve_dataset(args) -> Dataset:
    if args.dataset is None:
        raise ConfigError("--dataset is required")
    if args.dataset == "synth":
        return data_mod.synth_generate(
            n_nodes=args.synth_nodes,
            n_steps=args.synth_steps,
            topology_seed=derive_seed(args.seed, 10),
            dynamics_seed=derive_seed(args.seed, 11),
        )
    path = Path(args.dataset)
    if not path.exists():
        raise ConfigError(f"dataset file {path} does not exist")
    topology = getattr(args, "topology", None)
    if topology is not None and not Path(topology).exists():
        raise ConfigError(f"topology file {topology} does not exist")
    return data_mod.load(path, topology)


def _build_graph(dataset: Dataset, args) -> SpatialGraph:
    if dataset.edges is not None:
        return graph_from_edges(
            dataset.edges,
            dataset.n_nodes,
            gamma=args.gamma,
            delta=args.delta,
            coords=dataset.coords,
            node_ids=dataset.node_ids,
        )
    if dataset.coords is not None:
        if args.delta is None:
            raise ConfigError("coordinate topology needs --delta (adjacency radius)")
        return graph_from_coords(
            dataset.coords,
            delta=args.delta,
            gamma=args.gamma,
            haversine=args.haversine,
            node_ids=dataset.node_ids,
        )
    raise ConfigError("no topology available: provide --topology or use --dataset synth")


def _missing_pattern(args) -> MissingPattern:
    return MissingPattern(
        kind=PATTERN_NAMES[args.pattern],
        alpha=args.alpha,
        seed=derive_seed(args.seed, 0),  # the "mask" stream
    )


def _split_roles(graph: SpatialGraph, args) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    roles = apply_missing(graph, _missing_pattern(args))
    obs_idx = np.flatnonzero(roles == OBSERVED)
    unobs_idx = np.flatnonzero(roles == UNOBSERVED)
    if obs_idx.size == 0 or unobs_idx.size == 0:
        raise DataError(
            f"missing pattern left {obs_idx.size} observed / {unobs_idx.size} unobserved nodes"
        )
    return roles, obs_idx, unobs_idx


def _distance_matrix(dataset: Dataset, args) -> np.ndarray:
    if dataset.coords is not None:
        return pairwise_distances(dataset.coords, haversine=args.haversine)
    if dataset.edges is not None:
        n = dataset.n_nodes
        dists = np.full((n, n), np.inf)
        np.fill_diagonal(dists, 0.0)
        for i, j, d in dataset.edges:
            dists[i, j] = min(dists[i, j], d)
            dists[j, i] = min(dists[j, i], d)  # undirected view for baselines
        return dists
    raise ConfigError("baselines need coordinates or an edge list for distances")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _network_from_args(args, strategy: str) -> KrigingNetwork:
    return KrigingNetwork(
        dim=args.dim,
        window=args.window,
        m=args.m,
        n_layers=2,
        pseudo_label_weight=args.lam,
        lr=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        alpha=args.alpha,
        strategy=strategy,
        normalization=args.normalization,
        max_batches_per_epoch=args.max_batches_per_epoch,
        windows_per_chunk=args.windows_per_chunk,
        seed=args.seed,
    )


def _test_metrics(estimator, dataset, graph, obs_idx, unobs_idx):
    splits = dataset.splits
    x_vis_test = dataset.readings[splits.test][:, obs_idx]
    hidden = np.zeros(graph.n_nodes, dtype=bool)
    hidden[unobs_idx] = True
    estimates = estimator.predict(x_vis_test, graph=graph, hidden=hidden)
    truth = dataset.readings[splits.test][:, unobs_idx]
    return evaluate(truth, estimates)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _resolve_dataset(args)
    split_7_1_2(dataset)
    graph = _build_graph(dataset, args)
    roles, obs_idx, unobs_idx = _split_roles(graph, args)

    fit_rows = slice(0, dataset.splits.val.stop)
    x_fit = dataset.readings[fit_rows][:, obs_idx]
    net = _network_from_args(args, args.strategy)
    if args.strategy == "transductive":
        hidden_train = roles == UNOBSERVED
        net.fit(x_fit, graph=graph, hidden=hidden_train)
    else:
        net.fit(x_fit, graph=graph.subgraph(obs_idx))

    report = _test_metrics(net, dataset, graph, obs_idx, unobs_idx)
    if not all(np.isfinite(v) for v in (report.mae, report.rmse, report.mre)):
        raise NumericalError("non-finite test metrics")

    net.save(out / "model.ckpt")
    _write_json(out / "metrics.json", report.to_dict())
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for record in net.history_:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"test MAE {report.mae:.4f}  artifacts in {out}")
    return 0


def _restored_network(args, x_fit: np.ndarray) -> KrigingNetwork:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    params = load_checkpoint(path)
    if params.in_dim != 1:
        raise ConfigError(f"checkpoint expects {params.in_dim} channels, datasets carry 1")
    net = KrigingNetwork(
        dim=params.dim,
        window=args.window,
        m=params.m,
        normalization=args.normalization,
        seed=args.seed,
    )
    net.params_ = params
    # Rebuild the scaler exactly as fit would have on this dataset's fit rows.
    frame = Dataset(readings=x_fit, node_ids=[f"c{i}" for i in range(x_fit.shape[1])])
    n_train = int(x_fit.shape[0] * 7 / 8)
    frame.splits = Splits(slice(0, n_train), slice(n_train, x_fit.shape[0]), slice(0, 0))
    net.scaler_ = normalize(frame, args.normalization).normalization
    return net


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _resolve_dataset(args)
    split_7_1_2(dataset)
    graph = _build_graph(dataset, args)
    _, obs_idx, unobs_idx = _split_roles(graph, args)
    x_fit = dataset.readings[: dataset.splits.val.stop][:, obs_idx]
    net = _restored_network(args, x_fit)
    report = _test_metrics(net, dataset, graph, obs_idx, unobs_idx)
    _write_json(out / "metrics.json", report.to_dict())
    print(f"test MAE {report.mae:.4f}  metrics in {out}")
    return 0


cmd_transfer = cmd_evaluate  # training happened elsewhere; inference is identical


def cmd_baseline(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.method is None:
        raise ConfigError("--method is required (mean, knn, or okriging)")
    dataset = _resolve_dataset(args)
    split_7_1_2(dataset)
    graph = _build_graph(dataset, args)
    _, obs_idx, unobs_idx = _split_roles(graph, args)
    x_obs_test = dataset.readings[dataset.splits.test][:, obs_idx]
    truth = dataset.readings[dataset.splits.test][:, unobs_idx]

    if args.method == "mean":
        estimates = MeanInterpolator().fit().predict(x_obs_test, n_targets=unobs_idx.size)
    else:
        dists = _distance_matrix(dataset, args)
        d_targets = dists[np.ix_(unobs_idx, obs_idx)]
        if args.method == "knn":
            estimates = KNNInterpolator(k=args.k).fit().predict(x_obs_test, dists=d_targets)
        else:
            d_obs = dists[np.ix_(obs_idx, obs_idx)]
            ok = OrdinaryKriging(range_=None if args.delta is None else args.delta / 2.0)
            estimates = ok.fit(x_obs_test, dists_obs=d_obs).predict(x_obs_test, dists=d_targets)

    report = evaluate(truth, estimates)
    _write_json(out / "metrics.json", report.to_dict())
    print(f"{args.method} test MAE {report.mae:.4f}  metrics in {out}")
    return 0


def cmd_graph_gap(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _resolve_dataset(args)
    graph = _build_graph(dataset, args)
    _, obs_idx, _ = _split_roles(graph, args)
    observed = graph.subgraph(obs_idx)

    rng = stream_rng(args.seed, "augmentation")
    increment_graphs = [
        insert_virtual_nodes(observed, args.alpha, rng)[0].weights for _ in range(args.batches)
    ]
    decrement_graphs = [observed.weights] * args.batches

    inc = degree_stats(increment_graphs)
    dec = degree_stats(decrement_graphs)
    inference = degree_stats([graph.weights])
    infer_largest = largest_degree(graph.weights)

    payload = {
        "increment": inc.to_dict(),
        "decrement": dec.to_dict(),
        "inference": inference.to_dict(),
        "inference_largest_degree": infer_largest,
        "increment_relative_gap": abs(inc.avg - infer_largest) / infer_largest,
        "decrement_relative_gap": abs(dec.avg - infer_largest) / infer_largest,
    }
    _write_json(out / "graph_gap.json", payload)
    print(
        f"largest degree: increment avg {inc.avg:.2f}, decrement avg {dec.avg:.2f}, "
        f"inference {infer_largest}"
    )
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = data_mod.synth_generate(
        n_nodes=args.synth_nodes,
        n_steps=args.synth_steps,
        topology_seed=derive_seed(args.seed, 10),
        dynamics_seed=derive_seed(args.seed, 11),
        mean_degree=args.mean_degree,
        scale=args.scale,
        offset=args.offset,
    )
    save_readings(out / "readings.csv", dataset.readings, dataset.node_ids)
    with open(out / "edges.csv", "w", encoding="utf-8") as fh:
        fh.write("from,to,distance\n")
        for i, j, d in dataset.edges:
            fh.write(f"{dataset.node_ids[i]},{dataset.node_ids[j]},{float(d)!r}\n")
    with open(out / "coords.csv", "w", encoding="utf-8") as fh:
        fh.write("node_id,lat,lon\n")
        for i, nid in enumerate(dataset.node_ids):
            fh.write(f"{nid},{float(dataset.coords[i, 0])!r},{float(dataset.coords[i, 1])!r}\n")
    print(f"synthetic corpus ({args.synth_nodes} nodes x {args.synth_steps} steps) in {out}")
    return 0


_COMMANDS = {
    "train": (cmd_train, {**_COMMON_DEFAULTS, **_TRAIN_DEFAULTS}),
    "evaluate": (cmd_evaluate, {**_COMMON_DEFAULTS, "checkpoint": None, "window": 24}),
    "transfer": (cmd_transfer, {**_COMMON_DEFAULTS, "checkpoint": None, "window": 24}),
    "baseline": (cmd_baseline, {**_COMMON_DEFAULTS, "method": None, "k": 10}),
    "graph-gap": (cmd_graph_gap, {**_COMMON_DEFAULTS, "batches": 1000}),
    "synth": (
        cmd_synth,
        {**_COMMON_DEFAULTS, "scale": 1.0, "offset": 0.0, "mean_degree": 6.0},
    ),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        command, defaults = _COMMANDS[args.command]
        args = _apply_config(args, defaults)
        return command(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
