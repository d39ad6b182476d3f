"""The kriging network: input map, stacked graph-convolution blocks with
feature fusion, readout, the two-pass cycle regulation, and the training loss.

Architecture per forward pass (features shaped batch x nodes x dim):

1. input map lifts scalar readings to D features per node and time step;
2. each block concatenates every time step with its m temporal neighbors
   (edge steps replicated), aggregates over the self-loop-free adjacency with
   row-normalized mean weighting, applies two fully-connected maps with a
   relu, then fuses each value-less node with its most similar value-bearing
   node (and vice versa) through one shared fusion layer;
3. a linear readout maps features back to one value per node and step.

The cycle pass re-runs the same network on the inverse-masked first-pass
output, so nodes without labels get pseudo-label supervision; the loss treats
the first-pass output as a constant target in that term.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError, ShapeError

CHECKPOINT_MAGIC = b"KITS"
CHECKPOINT_VERSION = 1


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor

    def apply(self, x: Tensor) -> Tensor:
        if x.ndim > 2:
            # one large matrix product instead of a stack of small ones
            lead = x.shape[:-1]
            flat = x.reshape(int(np.prod(lead)), x.shape[-1])
            out = ad.matmul(flat, self.weight)
            return out.reshape(*lead, self.weight.shape[1]) + self.bias
        return ad.matmul(x, self.weight) + self.bias


@dataclass
class BlockParams:
    gc: LinearParams
    fc: LinearParams


class ModelParams:
    """All learnable tensors, iterable in a fixed order for checkpoints."""

    def __init__(self, input_map: LinearParams, blocks: list[BlockParams],
                 fuse: LinearParams, readout: LinearParams):
        self.input_map = input_map
        self.blocks = blocks
        self.fuse = fuse
        self.readout = readout

    @property
    def dim(self) -> int:
        return self.input_map.weight.shape[1]

    @property
    def in_dim(self) -> int:
        return self.input_map.weight.shape[0]

    @property
    def m(self) -> int:
        taps = self.blocks[0].gc.weight.shape[0] // self.dim
        return (taps - 1) // 2

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        items = [("input.weight", self.input_map.weight), ("input.bias", self.input_map.bias)]
        for i, block in enumerate(self.blocks):
            items += [
                (f"stgc{i}.gc.weight", block.gc.weight),
                (f"stgc{i}.gc.bias", block.gc.bias),
                (f"stgc{i}.fc.weight", block.fc.weight),
                (f"stgc{i}.fc.bias", block.fc.bias),
            ]
        items += [
            ("fuse.weight", self.fuse.weight),
            ("fuse.bias", self.fuse.bias),
            ("readout.weight", self.readout.weight),
            ("readout.bias", self.readout.bias),
        ]
        return items

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        def dup(lin: LinearParams) -> LinearParams:
            return LinearParams(
                Tensor(lin.weight.data.copy(), requires_grad=True),
                Tensor(lin.bias.data.copy(), requires_grad=True),
            )

        return ModelParams(
            dup(self.input_map),
            [BlockParams(dup(b.gc), dup(b.fc)) for b in self.blocks],
            dup(self.fuse),
            dup(self.readout),
        )


def init_params(
    dim: int,
    m: int = 1,
    n_layers: int = 2,
    in_dim: int = 1,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights and biases.

    Nonzero biases keep early features generic: all-zero feature rows would
    tie every cosine similarity and leave relu stuck at its kink.
    """
    rng = rng or np.random.default_rng(0)

    def linear(n_in: int, n_out: int) -> LinearParams:
        bound = 1.0 / np.sqrt(n_in)
        w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
        b = Tensor(rng.uniform(-bound, bound, size=n_out), requires_grad=True)
        return LinearParams(w, b)

    blocks = [
        BlockParams(gc=linear((2 * m + 1) * dim, dim), fc=linear(dim, dim))
        for _ in range(n_layers)
    ]
    return ModelParams(
        input_map=linear(in_dim, dim),
        blocks=blocks,
        fuse=linear(2 * dim, dim),
        readout=linear(dim, 1),
    )


# ---------------------------------------------------------------------------
# graph convolution


def row_normalize(weights: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; all-zero rows map to zero."""
    sums = weights.sum(axis=1, keepdims=True)
    return weights / np.where(sums == 0.0, 1.0, sums)


def _check_no_self_loops(a_minus: np.ndarray) -> None:
    if np.any(np.diag(a_minus) != 0.0):
        raise ContractError("adjacency has nonzero diagonal; remove self-loops first")


def stgc_forward(
    z: Tensor,
    a_minus: np.ndarray,
    block: BlockParams,
    m: int,
    window: int | None = None,
) -> Tensor:
    """One spatio-temporal graph convolution block over (time, nodes, dim).

    ``z`` may stack several windows along the first axis; ``window`` gives
    the window length (defaults to the whole first axis).
    """
    if m < 0:
        raise ContractError(f"m must be nonnegative, got {m}")
    _check_no_self_loops(a_minus)
    if z.ndim != 3:
        raise ShapeError(f"stgc expects (time, nodes, dim), got {z.shape}")
    n_slices, n_nodes, dim = z.shape
    if a_minus.shape != (n_nodes, n_nodes):
        raise ShapeError(f"adjacency {a_minus.shape} does not match {n_nodes} nodes")
    expected = (2 * m + 1) * dim
    if block.gc.weight.shape[0] != expected:
        raise ShapeError(
            f"gc weight expects {block.gc.weight.shape[0]} inputs, window stack gives {expected}"
        )
    window = window or n_slices

    if m == 0:
        stacked = z
    else:
        parts = [
            z if off == 0 else ad.window_shift(z, off, window) for off in range(-m, m + 1)
        ]
        stacked = ad.concat_last(parts)

    aggregated = ad.left_multiply(row_normalize(a_minus), stacked)
    convolved = block.gc.apply(aggregated)
    return ad.relu(block.fc.apply(convolved))


# ---------------------------------------------------------------------------
# reference-based feature fusion


@dataclass
class FusionTrace:
    """Similarity table and pairings from a fusion application."""

    similarity: np.ndarray  # (..., n_visible, n_hidden), rescaled cosine in [0, 1]
    hidden_partner: np.ndarray  # per hidden node: index into visible set
    visible_partner: np.ndarray  # per visible node: index into hidden set


def rff_forward(
    z: Tensor,
    hidden: np.ndarray,
    fuse: LinearParams,
    return_trace: bool = False,
):
    """Pair every hidden node with its most similar visible node (and vice
    versa) by rescaled cosine similarity, then fuse the paired features
    through the shared fusion layer. ``z`` is (nodes, dim) or (b, nodes, dim).
    """
    hidden = np.asarray(hidden, dtype=bool)
    squeeze = z.ndim == 2
    z3 = z.reshape(1, *z.shape) if squeeze else z
    if z3.ndim != 3:
        raise ShapeError(f"rff expects (nodes, dim) or (batch, nodes, dim), got {z.shape}")
    n_nodes = z3.shape[1]
    if hidden.shape != (n_nodes,):
        raise ShapeError(f"hidden mask shape {hidden.shape} != ({n_nodes},)")
    vis_idx = np.flatnonzero(~hidden)
    hid_idx = np.flatnonzero(hidden)
    if vis_idx.size == 0 or hid_idx.size == 0:
        raise ContractError("fusion needs at least one visible and one hidden node")

    z_vis = ad.take(z3, vis_idx, axis=1)
    z_hid = ad.take(z3, hid_idx, axis=1)
    b, n_vis, dim = z_vis.shape
    n_hid = hid_idx.size

    dots = ad.matmul(z_vis, ad.swap_last2(z_hid))
    ss_vis = ad.sum_(ad.mul(z_vis, z_vis), axis=-1, keepdims=True)  # (b, n_vis, 1)
    ss_hid = ad.sum_(ad.mul(z_hid, z_hid), axis=-1, keepdims=True)  # (b, n_hid, 1)
    denom = ad.sqrt(ss_vis * ad.swap_last2(ss_hid) + 1e-24)
    sims = (ad.div(dots, denom) + 1.0) * 0.5  # (b, n_vis, n_hid)

    hid_partner = np.argmax(sims.data, axis=1)  # (b, n_hid) -> visible index
    vis_partner = np.argmax(sims.data, axis=2)  # (b, n_vis) -> hidden index

    s_hid = ad.take_along(sims, hid_partner[:, None, :], axis=1)  # (b, 1, n_hid)
    s_hid = ad.swap_last2(s_hid)  # (b, n_hid, 1)
    s_vis = ad.take_along(sims, vis_partner[:, :, None], axis=2)  # (b, n_vis, 1)

    aligned_for_hid = ad.take_along(
        z_vis, np.broadcast_to(hid_partner[:, :, None], (b, n_hid, dim)), axis=1
    )
    aligned_for_vis = ad.take_along(
        z_hid, np.broadcast_to(vis_partner[:, :, None], (b, n_vis, dim)), axis=1
    )

    fused_vis = fuse.apply(ad.concat_last([z_vis, s_vis * aligned_for_vis]))
    fused_hid = fuse.apply(ad.concat_last([z_hid, s_hid * aligned_for_hid]))

    order = np.concatenate([vis_idx, hid_idx])
    inverse = np.argsort(order, kind="stable")
    out = ad.take(ad.concat([fused_vis, fused_hid], axis=1), inverse, axis=1)
    if squeeze:
        out = out.reshape(*out.shape[1:])

    if not return_trace:
        return out
    trace = FusionTrace(
        similarity=sims.data[0] if squeeze else sims.data,
        hidden_partner=hid_partner[0] if squeeze else hid_partner,
        visible_partner=vis_partner[0] if squeeze else vis_partner,
    )
    return out, trace


# ---------------------------------------------------------------------------
# full model


@dataclass
class KrigingOutput:
    x_hat: Tensor
    x_hat_cycle: Tensor | None
    similarity: np.ndarray | None
    hidden_partner: np.ndarray | None
    visible_partner: np.ndarray | None


def kriging_forward(
    x: Tensor | np.ndarray,
    a_minus: np.ndarray,
    params: ModelParams,
    hidden: np.ndarray,
    window: int | None = None,
    return_trace: bool = False,
):
    """Estimate every node's value at every time step.

    ``x`` is (t, nodes, 1) or (windows, t, nodes, 1) with hidden-node entries
    already zero-filled; the output matches the input shape.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    orig_shape = x.shape
    if x.ndim == 4:
        x = x.reshape(orig_shape[0] * orig_shape[1], orig_shape[2], orig_shape[3])
        window = window or orig_shape[1]
    elif x.ndim == 3:
        window = window or orig_shape[0]
    else:
        raise ShapeError(f"expected (t, nodes, 1) or (b, t, nodes, 1), got {orig_shape}")
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input has {x.shape[-1]} channels, model expects {params.in_dim}")
    n_nodes = x.shape[1]
    if a_minus.shape != (n_nodes, n_nodes):
        raise ShapeError(f"adjacency {a_minus.shape} does not match {n_nodes} nodes")
    _check_no_self_loops(a_minus)

    h = params.input_map.apply(x)
    trace = None
    for i, block in enumerate(params.blocks):
        h = stgc_forward(h, a_minus, block, params.m, window=window)
        if return_trace and i == len(params.blocks) - 1:
            h, trace = rff_forward(h, hidden, params.fuse, return_trace=True)
        else:
            h = rff_forward(h, hidden, params.fuse)
    y = params.readout.apply(h)
    y = y.reshape(*orig_shape)
    return (y, trace) if return_trace else y


def ncr_pass(
    x: Tensor | np.ndarray,
    mask: np.ndarray,
    a_minus: np.ndarray,
    params: ModelParams,
    hidden: np.ndarray,
    window: int | None = None,
) -> KrigingOutput:
    """First kriging pass, inverse-masked second pass, shared parameters.

    ``mask`` is 1 exactly on entries of ``x`` that hold real readings and
    broadcasts against x (trailing singleton channel allowed).
    """
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ContractError("observation mask must be binary")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if mask.shape != x.shape:
        if mask.shape == x.shape[:-1]:
            mask = mask[..., None]
        else:
            raise ShapeError(f"mask shape {mask.shape} incompatible with input {x.shape}")

    x_hat, trace = kriging_forward(
        x, a_minus, params, hidden, window=window, return_trace=True
    )
    x_cycle = Tensor(1.0 - mask) * x_hat
    x_hat_cycle = kriging_forward(x_cycle, a_minus, params, hidden, window=window)
    return KrigingOutput(
        x_hat=x_hat,
        x_hat_cycle=x_hat_cycle,
        similarity=trace.similarity,
        hidden_partner=trace.hidden_partner,
        visible_partner=trace.visible_partner,
    )


def masked_mae(pred: Tensor, target: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error restricted to mask==1 entries (all when None)."""
    diff = ad.abs_(pred - target)
    if mask is None:
        return ad.mean_(diff)
    count = float(mask.sum())
    if count == 0.0:
        raise ContractError("masked_mae: empty index set")
    return ad.sum_(diff * Tensor(mask)) * (1.0 / count)


def kriging_loss(
    x_hat: Tensor,
    x: Tensor | np.ndarray,
    x_hat_cycle: Tensor,
    mask: np.ndarray,
    lam: float = 1.0,
) -> Tensor:
    """Observed-entry MAE plus lam times the pseudo-label MAE over all entries.

    The cycle term treats the first-pass output as a constant target so the
    pseudo labels regulate the second pass without dragging the first.
    """
    if lam < 0.0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x_hat.shape:
        if mask.shape == x_hat.shape[:-1]:
            mask = mask[..., None]
        else:
            raise ShapeError(f"mask shape {mask.shape} incompatible with {x_hat.shape}")
    if mask.sum() == 0.0:
        raise ContractError("loss needs at least one observed entry")
    observed_term = masked_mae(x_hat, x, mask)
    pseudo_term = masked_mae(x_hat_cycle, x_hat.detach())
    return observed_term + lam * pseudo_term


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams) -> None:
    """Binary checkpoint: magic, version, then length-prefixed named tensors."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, tensor in params.named_tensors():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.data.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset = 8
    tensors: dict[str, Tensor] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims)
        offset += 8 * count
        tensors[name] = Tensor(data.copy(), requires_grad=True)

    def lin(prefix: str) -> LinearParams:
        try:
            return LinearParams(tensors[f"{prefix}.weight"], tensors[f"{prefix}.bias"])
        except KeyError as exc:
            raise DataError(f"{path}: checkpoint missing tensor {exc.args[0]}") from None

    blocks = []
    i = 0
    while f"stgc{i}.gc.weight" in tensors:
        blocks.append(BlockParams(gc=lin(f"stgc{i}.gc"), fc=lin(f"stgc{i}.fc")))
        i += 1
    if not blocks:
        raise DataError(f"{path}: checkpoint holds no convolution blocks")
    return ModelParams(lin("input"), blocks, lin("fuse"), lin("readout"))
