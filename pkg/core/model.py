"""
Hop graph network: an EdgeConv point backbone whose layers are each followed by
part pooling, PartConv over the complete part graph, a hop-distance head and hop
graph attention (HGA), with the attended part features added back onto the points.

Attention tensors are laid out (i, j, head) on the tape; `ForwardOutput.attention`
exposes them as (head, i, j).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from core.autodiff import ParamStore, Tape, Tensor
from core.config import ModelConfig
from core.errors import ConfigError, DataError, ShapeError
from core.geometry import PointCloud, knn
from core.partition import HopMatrix, Partition

logger = logging.getLogger(__name__)

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class ForwardOutput:
    point_features: list[np.ndarray]
    part_features: list[np.ndarray]
    hop_logits: list[np.ndarray]
    attention: list[np.ndarray]
    revised_features: list[np.ndarray]
    descriptor: np.ndarray
    valid_mask: np.ndarray
    layer_losses: list[float]
    loss: float | None
    loss_tensor: Tensor | None = field(default=None, repr=False)
    descriptor_tensor: Tensor | None = field(default=None, repr=False)


# --- parameters

def head_blocks(channels: int, heads: int) -> np.ndarray:
    """(C x H) indicator of which contiguous channel group belongs to which head."""
    blocks = np.zeros((channels, heads))
    blocks[np.arange(channels), np.arange(channels) // (channels // heads)] = 1.0
    return blocks


def param_shapes(config: ModelConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, fan_in) for every backbone parameter, in creation order."""
    c, k = config.channels, config.delta + 1
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    for layer in range(1, config.layers + 1):
        c_in = 3 if layer == 1 else c
        name = f"layer{layer}"
        shapes[f"{name}.point.W"] = ((2 * c_in, c), 2 * c_in)
        shapes[f"{name}.point.b"] = ((1, c), 2 * c_in)
        shapes[f"{name}.part.W1"] = ((2 * c, c), 2 * c)
        shapes[f"{name}.part.b1"] = ((1, c), 2 * c)
        shapes[f"{name}.part.W2"] = ((c, c), c)
        shapes[f"{name}.part.b2"] = ((1, c), c)
        shapes[f"{name}.hop.W1"] = ((c, c), c)
        shapes[f"{name}.hop.b1"] = ((1, c), c)
        shapes[f"{name}.hop.W2"] = ((c, k), c)
        shapes[f"{name}.hop.b2"] = ((1, k), c)
        shapes[f"{name}.att.W"] = ((c, config.heads), c // config.heads)
    shapes["fusion.W"] = ((config.layers * c, config.fusion), config.layers * c)
    shapes["fusion.b"] = ((1, config.fusion), config.layers * c)
    return shapes


def init_params(config: ModelConfig, store: ParamStore | None = None) -> ParamStore:
    store = store or ParamStore(config.seed)
    blocks = head_blocks(config.channels, config.heads)
    for name, (shape, fan_in) in param_shapes(config).items():
        values = store.add(name, shape, fan_in)
        if name.endswith(".att.W"):
            values *= blocks
    return store


def linear(t: Tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    ones = t.constant(np.ones((x.shape[0], 1)))
    return t.add(t.matmul(x, w), t.matmul(ones, b))


# --- point level

def point_feature_conv(t: Tape, h_in: Tensor, w: Tensor, b: Tensor, k: int) -> Tensor:
    """EdgeConv on a kNN graph rebuilt in the current feature space."""
    n = h_in.shape[0]
    if k > n:
        raise ConfigError(f"point_feature_conv: k={k} exceeds {n} points")
    idx = t.decide("knn", lambda: knn(h_in.data, h_in.data, k))
    centers = t.gather_rows(h_in, np.repeat(np.arange(n), k))
    neighbours = t.gather_rows(h_in, idx.reshape(-1))
    edges = t.concat_last(centers, t.sub(neighbours, centers))
    h = t.leaky_relu(linear(t, edges, w, b))
    return t.reduce_max(t.reshape(h, (n, k, h.shape[-1])), axis=1)


def global_max_pool(t: Tape, h: Tensor) -> Tensor:
    return t.reduce_max(h, axis=0)


def part_max_pool(t: Tape, h: Tensor, partition: Partition) -> Tensor:
    members, mask = partition.member_matrix()
    grouped = t.reshape(t.gather_rows(h, members.reshape(-1)), (*members.shape, h.shape[1]))
    return t.masked_max(grouped, mask, axis=1)


# --- part graph

def part_edge_features(t: Tape, f: Tensor) -> Tensor:
    v, c = f.shape
    fi = t.gather_rows(f, np.repeat(np.arange(v), v))
    fj = t.gather_rows(f, np.tile(np.arange(v), v))
    return t.reshape(t.concat_last(fi, t.sub(fj, fi)), (v, v, 2 * c))


def _pairwise_mlp(t: Tape, e: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    v = e.shape[0]
    x = t.reshape(e, (v * v, e.shape[-1]))
    hidden = t.leaky_relu(linear(t, x, p[f"{prefix}.W1"], p[f"{prefix}.b1"]))
    out = linear(t, hidden, p[f"{prefix}.W2"], p[f"{prefix}.b2"])
    return t.reshape(out, (v, v, out.shape[-1]))


def part_conv(t: Tape, e: Tensor, p: dict[str, Tensor], layer: str) -> Tensor:
    return _pairwise_mlp(t, e, p, f"{layer}.part")


def hop_head(t: Tape, e2: Tensor, p: dict[str, Tensor], layer: str) -> Tensor:
    return _pairwise_mlp(t, e2, p, f"{layer}.hop")


def hop_distance_loss(t: Tape, logits: Tensor, hop: HopMatrix) -> Tensor:
    v, _, k = logits.shape
    if k != hop.delta + 1 or v != hop.n_parts:
        raise ShapeError("hop_distance_loss", logits.shape, hop.D.shape)
    valid = np.flatnonzero(hop.valid_mask.reshape(-1))
    if valid.size == 0:
        raise DataError("hop_distance_loss: no valid part pairs")
    picked = t.gather_rows(t.reshape(logits, (v * v, k)), valid)
    return t.cross_entropy_logits(picked, hop.D.reshape(-1)[valid])


def gaussian_kernel(x, sigma2: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return INV_SQRT_2PI * np.exp(-(x * x) / (2.0 * sigma2))


def kernel_weight(logits_ij, sigma2: float) -> float:
    """Softmax-weighted kernel value of one pair's hop logits."""
    logits_ij = np.asarray(logits_ij, dtype=np.float64)
    p = np.exp(logits_ij - logits_ij.max())
    p /= p.sum()
    return float(p @ gaussian_kernel(np.arange(len(p)), sigma2))


def kernel_weights(t: Tape, logits: Tensor, sigma2: float, mode: str = "soft") -> Tensor:
    v, _, k = logits.shape
    g = gaussian_kernel(np.arange(k), sigma2)
    flat = t.reshape(logits, (v * v, k))
    if mode == "soft":
        p = t.softmax_masked(flat, np.ones(flat.shape, dtype=bool), axis=-1)
        return t.matmul(p, t.constant(g[:, None]))
    if mode == "argmax":
        hops = t.decide("kernel_argmax", lambda: np.argmax(flat.data, axis=1))
        return t.constant(g[hops][:, None])
    raise ConfigError(f"unknown kernel mode {mode!r}")


def hga_scores(t: Tape, e2: Tensor, weights: Tensor, lam: int, w_att: Tensor, heads: int) -> Tensor:
    v, _, c = e2.shape
    if c % heads:
        raise ConfigError(f"channels={c} not divisible by heads={heads}")
    x = t.reshape(e2, (v * v, c))
    if lam:
        x = t.mul(x, t.matmul(weights, t.constant(np.ones((1, c)))))
    w = t.mul(w_att, t.constant(head_blocks(c, heads)))
    return t.reshape(t.matmul(x, w), (v, v, heads))


def hga_normalize(t: Tape, scores: Tensor, valid_mask: np.ndarray) -> Tensor:
    return t.softmax_masked(scores, np.asarray(valid_mask, dtype=bool)[:, :, None], axis=1, empty="zero")


def hga_aggregate(t: Tape, alpha: Tensor, e2: Tensor, valid_mask: np.ndarray) -> Tensor:
    v, _, heads = alpha.shape
    c = e2.shape[-1]
    spread = t.matmul(t.reshape(alpha, (v * v, heads)), t.constant(head_blocks(c, heads).T))
    weighted = t.mul(t.reshape(e2, (v * v, c)), spread)
    return t.masked_max(t.reshape(weighted, (v, v, c)), valid_mask, axis=1)


def revise_point_features(t: Tape, f_att: Tensor, h: Tensor, partition: Partition) -> Tensor:
    return t.add(h, t.gather_rows(f_att, partition.assignment))


def total_selfsup_loss(t: Tape, losses: list[Tensor], mode: str = "all") -> Tensor:
    if not losses:
        raise ConfigError("total_selfsup_loss needs at least one layer loss")
    if mode == "last":
        return losses[-1]
    if mode != "all":
        raise ConfigError(f"unknown loss mode {mode!r}")
    total = losses[0]
    for loss in losses[1:]:
        total = t.add(total, loss)
    return total


def fuse_descriptor(t: Tape, revised: list[Tensor], p: dict[str, Tensor], pool: str = "max") -> Tensor:
    """(1 x D) global descriptor from all layers' revised point features."""
    cat = revised[0]
    for r in revised[1:]:
        cat = t.concat_last(cat, r)
    z = t.leaky_relu(linear(t, cat, p["fusion.W"], p["fusion.b"]))
    desc = t.reshape(global_max_pool(t, z), (1, z.shape[1]))
    if pool == "max+avg":
        avg = t.matmul(t.constant(np.full((1, z.shape[0]), 1.0 / z.shape[0])), z)
        desc = t.concat_last(desc, avg)
    return desc


def model_forward(cloud: PointCloud, partition: Partition, hop: HopMatrix | None, config: ModelConfig,
                  params: ParamStore | dict[str, Tensor], mode: str = "train",
                  tape: Tape | None = None) -> ForwardOutput:
    """Run every layer; the hop loss is attached only when `hop` is given."""
    if partition.split != config.split:
        raise ConfigError(f"partition split {partition.split} != model split {config.split}")
    t = tape if tape is not None else Tape(record=(mode == "train"))
    p = params.bind(t) if isinstance(params, ParamStore) else params
    valid = partition.nonempty_mask[:, None] & partition.nonempty_mask[None, :]

    x = t.constant(cloud.points)
    losses: list[Tensor] = []
    out = ForwardOutput([], [], [], [], [], np.empty(0), valid, [], None)
    revised: list[Tensor] = []
    for layer in range(1, config.layers + 1):
        name = f"layer{layer}"
        h = point_feature_conv(t, x, p[f"{name}.point.W"], p[f"{name}.point.b"], config.k)
        f = part_max_pool(t, h, partition)
        e2 = part_conv(t, part_edge_features(t, f), p, name)
        logits = hop_head(t, e2, p, name)
        if hop is not None:
            losses.append(hop_distance_loss(t, logits, hop))
        weights = kernel_weights(t, logits, config.sigma2, config.kernel_mode)
        scores = hga_scores(t, e2, weights, config.lambdas[layer - 1], p[f"{name}.att.W"], config.heads)
        alpha = hga_normalize(t, scores, valid)
        x = revise_point_features(t, hga_aggregate(t, alpha, e2, valid), h, partition)
        revised.append(x)

        out.point_features.append(h.data)
        out.part_features.append(f.data)
        out.hop_logits.append(logits.data)
        out.attention.append(np.moveaxis(alpha.data, -1, 0))
        out.revised_features.append(x.data)

    desc = fuse_descriptor(t, revised, p, config.pool)
    out.descriptor = desc.data.reshape(-1)
    out.descriptor_tensor = desc
    if losses:
        out.layer_losses = [float(loss.data) for loss in losses]
        out.loss_tensor = total_selfsup_loss(t, losses, config.loss_mode)
        out.loss = float(out.loss_tensor.data)
    return out


# --- exports

def export_attention(output: ForwardOutput) -> pd.DataFrame:
    i, j = np.nonzero(output.valid_mask)
    frames = []
    for layer, alpha in enumerate(output.attention, start=1):
        for head in range(alpha.shape[0]):
            frames.append(pd.DataFrame({"layer": layer, "head": head, "i": i, "j": j, "alpha": alpha[head, i, j]}))
    return pd.concat(frames, ignore_index=True)


def export_predicted_hops(output: ForwardOutput, hop: HopMatrix) -> pd.DataFrame:
    i, j = np.nonzero(hop.valid_mask)
    frames = [
        pd.DataFrame({"layer": layer, "i": i, "j": j,
                      "argmax_hop": logits.argmax(axis=-1)[i, j], "gt_hop": hop.D[i, j]})
        for layer, logits in enumerate(output.hop_logits, start=1)
    ]
    return pd.concat(frames, ignore_index=True)


def export_feature_distance(output: ForwardOutput, anchor: int = 0) -> pd.DataFrame:
    feats = output.revised_features[-1]
    if not 0 <= anchor < len(feats):
        raise DataError(f"anchor point {anchor} outside [0, {len(feats)})")
    dist = np.linalg.norm(feats - feats[anchor], axis=1)
    return pd.DataFrame({"point": np.arange(len(feats)), "distance": dist})
