"""
Volumetric partition of a cloud into s^3 voxel parts and the ground-truth hop graph.

Parts are nodes; two non-empty parts are adjacent when their up-scaled bounding
boxes intersect, every non-empty part has a self-loop, and the supervision signal
is the BFS hop distance between parts truncated at delta = s + 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from core.errors import ConfigError, DataError, ParseError
from core.geometry import AABB, PointCloud

logger = logging.getLogger(__name__)

DEFAULT_SCALE = 1.2


@dataclass
class Partition:
    split: int
    assignment: np.ndarray
    part_lists: list[np.ndarray]
    nonempty_mask: np.ndarray

    @property
    def n_parts(self) -> int:
        return self.split ** 3

    def occupancy(self) -> np.ndarray:
        return np.array([len(p) for p in self.part_lists])

    def member_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """(V x P) point indices per part padded with 0, and the matching validity mask."""
        width = max(1, int(self.occupancy().max()))
        members = np.zeros((self.n_parts, width), dtype=np.intp)
        mask = np.zeros((self.n_parts, width), dtype=bool)
        for v, idx in enumerate(self.part_lists):
            members[v, :len(idx)] = idx
            mask[v, :len(idx)] = True
        return members, mask


@dataclass
class HopMatrix:
    split: int
    D: np.ndarray
    valid_mask: np.ndarray

    @property
    def delta(self) -> int:
        return self.split + 1

    @property
    def n_parts(self) -> int:
        return self.D.shape[0]


def voxelize(cloud: PointCloud, s: int) -> Partition:
    if s < 2:
        raise ConfigError(f"split must be >= 2, got {s}")
    pts = cloud.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float((hi - lo).max())
    if extent > 0.0:
        # tight bounding cube, centred per axis, shared cell size
        cube_lo = (lo + hi) / 2.0 - extent / 2.0
        cell = np.clip(np.floor((pts - cube_lo) / (extent / s)).astype(np.intp), 0, s - 1)
        assignment = cell[:, 0] * s * s + cell[:, 1] * s + cell[:, 2]
    else:
        assignment = np.zeros(len(pts), dtype=np.intp)
    part_lists = [np.flatnonzero(assignment == v) for v in range(s ** 3)]
    nonempty = np.array([len(p) > 0 for p in part_lists])
    return Partition(split=s, assignment=assignment, part_lists=part_lists, nonempty_mask=nonempty)


def scaled_aabb(points: np.ndarray, factor: float = DEFAULT_SCALE) -> AABB:
    if factor < 1.0:
        raise ConfigError(f"scale factor must be >= 1, got {factor}")
    if len(points) == 0:
        return AABB.empty()
    lo, hi = points.min(axis=0), points.max(axis=0)
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0 * factor
    return AABB(center - half, center + half)


def build_adjacency(boxes: list[AABB], nonempty_mask: np.ndarray) -> np.ndarray:
    mins = np.array([b.min_corner for b in boxes])
    maxs = np.array([b.max_corner for b in boxes])
    overlap = np.all((mins[:, None, :] <= maxs[None, :, :]) & (mins[None, :, :] <= maxs[:, None, :]), axis=2)
    ne = np.asarray(nonempty_mask, dtype=bool)
    adj = overlap & ne[:, None] & ne[None, :]
    np.fill_diagonal(adj, ne)
    return adj


def hop_distances(adjacency: np.ndarray, delta: int) -> HopMatrix:
    """Level-synchronous BFS from every non-empty node at once.

    A node is present when it has a self-loop or any edge; present nodes are at hop 0
    from themselves whether or not the diagonal is set.
    """
    adj = np.asarray(adjacency, dtype=bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DataError(f"hop_distances: adjacency must be square, got {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise DataError("hop_distances: adjacency must be symmetric")
    ne = np.diag(adj) | adj.any(axis=1)
    reached = np.diag(ne)
    dist = np.where(reached, 0, delta)
    step = adj.astype(np.int64)
    for hop in range(1, delta):
        frontier = ((reached.astype(np.int64) @ step) > 0) & ~reached
        if not frontier.any():
            break
        dist[frontier] = hop
        reached |= frontier
    valid = ne[:, None] & ne[None, :]
    return HopMatrix(split=delta - 1, D=np.where(valid, dist, delta).astype(np.int64), valid_mask=valid)


def ground_truth(cloud: PointCloud, s: int = 3, factor: float = DEFAULT_SCALE) -> tuple[Partition, HopMatrix]:
    part = voxelize(cloud, s)
    boxes = [scaled_aabb(cloud.points[idx], factor) for idx in part.part_lists]
    adj = build_adjacency(boxes, part.nonempty_mask)
    hop = hop_distances(adj, s + 1)
    logger.debug("ground truth: %d/%d parts occupied, %d edges",
                 int(part.nonempty_mask.sum()), part.n_parts, int(adj.sum()))
    return part, hop


def write_hop_csv(hop: HopMatrix, path):
    """First row `V,s,delta`, then V rows of V integers with -1 for invalid pairs."""
    table = np.where(hop.valid_mask, hop.D, -1)
    np.savetxt(Path(path), table, fmt="%d", delimiter=",",
               header=f"{hop.n_parts},{hop.split},{hop.delta}", comments="")


def read_hop_csv(path) -> HopMatrix:
    path = Path(path)
    lines = path.read_text().splitlines()
    try:
        n, split, delta = (int(x) for x in lines[0].split(","))
        table = np.array([[int(x) for x in line.split(",")] for line in lines[1:] if line.strip()])
    except (ValueError, IndexError) as exc:
        raise ParseError(path, 1, f"malformed hop matrix: {exc}") from None
    if table.shape != (n, n) or delta != split + 1:
        raise ParseError(path, 1, f"header {n},{split},{delta} does not match a {table.shape} table")
    valid = table >= 0
    return HopMatrix(split=split, D=np.where(valid, table, delta), valid_mask=valid)
