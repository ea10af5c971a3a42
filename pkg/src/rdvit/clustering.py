"""Offset-vote grid clustering of instance predictions.

Pipeline, in order: threshold the seed probability map, shift every
surviving voxel by its (scaled) predicted offset to a predicted center,
quantize centers to a coarse grid (floor(c / cell)), group voxels sharing
a grid cell, drop groups at or below the minimum size, then majority-vote
the tooth class over member voxels (background-majority groups are
dropped, class ties resolve to the smaller id). Instances come back
ordered by their first member voxel in flat (d, h, w) index order, so the
output is deterministic.

`cluster` groups via sorting on the quantized keys and is effectively
linear in the voxel count. `cluster_oracle` is the independent quadratic
reference: it compares every pair of quantized centers directly and
refuses inputs past 32^3 voxels. Both must produce identical partitions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

_ORACLE_VOXEL_CAP = 32**3


@dataclass(frozen=True)
class ClusterParams:
    seed_threshold: float = 0.5
    grid_cell: float = 4.0
    min_cluster_size: int = 50
    offset_scale: float = 1.0

    def validate(self) -> "ClusterParams":
        if not 0.0 < self.seed_threshold < 1.0:
            raise ConfigError(f"seed threshold must lie in (0, 1), got {self.seed_threshold}")
        if self.grid_cell <= 0:
            raise ConfigError(f"grid cell must be positive, got {self.grid_cell}")
        if self.min_cluster_size < 0:
            raise ConfigError(f"min cluster size must be >= 0, got {self.min_cluster_size}")
        return self


@dataclass
class Instance:
    voxels: np.ndarray  # (n, 3) integer coordinates, in flat scan order
    center: np.ndarray  # (3,) mean of member predicted centers
    fdi_label: int  # majority tooth class, 1..32

    @property
    def size(self) -> int:
        return int(self.voxels.shape[0])


def _check_fields(seed: np.ndarray, offsets: np.ndarray, fdi: np.ndarray):
    if seed.ndim != 3:
        raise ShapeError(f"seed map must be (D, H, W), got {seed.shape}")
    if offsets.shape != (3,) + seed.shape:
        raise ShapeError(f"offsets must be (3, D, H, W), got {offsets.shape}")
    if fdi.ndim != 4 or fdi.shape[1:] != seed.shape:
        raise ShapeError(f"class scores must be (C, D, H, W), got {fdi.shape}")


def _predicted_cells(seed, offsets, fdi, params: ClusterParams):
    """Shared step 1-3: returns (coords, cells, classes) for voxels above
    threshold. Every downstream grouping strategy consumes these."""
    params.validate()
    _check_fields(seed, offsets, fdi)
    mask = seed > params.seed_threshold
    coords = np.argwhere(mask)  # (n, 3), flat (d, h, w) scan order
    if coords.shape[0] == 0:
        empty = np.zeros((0, 3))
        return coords, empty.astype(np.int64), np.zeros(0, dtype=np.int64), empty
    shift = offsets[:, mask].T * params.offset_scale
    centers = coords + shift
    cells = np.floor(centers / params.grid_cell).astype(np.int64)
    classes = np.argmax(fdi[:, mask], axis=0)
    return coords, cells, classes, centers


def _build_instances(coords, cells_members, classes, centers, params):
    """cells_members: list of member index arrays, each already in scan
    order with the group keyed by its first member."""
    instances = []
    for members in cells_members:
        if members.size <= params.min_cluster_size:
            continue
        votes = np.bincount(classes[members])
        label = int(np.argmax(votes))  # ties resolve to the smaller class id
        if label == 0:
            continue
        instances.append(
            Instance(
                voxels=coords[members],
                center=centers[members].mean(axis=0),
                fdi_label=label,
            )
        )
    return instances


def cluster(seed, offsets, fdi, params: ClusterParams = ClusterParams()):
    """Grid clustering via sorted unique keys; linear-ish in voxel count."""
    coords, cells, classes, centers = _predicted_cells(seed, offsets, fdi, params)
    if coords.shape[0] == 0:
        return []
    _, first_idx, inverse = np.unique(cells, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # renumber groups so group order follows each group's first member voxel
    group_order = np.argsort(first_idx, kind="stable")
    rank = np.empty_like(group_order)
    rank[group_order] = np.arange(group_order.size)
    groups = rank[inverse]
    order = np.argsort(groups, kind="stable")  # members stay in scan order
    counts = np.bincount(groups, minlength=group_order.size)
    member_arrays = np.split(order, np.cumsum(counts)[:-1])
    return _build_instances(coords, member_arrays, classes, centers, params)


def cluster_oracle(seed, offsets, fdi, params: ClusterParams = ClusterParams()):
    """Quadratic reference: exhaustive pairwise equality of quantized
    centers. Only for small volumes (refuses > 32^3 voxels)."""
    if int(np.prod(seed.shape)) > _ORACLE_VOXEL_CAP:
        raise ConfigError(
            f"oracle limited to volumes of at most {_ORACLE_VOXEL_CAP} voxels, got {seed.shape}"
        )
    coords, cells, classes, centers = _predicted_cells(seed, offsets, fdi, params)
    n = coords.shape[0]
    if n == 0:
        return []
    # leader[i] = first j whose cell equals cell i, found by comparing every
    # pair; chunked over rows to bound the (n x n) comparison's memory
    leader = np.empty(n, dtype=np.int64)
    step = max(1, min(n, 2**22 // max(n, 1)))
    for start in range(0, n, step):
        rows = cells[start : start + step]
        equal = np.all(rows[:, None, :] == cells[None, :, :], axis=2)
        leader[start : start + rows.shape[0]] = np.argmax(equal, axis=1)
    member_arrays = [np.flatnonzero(leader == lead) for lead in np.unique(leader)]
    member_arrays.sort(key=lambda m: int(m[0]))
    return _build_instances(coords, member_arrays, classes, centers, params)
