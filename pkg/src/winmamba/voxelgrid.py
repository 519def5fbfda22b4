"""Point clouds, sparse voxel sets and the sparse down/upsampling operators."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractError, Params, Tensor, apply_linear, init_linear, segment_mean, take_rows

PCB_MAGIC = b"PCB1"


class EmptySceneError(ValueError):
    """No points survived cropping / voxelization."""


class PointFormatError(ValueError):
    """A point file could not be parsed."""


@dataclass
class PointCloud:
    points: np.ndarray                   # (n, 3) metres
    extras: np.ndarray                   # (n, c) extra channels
    bounds: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.extras = np.asarray(self.extras, dtype=np.float64).reshape(len(self.points), -1)
        lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in self.bounds)
        self.bounds = (lo, hi)
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.extras))):
            raise PointFormatError("point cloud contains non-finite values")

    @classmethod
    def from_array(cls, arr, bounds=None) -> "PointCloud":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 3:
            raise PointFormatError(f"expected an (n, >=3) array, got {arr.shape}")
        if bounds is None:
            if len(arr) == 0:
                raise EmptySceneError("no points and no bounds")
            bounds = (arr[:, :3].min(axis=0), np.nextafter(arr[:, :3].max(axis=0), np.inf))
        return cls(arr[:, :3], arr[:, 3:], bounds)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_extra(self) -> int:
        return self.extras.shape[1]


@dataclass
class SparseVoxelSet:
    coords: np.ndarray                   # (n, 3) int64
    features: Tensor                     # (n, C)
    stride: tuple[int, int, int] = (1, 1, 1)
    extent: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.stride = tuple(int(s) for s in self.stride)
        self.extent = tuple(int(e) for e in self.extent)
        if self.features.shape[0] != len(self.coords):
            raise ContractError(f"{len(self.coords)} coords but {self.features.shape[0]} feature rows")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: Tensor) -> "SparseVoxelSet":
        return SparseVoxelSet(self.coords, features, self.stride, self.extent)

    def validate(self) -> None:
        if len(self.coords) and (np.any(self.coords < 0) or np.any(self.coords >= np.array(self.extent))):
            raise ContractError("voxel coordinates outside the grid extent")
        if len(np.unique(self.coords, axis=0)) != len(self.coords):
            raise ContractError("duplicate voxel coordinates")

    def canonical(self) -> "SparseVoxelSet":
        """Rows sorted lexicographically by (x, y, z)."""
        order = np.lexsort(self.coords.T[::-1])
        if np.array_equal(order, np.arange(len(order))):
            return self
        return SparseVoxelSet(self.coords[order], take_rows(self.features, order), self.stride, self.extent)


@dataclass
class CoordMap:
    """Record of one downsampling: which child rows merged into each parent."""
    parent_coords: np.ndarray
    parent_index: np.ndarray             # child row -> parent row
    factor: tuple[int, int, int]
    child_coords: np.ndarray
    child_stride: tuple[int, int, int]
    child_extent: tuple[int, int, int]
    parent_extent: tuple[int, int, int] = field(default=(1, 1, 1))

    @property
    def children(self) -> list[np.ndarray]:
        order = np.argsort(self.parent_index, kind="stable")
        splits = np.cumsum(np.bincount(self.parent_index, minlength=len(self.parent_coords)))[:-1]
        return np.split(order, splits)

    @property
    def parent_stride(self) -> tuple[int, int, int]:
        return tuple(s * f for s, f in zip(self.child_stride, self.factor))  # type: ignore[return-value]


def _linear_index(coords: np.ndarray, extent) -> np.ndarray:
    ex = np.asarray(extent, dtype=np.int64)
    return (coords[:, 0] * ex[1] + coords[:, 1]) * ex[2] + coords[:, 2]


# ------------------------------------------------------------- voxelization

def grid_extent(bounds, cell) -> tuple[int, int, int]:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    return tuple(int(v) for v in np.ceil((hi - lo) / np.asarray(cell, dtype=np.float64) - 1e-9))  # type: ignore[return-value]


@dataclass
class RawVoxels:
    coords: np.ndarray
    raw: np.ndarray                      # (n_vox, 3 + c) mean offset + mean extras
    point_voxel: np.ndarray              # per input point: voxel row, -1 if dropped
    counts: np.ndarray
    extent: tuple[int, int, int]


def bin_points(cloud: PointCloud, cell) -> RawVoxels:
    """Half-open binning ``floor((p - lo) / cell)`` with per-voxel mean features."""
    cell = np.broadcast_to(np.asarray(cell, dtype=np.float64), (3,))
    if np.any(cell <= 0):
        raise ValueError(f"cell size must be positive, got {cell}")
    lo, hi = cloud.bounds
    if np.any(hi <= lo):
        raise ValueError("invalid bounds")
    extent = grid_extent(cloud.bounds, cell)
    p = cloud.points
    inside = np.all((p >= lo) & (p < hi), axis=1)
    vc = np.floor((p[inside] - lo) / cell).astype(np.int64)
    vc = np.minimum(vc, np.array(extent) - 1)
    point_voxel = np.full(len(p), -1, dtype=np.int64)
    if len(vc) == 0:
        raise EmptySceneError("no points inside the bounds")
    lin = _linear_index(vc, extent)
    uniq, inv = np.unique(lin, return_inverse=True)
    inv = inv.reshape(-1)
    n = len(uniq)
    coords = np.stack(np.unravel_index(uniq, extent), axis=1).astype(np.int64)
    centers = lo + (coords + 0.5) * cell
    offsets = p[inside] - centers[inv]
    feats = np.concatenate([offsets, cloud.extras[inside]], axis=1)
    counts = np.bincount(inv, minlength=n)
    # sort by voxel, then pairwise (np.add.reduceat is sequential; np.sum is pairwise)
    order = np.argsort(inv, kind="stable")
    bounds_ = np.concatenate([[0], np.cumsum(counts)])
    sorted_feats = feats[order]
    raw = np.stack([np.sort(sorted_feats[bounds_[k]:bounds_[k + 1]], axis=0).sum(axis=0)
                    for k in range(n)]) / counts[:, None]
    point_voxel[np.nonzero(inside)[0]] = inv
    return RawVoxels(coords, raw, point_voxel, counts, extent)


def init_vfe(params: Params, raw_channels: int, channels: int, rng: np.random.Generator,
             name: str = "vfe") -> None:
    init_linear(params, name, raw_channels, channels, rng)


def encode_voxels(raw: RawVoxels, params: Params, name: str = "vfe") -> SparseVoxelSet:
    feats = apply_linear(Tensor(raw.raw), params, name)
    return SparseVoxelSet(raw.coords, feats, (1, 1, 1), raw.extent)


def voxelize(cloud: PointCloud, cell, params: Params, name: str = "vfe") -> SparseVoxelSet:
    """Bin points into voxels and project mean (offset, extras) to ``C`` channels."""
    return encode_voxels(bin_points(cloud, cell), params, name)


# --------------------------------------------------------- down / upsampling

def coord_map(coords: np.ndarray, d, stride=(1, 1, 1), extent=(1, 1, 1)) -> CoordMap:
    d = tuple(int(v) for v in np.broadcast_to(np.asarray(d), (3,)))
    if min(d) < 1:
        raise ValueError(f"downsampling factor must be >= 1, got {d}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    parent_extent = tuple(-(-int(e) // f) for e, f in zip(extent, d))
    pc = coords // np.array(d)
    lin = _linear_index(pc, parent_extent)
    uniq, inv = np.unique(lin, return_inverse=True)
    parents = np.stack(np.unravel_index(uniq, parent_extent), axis=1).astype(np.int64) \
        if len(uniq) else np.zeros((0, 3), np.int64)
    return CoordMap(parents, inv.reshape(-1).astype(np.int64), d, coords,
                    tuple(stride), tuple(extent), parent_extent)


def pool(vset: SparseVoxelSet, cmap: CoordMap, params: Params | None, name: str | None) -> SparseVoxelSet:
    """Mean-pool children into the parents of ``cmap`` then project C -> C."""
    if not np.array_equal(vset.coords, cmap.child_coords):
        raise ContractError("downsample: voxel set does not match the coordinate map")
    feats = segment_mean(vset.features, cmap.parent_index, len(cmap.parent_coords))
    if params is not None:
        feats = apply_linear(feats, params, name)
    return SparseVoxelSet(cmap.parent_coords, feats, cmap.parent_stride, cmap.parent_extent)


def downsample(vset: SparseVoxelSet, d, params: Params | None = None,
               name: str | None = None) -> tuple[SparseVoxelSet, CoordMap]:
    cmap = coord_map(vset.coords, d, vset.stride, vset.extent)
    return pool(vset, cmap, params, name), cmap


def upsample(vset: SparseVoxelSet, cmap: CoordMap, params: Params | None = None,
             name: str | None = None) -> SparseVoxelSet:
    """Copy each parent row to its recorded children, then project C -> C."""
    if not np.array_equal(vset.coords, cmap.parent_coords):
        raise ContractError("upsample: voxel set does not match the coordinate map parents")
    feats = take_rows(vset.features, cmap.parent_index)
    if params is not None:
        feats = apply_linear(feats, params, name)
    return SparseVoxelSet(cmap.child_coords, feats, cmap.child_stride, cmap.child_extent)


# ------------------------------------------------------------------ file I/O

def read_points(path, bounds=None) -> PointCloud:
    """Read ``x y z [c...]`` text (``#`` comments) or the binary PCB1 format."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == PCB_MAGIC:
        if len(blob) < 12:
            raise PointFormatError(f"{path}: truncated PCB1 header")
        n, c = struct.unpack("<II", blob[4:12])
        width = 3 + c
        need = 12 + 4 * n * width
        if len(blob) != need:
            raise PointFormatError(f"{path}: expected {need} bytes, found {len(blob)}")
        arr = np.frombuffer(blob, dtype="<f4", offset=12).reshape(n, width).astype(np.float64)
    else:
        rows = []
        width = None
        for lineno, line in enumerate(blob.decode("utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                vals = [float(v) for v in line.split()]
            except ValueError as exc:
                raise PointFormatError(f"{path}:{lineno}: {exc}") from None
            if len(vals) < 3 or (width is not None and len(vals) != width):
                raise PointFormatError(f"{path}:{lineno}: expected {width or '>=3'} values, got {len(vals)}")
            width = len(vals)
            rows.append(vals)
        arr = np.array(rows, dtype=np.float64).reshape(-1, width or 3)
    return PointCloud.from_array(arr, bounds)


def write_points(path, cloud: PointCloud, binary: bool = False) -> None:
    arr = np.concatenate([cloud.points, cloud.extras], axis=1)
    path = Path(path)
    if binary:
        header = PCB_MAGIC + struct.pack("<II", len(arr), cloud.n_extra)
        path.write_bytes(header + arr.astype("<f4").tobytes())
    else:
        with path.open("w") as fh:
            fh.write("# x y z" + "".join(f" c{i}" for i in range(cloud.n_extra)) + "\n")
            np.savetxt(fh, arr, fmt="%.9g")
