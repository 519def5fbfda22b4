"""Window partitioning, shifted sort keys and voxel-sequence bookkeeping."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError, Tensor, permute_rows


class EmptySequenceError(ValueError):
    """Raised when asked to serialize an empty voxel set."""


def _triple(v) -> tuple[int, int, int]:
    t = tuple(int(x) for x in np.broadcast_to(np.asarray(v), (3,)))
    return t  # type: ignore[return-value]


@dataclass(frozen=True)
class WindowSpec:
    extent: tuple[int, int, int]
    axis: str = "x"
    shift: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "extent", _triple(self.extent))
        object.__setattr__(self, "shift", _triple(self.shift))
        object.__setattr__(self, "axis", self.axis.lower())
        if self.axis not in ("x", "y"):
            raise ValueError(f"scan axis must be 'x' or 'y', got {self.axis!r}")
        if min(self.extent) < 1:
            raise ValueError(f"window extent must be >= 1, got {self.extent}")
        if any(s < 0 or s >= w for s, w in zip(self.shift, self.extent)):
            raise ValueError(f"shift {self.shift} must satisfy 0 <= shift < extent {self.extent}")

    @property
    def volume(self) -> int:
        wx, wy, wz = self.extent
        return wx * wy * wz

    def shifted(self, shift=None) -> "WindowSpec":
        """Same window, shifted by ``shift`` (default: half the extent, floored)."""
        if shift is None:
            shift = tuple(w // 2 for w in self.extent)
        return WindowSpec(self.extent, self.axis, shift)

    def unshifted(self) -> "WindowSpec":
        return WindowSpec(self.extent, self.axis, (0, 0, 0))

    def to_dict(self) -> dict:
        return {"extent": list(self.extent), "axis": self.axis, "shift": list(self.shift)}


@dataclass
class SerializedSequence:
    order: np.ndarray      # sequence position -> source row
    inverse: np.ndarray    # source row -> sequence position
    keys: np.ndarray       # sort key per sequence position (non-decreasing)

    def __len__(self) -> int:
        return len(self.order)


def shift_coords(coords, shift) -> np.ndarray:
    return np.asarray(coords, dtype=np.int64) + np.asarray(shift, dtype=np.int64)


def window_grid(grid_extent, spec: WindowSpec) -> tuple[int, int, int]:
    """Windows per axis; one extra window absorbs the shift."""
    return tuple(-(-int(g) // w) + 1 for g, w in zip(grid_extent, spec.extent))  # type: ignore[return-value]


def window_keys(coords, spec: WindowSpec, grid_extent) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-voxel window index, in-window index and sort key ``wi * W + iwi``."""
    c = shift_coords(coords, spec.shift).reshape(-1, 3)
    if np.any(c < 0):
        raise ContractError("window_keys: negative coordinates")
    wx, wy, wz = spec.extent
    nx, ny, nz = window_grid(grid_extent, spec)
    win = c // np.array(spec.extent)
    loc = c - win * np.array(spec.extent)
    if np.any(win >= np.array((nx, ny, nz))):
        raise ContractError("window_keys: coordinates exceed the grid extent")
    wi = (win[:, 0] * ny + win[:, 1]) * nz + win[:, 2]
    if spec.axis == "x":
        iwi = loc[:, 0] * (wy * wz) + loc[:, 1] * wz + loc[:, 2]
    else:
        iwi = loc[:, 1] * (wx * wz) + loc[:, 0] * wz + loc[:, 2]
    return wi, iwi, wi * spec.volume + iwi


def serialize_voxels(coords, spec: WindowSpec, grid_extent) -> SerializedSequence:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0:
        raise EmptySequenceError("cannot serialize an empty voxel set")
    _, _, k = window_keys(coords, spec, grid_extent)
    order = np.argsort(k, kind="stable")
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    return SerializedSequence(order=order, inverse=inverse, keys=k[order])


def gather(features: Tensor, seq: SerializedSequence) -> Tensor:
    """Voxel rows -> sequence order."""
    return permute_rows(features, seq.order, seq.inverse)


def unserialize(seq_features: Tensor, seq: SerializedSequence) -> Tensor:
    """Sequence order -> voxel rows (inverse of :func:`gather`)."""
    if seq_features.shape[0] != len(seq):
        raise ContractError(f"unserialize: {seq_features.shape[0]} rows for a sequence of {len(seq)}")
    return permute_rows(seq_features, seq.inverse, seq.order)


# ------------------------------------------------------------------- locality

_FACE = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]])


def neighbor_offsets(neighborhood: int) -> np.ndarray:
    """Half of the 6- or 26-neighborhood, so each unordered pair appears once."""
    if neighborhood == 6:
        return _FACE.copy()
    if neighborhood == 26:
        offs = [o for o in np.ndindex(3, 3, 3)]
        offs = np.array(offs) - 1
        # keep offsets that are lexicographically positive
        keep = [tuple(o) > (0, 0, 0) for o in offs]
        return offs[np.array(keep)]
    raise ValueError("neighborhood must be 6 or 26")


def adjacent_pairs(coords, neighborhood: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Row-index pairs ``(i, j)`` of voxels that are spatial neighbours."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    lo = coords.min(axis=0) - 1
    span = coords.max(axis=0) - lo + 2
    def lin(c):
        c = c - lo
        return (c[:, 0] * span[1] + c[:, 1]) * span[2] + c[:, 2]
    key = lin(coords)
    sorter = np.argsort(key)
    skey = key[sorter]
    left, right = [], []
    for off in neighbor_offsets(neighborhood):
        q = lin(coords + off)
        pos = np.searchsorted(skey, q)
        pos = np.minimum(pos, len(skey) - 1)
        hit = skey[pos] == q
        left.append(np.nonzero(hit)[0])
        right.append(sorter[pos[hit]])
    return np.concatenate(left), np.concatenate(right)


@dataclass
class LocalityMetrics:
    spec: WindowSpec
    co_window: float
    union_co_window: float
    mean_seq_gap: float
    mean_seq_gap_union: float
    voxels_per_sec: float
    n_pairs: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"spec": self.spec.to_dict(), "co_window": self.co_window,
             "union_co_window": self.union_co_window, "mean_seq_gap": self.mean_seq_gap,
             "mean_seq_gap_union": self.mean_seq_gap_union,
             "voxels_per_sec": self.voxels_per_sec, "n_pairs": self.n_pairs}
        d.update(self.extra)
        return d


def _time_sort(coords, spec, grid_extent, min_time=0.02) -> float:
    n, reps, start = len(coords), 0, time.perf_counter()
    while True:
        serialize_voxels(coords, spec, grid_extent)
        reps += 1
        elapsed = time.perf_counter() - start
        if elapsed >= min_time:
            return n * reps / elapsed


def locality_report(coords, specs, grid_extent, neighborhood: int = 6,
                    time_sort: bool = True) -> list[LocalityMetrics]:
    """How well window partitions keep spatially adjacent voxels together.

    For each spec: ``co_window`` uses the unshifted partition, the union also
    counts pairs sharing a window in the shifted partition (``spec.shift``).
    Sequence gaps are ``|pos_i - pos_j|`` over adjacent pairs; the union gap
    takes the smaller of the two sequences.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    i, j = adjacent_pairs(coords, neighborhood)
    out = []
    for spec in specs:
        base = spec.unshifted()
        wi0, _, _ = window_keys(coords, base, grid_extent)
        wi1, _, _ = window_keys(coords, spec, grid_extent)
        same0 = wi0[i] == wi0[j]
        same1 = wi1[i] == wi1[j]
        n = len(i)
        if len(coords):
            s0 = serialize_voxels(coords, base, grid_extent)
            s1 = serialize_voxels(coords, spec, grid_extent)
            gap0 = np.abs(s0.inverse[i] - s0.inverse[j])
            gap1 = np.abs(s1.inverse[i] - s1.inverse[j])
        else:
            gap0 = gap1 = np.zeros(0)
        vps = _time_sort(coords, spec, grid_extent) if time_sort and len(coords) else 0.0
        out.append(LocalityMetrics(
            spec=spec,
            co_window=float(same0.mean()) if n else 1.0,
            union_co_window=float((same0 | same1).mean()) if n else 1.0,
            mean_seq_gap=float(gap0.mean()) if n else 0.0,
            mean_seq_gap_union=float(np.minimum(gap0, gap1).mean()) if n else 0.0,
            voxels_per_sec=vps,
            n_pairs=int(n),
        ))
    return out


def morton_keys(coords, bits: int = 16) -> np.ndarray:
    """Z-order (Morton) codes; comparison baseline for the benchmark."""
    c = np.asarray(coords, dtype=np.uint64).reshape(-1, 3)
    key = np.zeros(len(c), dtype=np.uint64)
    for b in range(bits):
        for a in range(3):
            key |= ((c[:, a] >> np.uint64(b)) & np.uint64(1)) << np.uint64(3 * b + (2 - a))
    return key


def morton_seq_gap(coords, neighborhood: int = 6) -> float:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    i, j = adjacent_pairs(coords, neighborhood)
    if len(i) == 0:
        return 0.0
    order = np.argsort(morton_keys(coords), kind="stable")
    pos = np.empty_like(order)
    pos[order] = np.arange(len(order))
    return float(np.abs(pos[i] - pos[j]).mean())
