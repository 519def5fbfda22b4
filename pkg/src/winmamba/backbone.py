"""WinMamba layers, AWF blocks and the stacked backbone.

Feature maps travel as :class:`~winmamba.voxelgrid.SparseVoxelSet`.  Every
fusion ``a (+) b`` requires bitwise-identical coordinate lists; upsampling
always inverts a recorded :class:`~winmamba.voxelgrid.CoordMap`, which is what
keeps those lists aligned.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import (
    ContractError,
    Params,
    Tensor,
    apply_bn,
    apply_linear,
    concat_rows,
    init_linear,
    relu,
    reshape,
    segment_max,
    slice_rows,
)
from .serialize import SerializedSequence, WindowSpec, gather, serialize_voxels, unserialize
from .ssm import SsmConfig, init_mamba, mamba_block
from .voxelgrid import (
    CoordMap,
    PointCloud,
    SparseVoxelSet,
    bin_points,
    coord_map,
    downsample,
    encode_voxels,
    init_vfe,
    pool,
    upsample,
)

PAPER_WINDOWS = ((13, 13, 32), (13, 13, 16), (13, 13, 8), (13, 13, 4))
AWF_PARTS = "ABCD"

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    return tuple(int(x) for x in np.broadcast_to(np.asarray(v), (3,)))  # type: ignore[return-value]


@dataclass
class StageConfig:
    window: Triple = (13, 13, 32)
    factor: int = 2
    channels: int = 64
    wsf: bool = True
    awf_parts: str = "ABC"
    shift: Triple | None = None
    trailing: Triple = (1, 1, 2)

    def __post_init__(self):
        self.window = _triple(self.window)
        self.trailing = _triple(self.trailing)
        if self.shift is not None:
            self.shift = _triple(self.shift)
        self.awf_parts = "".join(sorted(set(self.awf_parts.upper().replace("-", ""))))
        if set(self.awf_parts) - set(AWF_PARTS):
            raise ValueError(f"awf_parts must be a subset of {AWF_PARTS!r}, got {self.awf_parts!r}")
        if self.factor < 1 or self.channels < 1 or min(self.window) < 1:
            raise ValueError("factor, channels and window extents must be >= 1")
        if any(s < 0 or s >= w for s, w in zip(self.main_shift, self.window)):
            raise ValueError(f"shift {self.shift} must be below the window {self.window}")

    @property
    def main_shift(self) -> Triple:
        if self.shift is None:
            return tuple(w // 2 for w in self.window)  # type: ignore[return-value]
        return self.shift

    def shift_for(self, window: Triple) -> Triple:
        """Shift for a (possibly WSA-enlarged) window."""
        if self.shift is None:
            return tuple(w // 2 for w in window)  # type: ignore[return-value]
        return tuple(s * w // m for s, w, m in zip(self.shift, window, self.window))  # type: ignore[return-value]

    def has(self, part: str) -> bool:
        return part in self.awf_parts


@dataclass
class BackboneConfig:
    stages: list[StageConfig] = field(default_factory=lambda: [StageConfig(window=w) for w in PAPER_WINDOWS])
    fpn_levels: int = 2
    seed: int = 0
    cell: tuple[float, float, float] = (0.2, 0.2, 0.2)
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((0.0, 0.0, 0.0), (10.4, 10.4, 6.4))
    ssm: SsmConfig = SsmConfig()

    def __post_init__(self):
        if not self.stages:
            raise ValueError("at least one stage is required")
        if self.fpn_levels != 2:
            raise ValueError("only the 2-level main-path pyramid is implemented")
        zs = [s.window[2] for s in self.stages]
        if any(b > a for a, b in zip(zs, zs[1:])):
            raise ValueError(f"window Z extents must be non-increasing, got {zs}")
        if len({s.channels for s in self.stages}) != 1:
            raise ValueError("all stages must share one channel width")

    @property
    def channels(self) -> int:
        return self.stages[0].channels

    @classmethod
    def make(cls, n_stages: int = 4, channels: int = 64, wsf: bool = True, awf_parts: str = "ABC",
             factor: int = 2, windows=PAPER_WINDOWS, shift=None, **kw) -> "BackboneConfig":
        stages = [StageConfig(window=windows[k], factor=factor, channels=channels, wsf=wsf,
                              awf_parts=awf_parts, shift=shift) for k in range(n_stages)]
        return cls(stages=stages, **kw)

    def with_overrides(self, **kw) -> "BackboneConfig":
        stages = [replace(s, **kw) for s in self.stages]
        return replace(self, stages=stages)


# --------------------------------------------------------------- fusion checks

FUSION_STATS = {"checked": 0, "failed": 0}


def fuse(a: SparseVoxelSet, b: SparseVoxelSet) -> SparseVoxelSet:
    """Element-wise sum of two feature maps on the same coordinate list."""
    FUSION_STATS["checked"] += 1
    if not np.array_equal(a.coords, b.coords) or a.stride != b.stride:
        FUSION_STATS["failed"] += 1
        raise ContractError("fusion operands live on different coordinate sets")
    return a.with_features(a.features + b.features)


class LevelState:
    """LIFO stack of the coordinate maps recorded inside one block."""

    def __init__(self):
        self._maps: list[CoordMap] = []

    def push(self, cmap: CoordMap) -> None:
        self._maps.append(cmap)

    def peek(self) -> CoordMap:
        if not self._maps:
            raise ContractError("coordinate-map stack is empty")
        return self._maps[-1]

    def pop(self) -> CoordMap:
        cmap = self.peek()
        self._maps.pop()
        return cmap

    def __len__(self) -> int:
        return len(self._maps)


# ------------------------------------------------------- serialization caching

_SEQ_CACHE: "OrderedDict[tuple, SerializedSequence]" = OrderedDict()
_SEQ_CACHE_SIZE = 512


def cached_serialize(coords: np.ndarray, spec: WindowSpec, extent) -> SerializedSequence:
    key = (coords.tobytes(), coords.shape, spec, tuple(extent))
    seq = _SEQ_CACHE.get(key)
    if seq is None:
        seq = serialize_voxels(coords, spec, extent)
        _SEQ_CACHE[key] = seq
        if len(_SEQ_CACHE) > _SEQ_CACHE_SIZE:
            _SEQ_CACHE.popitem(last=False)
    else:
        _SEQ_CACHE.move_to_end(key)
    return seq


# ------------------------------------------------------------------- layers

def init_pos_embed(params: Params, name: str, channels: int, rng: np.random.Generator) -> None:
    init_linear(params, f"{name}.fc1", 3, channels, rng)
    params.add_bn(f"{name}.bn", channels)
    init_linear(params, f"{name}.fc2", channels, channels, rng)


def pos_embed(coords: np.ndarray, params: Params, name: str) -> Tensor:
    """Learned embedding ``fc2(relu(bn(fc1(e))))`` of integer voxel coordinates."""
    e = Tensor(np.asarray(coords, dtype=np.float64).reshape(-1, 3))
    h = relu(apply_bn(apply_linear(e, params, f"{name}.fc1"), params, f"{name}.bn"))
    return apply_linear(h, params, f"{name}.fc2")


def wsf_apply(vset: SparseVoxelSet, spec: WindowSpec, params: Params, name: str,
              wsf: bool = True, bidirectional: bool = False) -> Tensor:
    """One Mamba pass over window-serialized voxels, scattered back to voxel rows.

    With ``wsf`` the sequences from the unshifted and the shifted partition are
    concatenated, scanned once, split at the midpoint, mapped back separately and
    summed.
    """
    if len(vset) == 0:
        raise ContractError("wsf_apply on an empty voxel set")
    f = vset.features
    seq0 = cached_serialize(vset.coords, spec.unshifted(), vset.extent)
    if not wsf:
        out = mamba_block(gather(f, seq0), params, name, bidirectional)
        return unserialize(out, seq0)
    seq1 = cached_serialize(vset.coords, spec, vset.extent)
    n = len(vset)
    st = concat_rows([gather(f, seq0), gather(f, seq1)])
    st = mamba_block(st, params, name, bidirectional)
    if st.shape[0] != 2 * n:
        raise ContractError("wsf_apply: joint sequence length is not even")
    f0 = unserialize(slice_rows(st, 0, n), seq0)
    f1 = unserialize(slice_rows(st, n, 2 * n), seq1)
    return f0 + f1


def init_winmamba_layer(params: Params, name: str, channels: int, rng: np.random.Generator,
                        ssm: SsmConfig = SsmConfig()) -> None:
    init_pos_embed(params, f"{name}.pos", channels, rng)
    init_mamba(params, f"{name}.mamba_x", channels, rng, ssm)
    init_mamba(params, f"{name}.mamba_y", channels, rng, ssm)


def winmamba_layer(vset: SparseVoxelSet, window, params: Params, name: str, wsf: bool = True,
                   shift=None, bidirectional: bool = False) -> SparseVoxelSet:
    """Position embedding, then an X-axis and a Y-axis window scan."""
    if len(vset) == 0:
        return vset
    window = _triple(window)
    shift = tuple(w // 2 for w in window) if shift is None else _triple(shift)
    f = vset.features + pos_embed(vset.coords, params, f"{name}.pos")
    cur = vset.with_features(f)
    for axis in ("x", "y"):
        spec = WindowSpec(window, axis, shift)
        cur = cur.with_features(wsf_apply(cur, spec, params, f"{name}.mamba_{axis}", wsf, bidirectional))
    return cur


def wsa_window(fs_main, fs_aux, ws_main) -> Triple:
    """Auxiliary window keeping the main window's physical extent: ``ws * fs_main / fs_aux``."""
    fs_main, fs_aux, ws_main = _triple(fs_main), _triple(fs_aux), _triple(ws_main)
    out = []
    for fm, fa, w in zip(fs_main, fs_aux, ws_main):
        if fm < 1 or fa < 1:
            raise ContractError("feature strides must be positive")
        if (w * fm) % fa:
            raise ContractError(f"window {ws_main} at stride {fs_main} has no integer size at stride {fs_aux}")
        out.append(w * fm // fa)
    return tuple(out)  # type: ignore[return-value]


# ------------------------------------------------------------------- AWF block

def _wl(vset, window, cfg: StageConfig, params, name, ssm: SsmConfig):
    return winmamba_layer(vset, window, params, name, cfg.wsf, cfg.shift_for(_triple(window)),
                          ssm.bidirectional)


def dse_forward(I_a: SparseVoxelSet, cfg: StageConfig, params: Params, name: str,
                ssm: SsmConfig = SsmConfig()) -> tuple[SparseVoxelSet, CoordMap]:
    """Dual-stream encoding: WL after downsampling, fused with downsample-after-WL."""
    d = (cfg.factor,) * 3
    map0 = coord_map(I_a.coords, d, I_a.stride, I_a.extent)
    low = pool(I_a, map0, params, f"{name}.main.down")
    o1 = _wl(low, cfg.window, cfg, params, f"{name}.main.wl", ssm)
    if not cfg.has("A"):
        return o1, map0
    ws_aux = wsa_window(low.stride, I_a.stride, cfg.window)
    o2 = pool(_wl(I_a, ws_aux, cfg, params, f"{name}.aux.wl", ssm), map0, params, f"{name}.aux.down")
    return fuse(o1, o2), map0


def fb_forward(I_b: SparseVoxelSet, cfg: StageConfig, params: Params, name: str,
               ssm: SsmConfig = SsmConfig(), state: LevelState | None = None) -> SparseVoxelSet:
    """Feature bridging: down-WL-up on the main path, full-resolution WL on the auxiliary path."""
    state = state if state is not None else LevelState()
    low, map1 = downsample(I_b, (cfg.factor,) * 3, params, f"{name}.main.down")
    state.push(map1)
    o1 = upsample(_wl(low, cfg.window, cfg, params, f"{name}.main.wl", ssm), state.pop(), params,
                  f"{name}.main.up")
    out = o1
    if cfg.has("B"):
        ws_aux = wsa_window(low.stride, I_b.stride, cfg.window)
        out = fuse(out, _wl(I_b, ws_aux, cfg, params, f"{name}.aux.wl", ssm))
    if cfg.has("D"):
        out = fuse(out, I_b)
    return out


def cd_forward(I_c: SparseVoxelSet, cfg: StageConfig, params: Params, name: str, map0: CoordMap,
               ssm: SsmConfig = SsmConfig()) -> SparseVoxelSet:
    """Collaborative decoding: WL-then-up fused with up-then-WL, both through ``map0``."""
    if not np.array_equal(I_c.coords, map0.parent_coords):
        raise ContractError("cd_forward: input does not live on the map's parent coordinates")
    o1 = upsample(_wl(I_c, cfg.window, cfg, params, f"{name}.main.wl", ssm), map0, params, f"{name}.main.up")
    if not cfg.has("C"):
        return o1
    up = upsample(I_c, map0, params, f"{name}.aux.up")
    ws_aux = wsa_window(I_c.stride, up.stride, cfg.window)
    return fuse(o1, _wl(up, ws_aux, cfg, params, f"{name}.aux.wl", ssm))


def block_forward(I: SparseVoxelSet, cfg: StageConfig, params: Params, name: str,
                  ssm: SsmConfig = SsmConfig()) -> SparseVoxelSet:
    """DSE -> FB -> CD on the block's pyramid, then the trailing Z downsample."""
    if len(I) == 0:
        return I
    state = LevelState()
    o_a, map0 = dse_forward(I, cfg, params, f"{name}.dse", ssm)
    state.push(map0)
    o_b = fb_forward(o_a, cfg, params, f"{name}.fb", ssm, state)
    o_c = cd_forward(o_b, cfg, params, f"{name}.cd", state.pop(), ssm)
    out, _ = downsample(o_c, cfg.trailing, params, f"{name}.out.down")
    return out


def init_block(params: Params, name: str, cfg: StageConfig, rng: np.random.Generator,
               ssm: SsmConfig = SsmConfig()) -> None:
    C = cfg.channels

    def lin(n):
        init_linear(params, n, C, C, rng)

    lin(f"{name}.dse.main.down")
    init_winmamba_layer(params, f"{name}.dse.main.wl", C, rng, ssm)
    if cfg.has("A"):
        init_winmamba_layer(params, f"{name}.dse.aux.wl", C, rng, ssm)
        lin(f"{name}.dse.aux.down")
    lin(f"{name}.fb.main.down")
    init_winmamba_layer(params, f"{name}.fb.main.wl", C, rng, ssm)
    lin(f"{name}.fb.main.up")
    if cfg.has("B"):
        init_winmamba_layer(params, f"{name}.fb.aux.wl", C, rng, ssm)
    init_winmamba_layer(params, f"{name}.cd.main.wl", C, rng, ssm)
    lin(f"{name}.cd.main.up")
    if cfg.has("C"):
        lin(f"{name}.cd.aux.up")
        init_winmamba_layer(params, f"{name}.cd.aux.wl", C, rng, ssm)
    lin(f"{name}.out.down")


def aux_windows(cfg: StageConfig) -> dict[str, Triple]:
    """Auxiliary windows each enabled AWF part would use (strides relative to block entry)."""
    f = cfg.factor
    out = {}
    if cfg.has("A"):
        out["A"] = wsa_window((f,) * 3, (1, 1, 1), cfg.window)
    if cfg.has("B"):
        out["B"] = wsa_window((f * f,) * 3, (f,) * 3, cfg.window)
    if cfg.has("C"):
        out["C"] = wsa_window((f,) * 3, (1, 1, 1), cfg.window)
    return out


# ------------------------------------------------------------------ backbone

@dataclass
class BackboneOutput:
    stages: list[SparseVoxelSet]
    bev: Tensor                     # (X, Y, C)

    def trace(self) -> list[dict]:
        return [{"stage": k, "voxels": len(s), "extent": list(s.extent), "stride": list(s.stride),
                 "channels": s.channels} for k, s in enumerate(self.stages)]


def init_backbone(cfg: BackboneConfig, raw_channels: int, rng: np.random.Generator | None = None) -> Params:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = Params()
    init_vfe(params, raw_channels, cfg.channels, rng)
    for k, stage in enumerate(cfg.stages):
        init_block(params, f"s{k}", stage, rng, cfg.ssm)
    return params


def bev_pool(vset: SparseVoxelSet) -> Tensor:
    """Max over Z into a dense ``(X, Y, C)`` grid; empty columns stay zero."""
    ex, ey, _ = vset.extent
    seg = vset.coords[:, 0] * ey + vset.coords[:, 1]
    flat = segment_max(vset.features, seg, ex * ey)
    return reshape(flat, (ex, ey, vset.channels))


def backbone_forward(inp, cfg: BackboneConfig, params: Params) -> BackboneOutput:
    """Voxelize (for point clouds), run every block, pool the last stage to BEV."""
    if isinstance(inp, PointCloud):
        vset = encode_voxels(bin_points(inp, cfg.cell), params)
    else:
        vset = inp
    vset = vset.canonical()
    outs = []
    for k, stage in enumerate(cfg.stages):
        vset = block_forward(vset, stage, params, f"s{k}", cfg.ssm)
        outs.append(vset)
    return BackboneOutput(outs, bev_pool(vset))
