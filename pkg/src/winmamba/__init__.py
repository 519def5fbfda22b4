"""Window-serialized Mamba backbone for sparse voxel point clouds, in numpy."""
from .backbone import BackboneConfig, StageConfig, backbone_forward, init_backbone, wsa_window
from .numerics import ContractError, NumericError, Params, Tensor, backward, grad_check
from .serialize import WindowSpec, serialize_voxels, unserialize
from .ssm import SsmConfig, mamba_block, selective_scan
from .toytask import ToyConfig, ablate, gen_scene, train_toy
from .voxelgrid import PointCloud, SparseVoxelSet, bin_points, downsample, read_points, upsample, voxelize

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "StageConfig", "backbone_forward", "init_backbone", "wsa_window",
    "ContractError", "NumericError", "Params", "Tensor", "backward", "grad_check",
    "WindowSpec", "serialize_voxels", "unserialize",
    "SsmConfig", "mamba_block", "selective_scan",
    "ToyConfig", "ablate", "gen_scene", "train_toy",
    "PointCloud", "SparseVoxelSet", "bin_points", "downsample", "read_points", "upsample", "voxelize",
]
