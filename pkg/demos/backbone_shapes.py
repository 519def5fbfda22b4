"""
Running the backbone on a synthetic scene
=========================================

Four stages with 64 channels. XY resolution is kept while every stage halves Z,
and the last stage is max-pooled over Z into a bird's-eye-view grid.
"""
import numpy as np

from winmamba.backbone import BackboneConfig, backbone_forward, init_backbone
from winmamba.numerics import no_grad
from winmamba.toytask import gen_scene

cfg = BackboneConfig()            # windows (13,13,32) ... (13,13,4), C = 64
scene = gen_scene(0, bounds=cfg.bounds)
print(f"{len(scene.cloud)} points, {int(scene.labels.sum())} on objects")

params = init_backbone(cfg, 3 + scene.cloud.n_extra, np.random.default_rng(0))
params.training = False
print(f"{params.count():,} parameters")

with no_grad():
    out = backbone_forward(scene.cloud, cfg, params)

for row, stage in zip(out.trace(), cfg.stages):
    print(f"stage {row['stage']}: window {stage.window}  voxels {row['voxels']:4d}  "
          f"extent {row['extent']}  stride {row['stride']}")
print("BEV grid:", out.bev.shape)
