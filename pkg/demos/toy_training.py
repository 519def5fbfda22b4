"""
Training on the toy segmentation task
=====================================

Each scene holds a few boxes plus uniform clutter. A linear head on the final
stage predicts, per voxel, whether most of its points lie on an object.
"""
from dataclasses import replace

from winmamba.toytask import ToyConfig, gen_scene, train_toy

cfg = ToyConfig(target_accuracy=0.95)
s = gen_scene(0)
print(f"scene 0: {len(s.cloud)} points, boxes at", [c.round(2).tolist() for c, _ in s.boxes])

# stops as soon as training accuracy reaches the target
rep = train_toy(cfg, log=lambda m: print(f"epoch {m['epoch']:3d}  loss {m['loss']:.4f}  acc {m['accuracy']:.4f}"))
print("validation:", {k: round(v, 4) for k, v in rep.val.items()})

# the same run without window shift fusion, for comparison
rep_off = train_toy(replace(cfg, wsf=False))
print(f"WSF off: {len(rep_off.epochs)} epochs, validation accuracy {rep_off.val['accuracy']:.4f}")
