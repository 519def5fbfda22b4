"""Synthetic labelled scenes, per-voxel classification training and ablations."""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backbone import BackboneConfig, StageConfig, backbone_forward, init_backbone
from .numerics import Adam, NumericError, Params, Tensor, backward, bce_with_logits, init_linear, layernorm, linear, no_grad
from .voxelgrid import PointCloud, RawVoxels, bin_points, encode_voxels

DEFAULT_BOUNDS = ((0.0, 0.0, 0.0), (10.4, 10.4, 3.2))
DEFAULT_CELL = (0.2, 0.2, 0.2)


@dataclass
class SyntheticScene:
    cloud: PointCloud
    labels: np.ndarray                   # per point, 1 = object
    boxes: list[tuple[np.ndarray, np.ndarray]]   # (center, extent) in metres
    seed: int


def _in_box(p: np.ndarray, center: np.ndarray, extent: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    # the tolerance keeps face samples inside despite rounding in (c + e/2) - c
    return np.all(np.abs(p - center) <= extent / 2 + tol, axis=1)


def _box_samples(rng, center, extent, n, surface_frac=0.7):
    n_surf = int(round(n * surface_frac))
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * extent
    # snap the surface share onto a face chosen proportionally to its area
    areas = np.array([extent[1] * extent[2], extent[0] * extent[2], extent[0] * extent[1]])
    axis = rng.choice(3, size=n_surf, p=areas / areas.sum())
    side = rng.choice([-0.5, 0.5], size=n_surf)
    pts[np.arange(n_surf), axis] = side * extent[axis]
    return pts + center


def gen_scene(seed: int, n_objects: int = 3, points_per_object: int = 120, noise_points: int = 120,
              bounds=DEFAULT_BOUNDS, boundary: bool = False, cell=DEFAULT_CELL,
              window_cells: int = 13) -> SyntheticScene:
    """Axis-aligned boxes resting near the floor plus uniform clutter.

    With ``boundary=True`` box centres sit on the grid lines ``k * window_cells *
    cell`` in X and Y, so every box is cut by a window boundary.
    """
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if np.any(hi <= lo):
        raise ValueError("invalid bounds")
    cell = np.asarray(cell, dtype=np.float64)
    boxes, chunks = [], []
    for _ in range(n_objects):
        extent = np.array([rng.uniform(0.6, 1.4), rng.uniform(0.6, 1.4), rng.uniform(0.6, 1.2)])
        extent = np.minimum(extent, (hi - lo) * 0.9)
        center = np.empty(3)
        for a in range(2):
            lo_c, hi_c = lo[a] + extent[a] / 2, hi[a] - extent[a] / 2
            if boundary:
                step = window_cells * cell[a]
                ks = np.arange(np.ceil((lo_c - lo[a]) / step), np.floor((hi_c - lo[a]) / step) + 1)
                ks = ks[ks >= 1]
                center[a] = lo[a] + step * rng.choice(ks) if len(ks) else rng.uniform(lo_c, hi_c)
            else:
                center[a] = rng.uniform(lo_c, hi_c)
        center[2] = lo[2] + extent[2] / 2 + rng.uniform(0.0, min(0.4, hi[2] - lo[2] - extent[2]))
        boxes.append((center, extent))
        chunks.append(_box_samples(rng, center, extent, points_per_object))
    chunks.append(rng.uniform(lo, hi, size=(noise_points, 3)))
    pts = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    pts = np.clip(pts, lo, np.nextafter(hi, lo))
    labels = np.zeros(len(pts), dtype=np.int64)
    for center, extent in boxes:
        labels |= _in_box(pts, center, extent).astype(np.int64)
    intensity = rng.uniform(0.0, 1.0, size=(len(pts), 1))
    cloud = PointCloud(pts, intensity, (lo, hi))
    return SyntheticScene(cloud, labels, boxes, seed)


def voxel_labels(point_voxel: np.ndarray, point_labels: np.ndarray, n_voxels: int) -> np.ndarray:
    """Majority label of member points; ties go to the object class."""
    keep = point_voxel >= 0
    obj = np.bincount(point_voxel[keep], weights=point_labels[keep], minlength=n_voxels)
    tot = np.bincount(point_voxel[keep], minlength=n_voxels)
    return (2 * obj >= tot).astype(np.int64)


# ------------------------------------------------------------------ training

@dataclass
class ToyConfig:
    n_stages: int = 2
    channels: int = 16
    windows: tuple = ((13, 13, 32), (13, 13, 16), (13, 13, 8), (13, 13, 4))
    factor: int = 2
    wsf: bool = True
    awf_parts: str = "ABC"
    shift: tuple | None = None
    bidirectional: bool = False
    seed: int = 0
    lr: float = 3e-3
    epochs: int = 200
    batch_size: int = 4
    n_scenes: int = 32
    n_val: int = 8
    n_objects: int = 3
    points_per_object: int = 120
    noise_points: int = 120
    boundary: bool = False
    bounds: tuple = DEFAULT_BOUNDS
    cell: tuple = DEFAULT_CELL
    target_accuracy: float | None = None

    def backbone(self) -> BackboneConfig:
        from .ssm import SsmConfig
        stages = [StageConfig(window=self.windows[k], factor=self.factor, channels=self.channels,
                              wsf=self.wsf, awf_parts=self.awf_parts, shift=self.shift)
                  for k in range(self.n_stages)]
        return BackboneConfig(stages=stages, seed=self.seed, cell=self.cell, bounds=self.bounds,
                              ssm=SsmConfig(bidirectional=self.bidirectional))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class PreparedScene:
    raw: RawVoxels
    labels: np.ndarray                   # per final-stage voxel, filled lazily
    point_voxel: np.ndarray
    point_labels: np.ndarray


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    val: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    reached_target: bool | None = None

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_dict(self) -> dict:
        return {"config": self.config, "epochs": self.epochs, "val": self.val,
                "wall_clock": self.wall_clock, "reached_target": self.reached_target}

    def to_csv(self) -> str:
        lines = ["epoch,loss,accuracy,precision,recall,wall"]
        for e in self.epochs:
            lines.append(f"{e['epoch']},{e['loss']!r},{e['accuracy']!r},{e['precision']!r},"
                         f"{e['recall']!r},{e['wall']:.3f}")
        return "\n".join(lines) + "\n"


def make_dataset(cfg: ToyConfig, split: str = "train") -> list[SyntheticScene]:
    n = cfg.n_scenes if split == "train" else cfg.n_val
    base = 0 if split == "train" else 500_000
    return [gen_scene(cfg.seed * 1_000_003 + base + i, cfg.n_objects, cfg.points_per_object,
                      cfg.noise_points, cfg.bounds, cfg.boundary, cfg.cell) for i in range(n)]


def prepare(scene: SyntheticScene, cell) -> PreparedScene:
    raw = bin_points(scene.cloud, cell)
    return PreparedScene(raw, np.zeros(0, np.int64), raw.point_voxel, scene.labels)


def init_head(params: Params, channels: int, rng: np.random.Generator) -> None:
    params.ones("head.norm.gamma", (channels,))
    params.zeros("head.norm.beta", (channels,))
    init_linear(params, "head.fc", channels, 1, rng)


def scene_forward(scene: PreparedScene, bcfg: BackboneConfig, params: Params) -> tuple[Tensor, np.ndarray]:
    """Logits and labels for the voxels of the last backbone stage."""
    vset = encode_voxels(scene.raw, params)
    out = backbone_forward(vset, bcfg, params)
    last = out.stages[-1]
    stride = np.array(last.stride)
    coarse = scene.raw.coords // stride
    # last-stage rows are sorted by linear index, as are np.unique results
    ex = np.array(last.extent)
    key_last = (last.coords[:, 0] * ex[1] + last.coords[:, 1]) * ex[2] + last.coords[:, 2]
    key_base = (coarse[:, 0] * ex[1] + coarse[:, 1]) * ex[2] + coarse[:, 2]
    base_to_last = np.searchsorted(key_last, key_base)
    pv = scene.point_voxel
    point_last = np.where(pv >= 0, base_to_last[np.maximum(pv, 0)], -1)
    labels = voxel_labels(point_last, scene.point_labels, len(last))
    h = layernorm(last.features, params["head.norm.gamma"], params["head.norm.beta"])
    logits = linear(h, params["head.fc.w"], params["head.fc.b"])
    return logits, labels


def _metrics(pred: np.ndarray, labels: np.ndarray) -> dict:
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    n = len(labels)
    return {"accuracy": float(np.mean(pred == labels)) if n else 1.0,
            "precision": tp / (tp + fp) if tp + fp else 1.0,
            "recall": tp / (tp + fn) if tp + fn else 1.0,
            "voxels": n}


def evaluate(scenes: list[PreparedScene], bcfg: BackboneConfig, params: Params) -> dict:
    prev = params.training
    params.training = False
    preds, labels, losses = [], [], []
    try:
        with no_grad():
            for s in scenes:
                logits, lab = scene_forward(s, bcfg, params)
                losses.append(float(bce_with_logits(logits, lab).data))
                preds.append((logits.data[:, 0] > 0).astype(np.int64))
                labels.append(lab)
    finally:
        params.training = prev
    m = _metrics(np.concatenate(preds), np.concatenate(labels))
    m["loss"] = float(np.mean(losses))
    return m


def build_model(cfg: ToyConfig, raw_channels: int) -> tuple[BackboneConfig, Params]:
    bcfg = cfg.backbone()
    rng = np.random.default_rng(cfg.seed)
    params = init_backbone(bcfg, raw_channels, rng)
    init_head(params, cfg.channels, rng)
    return bcfg, params


def scene_loss(scene: PreparedScene, bcfg: BackboneConfig, params: Params) -> tuple[Tensor, Tensor, np.ndarray]:
    logits, lab = scene_forward(scene, bcfg, params)
    return bce_with_logits(logits, lab), logits, lab


def train_epoch(scenes: list[PreparedScene], bcfg: BackboneConfig, params: Params, opt: Adam,
                order: np.ndarray, batch_size: int) -> dict:
    """One pass over ``scenes`` in ``order``; gradients are averaged per batch."""
    params.training = True
    losses, preds, labels = [], [], []
    for start in range(0, len(order), batch_size):
        batch = order[start:start + batch_size]
        acc = {k: np.zeros_like(v.data) for k, v in params.items()}
        for i in batch:
            loss, logits, lab = scene_loss(scenes[i], bcfg, params)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise NumericError("non-finite training loss")
            losses.append(lv)
            preds.append((logits.data[:, 0] > 0).astype(np.int64))
            labels.append(lab)
            for k, g in backward(loss, params).items():
                acc[k] += g
        opt.step({k: g / len(batch) for k, g in acc.items()})
    m = _metrics(np.concatenate(preds), np.concatenate(labels))
    m["loss"] = float(np.mean(losses))
    return m


def train_toy(cfg: ToyConfig, log=None) -> TrainReport:
    """Adam on per-voxel BCE; one optimizer step per ``batch_size`` scenes.

    Stops early once the epoch's training accuracy reaches ``target_accuracy``.
    """
    t0 = time.perf_counter()
    train = [prepare(s, cfg.cell) for s in make_dataset(cfg, "train")]
    val = [prepare(s, cfg.cell) for s in make_dataset(cfg, "val")]
    raw_channels = train[0].raw.raw.shape[1]
    bcfg, params = build_model(cfg, raw_channels)
    opt = Adam(params, lr=cfg.lr)
    order_rng = np.random.default_rng(cfg.seed + 17)
    report = TrainReport(config=cfg.to_dict())
    for epoch in range(1, cfg.epochs + 1):
        try:
            m = train_epoch(train, bcfg, params, opt, order_rng.permutation(len(train)), cfg.batch_size)
        except NumericError as exc:
            raise NumericError(f"training diverged at epoch {epoch}: {exc}") from None
        m.update(epoch=epoch, wall=time.perf_counter() - t0)
        report.epochs.append(m)
        if log is not None:
            log(m)
        if cfg.target_accuracy is not None and m["accuracy"] >= cfg.target_accuracy:
            break
    if cfg.target_accuracy is not None:
        report.reached_target = report.epochs[-1]["accuracy"] >= cfg.target_accuracy
    report.val = evaluate(val, bcfg, params) if val else {}
    report.wall_clock = time.perf_counter() - t0
    return report


# ----------------------------------------------------------------- ablations

TABLE4_PARTS = ("", "B", "AB", "ABC", "ABCD")


def ablate(base: ToyConfig, wsf_values=(False, True), parts=("ABC",), seeds=(0,), log=None) -> dict:
    """Train every (wsf, parts) cell over ``seeds``; report mean/sd validation accuracy."""
    cells = []
    for wsf, p in itertools.product(wsf_values, parts):
        accs = []
        for seed in seeds:
            rep = train_toy(replace(base, wsf=wsf, awf_parts=p, seed=seed))
            accs.append(rep.val.get("accuracy", float("nan")))
            if log is not None:
                log({"wsf": wsf, "awf_parts": p, "seed": seed, "val_accuracy": accs[-1]})
        cells.append({"wsf": wsf, "awf_parts": p, "seeds": list(seeds), "val_accuracy": accs,
                      "mean": float(np.mean(accs)), "sd": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0})
    return {"config": base.to_dict(), "cells": cells}


def format_table(result: dict) -> str:
    rows = [("WSF", "AWF parts", "mean", "sd", "n")]
    for c in result["cells"]:
        rows.append(("on" if c["wsf"] else "off", c["awf_parts"] or "-", f"{c['mean']:.4f}",
                     f"{c['sd']:.4f}", str(len(c["seeds"]))))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows)
