"""Procedural SAR-like scenes for tests and desk-scale runs.

Ice floes are random star-shaped polygons; water is the rest of a labelled
box that leaves a strip at the right edge unlabelled. Backscatter is
gamma-distributed speckle around class- and month-dependent means, and the
first columns are no-data (NaN), so every scene exercises the ignore and
invalid paths.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .ice_net import ModelSpec, ResNet18Encoder
from .scene_store import LabeledPolygon, Scene, rasterize_labels

CRS = "EPSG:3413"
PIXEL = 80.0
NODATA_COLS = 4
UNLABELED_COLS = 6

# mean linear backscatter (HH, HV) per class; July is the low-contrast melt case
_MEANS = {
    "default": {0: (0.020, 0.0020), 1: (0.090, 0.0120)},
    7: {0: (0.030, 0.0025), 1: (0.055, 0.0060)},
}


def _star_polygon(rng, cx, cy, radius, n=14):
    from shapely.geometry import Polygon

    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = radius * rng.uniform(0.55, 1.0, n)
    return Polygon(np.c_[cx + rad * np.cos(ang), cy + rad * np.sin(ang)])


def fixture_geotransform(index: int = 0) -> tuple:
    return (PIXEL, 0.0, 400_000.0 + 50_000.0 * index, 0.0, -PIXEL, -1_200_000.0)


def fixture_polygons(size: int, seed: int, geotransform) -> list[LabeledPolygon]:
    from shapely.geometry import box
    from shapely.ops import unary_union

    rng = np.random.default_rng(seed)
    a, _, x0, _, e, y0 = geotransform
    width_m = size * a
    floes = []
    for _ in range(rng.integers(3, 6)):
        cx = x0 + rng.uniform(0.15, 0.8) * width_m
        cy = y0 + rng.uniform(0.15, 0.85) * size * e
        floes.append(_star_polygon(rng, cx, cy, rng.uniform(0.12, 0.3) * width_m))
    labelled = box(x0, y0 + size * e, x0 + (size - UNLABELED_COLS) * a, y0)
    ice = unary_union(floes).intersection(labelled)
    water = labelled.difference(ice)
    return [LabeledPolygon(water, "water"), LabeledPolygon(ice, "ice")]


def synthetic_channels(labels: np.ndarray, month: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    h, w = labels.shape
    means = _MEANS.get(month, _MEANS["default"])
    cls = np.where(labels == 1, 1, 0)
    looks = 4.0
    hh = np.choose(cls, [means[0][0], means[1][0]]) * rng.gamma(looks, 1 / looks, (h, w))
    hv = np.choose(cls, [means[0][1], means[1][1]]) * rng.gamma(looks, 1 / looks, (h, w))
    inc = np.broadcast_to(np.linspace(19.0, 47.0, w), (h, w))
    ch = np.stack([hh, hv, inc]).astype(np.float32)
    ch[:, :, :NODATA_COLS] = np.nan
    return ch


def synthetic_scene(month: int = 2, size: int = 128, seed: int = 0, scene_id: str | None = None) -> Scene:
    gt = fixture_geotransform(month)
    polys = fixture_polygons(size, seed * 100 + month, gt)
    labels = rasterize_labels(polys, gt, (size, size))
    channels = synthetic_channels(labels, month, seed * 100 + month + 1)
    return Scene.from_arrays(scene_id or f"2018-{month:02d}", month, channels, labels, geotransform=gt, crs=CRS)


def smooth_edge_scene(seed: int, size: int = 128, month: int = 3, scene_id: str | None = None) -> Scene:
    """A fully labelled scene with one large round floe and a straight ice edge.

    Boundaries are long and smooth, closer to ice-chart polygons than the
    star floes of :func:`synthetic_scene`, so a stride-16 network can fit
    the labels almost pixel-exactly.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = rng.uniform(0.3, 0.7, 2) * size
    r = rng.uniform(0.2, 0.35) * size
    theta = rng.uniform(0, 2 * np.pi)
    edge = (xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta) > rng.uniform(0.2, 0.4) * size
    labels = (((xx - cx) ** 2 + (yy - cy) ** 2 < r * r) | edge).astype(np.uint8)
    channels = synthetic_channels(labels, month, seed)
    return Scene.from_arrays(scene_id or f"smooth-{seed}", month, channels, labels,
                             geotransform=fixture_geotransform(month), crs=CRS)


def synthetic_encoder_weights(spec: ModelSpec | None = None, seed: int = 1234) -> dict[str, torch.Tensor]:
    """A seeded stand-in for an ImageNet ResNet18 state dict (torchvision key names)."""
    spec = spec or ModelSpec()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = ResNet18Encoder(3, 4)
        for m in enc.modules():
            if isinstance(m, torch.nn.Conv2d):
                torch.nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, torch.nn.BatchNorm2d):
                torch.nn.init.uniform_(m.weight, 0.5, 1.5)
                torch.nn.init.normal_(m.bias, 0.0, 0.1)
                m.running_mean.normal_(0.0, 0.1)
                m.running_var.uniform_(0.5, 2.0)
    return {k: v.clone() for k, v in enc.state_dict().items()}


def write_fixture_dataset(root, months=(1, 2, 7), size: int = 192, seed: int = 0) -> Path:
    """Write a desk-scale dataset: ``<root>/2018-MM/{sar.tif,labels.geojson}`` plus encoder weights."""
    import rasterio
    from rasterio.transform import Affine
    from shapely.geometry import mapping

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for month in months:
        scene_dir = root / f"2018-{month:02d}"
        scene_dir.mkdir(exist_ok=True)
        gt = fixture_geotransform(month)
        polys = fixture_polygons(size, seed * 100 + month, gt)
        labels = rasterize_labels(polys, gt, (size, size))
        channels = synthetic_channels(labels, month, seed * 100 + month + 1)
        with rasterio.open(
            scene_dir / "sar.tif",
            "w",
            driver="GTiff",
            height=size,
            width=size,
            count=3,
            dtype="float32",
            transform=Affine(*gt),
            crs=CRS,
            nodata=float("nan"),
        ) as dst:
            dst.write(channels)
            dst.descriptions = ("HH", "HV", "incidence_angle")
        doc = {
            "type": "FeatureCollection",
            "crs": {"type": "name", "properties": {"name": CRS}},
            "features": [
                {"type": "Feature", "properties": {"class": p.label}, "geometry": mapping(p.geometry)} for p in polys
            ],
        }
        (scene_dir / "labels.geojson").write_text(json.dumps(doc))
        (scene_dir / "scene.json").write_text(json.dumps({"month": month}) + "\n")
    torch.save(synthetic_encoder_weights(seed=seed + 1234), root / "encoder_weights.pt")
    return root
