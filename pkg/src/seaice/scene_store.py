"""Scenes, label rasterization and the train/validation/test split."""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

WATER, ICE, IGNORE = 0, 1, 255
CLASS_NAMES = {"water": WATER, "ice": ICE}
CHANNELS = ("HH", "HV", "incidence_angle")

TEST_MONTHS = (1, 7)
HALF_SPLIT_MONTHS = (2, 6, 8, 12)

FULL = "full"


class DataError(ValueError):
    """Input data is malformed or inconsistent."""


# --------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    row0: int
    col0: int
    height: int
    width: int

    def __post_init__(self):
        if self.row0 < 0 or self.col0 < 0 or self.height <= 0 or self.width <= 0:
            raise ValueError(f"invalid region {self}")

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.row0, self.row0 + self.height), slice(self.col0, self.col0 + self.width))

    @property
    def size(self) -> int:
        return self.height * self.width

    def to_json(self):
        return {"row0": self.row0, "col0": self.col0, "height": self.height, "width": self.width}


def resolve_region(region, shape: tuple[int, int]) -> Region:
    """Turn ``FULL`` (or ``None``) into the rectangle covering ``shape``."""
    if region is None or region == FULL:
        return Region(0, 0, shape[0], shape[1])
    if isinstance(region, dict):
        return Region(**region)
    return region


def region_to_json(region):
    return FULL if region is None or region == FULL else region.to_json()


def region_from_json(obj):
    return FULL if obj == FULL else Region(**obj)


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True, eq=False)
class Scene:
    """A SAR scene on its pixel grid.

    ``channels`` is ``(3, H, W)`` float32 in the order HH, HV, incidence
    angle. ``labels`` holds 0 (water), 1 (ice) or 255 (ignore); ``valid`` is
    true where every channel is finite and the label is not 255. The arrays are
    read-only once the scene is built.
    """

    id: str
    month: int
    channels: np.ndarray
    labels: np.ndarray
    valid: np.ndarray
    pixel_size_m: float = 80.0
    geotransform: tuple = (80.0, 0.0, 0.0, 0.0, -80.0, 0.0)
    crs: str | None = None
    label_overlaps: int = 0

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != len(CHANNELS):
            raise DataError(f"scene {self.id}: channels must be (3, H, W), got {self.channels.shape}")
        shape = self.channels.shape[1:]
        if self.labels.shape != shape or self.valid.shape != shape:
            raise DataError(
                f"scene {self.id}: channels {shape}, labels {self.labels.shape}, valid {self.valid.shape} differ"
            )
        if not 1 <= self.month <= 12:
            raise DataError(f"scene {self.id}: month {self.month} outside 1..12")
        if not self.pixel_size_m > 0:
            raise DataError(f"scene {self.id}: pixel size must be positive")
        if np.any(self.valid & (self.labels == IGNORE)):
            raise DataError(f"scene {self.id}: valid pixels carry the ignore label")
        for arr in (self.channels, self.labels, self.valid):
            arr.flags.writeable = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]

    @property
    def input_finite(self) -> np.ndarray:
        return np.isfinite(self.channels).all(axis=0)

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())

    @classmethod
    def from_arrays(cls, id, month, channels, labels, **kwargs) -> "Scene":
        """Build a scene, deriving the validity mask and checking label codes."""
        channels = np.array(channels, dtype=np.float32)
        labels = np.array(labels, dtype=np.uint8) if not isinstance(labels, np.ndarray) else labels
        check_label_values(labels)
        labels = labels.astype(np.uint8)
        valid = np.isfinite(channels).all(axis=0) & (labels != IGNORE)
        return cls(id=id, month=int(month), channels=channels, labels=labels, valid=valid, **kwargs)


def check_label_values(labels: np.ndarray) -> None:
    bad = np.setdiff1d(np.unique(labels), [WATER, ICE, IGNORE])
    if bad.size:
        raise DataError(f"unknown label class value {bad[0]!r} (allowed: 0 water, 1 ice, 255 ignore)")


def clip_scene(scene: Scene, region) -> Scene:
    """Crop a scene to ``region``; the geotransform origin moves with it."""
    h, w = scene.shape
    reg = resolve_region(region, scene.shape)
    if reg.row0 + reg.height > h or reg.col0 + reg.width > w:
        raise DataError(f"region {reg} exceeds scene {scene.id} bounds {h}x{w}")
    if reg == Region(0, 0, h, w):
        return scene
    rs, cs = reg.slices
    a, b, c, d, e, f = scene.geotransform
    gt = (a, b, c + a * reg.col0 + b * reg.row0, d, e, f + d * reg.col0 + e * reg.row0)
    return Scene(
        id=scene.id,
        month=scene.month,
        channels=scene.channels[:, rs, cs].copy(),
        labels=scene.labels[rs, cs].copy(),
        valid=scene.valid[rs, cs].copy(),
        pixel_size_m=scene.pixel_size_m,
        geotransform=gt,
        crs=scene.crs,
        label_overlaps=scene.label_overlaps,
    )


def save_scene(scene: Scene, path) -> None:
    np.savez(
        path,
        channels=scene.channels,
        labels=scene.labels,
        valid=scene.valid,
        meta=json.dumps(
            {
                "id": scene.id,
                "month": scene.month,
                "pixel_size_m": scene.pixel_size_m,
                "geotransform": list(scene.geotransform),
                "crs": scene.crs,
                "label_overlaps": scene.label_overlaps,
            }
        ),
    )


def load_scene(path) -> Scene:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        return Scene(
            id=meta["id"],
            month=meta["month"],
            channels=z["channels"],
            labels=z["labels"],
            valid=z["valid"],
            pixel_size_m=meta["pixel_size_m"],
            geotransform=tuple(meta["geotransform"]),
            crs=meta["crs"],
            label_overlaps=meta["label_overlaps"],
        )


# --------------------------------------------------------------------------
# rasterization


@dataclass
class LabeledPolygon:
    geometry: object  # shapely Polygon / MultiPolygon in map coordinates
    label: int


def parse_class(value) -> int:
    """Map a polygon class attribute to 0/1."""
    if isinstance(value, str):
        key = value.strip().lower()
        if key in CLASS_NAMES:
            return CLASS_NAMES[key]
        try:
            value = int(key)
        except ValueError:
            raise DataError(f"unknown label class value {value!r}") from None
    if isinstance(value, (int, np.integer)) and int(value) in (WATER, ICE):
        return int(value)
    raise DataError(f"unknown label class value {value!r}")


def _polygon_rings(geom):
    if geom.geom_type == "Polygon":
        yield geom
    elif geom.geom_type in ("MultiPolygon", "GeometryCollection"):
        for g in geom.geoms:
            yield from _polygon_rings(g)
    else:
        raise DataError(f"label geometry must be polygonal, got {geom.geom_type}")


def rasterize_labels(
    polygons: Iterable[LabeledPolygon],
    geotransform: Sequence[float],
    shape: tuple[int, int],
    return_overlaps: bool = False,
):
    """Burn polygon classes onto a grid by pixel-centre containment.

    Pixels whose centre lies in no polygon get 255. Polygons are drawn in
    order, so where two polygons of different classes both cover a centre the
    later one wins; the number of such pixel conflicts is returned when
    ``return_overlaps`` is set and logged as a warning.
    """
    from rasterio.transform import Affine

    h, w = shape
    out = np.full((h, w), IGNORE, dtype=np.uint8)
    drawn = np.zeros((h, w), dtype=bool)
    inv = ~Affine(*geotransform)
    overlaps = 0
    for poly in polygons:
        label = parse_class(poly.label)
        for part in _polygon_rings(poly.geometry):
            rings = [part.exterior, *part.interiors]
            xs, ys, starts = [], [], [0]
            for ring in rings:
                coords = np.asarray(ring.coords, dtype=np.float64)
                if len(coords) > 1 and np.all(coords[0] == coords[-1]):
                    coords = coords[:-1]
                if len(coords) < 3:
                    continue
                cols = inv.a * coords[:, 0] + inv.b * coords[:, 1] + inv.c
                rows = inv.d * coords[:, 0] + inv.e * coords[:, 1] + inv.f
                xs.append(np.asarray(cols, dtype=np.float64))
                ys.append(np.asarray(rows, dtype=np.float64))
                starts.append(starts[-1] + len(coords))
            if len(starts) < 2:
                continue
            overlaps += kernels.fill_polygon(
                out, drawn, np.concatenate(xs), np.concatenate(ys), np.asarray(starts, dtype=np.int64), np.uint8(label)
            )
    if overlaps:
        log.warning("label rasterization: %d pixel(s) covered by polygons of different classes", overlaps)
    return (out, overlaps) if return_overlaps else out


# --------------------------------------------------------------------------
# file ingestion


def _crs_equal(a, b) -> bool:
    from rasterio.crs import CRS

    if a is None or b is None:
        return a is None and b is None
    return CRS.from_user_input(a) == CRS.from_user_input(b)


def _read_channels(channel_sources):
    import rasterio

    bands, ref = [], None
    for src_path in channel_sources:
        with rasterio.open(src_path) as src:
            grid = (src.height, src.width, tuple(src.transform)[:6], src.crs)
            if ref is None:
                ref = grid
            elif grid[:2] != ref[:2]:
                raise DataError(
                    f"channel grid mismatch: {src_path} is {grid[0]}x{grid[1]}, expected {ref[0]}x{ref[1]}"
                )
            elif grid[2] != ref[2] or not _crs_equal(grid[3], ref[3]):
                raise DataError(f"channel grid mismatch: {src_path} has a different transform or projection")
            data = src.read(masked=True).astype(np.float32)
            bands.extend(np.ma.filled(data, np.nan))
    if len(bands) != len(CHANNELS):
        raise DataError(f"expected {len(CHANNELS)} channels (HH, HV, incidence angle), got {len(bands)}")
    h, w, transform, crs = ref
    return np.stack(bands), transform, (crs.to_string() if crs else None)


def read_polygons(path, class_attribute: str = "class"):
    """Read labeled polygons and their CRS from GeoJSON or a Shapefile."""
    from shapely.geometry import shape as to_shape

    path = Path(path)
    if path.suffix.lower() == ".shp":
        import shapefile

        prj = path.with_suffix(".prj")
        crs = None
        if prj.exists():
            from rasterio.crs import CRS

            crs = CRS.from_wkt(prj.read_text()).to_string()
        polys = []
        with shapefile.Reader(str(path)) as rdr:
            for rec in rdr.iterShapeRecords():
                polys.append(LabeledPolygon(to_shape(rec.shape.__geo_interface__), rec.record[class_attribute]))
        return polys, crs

    doc = json.loads(path.read_text())
    # GeoJSON without a crs member is WGS84 by definition
    crs = doc.get("crs", {}).get("properties", {}).get("name", "EPSG:4326")
    polys = [
        LabeledPolygon(to_shape(feat["geometry"]), feat["properties"][class_attribute])
        for feat in doc.get("features", [])
    ]
    return polys, crs


def ingest_scene(
    channel_sources,
    label_source,
    month: int,
    scene_id: str | None = None,
    class_attribute: str = "class",
) -> Scene:
    """Read channel rasters and labels into a :class:`Scene`.

    ``channel_sources`` is one 3-band GeoTIFF or three single-band files in
    HH, HV, incidence-angle order. ``label_source`` is a polygon file
    (GeoJSON / Shapefile) or an already rasterized single-band GeoTIFF.
    """
    import rasterio

    if isinstance(channel_sources, (str, os.PathLike)):
        channel_sources = [channel_sources]
    channels, transform, crs = _read_channels(channel_sources)
    h, w = channels.shape[1:]
    label_source = Path(label_source)
    overlaps = 0
    if label_source.suffix.lower() in (".tif", ".tiff"):
        with rasterio.open(label_source) as src:
            if (src.height, src.width) != (h, w) or tuple(src.transform)[:6] != transform:
                raise DataError(f"label raster {label_source} is not on the channel grid")
            if not _crs_equal(src.crs.to_string() if src.crs else None, crs):
                raise DataError(f"label CRS {src.crs} does not match channel CRS {crs}")
            labels = src.read(1)
        check_label_values(labels)
    else:
        polys, label_crs = read_polygons(label_source, class_attribute)
        if not _crs_equal(label_crs, crs):
            raise DataError(f"label CRS {label_crs} does not match channel CRS {crs}")
        labels, overlaps = rasterize_labels(polys, transform, (h, w), return_overlaps=True)
    a, b, _, d, e, _ = transform
    pixel = float(np.sqrt(abs(a * e - b * d)))
    return Scene.from_arrays(
        scene_id or label_source.parent.name,
        month,
        channels,
        labels,
        pixel_size_m=pixel,
        geotransform=tuple(transform),
        crs=crs,
        label_overlaps=overlaps,
    )


# --------------------------------------------------------------------------
# split manifest


@dataclass(frozen=True)
class CatalogEntry:
    scene_id: str
    month: int
    height: int
    width: int


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)  # (scene_id, region)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)
    validation_half: str = "south"

    def to_json(self) -> dict:
        return {
            "validation_half": self.validation_half,
            "train": [{"scene_id": s, "region": region_to_json(r)} for s, r in self.train],
            "validation": [{"scene_id": s, "region": region_to_json(r)} for s, r in self.validation],
            "test": list(self.test),
        }

    @classmethod
    def from_json(cls, obj) -> "DatasetSplit":
        return cls(
            train=[(e["scene_id"], region_from_json(e["region"])) for e in obj["train"]],
            validation=[(e["scene_id"], region_from_json(e["region"])) for e in obj["validation"]],
            test=list(obj["test"]),
            validation_half=obj.get("validation_half", "south"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        return cls.from_json(json.loads(Path(path).read_text()))

    def scene_ids(self, part: str) -> set[str]:
        items = getattr(self, part)
        return set(items) if part == "test" else {s for s, _ in items}


def half_regions(height: int, width: int, validation_half: str = "south") -> tuple[Region, Region]:
    """(train, validation) halves of a scene split along its rows."""
    top = Region(0, 0, height // 2, width)
    bottom = Region(height // 2, 0, height - height // 2, width)
    if validation_half == "south":
        return top, bottom
    if validation_half == "north":
        return bottom, top
    raise ValueError(f"validation_half must be 'south' or 'north', got {validation_half!r}")


def build_split_manifest(
    catalog: Sequence[CatalogEntry],
    require_test: bool = True,
    validation_half: str = "south",
) -> DatasetSplit:
    """Assign catalog scenes to train / validation / test.

    January and July are held out for testing; February, June, August and
    December are split in half (``validation_half`` goes to validation);
    every other month trains on the full scene.
    """
    months = [e.month for e in catalog]
    dupes = sorted({m for m in months if months.count(m) > 1})
    if dupes:
        raise DataError(f"duplicate month(s) in catalog: {dupes}")
    missing_test = [m for m in TEST_MONTHS if m not in months]
    if missing_test and require_test:
        raise DataError(f"catalog lacks test month(s) {missing_test} (January and July are required)")
    split = DatasetSplit(validation_half=validation_half)
    for e in sorted(catalog, key=lambda e: (e.month, e.scene_id)):
        if e.month in TEST_MONTHS:
            split.test.append(e.scene_id)
        elif e.month in HALF_SPLIT_MONTHS:
            tr, va = half_regions(e.height, e.width, validation_half)
            split.train.append((e.scene_id, tr))
            split.validation.append((e.scene_id, va))
        else:
            split.train.append((e.scene_id, FULL))
    if not split.validation:
        warnings.warn("no February/June/August/December scene in catalog: validation set is empty", stacklevel=2)
    return split
