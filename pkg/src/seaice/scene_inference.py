"""Whole-scene prediction and misclassification maps."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels
from .ice_net import IceNet, predict_classes
from .patch_sampler import NormalizationStats, normalize_channels
from .scene_store import Scene

log = logging.getLogger(__name__)

ERR_CORRECT, ERR_ERROR, ERR_IGNORE = kernels.ERR_CORRECT, kernels.ERR_ERROR, kernels.ERR_IGNORE


class InferenceMemoryError(RuntimeError):
    pass


_OOM_ERRORS = (MemoryError, getattr(torch, "OutOfMemoryError", MemoryError))


@dataclass(frozen=True)
class SinglePass:
    def to_json(self):
        return {"mode": "single_pass"}


@dataclass(frozen=True)
class Tiled:
    tile: int = 1024
    overlap: int = 256

    def __post_init__(self):
        if self.overlap < 0 or self.tile <= 2 * self.overlap:
            raise ValueError(f"tile ({self.tile}) must exceed twice the overlap ({self.overlap})")

    def to_json(self):
        return {"mode": "tiled", "tile": self.tile, "overlap": self.overlap}


SINGLE_PASS = SinglePass()


def parse_mode(text: str):
    """``"single"`` or ``"tiled[:TILE:OVERLAP]"``."""
    if text in ("single", "single_pass"):
        return SINGLE_PASS
    if text.startswith("tiled"):
        parts = text.split(":")[1:]
        return Tiled(*(int(p) for p in parts))
    raise ValueError(f"unknown inference mode {text!r}")


@dataclass
class ClassMap:
    scene_id: str
    classes: np.ndarray  # (H, W) uint8
    valid: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass
class ErrorMask:
    codes: np.ndarray  # (H, W) uint8: 0 correct, 1 error, 2 ignore

    @property
    def counts(self) -> dict:
        return {
            "correct": int((self.codes == ERR_CORRECT).sum()),
            "error": int((self.codes == ERR_ERROR).sum()),
            "ignore": int((self.codes == ERR_IGNORE).sum()),
        }


def _tile_spans(length: int, tile: int, overlap: int, align: int) -> list[tuple[int, int]]:
    """(start, stop) spans covering ``length``; starts are multiples of ``align``."""
    if length <= tile:
        return [(0, length)]
    step = max(align, (tile - overlap) // align * align)
    starts = list(range(0, length - tile + 1, step))
    last = (length - tile) // align * align
    if last > starts[-1]:
        starts.append(last)
    spans = [(s, s + tile) for s in starts]
    spans[-1] = (starts[-1], length)
    return spans


def _keep_bounds(spans):
    """Split each overlap at its midpoint; returns the kept [lo, hi) per span."""
    keep = []
    for i, (s, e) in enumerate(spans):
        lo = 0 if i == 0 else (s + spans[i - 1][1]) // 2
        hi = e if i == len(spans) - 1 else (spans[i + 1][0] + e) // 2
        keep.append((lo, hi))
    return keep


@torch.no_grad()
def predict_logits(model: IceNet, inputs, mode=SINGLE_PASS) -> torch.Tensor:
    """Logits ``(C, H, W)`` for one normalized ``(3, H, W)`` raster."""
    device = next(model.parameters()).device
    x = torch.as_tensor(np.ascontiguousarray(inputs), dtype=torch.float32, device=device)
    if model.training:
        raise RuntimeError("predict_logits needs a model in evaluation mode")
    h, w = x.shape[-2:]
    if isinstance(mode, SinglePass):
        try:
            return model(x[None])[0].cpu()
        except _OOM_ERRORS as exc:
            raise InferenceMemoryError(
                f"single-pass inference on a {h}x{w} raster ran out of memory; use tiled mode instead"
            ) from exc
        except RuntimeError as exc:
            if "out of memory" in str(exc).lower() or "not enough memory" in str(exc).lower():
                raise InferenceMemoryError(
                    f"single-pass inference on a {h}x{w} raster ran out of memory; use tiled mode instead"
                ) from exc
            raise
    align = model.spec.output_stride
    rows = _tile_spans(h, mode.tile, mode.overlap, align)
    cols = _tile_spans(w, mode.tile, mode.overlap, align)
    out = torch.empty((model.spec.num_classes, h, w), dtype=torch.float32)
    for (r0, r1), (kr0, kr1) in zip(rows, _keep_bounds(rows)):
        for (c0, c1), (kc0, kc1) in zip(cols, _keep_bounds(cols)):
            logits = model(x[None, :, r0:r1, c0:c1])[0].cpu()
            out[:, kr0:kr1, kc0:kc1] = logits[:, kr0 - r0 : kr1 - r0, kc0 - c0 : kc1 - c0]
    return out


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def predict_scene(
    model: IceNet, scene: Scene, stats: NormalizationStats, mode=SINGLE_PASS, checkpoint_id: str = ""
) -> ClassMap:
    """Class map of a whole scene; ``model`` must be in evaluation mode."""
    inputs = normalize_channels(scene.channels, stats)
    logits = predict_logits(model, inputs, mode)
    classes = predict_classes(logits[None])[0].numpy().astype(np.uint8)
    config = {"mode": mode.to_json(), "stats": stats.to_json(), "spec": model.spec.to_json()}
    return ClassMap(
        scene_id=scene.id,
        classes=classes,
        valid=np.array(scene.valid),
        provenance={"checkpoint": checkpoint_id, "inference_config": _config_hash(config)},
    )


def mode_disagreement(model: IceNet, scene: Scene, stats: NormalizationStats, tiled: Tiled) -> float:
    """Fraction of pixels whose class differs between single-pass and tiled inference."""
    a = predict_scene(model, scene, stats, SINGLE_PASS).classes
    b = predict_scene(model, scene, stats, tiled).classes
    rate = float((a != b).mean())
    log.info("scene %s: tiled %s vs single pass disagree on %.4f%% of pixels", scene.id, tiled, 100 * rate)
    return rate


def error_map(pred, labels, valid=None) -> ErrorMask:
    if isinstance(pred, ClassMap):
        valid = pred.valid if valid is None else valid
        pred = pred.classes
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    valid = np.asarray(valid, dtype=bool)
    if not (pred.shape == labels.shape == valid.shape):
        raise ValueError(f"shape mismatch: pred {pred.shape}, labels {labels.shape}, valid {valid.shape}")
    codes = kernels.error_codes(
        np.ascontiguousarray(pred, dtype=np.int64),
        np.ascontiguousarray(labels, dtype=np.int64),
        np.ascontiguousarray(valid),
    )
    return ErrorMask(codes)


# --------------------------------------------------------------------------
# writers

ERROR_RGB = (128, 0, 160)
CLASS_RGB = {0: (40, 70, 110), 1: (225, 232, 240)}


def write_geotiff(array: np.ndarray, path, geotransform, crs=None, nodata=None) -> None:
    import rasterio
    from rasterio.transform import Affine

    with rasterio.open(
        path,
        "w",
        driver="GTiff",
        height=array.shape[0],
        width=array.shape[1],
        count=1,
        dtype=array.dtype,
        transform=Affine(*geotransform),
        crs=crs,
        nodata=nodata,
    ) as dst:
        dst.write(array, 1)


def error_mask_rgba(mask: ErrorMask, classes=None, backdrop=None) -> np.ndarray:
    """RGBA image: errors purple, ignore transparent, correct pixels shaded.

    Correct pixels show ``backdrop`` (e.g. HH backscatter) in grayscale when
    given, else the predicted class colour.
    """
    h, w = mask.codes.shape
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    correct = mask.codes == ERR_CORRECT
    if backdrop is not None:
        b = np.asarray(backdrop, dtype=np.float64)
        finite = np.isfinite(b)
        lo, hi = (np.percentile(b[finite], [2, 98]) if finite.any() else (0.0, 1.0))
        gray = np.clip((np.nan_to_num(b, nan=lo) - lo) / max(hi - lo, 1e-12), 0, 1)
        g = (gray * 255).astype(np.uint8)
        rgba[..., 0] = rgba[..., 1] = rgba[..., 2] = np.where(correct, g, 0)
    elif classes is not None:
        for k, rgb in CLASS_RGB.items():
            sel = correct & (classes == k)
            rgba[sel, :3] = rgb
    rgba[correct, 3] = 255
    err = mask.codes == ERR_ERROR
    rgba[err, :3] = ERROR_RGB
    rgba[err, 3] = 255
    return rgba


def write_error_png(mask: ErrorMask, path, classes=None, backdrop=None) -> None:
    from PIL import Image

    Image.fromarray(error_mask_rgba(mask, classes, backdrop), mode="RGBA").save(path, format="PNG")
