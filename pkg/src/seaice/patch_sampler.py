"""Seeded training patches and channel normalization."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import kernels
from .scene_store import DataError, DatasetSplit, Region, Scene, resolve_region

log = logging.getLogger(__name__)

MIN_VALID_FRACTION = 0.10
MAX_RETRIES = 1000


@dataclass(frozen=True)
class PatchWindow:
    scene_id: str
    row0: int
    col0: int
    size: int = 1000


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple
    std: tuple

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std lengths differ")
        if any(not s > 0 for s in self.std):
            raise ValueError(f"channel std must be positive, got {self.std}")

    def to_json(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["mean"]), tuple(obj["std"]))


@dataclass(frozen=True, eq=False)
class Patch:
    window: PatchWindow
    inputs: np.ndarray  # (3, size, size) float32
    labels: np.ndarray  # (size, size) uint8
    valid: np.ndarray  # (size, size) bool


def sample_patch_specs(region_dims, n: int, size: int, seed, scene_id: str = "", origin=(0, 0)) -> list[PatchWindow]:
    """Draw ``n`` window origins uniformly over a region; overlaps are allowed.

    ``origin`` offsets the windows so they are expressed in scene pixels when
    the region is a sub-rectangle of the scene.
    """
    h, w = region_dims
    if n < 0:
        raise ValueError("n must be >= 0")
    if h < size or w < size:
        raise DataError(f"region {scene_id or '<unnamed>'} ({h}x{w}) is smaller than the patch size {size}")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, h - size + 1, size=n)
    cols = rng.integers(0, w - size + 1, size=n)
    return [PatchWindow(scene_id, int(origin[0] + r), int(origin[1] + c), size) for r, c in zip(rows, cols)]


def compute_normalization(split: DatasetSplit, scenes: Mapping[str, Scene]) -> NormalizationStats:
    """Per-channel mean and (population) std over valid training-region pixels."""
    count, mean, m2 = 0, None, None
    for scene_id, region in split.train:
        scene = scenes[scene_id]
        rs, cs = resolve_region(region, scene.shape).slices
        n_b, mean_b, m2_b = kernels.masked_moments(
            np.ascontiguousarray(scene.channels[:, rs, cs]), np.ascontiguousarray(scene.valid[rs, cs])
        )
        if n_b == 0:
            continue
        if count == 0:
            count, mean, m2 = n_b, mean_b.copy(), m2_b.copy()
            continue
        # pairwise merge of running moments
        n = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / n)
        m2 = m2 + m2_b + delta**2 * (count * n_b / n)
        count = n
    if count == 0:
        raise DataError("no valid training pixels: cannot compute normalization statistics")
    std = np.sqrt(m2 / count)
    if (std <= 0).any():
        raise DataError(f"channel(s) {np.flatnonzero(std <= 0).tolist()} are constant over training pixels (std = 0)")
    return NormalizationStats(tuple(float(m) for m in mean), tuple(float(s) for s in std))


def normalize_channels(channels: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Standardize channels; pixels with any non-finite channel become 0 in every channel."""
    mean = np.asarray(stats.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(stats.std, dtype=np.float32)[:, None, None]
    out = (channels.astype(np.float32) - mean) / std
    bad = ~np.isfinite(channels).all(axis=0)
    out[:, bad] = 0.0
    return out


def extract_patch(scene: Scene, window: PatchWindow, stats: NormalizationStats) -> Patch:
    h, w = scene.shape
    r, c, s = window.row0, window.col0, window.size
    if r < 0 or c < 0 or r + s > h or c + s > w:
        raise DataError(f"window {window} is outside scene {scene.id} ({h}x{w})")
    return Patch(
        window=window,
        inputs=normalize_channels(scene.channels[:, r : r + s, c : c + s], stats),
        labels=scene.labels[r : r + s, c : c + s].copy(),
        valid=scene.valid[r : r + s, c : c + s].copy(),
    )


@dataclass
class PatchSet:
    windows: list
    stats: NormalizationStats
    seed: int
    size: int
    n_per_region: int
    substitutions: list = field(default_factory=list)

    def __len__(self):
        return len(self.windows)

    def extract(self, scenes: Mapping[str, Scene]) -> list[Patch]:
        return [extract_patch(scenes[w.scene_id], w, self.stats) for w in self.windows]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "size": self.size,
            "n_per_region": self.n_per_region,
            "stats": self.stats.to_json(),
            "windows": [asdict(w) for w in self.windows],
            "substitutions": self.substitutions,
        }

    @classmethod
    def from_json(cls, obj) -> "PatchSet":
        return cls(
            windows=[PatchWindow(**w) for w in obj["windows"]],
            stats=NormalizationStats.from_json(obj["stats"]),
            seed=obj["seed"],
            size=obj["size"],
            n_per_region=obj["n_per_region"],
            substitutions=obj.get("substitutions", []),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PatchSet":
        return cls.from_json(json.loads(Path(path).read_text()))


def _window_valid_fraction(integral: np.ndarray, r: int, c: int, s: int) -> float:
    total = integral[r + s, c + s] - integral[r, c + s] - integral[r + s, c] + integral[r, c]
    return total / (s * s)


def build_training_set(
    split: DatasetSplit,
    scenes: Mapping[str, Scene],
    n_per_region: int = 100,
    size: int = 1000,
    seed: int = 0,
    stats: NormalizationStats | None = None,
    min_valid_fraction: float = MIN_VALID_FRACTION,
    max_retries: int = MAX_RETRIES,
) -> PatchSet:
    """Sample the fixed patch set: ``n_per_region`` windows per training region.

    Windows whose valid fraction is below ``min_valid_fraction`` are redrawn
    from the same region's generator, at most ``max_retries`` times each.
    """
    if stats is None:
        stats = compute_normalization(split, scenes)
    windows, substitutions = [], []
    for k, (scene_id, region) in enumerate(split.train):
        scene = scenes[scene_id]
        reg: Region = resolve_region(region, scene.shape)
        rng = np.random.default_rng([seed, k])
        label = f"{scene_id}{reg.to_json()}"
        if reg.height < size or reg.width < size:
            raise DataError(f"region {label} ({reg.height}x{reg.width}) is smaller than the patch size {size}")
        specs = sample_patch_specs((reg.height, reg.width), n_per_region, size, rng, scene_id, (reg.row0, reg.col0))
        rs, cs = reg.slices
        integral = np.zeros((reg.height + 1, reg.width + 1), dtype=np.int64)
        integral[1:, 1:] = scene.valid[rs, cs].cumsum(0).cumsum(1)
        for i, win in enumerate(specs):
            tries = 0
            while _window_valid_fraction(integral, win.row0 - reg.row0, win.col0 - reg.col0, size) < min_valid_fraction:
                if tries >= max_retries:
                    raise DataError(
                        f"region {label} cannot produce a patch with >= {min_valid_fraction:.0%} valid pixels "
                        f"after {max_retries} retries"
                    )
                old = win
                (win,) = sample_patch_specs((reg.height, reg.width), 1, size, rng, scene_id, (reg.row0, reg.col0))
                tries += 1
                substitutions.append({"region": label, "index": i, "replaced": asdict(old), "with": asdict(win)})
            specs[i] = win
        windows.extend(specs)
    if substitutions:
        log.info("resampled %d low-validity patch window(s)", len(substitutions))
    return PatchSet(windows, stats, seed, size, n_per_region, substitutions)
