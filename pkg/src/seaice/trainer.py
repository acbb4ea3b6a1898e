"""Training protocol: masked cross-entropy, Adam, plateau LR decay, early stopping.

Hyperparameter defaults are the reference ones: batch 32, Adam at 1e-5,
LR divided by 10 after 5 epochs without validation improvement (floor 1e-8),
stop after 20 epochs without improvement, keep the best-validation weights.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .ice_net import IceNet, InitKind, InitStrategy, ModelSpec, build_model, initialize, save_checkpoint
from .metrics import confusion_matrix, mean_reports, metrics_report
from .patch_sampler import NormalizationStats, Patch, normalize_channels
from .scene_inference import SINGLE_PASS, predict_logits, predict_scene
from .scene_store import Scene, clip_scene

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    initial_lr: float = 1e-5
    lr_decay_factor: float = 10.0
    plateau_patience: int = 5
    min_lr: float = 1e-8
    early_stop_patience: int = 20
    max_epochs: int = 500
    accumulation_steps: int = 1
    class_weights: list | None = None
    resample_patches_each_epoch: bool = False

    def __post_init__(self):
        if self.initial_lr < self.min_lr:
            raise ValueError("initial_lr must be >= min_lr")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.accumulation_steps < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, accumulation_steps and max_epochs must be >= 1")
        if self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be > 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**obj)


@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    history: list = field(default_factory=list)
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    plateau_count: int = 0
    best_checkpoint: dict | None = field(default=None, repr=False)

    @classmethod
    def initial(cls, config: TrainConfig) -> "TrainState":
        return cls(lr=config.initial_lr)


# --------------------------------------------------------------------------
# loss


def masked_ce_sum(logits, labels, valid, class_weights=None):
    """Summed cross-entropy over valid pixels and the valid-pixel count."""
    if logits.ndim != 4 or logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} are inconsistent")
    if labels.shape != valid.shape:
        raise ValueError(f"labels {tuple(labels.shape)} and valid {tuple(valid.shape)} differ")
    mask = valid.bool() & (labels != 255)
    picked = logits.permute(0, 2, 3, 1)[mask]
    target = labels[mask].long()
    weight = None if class_weights is None else torch.as_tensor(class_weights, dtype=logits.dtype)
    return F.cross_entropy(picked, target, weight=weight, reduction="sum"), int(mask.sum())


def compute_loss(logits, labels, valid, class_weights=None) -> torch.Tensor:
    """Mean pixel-wise cross-entropy over valid pixels; ignored pixels carry no gradient."""
    total, count = masked_ce_sum(logits, labels, valid, class_weights)
    if count == 0:
        raise ValueError("degenerate batch: no valid pixels")
    return total / count


# --------------------------------------------------------------------------
# schedule


def plateau_step(
    state: TrainState, val_loss: float, config: TrainConfig | None = None, train_loss: float = math.nan
) -> TrainState:
    """Record one finished epoch's validation loss and apply the plateau rule.

    Improvement means strictly below the best so far. After
    ``plateau_patience`` consecutive non-improving epochs the LR is divided by
    ``lr_decay_factor`` (floored at ``min_lr``) and the plateau counter
    restarts; the early-stopping counter keeps running.
    """
    if not math.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    config = config or TrainConfig()
    state.epoch += 1
    state.history.append({"epoch": state.epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": state.lr})
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.best_epoch = state.epoch
        state.epochs_since_improvement = 0
        state.plateau_count = 0
        return state
    state.epochs_since_improvement += 1
    state.plateau_count += 1
    if state.plateau_count >= config.plateau_patience:
        state.lr = max(state.lr / config.lr_decay_factor, config.min_lr)
        state.plateau_count = 0
    return state


def early_stop_check(state: TrainState, config: TrainConfig | None = None) -> bool:
    config = config or TrainConfig()
    return state.epoch - state.best_epoch >= config.early_stop_patience


# --------------------------------------------------------------------------
# data plumbing


@dataclass(frozen=True, eq=False)
class ValidationRegion:
    """A normalized raster evaluated in one piece for validation loss."""

    name: str
    inputs: np.ndarray
    labels: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_scene(cls, scene: Scene, region, stats: NormalizationStats) -> "ValidationRegion":
        sub = clip_scene(scene, region)
        return cls(f"{scene.id}", normalize_channels(sub.channels, stats), np.array(sub.labels), np.array(sub.valid))


class LazyPatches(Sequence):
    """Patches extracted on access, so the full training set never sits in memory."""

    def __init__(self, patch_set, scenes: Mapping[str, Scene]):
        self.patch_set = patch_set
        self.scenes = scenes

    def __len__(self):
        return len(self.patch_set.windows)

    def __getitem__(self, i) -> Patch:
        from .patch_sampler import extract_patch

        w = self.patch_set.windows[i]
        return extract_patch(self.scenes[w.scene_id], w, self.patch_set.stats)


def _collate(patches: Sequence[Patch]):
    x = torch.from_numpy(np.stack([p.inputs for p in patches]))
    y = torch.from_numpy(np.stack([p.labels for p in patches]).astype(np.int64))
    v = torch.from_numpy(np.stack([p.valid for p in patches]))
    return x, y, v


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


@torch.no_grad()
def validation_loss(model: IceNet, regions: Sequence[ValidationRegion], mode=SINGLE_PASS, class_weights=None) -> float:
    """Pixel-weighted mean masked cross-entropy over all regions, evaluation mode."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for reg in regions:
        logits = predict_logits(model, reg.inputs, mode)[None]
        s, n = masked_ce_sum(
            logits, torch.from_numpy(reg.labels.astype(np.int64))[None], torch.from_numpy(reg.valid)[None], class_weights
        )
        total += float(s)
        count += n
    model.train(was_training)
    if count == 0:
        raise ValueError("validation regions contain no valid pixels")
    return total / count


# --------------------------------------------------------------------------
# training


def _snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(
    model: IceNet,
    patches: Sequence[Patch],
    validation: Sequence[ValidationRegion],
    config: TrainConfig,
    seed: int = 0,
    log_path=None,
    val_mode=SINGLE_PASS,
    resample: Callable[[int], Sequence[Patch]] | None = None,
) -> tuple[IceNet, TrainState]:
    """Train until early stopping (or ``max_epochs``) and restore the best weights.

    Each epoch is one pass over ``patches`` in an order drawn from
    ``(seed, epoch)``. A batch of ``batch_size`` patches is split into
    ``accumulation_steps`` micro-batches whose gradients add up to the
    full-batch gradient of the masked mean loss.
    """
    if len(patches) == 0:
        raise ValueError("empty patch set")
    if len(validation) == 0:
        raise ValueError("no validation regions")
    torch.manual_seed(seed)
    device = next(model.parameters()).device
    optimizer = torch.optim.Adam(model.parameters(), lr=config.initial_lr)
    state = TrainState.initial(config)
    writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "train_accuracy", "seconds"])
    try:
        while state.epoch < config.max_epochs:
            t0 = time.perf_counter()
            epoch = state.epoch + 1
            if resample is not None and config.resample_patches_each_epoch:
                patches = resample(epoch)
            for group in optimizer.param_groups:
                group["lr"] = state.lr
            model.train()
            order = epoch_order(len(patches), seed, epoch)
            loss_sum, pix, correct = 0.0, 0, 0
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start : start + config.batch_size]
                x, y, v = (t.to(device) for t in _collate([patches[i] for i in idx]))
                n_valid = int((v & (y != 255)).sum())
                if n_valid == 0:
                    continue
                optimizer.zero_grad(set_to_none=True)
                batch_loss = 0.0
                for chunk in np.array_split(np.arange(len(idx)), min(config.accumulation_steps, len(idx))):
                    logits = model(x[chunk])
                    s, n = masked_ce_sum(logits, y[chunk], v[chunk], config.class_weights)
                    if n == 0:
                        continue
                    (s / n_valid).backward()
                    batch_loss += float(s.detach())
                    with torch.no_grad():
                        m = v[chunk] & (y[chunk] != 255)
                        correct += int((logits.argmax(1)[m] == y[chunk][m]).sum())
                if not math.isfinite(batch_loss):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {b}, lr {state.lr:g}")
                optimizer.step()
                loss_sum += batch_loss
                pix += n_valid
            train_loss = loss_sum / max(pix, 1)
            val = validation_loss(model, validation, val_mode, config.class_weights)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}, lr {state.lr:g}")
            lr_used = state.lr
            plateau_step(state, val, config, train_loss)
            state.history[-1]["train_accuracy"] = correct / max(pix, 1)
            if state.best_epoch == state.epoch:
                state.best_checkpoint = _snapshot(model)
            if writer is not None:
                writer.writerow(
                    [epoch, f"{train_loss:.8g}", f"{val:.8g}", f"{lr_used:.3g}", f"{correct / max(pix, 1):.6f}",
                     f"{time.perf_counter() - t0:.2f}"]
                )
                fh.flush()
            log.info("epoch %d train %.5f val %.5f lr %.1e", epoch, train_loss, val, lr_used)
            if early_stop_check(state, config):
                log.info("early stop at epoch %d (best %d)", state.epoch, state.best_epoch)
                break
    finally:
        if writer is not None:
            fh.close()
    model.load_state_dict(state.best_checkpoint)
    model.eval()
    return model, state


# --------------------------------------------------------------------------
# experiments


@dataclass
class RunResult:
    seed: int
    epochs_trained: int
    best_epoch: int
    best_val_loss: float
    metrics: dict  # test scene id -> MetricsReport
    checkpoint: str | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["metrics"] = {k: v.to_json() for k, v in self.metrics.items()}
        return d


@dataclass
class ExperimentResult:
    strategy: str
    runs: list = field(default_factory=list)
    averaged: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    n_runs: int = 3

    @property
    def complete(self) -> bool:
        return not self.errors and len(self.runs) == self.n_runs

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "complete": self.complete,
            "n_runs": self.n_runs,
            "runs": [r.to_json() for r in self.runs],
            "averaged": self.averaged,
            "errors": self.errors,
        }


def evaluate_model(model: IceNet, scenes: Sequence[Scene], stats: NormalizationStats, mode=SINGLE_PASS) -> dict:
    out = {}
    for scene in scenes:
        cmap = predict_scene(model, scene, stats, mode)
        out[scene.id] = metrics_report(confusion_matrix(cmap.classes, scene.labels, scene.valid))
    return out


def average_runs(runs: Sequence[RunResult]) -> dict:
    scene_ids = sorted({s for r in runs for s in r.metrics})
    return {s: mean_reports([r.metrics[s] for r in runs if s in r.metrics]) for s in scene_ids}


def run_experiment(
    config: TrainConfig,
    patches: Sequence[Patch],
    validation: Sequence[ValidationRegion],
    test_scenes: Sequence[Scene],
    stats: NormalizationStats,
    strategies=(InitKind.RANDOM, InitKind.PRETRAINED_ENCODER),
    n_runs: int = 3,
    base_seed: int = 0,
    pretrained_source=None,
    spec: ModelSpec | None = None,
    out_dir=None,
    inference_mode=SINGLE_PASS,
) -> list[ExperimentResult]:
    """``n_runs`` trainings per strategy (seed ``base_seed + k``), each evaluated on every test scene."""
    spec = spec or ModelSpec()
    out_dir = Path(out_dir) if out_dir is not None else None
    results = []
    for kind in map(InitKind, strategies):
        res = ExperimentResult(kind.value, n_runs=n_runs)
        for k in range(n_runs):
            seed = base_seed + k
            try:
                strategy = InitStrategy(kind, seed, str(pretrained_source) if kind is InitKind.PRETRAINED_ENCODER else None)
                model = initialize(build_model(spec), strategy)
                log_path = ckpt = None
                if out_dir is not None:
                    run_dir = out_dir / f"{kind.value}_run{k}"
                    run_dir.mkdir(parents=True, exist_ok=True)
                    log_path = run_dir / "epochs.csv"
                    ckpt = run_dir / "best.pt"
                model, state = train(model, patches, validation, config, seed, log_path, inference_mode)
                if ckpt is not None:
                    save_checkpoint(model, ckpt, strategy, seed, state.best_epoch, state.best_val_loss)
                metrics = evaluate_model(model, test_scenes, stats, inference_mode)
                res.runs.append(
                    RunResult(seed, state.epoch, state.best_epoch, state.best_val_loss, metrics, str(ckpt) if ckpt else None)
                )
            except Exception as exc:  # keep sibling runs going
                log.exception("run %s/%d failed", kind.value, k)
                res.errors.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
        if res.runs:
            res.averaged = average_runs(res.runs)
        results.append(res)
        if out_dir is not None:
            (out_dir / f"experiment_{kind.value}.json").write_text(json.dumps(res.to_json(), indent=2, sort_keys=True) + "\n")
    return results

