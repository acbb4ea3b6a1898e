"""``seaice`` command line: prepare, train, predict, evaluate, report.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
import warnings
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path


from . import __version__
from .scene_store import (
    CatalogEntry,
    DataError,
    DatasetSplit,
    build_split_manifest,
    ingest_scene,
    load_scene,
    save_scene,
)

log = logging.getLogger("seaice")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3
DATA_ROOT_ENV = "SEAICE_DATA_ROOT"

DATA_DEFAULTS = {"n_per_region": 100, "patch_size": 1000, "validation_half": "south", "min_valid_fraction": 0.10}
INFERENCE_DEFAULTS = {"mode": "single"}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Read a JSON or TOML config with optional ``train``, ``model``, ``data``, ``inference`` tables."""
    from .ice_net import ModelSpec
    from .trainer import TrainConfig

    cfg = {"train": {}, "model": {}, "data": dict(DATA_DEFAULTS), "inference": dict(INFERENCE_DEFAULTS)}
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        raw = tomllib.loads(text)
    else:
        raw = json.loads(text)
    unknown = set(raw) - set(cfg)
    if unknown:
        raise UsageError(f"unknown config section(s): {sorted(unknown)}")
    allowed = {
        "train": {f.name for f in fields(TrainConfig)},
        "model": {f.name for f in fields(ModelSpec)},
        "data": set(DATA_DEFAULTS),
        "inference": set(INFERENCE_DEFAULTS),
    }
    for section, values in raw.items():
        bad = set(values) - allowed[section]
        if bad:
            raise UsageError(f"unknown key(s) in [{section}]: {sorted(bad)}")
        cfg[section].update(values)
    return cfg


def _configure_determinism(enabled: bool) -> None:
    import torch

    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# prepare


def discover_scenes(root: Path) -> list[dict]:
    """Find ``<root>/<scene>/`` directories holding channels and labels."""
    found = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        names = {p.name.lower(): p for p in d.iterdir()}
        if "sar.tif" in names:
            channels = [names["sar.tif"]]
        elif all(n in names for n in ("hh.tif", "hv.tif", "ia.tif")):
            channels = [names["hh.tif"], names["hv.tif"], names["ia.tif"]]
        else:
            continue
        label = next((names[n] for n in ("labels.geojson", "labels.json", "labels.shp", "labels.tif") if n in names), None)
        if label is None:
            raise DataError(f"scene directory {d} has no labels.(geojson|json|shp|tif)")
        month = None
        if "scene.json" in names:
            month = json.loads(names["scene.json"].read_text()).get("month")
        if month is None:
            m = re.search(r"(\d{1,2})$", d.name)
            if not m:
                raise DataError(f"cannot tell the acquisition month of {d.name}; add scene.json with a month")
            month = int(m.group(1))
        found.append({"id": d.name, "month": int(month), "channels": channels, "labels": label})
    return found


def cmd_prepare(args, cfg) -> int:
    from .patch_sampler import build_training_set

    root = args.dataset_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"no dataset root given (argument or ${DATA_ROOT_ENV})")
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    out = Path(args.out)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    found = discover_scenes(root)
    if not found:
        raise DataError(f"no scenes found under {root}")
    months = {s["month"] for s in found}
    missing = [m for m in range(1, 13) if m not in months]
    if missing:
        log.warning("partial catalog: no scene for month(s) %s", missing)

    scenes, report = {}, {}
    for s in found:
        scene = ingest_scene(s["channels"], s["labels"], s["month"], scene_id=s["id"])
        save_scene(scene, out / "scenes" / f"{scene.id}.npz")
        scenes[scene.id] = scene
        report[scene.id] = {
            "month": scene.month,
            "shape": list(scene.shape),
            "valid_fraction": round(scene.valid_fraction, 6),
            "label_overlaps": scene.label_overlaps,
        }
    catalog = [CatalogEntry(sc.id, sc.month, *sc.shape) for sc in scenes.values()]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        split = build_split_manifest(
            catalog, require_test=not missing, validation_half=cfg["data"]["validation_half"]
        )
    for w in caught:
        log.warning("%s", w.message)
    split.save(out / "split.json")
    patches = build_training_set(
        split,
        scenes,
        n_per_region=cfg["data"]["n_per_region"],
        size=cfg["data"]["patch_size"],
        seed=args.seed,
        min_valid_fraction=cfg["data"]["min_valid_fraction"],
    )
    patches.save(out / "patches.json")
    _write_json(out / "ingest_report.json", {"scenes": report, "missing_months": missing})
    _write_json(out / "prepare_config.json", {"data": cfg["data"], "seed": args.seed})
    log.info(
        "prepared %d scene(s): %d train region(s), %d validation region(s), test %s, %d patches",
        len(scenes), len(split.train), len(split.validation), split.test, len(patches),
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def _load_prepared(out: Path):
    from .patch_sampler import PatchSet

    if not (out / "split.json").exists() or not (out / "patches.json").exists():
        raise DataError(f"{out} is not prepared; run `seaice prepare` first")
    split = DatasetSplit.load(out / "split.json")
    patches = PatchSet.load(out / "patches.json")
    needed = split.scene_ids("train") | split.scene_ids("validation") | split.scene_ids("test")
    scenes = {}
    for sid in sorted(needed):
        path = out / "scenes" / f"{sid}.npz"
        if not path.exists():
            raise DataError(f"prepared scene {sid} missing ({path})")
        scenes[sid] = load_scene(path)
    return split, patches, scenes


def cmd_train(args, cfg) -> int:
    from filelock import FileLock, Timeout

    from .ice_net import InitKind, InitStrategy, ModelSpec, build_model, initialize, save_checkpoint
    from .report import RunManifest, sha256_file
    from .scene_inference import parse_mode
    from .trainer import LazyPatches, TrainConfig, TrainingError, ValidationRegion, train

    train_cfg = dict(cfg["train"])
    if args.max_epochs is not None:
        train_cfg["max_epochs"] = args.max_epochs
    if args.batch_size is not None:
        train_cfg["batch_size"] = args.batch_size
    config = TrainConfig.from_json(train_cfg)
    spec = ModelSpec(**cfg["model"])
    mode = parse_mode(cfg["inference"]["mode"])
    kind = InitKind(args.init)
    pretrained = None
    if kind is InitKind.PRETRAINED_ENCODER:
        if args.pretrained is None:
            raise UsageError("--init pretrained needs --pretrained PATH (encoder weight file)")
        pretrained = Path(args.pretrained).resolve()
        if not pretrained.is_file():
            raise UsageError(f"pretrained weight file {pretrained} not found")

    out = Path(args.out)
    split, patch_set, scenes = _load_prepared(out)
    if not split.validation:
        raise DataError("split has no validation regions; training needs at least one")
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    lock = FileLock(str(out / "train.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise UsageError(f"another training process holds {out / 'train.lock'}; use a distinct --out") from None

    import torch

    device = torch.device(args.device)
    failures = 0
    try:
        patches = LazyPatches(patch_set, scenes)
        validation = [ValidationRegion.from_scene(scenes[s], r, patch_set.stats) for s, r in split.validation]
        for k in range(args.runs):
            seed = args.seed + k
            run_id = f"{kind.value}_seed{seed}"
            run_dir = runs_dir / run_id
            run_dir.mkdir(exist_ok=True)
            manifest = RunManifest(
                run_id=run_id,
                strategy=kind.value,
                seed=seed,
                train_config=config.to_json(),
                model_spec=spec.to_json(),
                inference=mode.to_json(),
                split="split.json",
                split_sha256=sha256_file(out / "split.json"),
                patches="patches.json",
                patches_sha256=sha256_file(out / "patches.json"),
                timestamps={"started": _now()},
                code_version=__version__,
            )
            manifest.save(run_dir / "run_manifest.json")
            try:
                strategy = InitStrategy(kind, seed, str(pretrained) if pretrained else None)
                model = initialize(build_model(spec), strategy).to(device)
                model, state = train(model, patches, validation, config, seed, run_dir / "epochs.csv", mode)
                ckpt = run_dir / "best.pt"
                save_checkpoint(model.cpu(), ckpt, strategy, seed, state.best_epoch, state.best_val_loss)
                manifest.checkpoint = str(ckpt.relative_to(out))
                manifest.checkpoint_sha256 = sha256_file(ckpt)
                manifest.epoch_log = str((run_dir / "epochs.csv").relative_to(out))
                manifest.epochs_trained = state.epoch
                manifest.best_epoch = state.best_epoch
                manifest.status = "trained"
                log.info("run %s: %d epochs, best epoch %d (val %.5f)", run_id, state.epoch, state.best_epoch,
                         state.best_val_loss)
            except (TrainingError, RuntimeError, ValueError, KeyError) as exc:
                failures += 1
                manifest.status = "failed"
                manifest.error = f"{type(exc).__name__}: {exc}"
                log.error("run %s failed: %s", run_id, manifest.error)
            manifest.timestamps["finished"] = _now()
            manifest.save(run_dir / "run_manifest.json")
    finally:
        lock.release()
    return EXIT_TRAIN if failures else EXIT_OK


# --------------------------------------------------------------------------
# evaluate / predict


def _evaluate_one(model, scene, stats, mode, dest: Path, checkpoint_id: str) -> dict:
    from .metrics import confusion_matrix, dump_json, metrics_report, row_normalize, write_confusion_csv
    from .report import plot_confusion
    from .scene_inference import error_map, predict_scene, write_error_png, write_geotiff

    dest.mkdir(parents=True, exist_ok=True)
    cmap = predict_scene(model, scene, stats, mode, checkpoint_id)
    err = error_map(cmap, scene.labels)
    cm = confusion_matrix(cmap.classes, scene.labels, scene.valid)
    rep = metrics_report(cm)
    write_geotiff(cmap.classes, dest / "classmap.tif", scene.geotransform, scene.crs)
    write_geotiff(err.codes, dest / "errormask.tif", scene.geotransform, scene.crs, nodata=2)
    write_error_png(err, dest / "errormask.png", backdrop=scene.channels[0])
    write_confusion_csv(cm, dest / "confusion.csv")
    plot_confusion(row_normalize(cm).rates, dest / "confusion.png", f"{scene.id}")
    dump_json(rep.to_json(), dest / "metrics.json")
    return {"report": rep, "path": dest / "metrics.json", "errors": err.counts}


def cmd_evaluate(args, cfg) -> int:
    from .ice_net import ModelSpec, load_checkpoint
    from .report import RunManifest, sha256_file
    from .scene_inference import parse_mode

    out = Path(args.out)
    split, patch_set, scenes = _load_prepared(out)
    mode = parse_mode(cfg["inference"]["mode"])
    expected = ModelSpec(**cfg["model"]) if cfg["model"] else None
    test_ids = args.scenes or split.test
    for sid in test_ids:
        if sid not in scenes:
            raise DataError(f"test scene {sid} is not in the prepared store")

    targets = []  # (checkpoint path, manifest path or None)
    if args.checkpoints:
        for c in args.checkpoints:
            c = Path(c)
            mpath = c.parent / "run_manifest.json"
            targets.append((c, mpath if mpath.exists() else None))
    else:
        for mpath in sorted((out / "runs").glob("*/run_manifest.json")):
            m = RunManifest.load(mpath)
            if m.checkpoint:
                targets.append((out / m.checkpoint, mpath))
    if not targets:
        raise DataError("no checkpoints to evaluate")

    rows = []
    for ckpt, mpath in targets:
        if not ckpt.exists():
            raise DataError(f"checkpoint {ckpt} not found")
        model, meta = load_checkpoint(ckpt, expected)
        manifest = RunManifest.load(mpath) if mpath else None
        run_id = manifest.run_id if manifest else ckpt.stem
        for sid in test_ids:
            res = _evaluate_one(model, scenes[sid], patch_set.stats, mode, ckpt.parent / "eval" / sid, run_id)
            rep = res["report"]
            rows.append(
                [run_id, meta.strategy["kind"], meta.seed, sid, rep.weighted_f1, rep.macro_f1, rep.micro_iou,
                 rep.macro_iou, rep.weighted_iou]
            )
            if manifest:
                manifest.metrics[sid] = {
                    "path": str(res["path"].relative_to(out)),
                    "sha256": sha256_file(res["path"]),
                }
            log.info("%s on %s: weighted F1 %.4f, weighted IoU %.4f", run_id, sid, rep.weighted_f1, rep.weighted_iou)
        if manifest:
            manifest.status = "evaluated"
            manifest.timestamps["evaluated"] = _now()
            manifest.save(mpath)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "strategy", "seed", "scene", "weighted_f1", "macro_f1", "micro_iou", "macro_iou", "weighted_iou"])
    for r in sorted(rows, key=lambda r: (r[0], r[3])):
        w.writerow(r[:4] + [f"{v:.10f}" for v in r[4:]])
    (out / "metrics.csv").write_text(buf.getvalue())
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    from .ice_net import load_checkpoint
    from .patch_sampler import PatchSet
    from .scene_inference import error_map, parse_mode, predict_scene, write_error_png, write_geotiff

    out = Path(args.out)
    stats = PatchSet.load(out / "patches.json").stats
    mode = parse_mode(args.mode or cfg["inference"]["mode"])
    model, _ = load_checkpoint(args.checkpoint)
    if Path(args.scene).suffix == ".npz":
        scene = load_scene(args.scene)
    elif (out / "scenes" / f"{args.scene}.npz").exists():
        scene = load_scene(out / "scenes" / f"{args.scene}.npz")
    else:
        raise DataError(f"scene {args.scene} not found in {out / 'scenes'}")
    dest = out / "predictions" / scene.id
    dest.mkdir(parents=True, exist_ok=True)
    cmap = predict_scene(model, scene, stats, mode, Path(args.checkpoint).name)
    write_geotiff(cmap.classes, dest / "classmap.tif", scene.geotransform, scene.crs)
    _write_json(dest / "provenance.json", cmap.provenance)
    if scene.valid.any():
        err = error_map(cmap, scene.labels)
        write_geotiff(err.codes, dest / "errormask.tif", scene.geotransform, scene.crs, nodata=2)
        write_error_png(err, dest / "errormask.png", backdrop=scene.channels[0])
    log.info("wrote %s", dest)
    return EXIT_OK


# --------------------------------------------------------------------------
# report


def cmd_report(args, cfg) -> int:
    from .report import RunManifest, build_report, plot_confusion, render_csv, render_markdown

    out = Path(args.out)
    manifests = [RunManifest.load(p) for p in sorted((out / "runs").glob("*/run_manifest.json"))]
    months = {}
    ingest = out / "ingest_report.json"
    if ingest.exists():
        months = {k: v["month"] for k, v in json.loads(ingest.read_text())["scenes"].items()}
    report = build_report(manifests, out, months)
    strategies = {r["strategy"] for r in report["rows"]}
    if len(strategies) < 2:
        log.warning("report covers a single strategy: %s", sorted(strategies))
    dest = out / "report"
    dest.mkdir(exist_ok=True)
    (dest / "table.md").write_text(render_markdown(report))
    (dest / "table.csv").write_text(render_csv(report))
    _write_json(dest / "report.json", report)
    for fig in report["confusion"]:
        plot_confusion(fig["rates"], dest / f"confusion_{fig['scene']}_{fig['strategy']}.png",
                       f"{fig['scene']} / {fig['strategy']}")
    print(render_markdown(report), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# misc verbs


def cmd_fixtures(args, cfg) -> int:
    from .fixtures import write_fixture_dataset

    root = write_fixture_dataset(args.dest, size=args.size, seed=args.seed)
    log.info("wrote synthetic dataset to %s", root)
    return EXIT_OK


def cmd_schema(args, cfg) -> int:
    from .ice_net import ModelSpec, encoder_weight_schema

    print(json.dumps(encoder_weight_schema(ModelSpec(**cfg["model"])), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML config file")
    common.add_argument("--seed", type=int, default=0, help="base seed (run k uses seed + k)")
    common.add_argument("--out", default="seaice_out", help="working / output directory")
    common.add_argument("--deterministic", action="store_true", help="force deterministic torch kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="seaice", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", parents=[common], help="ingest scenes, write split / stats / patch manifests")
    s.add_argument("dataset_root", nargs="?", help=f"dataset directory (default ${DATA_ROOT_ENV})")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="train one strategy for N runs")
    s.add_argument("--init", choices=["random", "pretrained"], default="random")
    s.add_argument("--runs", type=int, default=1)
    s.add_argument("--pretrained", help="encoder weight file (required with --init pretrained)")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--device", default="cpu")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="evaluate checkpoints on the test scenes")
    s.add_argument("--checkpoints", nargs="*", help="checkpoint files (default: every run under OUT/runs)")
    s.add_argument("--scenes", nargs="*", help="scene ids (default: the split's test scenes)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", parents=[common], help="class map for one scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True, help="prepared scene id or .npz path")
    s.add_argument("--mode", help="single | tiled[:TILE:OVERLAP]")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("report", parents=[common], help="comparison table and averaged figures")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("fixtures", parents=[common], help="write the synthetic desk-scale dataset")
    s.add_argument("dest")
    s.add_argument("--size", type=int, default=192)
    s.set_defaults(func=cmd_fixtures)

    s = sub.add_parser("schema", parents=[common], help="print the expected encoder weight keys and shapes")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    from .report import ReportError
    from .trainer import TrainingError

    try:
        cfg = load_config(args.config)
        _configure_determinism(args.deterministic)
        return args.func(args, cfg)
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except TrainingError as exc:
        log.error("%s", exc)
        return EXIT_TRAIN
    except (UsageError, ReportError, ValueError, KeyError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
