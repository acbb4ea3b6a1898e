"""Run manifests and the random-vs-pretrained comparison table."""
from __future__ import annotations

import calendar
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import CLASS_LABELS, ConfusionMatrix, MetricsReport, row_normalize

TABLE_COLUMNS = ("Average F1", "Micro avg IOU", "Macro avg IOU", "Weighted IOU")
STRATEGY_NAMES = {"random": "Randomly initialized", "pretrained": "Pre-trained"}
# settings that must agree across runs for the comparison to be apples-to-apples
COMPARABLE_KEYS = ("train_config", "model_spec", "split_sha256", "patches_sha256", "inference")


class ReportError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    strategy: str
    seed: int
    train_config: dict
    model_spec: dict
    inference: dict
    split: str
    split_sha256: str
    patches: str
    patches_sha256: str
    checkpoint: str | None = None
    checkpoint_sha256: str | None = None
    epoch_log: str | None = None
    epochs_trained: int | None = None
    best_epoch: int | None = None
    status: str = "pending"
    error: str | None = None
    metrics: dict = field(default_factory=dict)  # scene id -> {"path", "sha256"}
    timestamps: dict = field(default_factory=dict)
    code_version: str = ""

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def verify_artifacts(manifest: RunManifest, base: Path) -> None:
    """Every referenced file must exist and hash to its recorded digest."""
    refs = [(manifest.split, manifest.split_sha256), (manifest.patches, manifest.patches_sha256)]
    if manifest.checkpoint:
        refs.append((manifest.checkpoint, manifest.checkpoint_sha256))
    refs += [(m["path"], m["sha256"]) for m in manifest.metrics.values()]
    for rel, digest in refs:
        path = base / rel
        if not path.exists():
            raise ReportError(f"run {manifest.run_id}: referenced file {rel} is missing")
        if sha256_file(path) != digest:
            raise ReportError(f"run {manifest.run_id}: {rel} changed since it was recorded (hash mismatch)")


def scene_label(scene_id: str, month: int | None) -> str:
    if month:
        return f"{calendar.month_name[month]} test scene"
    return f"{scene_id} test scene"


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def build_report(manifests: list[RunManifest], base: Path, scene_months: dict | None = None) -> dict:
    """Aggregate per-run metric files into table rows; nothing is recomputed from rasters."""
    scene_months = scene_months or {}
    done = [m for m in manifests if m.status == "evaluated"]
    if not done:
        raise ReportError("no evaluated runs to report")
    ref = done[0]
    for m in done[1:]:
        diff = [k for k in COMPARABLE_KEYS if getattr(m, k) != getattr(ref, k)]
        if diff:
            raise ReportError(f"runs {ref.run_id} and {m.run_id} differ in {', '.join(diff)}; refusing to compare")
    for m in done:
        verify_artifacts(m, base)

    per_run = []
    for m in sorted(done, key=lambda m: (m.strategy, m.seed, m.run_id)):
        for scene_id in sorted(m.metrics):
            rep = MetricsReport.from_json(json.loads((base / m.metrics[scene_id]["path"]).read_text()))
            per_run.append((m, scene_id, rep))

    strategies = [s for s in ("random", "pretrained") if any(m.strategy == s for m in done)]
    strategies += sorted({m.strategy for m in done} - set(strategies))
    scenes = sorted({s for _, s, _ in per_run}, key=lambda s: (scene_months.get(s, 99), s))

    rows, figures = [], []
    for scene_id in scenes:
        for strat in strategies:
            reps = [r for m, s, r in per_run if s == scene_id and m.strategy == strat]
            if not reps:
                continue
            vals = [
                float(np.mean([r.weighted_f1 for r in reps])),
                float(np.mean([r.micro_iou for r in reps])),
                float(np.mean([r.macro_iou for r in reps])),
                float(np.mean([r.weighted_iou for r in reps])),
            ]
            rows.append(
                {
                    "scene": scene_id,
                    "scene_label": scene_label(scene_id, scene_months.get(scene_id)),
                    "strategy": strat,
                    "setup": STRATEGY_NAMES.get(strat, strat),
                    "runs": len(reps),
                    "values": vals,
                }
            )
            rates = [row_normalize(ConfusionMatrix(np.array(r.confusion))).rates for r in reps]
            figures.append({"scene": scene_id, "strategy": strat, "rates": np.nanmean(rates, axis=0).tolist()})
    appendix = [
        {
            "scene": s,
            "strategy": m.strategy,
            "seed": m.seed,
            "run_id": m.run_id,
            "epochs_trained": m.epochs_trained,
            "values": [r.weighted_f1, r.micro_iou, r.macro_iou, r.weighted_iou],
        }
        for m, s, r in per_run
    ]
    return {"columns": list(TABLE_COLUMNS), "rows": rows, "appendix": appendix, "confusion": figures}


def render_markdown(report: dict) -> str:
    head = "| Test scene | Setup | " + " | ".join(report["columns"]) + " |"
    lines = [head, "|" + "---|" * (2 + len(report["columns"]))]
    for r in report["rows"]:
        lines.append(f"| {r['scene_label']} | {r['setup']} | " + " | ".join(_fmt(v) for v in r["values"]) + " |")
    lines += ["", "Per-run values:", "", "| Test scene | Setup | Seed | Epochs | " + " | ".join(report["columns"]) + " |"]
    lines.append("|" + "---|" * (4 + len(report["columns"])))
    for a in report["appendix"]:
        lines.append(
            f"| {a['scene']} | {STRATEGY_NAMES.get(a['strategy'], a['strategy'])} | {a['seed']} | "
            f"{a['epochs_trained']} | " + " | ".join(_fmt(v) for v in a["values"]) + " |"
        )
    return "\n".join(lines) + "\n"


def render_csv(report: dict) -> str:
    cols = ["scene", "strategy", "runs"] + [c.lower().replace(" ", "_") for c in report["columns"]]
    lines = [",".join(cols)]
    for r in report["rows"]:
        lines.append(",".join([r["scene"], r["strategy"], str(r["runs"])] + [_fmt(v) for v in r["values"]]))
    return "\n".join(lines) + "\n"


def plot_confusion(rates, path, title: str = "") -> None:
    """Row-normalized confusion heat map."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rates = np.asarray(rates, dtype=float)
    fig, ax = plt.subplots(figsize=(3.4, 3.0), dpi=100)
    ax.imshow(np.nan_to_num(rates), cmap="Blues", vmin=0, vmax=1)
    n = rates.shape[0]
    for i in range(n):
        for j in range(n):
            txt = "n/a" if np.isnan(rates[i, j]) else f"{rates[i, j]:.2f}"
            ax.text(j, i, txt, ha="center", va="center", color="white" if rates[i, j] > 0.5 else "black")
    ax.set_xticks(range(n), [f"{k} ({CLASS_LABELS[k]})" for k in range(n)])
    ax.set_yticks(range(n), [f"{k} ({CLASS_LABELS[k]})" for k in range(n)])
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
