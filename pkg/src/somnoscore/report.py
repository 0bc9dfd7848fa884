"""Static SVG renderings of training history and evaluation results."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .sigdata import STAGE_NAMES  # noqa: E402

_RC = {"svg.hashsalt": "somnoscore", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    tmp.replace(path)


def loss_curve(history_csv, out: Path) -> None:
    with open(history_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    it = [int(r["iteration"]) for r in rows]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(it, [float(r["train_loss"]) for r in rows], marker="o", label="train")
        ax.plot(it, [float(r["val_loss"]) for r in rows], marker="s", label="validation")
        ax.set_xlabel("iteration")
        ax.set_ylabel("cross-entropy")
        ax.legend()
        fig.tight_layout()
        _save(fig, out)


def class_bars(metrics_json, out: Path) -> None:
    doc = json.loads(Path(metrics_json).read_text())
    m = doc["metrics"]
    names = doc.get("classes", STAGE_NAMES)
    width = 0.27
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for k, key in enumerate(("precision", "recall", "f1")):
            ax.bar([i + (k - 1) * width for i in range(len(names))], m[key], width, label=key)
        ax.set_xticks(range(len(names)), names)
        ax.set_ylim(0, 1)
        kappa = "n/a" if m["kappa"] is None else f"{m['kappa']:.3f}"
        ax.set_title(f"accuracy {m['accuracy']:.4f}  kappa {kappa}  macro-F1 {m['f1_macro']:.4f}")
        ax.legend(loc="lower right")
        fig.tight_layout()
        _save(fig, out)


def hypnogram_strip(predictions_csv, out: Path, patient: str | None = None) -> None:
    with open(predictions_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if patient is None and rows:
        patient = rows[0]["patient_id"]
    rows = [r for r in rows if r["patient_id"] == patient]
    ep = [int(r["epoch_index"]) for r in rows]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(8, 2.8))
        ax.step(ep, [int(r["truth"]) for r in rows], where="post", label="truth")
        ax.step(ep, [int(r["predicted"]) + 0.08 for r in rows], where="post", label="predicted",
                alpha=0.8)
        ax.set_yticks(range(len(STAGE_NAMES)), STAGE_NAMES)
        ax.invert_yaxis()
        ax.set_xlabel("epoch (30 s)")
        ax.set_title(f"patient {patient}")
        ax.legend(loc="upper right", fontsize=7)
        fig.tight_layout()
        _save(fig, out)


def render(in_dir, out_dir) -> list[Path]:
    """Render whatever of history.csv / metrics.json / predictions.csv exists in ``in_dir``."""
    src, dst = Path(in_dir), Path(out_dir)
    dst.mkdir(parents=True, exist_ok=True)
    written = []
    jobs = (("history.csv", "loss_curve.svg", loss_curve),
            ("metrics.json", "per_class.svg", class_bars),
            ("predictions.csv", "hypnogram.svg", hypnogram_strip))
    for name, target, fn in jobs:
        if (src / name).exists():
            fn(src / name, dst / target)
            written.append(dst / target)
    return written
