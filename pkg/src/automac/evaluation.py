"""Confusion matrices, grade metrics, affinity-score distributions and embedding separability."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score

from automac.types import GRADES, DataError, MoGrASTriple, MotionGrade

NA = "n/a"


def _grades(values: Sequence) -> np.ndarray:
    return np.array([int(MotionGrade.parse(v)) for v in values], dtype=np.int64)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are truth grades, columns predicted grades."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.shape != (3, 3) or np.any(c < 0):
            raise DataError(f"confusion counts must be a nonnegative 3x3 matrix, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds: Sequence, truths: Sequence) -> ConfusionMatrix:
    p, t = _grades(preds), _grades(truths)
    if len(p) != len(t):
        raise DataError(f"{len(p)} predictions but {len(t)} truths")
    if len(p) == 0:
        raise DataError("nothing to evaluate")
    counts = np.zeros((3, 3), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: tuple[float | None, ...]
    recall: tuple[float | None, ...]

    def to_dict(self) -> dict:
        fmt = lambda v: NA if v is None else v
        return {
            "accuracy": self.accuracy,
            "precision": {g.label: fmt(self.precision[g]) for g in GRADES},
            "recall": {g.label: fmt(self.recall[g]) for g in GRADES},
        }


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy and per-grade precision/recall; an empty row or column gives ``None``."""
    c = cm.counts
    total = c.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    diag = np.diag(c)
    cols, rows = c.sum(0), c.sum(1)
    precision = tuple(None if cols[k] == 0 else float(diag[k] / cols[k]) for k in range(3))
    recall = tuple(None if rows[k] == 0 else float(diag[k] / rows[k]) for k in range(3))
    return Metrics(float(diag.sum() / total), precision, recall)


@dataclass(frozen=True)
class ScoreDistribution:
    """Per truth grade (rows) and score type (columns): median and quartiles."""

    median: np.ndarray
    q1: np.ndarray
    q3: np.ndarray
    counts: tuple[int, ...]

    def to_dict(self) -> dict:
        out = {}
        for t in GRADES:
            out[t.label] = {
                f"MoGrAS-{s.short}": {
                    "median": float(self.median[t, s]),
                    "q1": float(self.q1[t, s]),
                    "q3": float(self.q3[t, s]),
                }
                for s in GRADES
            }
            out[t.label]["n"] = self.counts[t]
        return out


def _score_array(triples) -> np.ndarray:
    if isinstance(triples, np.ndarray):
        arr = np.asarray(triples, dtype=np.float64)
    else:
        arr = np.array([t.as_array() if isinstance(t, MoGrASTriple) else t for t in triples], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"expected N x 3 scores, got shape {arr.shape}")
    return arr


def mogras_distribution(triples, truths: Sequence) -> ScoreDistribution:
    scores = _score_array(triples)
    t = _grades(truths)
    if len(t) != len(scores):
        raise DataError(f"{len(scores)} score triples but {len(t)} truths")
    med, q1, q3 = np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3))
    counts = []
    for g in GRADES:
        rows = scores[t == g]
        if len(rows) == 0:
            raise DataError(f"no samples with truth grade {g.label}")
        med[g] = np.median(rows, axis=0)
        q1[g], q3[g] = np.percentile(rows, [25, 75], axis=0)
        counts.append(len(rows))
    return ScoreDistribution(med, q1, q3, tuple(counts))


def project_2d(embeddings: np.ndarray, seed: int = 0, perplexity: float = 30.0) -> np.ndarray:
    """t-SNE projection to N x 2 with a fixed seed."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) < 5:
        raise DataError(f"t-SNE needs at least 5 embeddings, got shape {x.shape}")
    perplexity = min(perplexity, (len(x) - 1) / 3.0)
    tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed)
    return tsne.fit_transform(x)


def silhouette(embeddings: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette coefficient under cosine distance."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise DataError(f"embeddings {x.shape} and labels ({len(y)}) disagree")
    classes, sizes = np.unique(y, return_counts=True)
    if len(classes) < 2 or np.any(sizes < 2):
        raise DataError("silhouette needs at least 2 classes with at least 2 members each")
    if np.any(np.linalg.norm(x, axis=1) == 0):
        raise DataError("cosine distance is undefined for zero embeddings")
    return float(silhouette_score(x, y, metric="cosine"))


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    metrics: Metrics
    mogras: ScoreDistribution | None = None
    separability: float | None = None
    config: Mapping[str, Any] = field(default_factory=dict)
    name: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.confusion.total,
            "confusion": {
                "rows": "truth",
                "columns": "predicted",
                "grades": [g.label for g in GRADES],
                "counts": self.confusion.counts.tolist(),
            },
            **self.metrics.to_dict(),
            "mogras": None if self.mogras is None else self.mogras.to_dict(),
            "separability": {"silhouette_cosine": self.separability if self.separability is not None else NA},
            "config": dict(self.config),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def evaluate(preds, truths, triples=None, embeddings=None, config=None, name: str = "") -> EvalReport:
    cm = confusion(preds, truths)
    return EvalReport(
        confusion=cm,
        metrics=metrics(cm),
        mogras=None if triples is None else mogras_distribution(triples, truths),
        separability=None if embeddings is None else silhouette(embeddings, _grades(truths)),
        config=config or {},
        name=name,
    )


def _cell(v: float | None) -> str:
    return NA if v is None else f"{v:.3f}"


def format_table(rows: Mapping[str, Metrics]) -> str:
    """Comparison table: overall accuracy, NoMotion precision, SevereMotion recall, best first."""
    header = ("Training strategy", "Overall accuracy", "Precision (No Motion)", "Recall (Severe Motion)")
    ordered = sorted(rows.items(), key=lambda kv: -kv[1].accuracy)
    body = [
        (name, _cell(m.accuracy), _cell(m.precision[MotionGrade.NO_MOTION]), _cell(m.recall[MotionGrade.SEVERE_MOTION]))
        for name, m in ordered
    ]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    line = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))
    return "\n".join([line(header), "-+-".join("-" * w for w in widths), *map(line, body)]) + "\n"


def format_row(m: Metrics) -> str:
    return " / ".join(
        _cell(v) for v in (m.accuracy, m.precision[MotionGrade.NO_MOTION], m.recall[MotionGrade.SEVERE_MOTION])
    )


# --------------------------------------------------------------------------
# figures
# --------------------------------------------------------------------------

def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_confusion(cm: ConfusionMatrix, path: str | Path, title: str = "") -> Path:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 3.6))
    ax.imshow(cm.counts, cmap="Blues")
    labels = [g.label for g in GRADES]
    ax.set_xticks(range(3), labels, rotation=30)
    ax.set_yticks(range(3), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    hi = cm.counts.max() or 1
    for i in range(3):
        for j in range(3):
            v = cm.counts[i, j]
            ax.text(j, i, str(v), ha="center", va="center", color="white" if v > hi / 2 else "black")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_projection(coords: np.ndarray, truths: Sequence, path: str | Path, title: str = "") -> Path:
    plt = _plt()
    t = _grades(truths)
    fig, ax = plt.subplots(figsize=(4.2, 4))
    for g in GRADES:
        sel = t == g
        ax.scatter(coords[sel, 0], coords[sel, 1], s=6, label=g.label)
    ax.legend(fontsize=7)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_distributions(triples, truths: Sequence, path: str | Path) -> Path:
    """One violin panel per score type across truth grades, medians annotated."""
    plt = _plt()
    scores = _score_array(triples)
    t = _grades(truths)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6), sharey=True)
    for s, ax in zip(GRADES, axes):
        data = [scores[t == g, s] for g in GRADES]
        present = [i for i, d in enumerate(data) if len(d)]
        ax.violinplot([data[i] for i in present], positions=present, showextrema=False)
        meds = [float(np.median(data[i])) for i in present]
        ax.plot(present, meds, "r-o", ms=4)
        for x, m in zip(present, meds):
            ax.annotate(f"{m:.3f}", (x, m), textcoords="offset points", xytext=(6, 4), color="red", fontsize=7)
        ax.set_xticks(range(3), [g.label for g in GRADES], rotation=20)
        ax.set_title(f"MoGrAS-{s.short}")
    axes[0].set_ylabel("affinity")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
