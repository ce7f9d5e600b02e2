"""Motion grade affinity scoring.

Each grade gets a template: the coordinate-wise median of the raw training
embeddings of that grade. A slice's affinity to a grade is the cosine
similarity between its embedding and the grade's template, so each slice
carries three scores in [-1, 1].
"""

from __future__ import annotations

import datetime as _dt
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from automac.encoder import Encoder, embed, fingerprint
from automac.ingestion import PreprocessedImage, preprocess
from automac.types import (
    GRADES,
    ContractError,
    DataError,
    GradePrediction,
    GradeTemplateSet,
    MoGrASTriple,
    MotionGrade,
    SliceRecord,
)

TEMPLATE_FORMAT = "automac-templates/1"


def templates_from_embeddings(
    embeddings: np.ndarray,
    labels: Sequence,
    encoder_fingerprint: str,
    normalize: bool = False,
) -> GradeTemplateSet:
    """Per-grade coordinate-wise median of ``embeddings`` (N x D).

    ``normalize=True`` L2-normalizes rows before the median; the default works
    on raw embeddings.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    y = np.array([int(MotionGrade.parse(v)) for v in labels])
    if emb.ndim != 2 or emb.shape[0] != y.shape[0]:
        raise DataError(f"embeddings {emb.shape} and labels ({y.shape[0]}) disagree")
    if normalize:
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DataError("cannot normalize a zero embedding")
        emb = emb / norms
    rows, counts = [], {}
    for g in GRADES:
        members = emb[y == g]
        if len(members) == 0:
            raise DataError(f"no training samples for grade {g.label}")
        rows.append(np.median(members, axis=0))
        counts[g] = len(members)
    return GradeTemplateSet(
        templates=np.stack(rows).astype(np.float32),
        encoder_fingerprint=encoder_fingerprint,
        created_from=counts,
        created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    )


def _images(records, size: int) -> list[PreprocessedImage]:
    return [r if isinstance(r, PreprocessedImage) else preprocess(r, size) for r in records]


def build_templates(
    encoder: Encoder, records: Sequence[SliceRecord], normalize: bool = False
) -> GradeTemplateSet:
    labels = []
    for r in records:
        if r.grade is None:
            raise DataError(f"record {r.id!r} has no grade; templates need labelled data")
        labels.append(r.grade)
    emb = embed(encoder, _images(records, encoder.config.input_size))
    return templates_from_embeddings(emb, labels, fingerprint(encoder), normalize)


def score_matrix(embeddings: np.ndarray, templates: GradeTemplateSet) -> np.ndarray:
    """N x 3 cosine similarities, clipped to [-1, 1]."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    t = templates.templates.astype(np.float64)
    if e.shape[1] != t.shape[1]:
        raise DataError(f"embedding length {e.shape[1]} != template length {t.shape[1]}")
    en = np.linalg.norm(e, axis=1)
    tn = np.linalg.norm(t, axis=1)
    if np.any(en == 0):
        raise DataError("zero-norm embedding has no affinity")
    if np.any(tn == 0):
        raise DataError("zero-norm template")
    cos = (e @ t.T) / (en[:, None] * tn[None, :])
    return np.clip(cos, -1.0, 1.0)


def score(embedding, templates: GradeTemplateSet) -> MoGrASTriple:
    e = np.asarray(embedding, dtype=np.float64)
    if e.ndim != 1:
        raise DataError(f"expected a single embedding vector, got shape {e.shape}")
    row = score_matrix(e[None], templates)[0]
    return MoGrASTriple({g: row[g] for g in GRADES})


def _check_binding(encoder: Encoder, templates: GradeTemplateSet, head=None) -> str:
    fp = fingerprint(encoder)
    if templates.encoder_fingerprint != fp:
        raise ContractError(
            f"templates were built with encoder {templates.encoder_fingerprint[:12]}, "
            f"not the supplied encoder {fp[:12]}"
        )
    head_fp = getattr(head, "encoder_fingerprint", None)
    if head_fp is not None and head_fp != fp:
        raise ContractError(f"grade head was trained on encoder {head_fp[:12]}, not {fp[:12]}")
    return fp


@torch.no_grad()
def score_and_grade_batch(
    images, encoder: Encoder, templates: GradeTemplateSet, head: torch.nn.Module
) -> tuple[list[GradePrediction], list[MoGrASTriple], np.ndarray]:
    """One embedding pass feeds both the grade head and the affinity scores.

    Returns predictions, score triples and the embeddings themselves.
    """
    _check_binding(encoder, templates, head)
    emb = embed(encoder, _images(images, encoder.config.input_size))
    if len(emb) == 0:
        return [], [], emb
    head.eval()
    logits = head(torch.from_numpy(emb)).double().numpy()
    preds = [GradePrediction.from_logits(z) for z in logits]
    scores = score_matrix(emb, templates)
    triples = [MoGrASTriple({g: row[g] for g in GRADES}) for row in scores]
    return preds, triples, emb


def score_and_grade(image, encoder, templates, head) -> tuple[GradePrediction, MoGrASTriple]:
    preds, triples, _ = score_and_grade_batch([image], encoder, templates, head)
    return preds[0], triples[0]


def save_templates(path: str | Path, templates: GradeTemplateSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(
            fh,
            format=np.array(TEMPLATE_FORMAT),
            grade_order=np.array([g.label for g in GRADES]),
            templates=templates.templates.astype("<f4"),
            encoder_fingerprint=np.array(templates.encoder_fingerprint),
            counts=np.array([templates.created_from.get(g, 0) for g in GRADES], dtype="<i8"),
            created_at=np.array(templates.created_at),
        )
    return path


def load_templates(path: str | Path, encoder: Encoder | None = None) -> GradeTemplateSet:
    """Read a template file; with ``encoder`` given, refuse a fingerprint mismatch."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"template file not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != TEMPLATE_FORMAT:
            raise DataError(f"{path}: not a template file")
        order = [MotionGrade.parse(s) for s in z["grade_order"].tolist()]
        mat = z["templates"]
        rows = np.empty_like(mat)
        for i, g in enumerate(order):
            rows[int(g)] = mat[i]
        counts = dict(zip(order, z["counts"].tolist()))
        ts = GradeTemplateSet(rows, str(z["encoder_fingerprint"]), counts, str(z["created_at"]))
    if encoder is not None:
        _check_binding(encoder, ts)
    return ts
