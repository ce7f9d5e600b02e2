"""The three-arm comparison: train each arm, score the test set, collect metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from automac import evaluation as ev
from automac.config import RunConfig, stage_seed
from automac.encoder import Encoder, load_checkpoint
from automac.ingestion import Manifest, load_manifest
from automac.mogras import build_templates, save_templates, score_and_grade_batch
from automac.motion_sim import generate_dataset, make_sources
from automac.training import (
    MlpHead,
    TrainResult,
    train_stage1,
    train_stage2,
    train_supervised_baseline,
)
from automac.types import GradeTemplateSet, SliceRecord

log = logging.getLogger(__name__)

ARMS = ("proposed", "simclr", "supervised")
ARM_LABELS = {
    "proposed": "Proposed (SupCon stage 1 + head)",
    "simclr": "SimCLR stage 1 + head",
    "supervised": "Fully supervised 3-class network",
}


@dataclass
class TrainedArm:
    arm: str
    encoder: Encoder
    head: MlpHead
    templates: GradeTemplateSet
    logs: list[dict]


@dataclass
class ArmOutcome:
    arm: str
    report: ev.EvalReport
    predictions: np.ndarray
    truths: np.ndarray
    scores: np.ndarray
    embeddings: np.ndarray


def train_arm(
    cfg: RunConfig,
    arm: str,
    train: Sequence[SliceRecord],
    val: Sequence[SliceRecord],
    out_dir: Path | None = None,
    seed: int | None = None,
) -> TrainedArm:
    """proposed = supcon stage 1 + head; simclr = simclr stage 1 + head; supervised = end to end."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    if arm == "supervised":
        tcfg = cfg.train_config("none", out_dir, seed)
        res: TrainResult = train_supervised_baseline(tcfg, train, val)
        encoder, head, logs = res.model.encoder, res.model.head, res.log
    else:
        tcfg = cfg.train_config("supcon" if arm == "proposed" else "simclr", out_dir, seed)
        if _stage1_complete(out_dir):
            log.info("%s: reusing finished stage-1 encoder", out_dir)
            encoder, _ = load_checkpoint(out_dir / "encoder.pt")
            logs = _read_log(out_dir / "stage1_log.jsonl")
        else:
            s1 = train_stage1(tcfg, train, val)
            encoder, logs = s1.model, s1.log
        s2 = train_stage2(encoder, tcfg, train, val)
        head, logs = s2.model, logs + s2.log
    templates = build_templates(encoder, train, normalize=cfg.evaluation.normalized_templates)
    if out_dir is not None:
        save_templates(out_dir / "templates.npz", templates)
    return TrainedArm(arm, encoder, head, templates, logs)


def _stage1_complete(out_dir: Path | None) -> bool:
    return (
        out_dir is not None
        and (out_dir / "encoder.pt").is_file()
        and (out_dir / "stage1_log.jsonl").is_file()
        and not (out_dir / "stage1_last.pt").exists()
    )


def _read_log(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]


def evaluate_arm(cfg: RunConfig, trained: TrainedArm, test: Sequence[SliceRecord], seed: int) -> ArmOutcome:
    preds, triples, emb = score_and_grade_batch(test, trained.encoder, trained.templates, trained.head)
    truths = [r.grade for r in test]
    p = np.array([int(x.grade) for x in preds])
    s = np.array([t.as_array() for t in triples])
    report = ev.evaluate(p, truths, s, emb, config=echo(cfg, seed, trained.arm), name=trained.arm)
    return ArmOutcome(trained.arm, report, p, np.array([int(g) for g in truths]), s, emb)


def echo(cfg: RunConfig, seed: int, arm: str) -> dict:
    return {
        "arm": arm,
        "seed": seed,
        "temperature": cfg.loss.temperature,
        "thresholds": {"subtle_min": cfg.simulator.subtle_min, "severe_min": cfg.simulator.severe_min},
        "run_config": cfg.to_dict(),
    }


def synthetic_splits(
    cfg: RunConfig,
    root: Path,
    seed: int,
    counts: dict[str, tuple[int, int, int]],
    n_sources: dict[str, int],
) -> dict[str, Manifest]:
    """One synthetic dataset per split, each from its own pool of clean phantoms.

    Disjoint source pools keep anatomy from leaking between train and test.
    """
    out = {}
    for i, split in enumerate(("train", "val", "test")):
        sources = make_sources(n_sources[split], cfg.simulator.phantom_size, seed=stage_seed(seed, f"sources/{split}"))
        generate_dataset(
            sources,
            counts[split],
            cfg.thresholds(),
            seed=stage_seed(seed, f"simulate/{split}"),
            out_dir=root / split,
            motion=cfg.motion(),
            severe_max=cfg.simulator.severe_max,
            noise_std=cfg.simulator.noise_std,
            image_format=cfg.simulator.image_format,
        )
        out[split] = load_manifest(root / split / "manifest.csv")
    return out


def run_seed(cfg: RunConfig, seed: int, root: Path, arms: Sequence[str] = ARMS,
             data: dict[str, list[SliceRecord]] | None = None) -> dict[str, ArmOutcome]:
    torch.manual_seed(seed)
    if data is None:
        manifests = synthetic_splits(
            cfg, root / "data", seed,
            counts={"train": (300, 300, 300), "val": (50, 50, 50), "test": (150, 150, 150)},
            n_sources={"train": 24, "val": 8, "test": 12},
        )
        data = {k: m.records() for k, m in manifests.items()}
    outcomes = {}
    for arm in arms:
        log.info("seed %d: training arm %s", seed, arm)
        trained = train_arm(cfg, arm, data["train"], data["val"], root / arm, seed=seed)
        outcomes[arm] = evaluate_arm(cfg, trained, data["test"], seed)
        outcomes[arm].report.write(root / arm / "report.json")
    return outcomes
