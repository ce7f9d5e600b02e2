"""Training loops: contrastive stage 1, frozen-encoder stage 2, end-to-end baseline.

All randomness (initialization, batch order, augmentation) derives from
``TrainConfig.seed`` plus the stage name and epoch, so an interrupted run that
resumes from its last-epoch checkpoint reproduces the uninterrupted run.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from automac.encoder import (
    Encoder,
    EncoderConfig,
    GradeNetwork,
    build_encoder,
    embed,
    fingerprint,
    load_checkpoint,
    save_checkpoint,
)
from automac.ingestion import PreprocessedImage, preprocess
from automac.losses import cross_entropy_loss, ntxent_loss, supcon_loss
from automac.types import GRADES, ConfigError, ContractError, DataError, SliceRecord

log = logging.getLogger(__name__)

STAGE1_METHODS = ("supcon", "simclr", "none")
_STAGE_TAGS = {"stage1": 1, "stage2": 2, "supervised": 3}


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    max_rotation_deg: float = 10.0
    intensity_jitter: float = 0.1
    crop_scale: tuple[float, float] = (0.8, 1.0)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.crop_scale)
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        object.__setattr__(self, "crop_scale", (lo, hi))


@dataclass(frozen=True)
class TrainConfig:
    stage1_method: str = "supcon"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stage1_epochs: int = 50
    stage2_epochs: int = 30
    supervised_epochs: int = 50
    batch_size: int = 48
    lr: float = 1e-4
    head_lr: float = 1e-3
    weight_decay: float = 0.0
    schedule: str = "cosine"
    temperature: float = 0.07
    head_hidden: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    checkpoint_dir: Path | None = None

    def __post_init__(self):
        if self.stage1_method not in STAGE1_METHODS:
            raise ConfigError(f"stage1_method must be one of {STAGE1_METHODS}, got {self.stage1_method!r}")
        if min(self.stage1_epochs, self.stage2_epochs, self.supervised_epochs) < 1:
            raise ConfigError("every stage needs at least one epoch")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.checkpoint_dir is not None:
            object.__setattr__(self, "checkpoint_dir", Path(self.checkpoint_dir))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["augment"]["crop_scale"] = list(self.augment.crop_scale)
        d["checkpoint_dir"] = None if self.checkpoint_dir is None else str(self.checkpoint_dir)
        return d


class MlpHead(nn.Module):
    """Grade head: a linear map embedding -> 3 logits, optionally with one hidden layer.

    ``encoder_fingerprint`` names the encoder whose embeddings it was trained on.
    """

    def __init__(self, in_dim: int = 512, hidden: int | None = None, encoder_fingerprint: str = ""):
        super().__init__()
        self.in_dim = in_dim
        self.hidden = hidden
        self.encoder_fingerprint = encoder_fingerprint
        if hidden:
            self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, len(GRADES)))
        else:
            self.net = nn.Linear(in_dim, len(GRADES))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@dataclass
class TrainResult:
    model: nn.Module
    log: list[dict]
    best_epoch: int
    best_metric: float


# --------------------------------------------------------------------------
# data plumbing
# --------------------------------------------------------------------------

class _Data:
    """Preprocessed single-channel images and integer labels held in memory."""

    def __init__(self, records: Sequence, size: int, need_labels: bool = True):
        images = [r if isinstance(r, PreprocessedImage) else preprocess(r, size) for r in records]
        if not images:
            raise DataError("no records to train on")
        self.x = torch.from_numpy(np.stack([im.tensor[:1] for im in images]))
        labels = [getattr(r, "grade", None) for r in records]
        if need_labels and any(g is None for g in labels):
            raise DataError("training records must carry a grade")
        self.y = torch.tensor([-1 if g is None else int(g) for g in labels], dtype=torch.long)

    def __len__(self) -> int:
        return len(self.x)

    def images(self, idx=None) -> torch.Tensor:
        x = self.x if idx is None else self.x[idx]
        return x.expand(-1, 3, -1, -1)


def _generator(seed: int, stage: str, epoch: int, stream: int = 0) -> torch.Generator:
    ss = np.random.SeedSequence([seed & (2**63 - 1), _STAGE_TAGS[stage], epoch, stream])
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


def shuffled_batches(n: int, batch_size: int, gen: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=gen)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches = batches[:-1]
    return batches


def balanced_batches(labels: torch.Tensor, batch_size: int, gen: torch.Generator) -> list[torch.Tensor]:
    """Batches with an equal number (>= 2) of samples of every present class.

    Smaller classes are cycled through fresh permutations so every sample of
    the largest class is seen once per epoch.
    """
    classes = sorted(int(c) for c in torch.unique(labels))
    per_class = batch_size // len(classes)
    for c in classes:
        if int((labels == c).sum()) < 2:
            raise DataError(f"class {c} has fewer than 2 samples; balanced batches are infeasible")
    if per_class < 2:
        raise ConfigError(f"batch_size {batch_size} gives fewer than 2 samples per class")
    members = {c: torch.nonzero(labels == c).flatten() for c in classes}
    per_class = min(per_class, min(len(m) for m in members.values()))
    n_batches = max(math.ceil(len(m) / per_class) for m in members.values())
    streams = {}
    for c, m in members.items():
        need = n_batches * per_class
        parts = []
        while sum(len(p) for p in parts) < need:
            parts.append(m[torch.randperm(len(m), generator=gen)])
        streams[c] = torch.cat(parts)[:need]
    return [
        torch.cat([streams[c][b * per_class : (b + 1) * per_class] for c in classes])
        for b in range(n_batches)
    ]


def augment(x: torch.Tensor, cfg: AugmentConfig, gen: torch.Generator) -> torch.Tensor:
    """Random flip, small rotation, scale crop and multiplicative intensity jitter."""
    n = x.shape[0]
    u = torch.rand(n, 6, generator=gen, dtype=torch.float64)
    angle = (2 * u[:, 0] - 1) * math.radians(cfg.max_rotation_deg)
    lo, hi = cfg.crop_scale
    scale = torch.sqrt(lo + (hi - lo) * u[:, 1])
    tx = (2 * u[:, 2] - 1) * (1 - scale)
    ty = (2 * u[:, 3] - 1) * (1 - scale)
    flip = torch.where((u[:, 4] < 0.5) & cfg.flip, -1.0, 1.0)
    cos, sin = torch.cos(angle) * scale, torch.sin(angle) * scale
    theta = torch.stack(
        [torch.stack([cos * flip, -sin, tx], 1), torch.stack([sin * flip, cos, ty], 1)], 1
    ).to(x.dtype)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    gain = 1 + (2 * u[:, 5] - 1) * cfg.intensity_jitter
    return out * gain.to(x.dtype)[:, None, None, None]


def _optimizer(params, lr: float, cfg: TrainConfig, epochs: int):
    opt = torch.optim.Adam(params, lr=lr, weight_decay=cfg.weight_decay)
    if cfg.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(epochs, 1))
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    return opt, sched


def _entry(stage, epoch, split, loss, accuracy, lr, t0) -> dict:
    return {
        "stage": stage,
        "epoch": epoch,
        "split": split,
        "loss": None if loss is None else float(loss),
        "accuracy": None if accuracy is None else float(accuracy),
        "lr": float(lr),
        "wall_time": round(time.perf_counter() - t0, 3),
    }


def write_log(entries: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    return path


class _Resumable:
    """Per-epoch state file so an interrupted loop can continue where it stopped."""

    def __init__(self, cfg: TrainConfig, stage: str):
        self.path = None if cfg.checkpoint_dir is None else cfg.checkpoint_dir / f"{stage}_last.pt"

    def load(self, model, opt, sched):
        if self.path is None or not self.path.is_file():
            return None
        state = torch.load(self.path, map_location="cpu", weights_only=False)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        log.info("resuming %s from epoch %d", self.path.name, state["epoch"] + 1)
        return state

    def save(self, model, opt, sched, epoch, best_state, best_key, best_epoch, entries):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        torch.save(
            {
                "model": model.state_dict(),
                "optimizer": opt.state_dict(),
                "scheduler": sched.state_dict(),
                "epoch": epoch,
                "best_state": best_state,
                "best_key": best_key,
                "best_epoch": best_epoch,
                "log": entries,
            },
            tmp,
        )
        tmp.replace(self.path)

    def clear(self):
        if self.path is not None and self.path.is_file():
            self.path.unlink()


EpochCallback = Callable[[str, int], None]


def _accuracy(logits: torch.Tensor, y: torch.Tensor) -> float:
    return float((logits.argmax(1) == y).double().mean())


@torch.no_grad()
def _eval_logits(model: nn.Module, data: _Data, batch_size: int = 128) -> torch.Tensor:
    model.eval()
    return torch.cat([model(data.images(slice(i, i + batch_size))) for i in range(0, len(data), batch_size)])


# --------------------------------------------------------------------------
# stage 1
# --------------------------------------------------------------------------

def train_stage1(
    config: TrainConfig,
    train: Sequence[SliceRecord],
    val: Sequence[SliceRecord],
    on_epoch_end: EpochCallback | None = None,
) -> TrainResult:
    """Contrastive encoder training; returns the encoder at the lowest validation loss.

    ``supcon`` uses two augmented views per image and class-balanced batches;
    ``simclr`` uses two augmented views and ignores labels entirely.
    """
    method = config.stage1_method
    if method == "none":
        raise ConfigError("stage1_method 'none' has no stage-1 training")
    size = config.encoder.input_size
    labelled = method == "supcon"
    tr = _Data(train, size, need_labels=labelled)
    va = _Data(val, size, need_labels=labelled)
    encoder = build_encoder(config.encoder, seed=config.seed)
    opt, sched = _optimizer(encoder.parameters(), config.lr, config, config.stage1_epochs)
    resume = _Resumable(config, "stage1")
    t0 = time.perf_counter()

    state = resume.load(encoder, opt, sched)
    if state:
        start, best_state, best_key, best_epoch, entries = (
            state["epoch"] + 1, state["best_state"], state["best_key"], state["best_epoch"], state["log"])
    else:
        start, best_state, best_key, best_epoch, entries = 0, None, math.inf, -1, []
        if labelled:
            balanced_batches(tr.y, config.batch_size, torch.Generator().manual_seed(0))

    for epoch in range(start, config.stage1_epochs):
        encoder.train()
        gen = _generator(config.seed, "stage1", epoch)
        batches = (balanced_batches(tr.y, config.batch_size, gen) if labelled
                   else shuffled_batches(len(tr), config.batch_size, gen))
        lr = opt.param_groups[0]["lr"]
        total, count = 0.0, 0
        for idx in batches:
            x = tr.images(idx)
            v1, v2 = augment(x, config.augment, gen), augment(x, config.augment, gen)
            if labelled:
                z = encoder(torch.cat([v1, v2]))
                loss = supcon_loss(z, tr.y[idx].repeat(2), config.temperature)
            else:
                loss = ntxent_loss(encoder(v1), encoder(v2), config.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        val_loss = _stage1_val_loss(encoder, va, config, labelled)
        entries.append(_entry("stage1", epoch, "train", total / count, None, lr, t0))
        entries.append(_entry("stage1", epoch, "val", val_loss, None, lr, t0))
        if val_loss < best_key:
            best_key, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(encoder.state_dict())
        resume.save(encoder, opt, sched, epoch, best_state, best_key, best_epoch, entries)
        if on_epoch_end:
            on_epoch_end("stage1", epoch)

    encoder.load_state_dict(best_state)
    encoder.eval()
    _finish(config, "stage1", entries, resume)
    if config.checkpoint_dir is not None:
        save_checkpoint(config.checkpoint_dir / "encoder.pt", encoder, method=method, best_epoch=best_epoch)
    return TrainResult(encoder, entries, best_epoch, best_key)


@torch.no_grad()
def _stage1_val_loss(encoder: Encoder, va: _Data, config: TrainConfig, labelled: bool) -> float:
    encoder.eval()
    if labelled:
        # a grade with a single validation sample has no positive; leave it out
        counts = torch.bincount(va.y, minlength=len(GRADES))
        keep = counts[va.y] >= 2
        if int(keep.sum()) < 2:
            raise DataError("validation set needs at least one grade with two or more samples")
        z = torch.from_numpy(embed(encoder, va.images(keep)))
        return float(supcon_loss(z, va.y[keep], config.temperature))
    gen = _generator(config.seed, "stage1", 0, stream=1)
    x = va.images()
    a = torch.from_numpy(embed(encoder, augment(x, config.augment, gen)))
    b = torch.from_numpy(embed(encoder, augment(x, config.augment, gen)))
    return float(ntxent_loss(a, b, config.temperature))


def _finish(config, stage, entries, resume):
    if config.checkpoint_dir is not None:
        write_log(entries, config.checkpoint_dir / f"{stage}_log.jsonl")
    resume.clear()


# --------------------------------------------------------------------------
# stage 2
# --------------------------------------------------------------------------

def train_stage2(
    encoder: Encoder,
    config: TrainConfig,
    train: Sequence[SliceRecord],
    val: Sequence[SliceRecord],
    cache_embeddings: bool = True,
) -> TrainResult:
    """Train the grade head on frozen embeddings; selects the head with the best val accuracy.

    The encoder is never updated: its fingerprint is compared before and
    after, and any drift raises ContractError.
    """
    size = encoder.config.input_size
    tr, va = _Data(train, size), _Data(val, size)
    fp_before = fingerprint(encoder)
    encoder.eval()
    flags = [p.requires_grad for p in encoder.parameters()]
    for p in encoder.parameters():
        p.requires_grad_(False)
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            head = MlpHead(encoder.embedding_dim, config.head_hidden, fp_before)
        opt, sched = _optimizer(head.parameters(), config.head_lr, config, config.stage2_epochs)
        if cache_embeddings:
            tr_emb = torch.from_numpy(embed(encoder, tr.images()))
            get = lambda idx: tr_emb[idx]
        else:
            get = lambda idx: torch.from_numpy(embed(encoder, tr.images(idx)))
        va_emb = torch.from_numpy(embed(encoder, va.images()))
        t0 = time.perf_counter()
        entries: list[dict] = []
        best_state, best_key, best_epoch = None, (-1.0, -math.inf), -1
        for epoch in range(config.stage2_epochs):
            head.train()
            gen = _generator(config.seed, "stage2", epoch)
            lr = opt.param_groups[0]["lr"]
            total, correct, count = 0.0, 0, 0
            for idx in shuffled_batches(len(tr), config.batch_size, gen):
                logits = head(get(idx))
                loss = cross_entropy_loss(logits, tr.y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                correct += int((logits.argmax(1) == tr.y[idx]).sum())
                count += len(idx)
            sched.step()
            head.eval()
            with torch.no_grad():
                vl = head(va_emb)
                val_loss = float(cross_entropy_loss(vl, va.y))
                val_acc = _accuracy(vl, va.y)
            entries.append(_entry("stage2", epoch, "train", total / count, correct / count, lr, t0))
            entries.append(_entry("stage2", epoch, "val", val_loss, val_acc, lr, t0))
            if (val_acc, -val_loss) > best_key:
                best_key, best_epoch = (val_acc, -val_loss), epoch
                best_state = copy.deepcopy(head.state_dict())
        head.load_state_dict(best_state)
        head.eval()
    finally:
        for p, f in zip(encoder.parameters(), flags):
            p.requires_grad_(f)
    if fingerprint(encoder) != fp_before:
        raise ContractError("encoder parameters changed during stage-2 training")
    if config.checkpoint_dir is not None:
        write_log(entries, config.checkpoint_dir / "stage2_log.jsonl")
        save_head(config.checkpoint_dir / "head.pt", head)
    return TrainResult(head, entries, best_epoch, best_key[0])


def save_head(path: str | Path, head: MlpHead) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"format": "automac-head/1", "in_dim": head.in_dim, "hidden": head.hidden,
         "encoder_fingerprint": head.encoder_fingerprint, "state": head.state_dict()},
        path,
    )
    return path


def load_head(path: str | Path) -> MlpHead:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"head checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    head = MlpHead(payload["in_dim"], payload["hidden"], payload["encoder_fingerprint"])
    head.load_state_dict(payload["state"])
    return head.eval()


# --------------------------------------------------------------------------
# fully supervised baseline
# --------------------------------------------------------------------------

def train_supervised_baseline(
    config: TrainConfig,
    train: Sequence[SliceRecord],
    val: Sequence[SliceRecord],
    on_epoch_end: EpochCallback | None = None,
) -> TrainResult:
    """End-to-end cross-entropy training of encoder + head; selection by val accuracy."""
    size = config.encoder.input_size
    tr, va = _Data(train, size), _Data(val, size)
    encoder = build_encoder(config.encoder, seed=config.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        head = MlpHead(encoder.embedding_dim, config.head_hidden)
    net = GradeNetwork(encoder, head)
    opt, sched = _optimizer(net.parameters(), config.lr, config, config.supervised_epochs)
    resume = _Resumable(config, "supervised")
    t0 = time.perf_counter()
    state = resume.load(net, opt, sched)
    if state:
        start, best_state, best_key, best_epoch, entries = (
            state["epoch"] + 1, state["best_state"], tuple(state["best_key"]), state["best_epoch"], state["log"])
    else:
        start, best_state, best_key, best_epoch, entries = 0, None, (-1.0, -math.inf), -1, []

    for epoch in range(start, config.supervised_epochs):
        net.train()
        gen = _generator(config.seed, "supervised", epoch)
        lr = opt.param_groups[0]["lr"]
        total, correct, count = 0.0, 0, 0
        for idx in shuffled_batches(len(tr), config.batch_size, gen):
            logits = net(augment(tr.images(idx), config.augment, gen))
            loss = cross_entropy_loss(logits, tr.y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == tr.y[idx]).sum())
            count += len(idx)
        sched.step()
        vl = _eval_logits(net, va)
        val_loss, val_acc = float(cross_entropy_loss(vl, va.y)), _accuracy(vl, va.y)
        entries.append(_entry("supervised", epoch, "train", total / count, correct / count, lr, t0))
        entries.append(_entry("supervised", epoch, "val", val_loss, val_acc, lr, t0))
        if (val_acc, -val_loss) > best_key:
            best_key, best_epoch = (val_acc, -val_loss), epoch
            best_state = copy.deepcopy(net.state_dict())
        resume.save(net, opt, sched, epoch, best_state, best_key, best_epoch, entries)
        if on_epoch_end:
            on_epoch_end("supervised", epoch)

    net.load_state_dict(best_state)
    net.eval()
    head.encoder_fingerprint = fingerprint(encoder)
    _finish(config, "supervised", entries, resume)
    if config.checkpoint_dir is not None:
        save_checkpoint(config.checkpoint_dir / "network.pt", encoder, head, method="supervised",
                        best_epoch=best_epoch, head_hidden=config.head_hidden)
    return TrainResult(net, entries, best_epoch, best_key[0])


def load_network(path: str | Path) -> tuple[Encoder, MlpHead]:
    """Load an end-to-end checkpoint written by the supervised baseline."""
    encoder, payload = load_checkpoint(path)
    if "head" not in payload:
        raise DataError(f"{path}: checkpoint holds no grade head")
    head = MlpHead(encoder.embedding_dim, payload.get("head_hidden"), payload["fingerprint"])
    head.load_state_dict(payload["head"])
    return encoder, head.eval()
