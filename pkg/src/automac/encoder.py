"""Embedding network: conv backbone plus a two-layer fully connected stack.

The backbone's classification layer is dropped and replaced by the fc stack;
the output of the last fc layer is the embedding used both by the grade head
and by affinity scoring.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from automac.ingestion import PreprocessedImage, stack
from automac.types import ConfigError, ContractError, DataError

WEIGHTS_ENV = "AUTOMAC_WEIGHTS_DIR"
RESNET18_FILE = "resnet18-f37072fd.pth"
BACKBONES = ("resnet18", "tiny")


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "resnet18"
    fc_widths: tuple[int, ...] = (512, 512)
    pretrained: bool = True
    final_relu: bool = False
    input_size: int = 224
    tiny_channels: tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unsupported backbone {self.backbone!r} (expected one of {BACKBONES})")
        widths = tuple(int(w) for w in self.fc_widths)
        if not widths or any(w < 1 for w in widths):
            raise ConfigError(f"fc_widths must be positive integers, got {self.fc_widths}")
        object.__setattr__(self, "fc_widths", widths)
        object.__setattr__(self, "tiny_channels", tuple(int(c) for c in self.tiny_channels))

    @property
    def embedding_dim(self) -> int:
        return self.fc_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_widths"] = list(self.fc_widths)
        d["tiny_channels"] = list(self.tiny_channels)
        return d


def _weights_path() -> Path:
    candidates = []
    if os.environ.get(WEIGHTS_ENV):
        candidates.append(Path(os.environ[WEIGHTS_ENV]) / RESNET18_FILE)
    torch_home = Path(os.environ.get("TORCH_HOME", Path.home() / ".cache" / "torch"))
    candidates.append(torch_home / "hub" / "checkpoints" / RESNET18_FILE)
    for c in candidates:
        if c.is_file():
            return c
    raise ConfigError(
        "ImageNet weights for resnet18 were requested but not found offline. Looked in: "
        + ", ".join(str(c) for c in candidates)
        + f". Download {RESNET18_FILE} from the torchvision model zoo into ${WEIGHTS_ENV}, "
        "or set pretrained: false (random init) or backbone: tiny."
    )


def _tiny_backbone(channels: Sequence[int]) -> tuple[nn.Module, int]:
    layers: list[nn.Module] = []
    c_in = 3
    for c in channels:
        layers += [
            nn.Conv2d(c_in, c, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
        ]
        c_in = c
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), c_in


def _resnet18_backbone(pretrained: bool) -> tuple[nn.Module, int]:
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    if pretrained:
        state = torch.load(_weights_path(), map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    width = net.fc.in_features
    net.fc = nn.Identity()
    return net, width


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        if config.backbone == "resnet18":
            self.backbone, width = _resnet18_backbone(config.pretrained)
        else:
            self.backbone, width = _tiny_backbone(config.tiny_channels)
        fc: list[nn.Module] = []
        for i, w in enumerate(config.fc_widths):
            fc.append(nn.Linear(width, w))
            if i < len(config.fc_widths) - 1 or config.final_relu:
                fc.append(nn.ReLU(inplace=True))
            width = w
        self.fc = nn.Sequential(*fc)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.backbone(x))


class GradeNetwork(nn.Module):
    """Encoder followed by a grade head, trained end to end or with a frozen encoder."""

    def __init__(self, encoder: Encoder, head: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


def build_encoder(config: EncoderConfig = EncoderConfig(), seed: int = 0) -> Encoder:
    """Construct the encoder; randomly initialized layers are seeded by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = Encoder(config)
    return enc.eval()


def fingerprint(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, keys in sorted order."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def as_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    if isinstance(images, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    images = list(images)
    if images and isinstance(images[0], PreprocessedImage):
        return stack(images)
    return torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32) for im in images]))


@torch.no_grad()
def embed(encoder: Encoder, images, batch_size: int = 64) -> np.ndarray:
    """N x D float32 embeddings; runs the encoder in eval mode."""
    size = encoder.config.input_size
    if isinstance(images, (list, tuple)) and not images:
        images = torch.zeros(0, 3, size, size)
    x = as_batch(images).float()
    if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (size, size):
        raise DataError(f"expected a batch of 3x{size}x{size} images, got shape {tuple(x.shape)}")
    was_training = encoder.training
    encoder.eval()
    try:
        out = [encoder(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    finally:
        encoder.train(was_training)
    if not out:
        return np.zeros((0, encoder.embedding_dim), dtype=np.float32)
    return torch.cat(out).numpy()


def save_checkpoint(path: str | Path, encoder: Encoder, head: nn.Module | None = None, **extra) -> Path:
    """Self-describing checkpoint: architecture config, all tensors, and fingerprints."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "automac-checkpoint/1",
        "config": encoder.config.to_dict(),
        "encoder": encoder.state_dict(),
        "fingerprint": fingerprint(encoder),
        **extra,
    }
    if head is not None:
        payload["head"] = head.state_dict()
        payload["head_fingerprint"] = fingerprint(head)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[Encoder, dict]:
    """Load an encoder checkpoint and verify its fingerprint. Returns ``(encoder, payload)``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = dict(payload["config"])
    cfg["pretrained"] = False  # weights come from the checkpoint
    enc = Encoder(EncoderConfig(**cfg))
    enc.load_state_dict(payload["encoder"])
    enc.config = EncoderConfig(**payload["config"])
    enc.eval()
    if fingerprint(enc) != payload["fingerprint"]:
        raise ContractError(f"{path}: encoder fingerprint does not match stored value")
    return enc, payload
