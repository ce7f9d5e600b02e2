"""Loss functions for the three training arms."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from automac.types import ConfigError, DataError

VARIANTS = ("supcon_out", "ntxent", "cross_entropy")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    variant: str = "supcon_out"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def supcon_loss(embeddings, labels, temperature: float = 0.07) -> torch.Tensor:
    """Supervised contrastive loss with the positive average outside the log.

    Rows are L2-normalized here. For anchor i with positives P(i) (same label,
    excluding i) the term is -mean_{p in P(i)} log softmax_{a != i}(z_i . z_a / t)[p];
    the loss is the mean over anchors.
    """
    z = _as_tensor(embeddings)
    y = _as_tensor(labels).long().reshape(-1)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise DataError(f"embeddings {tuple(z.shape)} and labels {tuple(y.shape)} disagree")
    n = z.shape[0]
    if n < 2:
        raise DataError("supcon_loss needs at least two samples")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    z = F.normalize(z, dim=1)
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    pos = (y[:, None] == y[None, :]) & ~eye
    n_pos = pos.sum(1)
    if torch.any(n_pos == 0):
        bad = y[n_pos == 0][0].item()
        raise DataError(f"label {bad} has no positive partner in the batch")
    logits = (z @ z.T) / temperature
    logits = logits.masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    per_anchor = -(log_prob.masked_fill(~pos, 0.0).sum(1)) / n_pos
    return per_anchor.mean()


def ntxent_loss(view_a, view_b, temperature: float = 0.07) -> torch.Tensor:
    """Normalized-temperature cross entropy over 2N views; each view's positive is its pair."""
    a = _as_tensor(view_a)
    b = _as_tensor(view_b)
    if a.shape != b.shape or a.ndim != 2:
        raise DataError(f"view shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    n = a.shape[0]
    z = F.normalize(torch.cat([a, b]), dim=1)
    logits = (z @ z.T) / temperature
    logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool, device=z.device), float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    return F.cross_entropy(logits, target)


def cross_entropy_loss(logits, labels) -> torch.Tensor:
    """Mean negative log-softmax of the true grade."""
    z = _as_tensor(logits)
    y = _as_tensor(labels).long().reshape(-1)
    if z.ndim != 2 or z.shape[0] != y.shape[0] or z.shape[0] < 1:
        raise DataError(f"logits {tuple(z.shape)} and labels {tuple(y.shape)} disagree")
    if torch.any((y < 0) | (y >= z.shape[1])):
        raise DataError(f"labels must lie in 0..{z.shape[1] - 1}")
    return F.cross_entropy(z, y)


def make_loss(config: LossConfig):
    if config.variant == "supcon_out":
        return lambda z, y: supcon_loss(z, y, config.temperature)
    if config.variant == "ntxent":
        return lambda a, b: ntxent_loss(a, b, config.temperature)
    return cross_entropy_loss

