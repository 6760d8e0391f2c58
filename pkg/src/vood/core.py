"""Feature standardization, the joint objective and the alpha schedule.

Everything here is a pure function of its inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateFeature, ShapeMismatch, StepOutOfRange

MIN_FEATURE_STD = 1e-12


@dataclass(frozen=True)
class StandardizedFeature:
    values: np.ndarray
    sigma: float

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def standardize_features(h: torch.Tensor, sigma: float) -> torch.Tensor:
    """Z-score each row of ``h`` over its last axis and rescale to ``sigma``.

    Uses the sample standard deviation (m - 1 denominator), so every output
    row has Euclidean norm ``sigma * sqrt(m - 1)`` and zero mean.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    m = h.shape[-1]
    if m < 2:
        raise ShapeMismatch(f"feature dimension must be >= 2, got {m}")
    centered = h - h.mean(dim=-1, keepdim=True)
    std = h.std(dim=-1, keepdim=True, correction=1)
    if bool((std < MIN_FEATURE_STD).any()):
        raise DegenerateFeature("feature vector with zero sample standard deviation")
    return centered / std * sigma


def standardize(h, sigma: float) -> StandardizedFeature:
    """Standardize a single feature vector (or a stack of them) in float64."""
    t = torch.as_tensor(np.asarray(h, dtype=np.float64))
    out = standardize_features(t, sigma)
    return StandardizedFeature(values=out.numpy(), sigma=float(sigma))


def l2_normalize_features(h: torch.Tensor, sigma: float) -> torch.Tensor:
    """Ablation comparator: rows rescaled to norm ``sigma``."""
    norm = h.norm(dim=-1, keepdim=True)
    if bool((norm < MIN_FEATURE_STD).any()):
        raise DegenerateFeature("feature vector with zero norm")
    return h / norm * sigma


@dataclass
class LossBreakdown:
    """Terms of the joint objective; tensors so ``total`` can be backpropagated."""

    ce: torch.Tensor
    kl: torch.Tensor
    lam: float
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"ce": float(self.ce), "kl": float(self.kl), "lambda": self.lam,
                "total": float(self.total)}


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; ``labels`` is one-hot [B, C] or integer [B]."""
    if labels.dim() == 1:
        return F.cross_entropy(logits, labels.long())
    return -(labels.to(logits.dtype) * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


KLDirection = Literal["u||p", "p||u"]


def kl_to_uniform(logits: torch.Tensor, direction: KLDirection = "u||p") -> torch.Tensor:
    """Mean over rows of the KL divergence between softmax(logits) and Uniform(C).

    ``"u||p"`` is KL(U || p), whose logit gradient is exactly ``p - 1/C``
    (outlier-exposure form). ``"p||u"`` is KL(p || U) = sum p log p + log C,
    whose logit gradient is ``p * (log p - sum p log p)`` instead.
    """
    num_classes = logits.shape[1]
    logp = F.log_softmax(logits, dim=1)
    if direction == "u||p":
        return (-math.log(num_classes) - logp.mean(dim=1)).mean()
    if direction == "p||u":
        return (logp.exp() * (logp + math.log(num_classes))).sum(dim=1).mean()
    raise ValueError(f"unknown KL direction {direction!r}")


def loss_total(logits_id, labels, logits_ood, lam: float,
               kl_direction: KLDirection = "u||p") -> LossBreakdown:
    """Cross-entropy on ID logits plus ``lam`` times KL-to-uniform on outlier logits.

    Both terms are batch means, so ``lam`` does not depend on batch size.
    """
    logits_id, labels, logits_ood = map(_as_tensor, (logits_id, labels, logits_ood))
    if logits_id.dim() != 2 or logits_ood.dim() != 2:
        raise ShapeMismatch("logits must be rank 2 [batch, classes]")
    num_classes = logits_id.shape[1]
    if num_classes < 2:
        raise ShapeMismatch("need at least two classes")
    if logits_ood.shape[1] != num_classes:
        raise ShapeMismatch(f"class count differs: {num_classes} vs {logits_ood.shape[1]}")
    if labels.dim() == 2 and labels.shape != logits_id.shape:
        raise ShapeMismatch(f"labels {tuple(labels.shape)} vs logits {tuple(logits_id.shape)}")
    if labels.dim() == 1 and labels.shape[0] != logits_id.shape[0]:
        raise ShapeMismatch("label count differs from batch size")
    ce = cross_entropy(logits_id, labels)
    kl = kl_to_uniform(logits_ood, kl_direction)
    return LossBreakdown(ce=ce, kl=kl, lam=float(lam), total=ce + lam * kl)


def analytic_logit_gradient(p_id, y, p_ood, num_classes: int) -> np.ndarray:
    """Closed-form per-logit gradients: row 0 is ``p - y``, row 1 is ``p' - 1/C``."""
    p_id, y, p_ood = (np.asarray(a, dtype=np.float64) for a in (p_id, y, p_ood))
    for name, a in (("p_id", p_id), ("y", y), ("p_ood", p_ood)):
        if a.shape != (num_classes,):
            raise ShapeMismatch(f"{name} has shape {a.shape}, expected ({num_classes},)")
    return np.stack([p_id - y, p_ood - 1.0 / num_classes])


@dataclass(frozen=True)
class AlphaSchedule:
    start: float
    end: float | None = None
    total_steps: int = 1
    mode: Literal["constant", "linear"] = "constant"

    def __post_init__(self):
        if self.mode not in ("constant", "linear"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.mode == "linear" and self.end is None:
            raise ValueError("linear schedule needs an end value")

    @classmethod
    def constant(cls, value: float) -> "AlphaSchedule":
        return cls(start=value, end=value, total_steps=1, mode="constant")

    @classmethod
    def linear(cls, start: float, end: float, total_steps: int) -> "AlphaSchedule":
        return cls(start=start, end=end, total_steps=total_steps, mode="linear")

    def __call__(self, step: int) -> float:
        return alpha_at(self, step)


def alpha_at(schedule: AlphaSchedule, step: int) -> float:
    if schedule.mode == "constant":
        if step < 0:
            raise StepOutOfRange(f"negative step {step}")
        return float(schedule.start)
    if not 0 <= step < schedule.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {schedule.total_steps})")
    if schedule.total_steps == 1:
        return float(schedule.start)
    frac = step / (schedule.total_steps - 1)
    return float(schedule.start + (schedule.end - schedule.start) * frac)
