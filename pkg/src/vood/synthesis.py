"""Virtual-outlier construction from in-distribution images.

Saliency is the input gradient of the true-class logit. Its top-magnitude
entries mark the invariant (class-bearing) region; outliers perturb that
region while leaving the rest of the image untouched.

Models passed here must treat batch samples independently (no batch-coupled
layers in training mode), because per-sample input gradients are obtained
from one backward pass over the summed target logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import torch
import torch.nn.functional as F

from .core import AlphaSchedule, alpha_at
from .errors import EmptyMask, InvalidPercentage, NonDifferentiableModel, ShapeMismatch

METHODS = ("grad_add", "grad_sub", "invariant_shuffle", "random_shuffle",
           "gaussian_noise", "identity")
Granularity = Literal["element", "pixel"]


@dataclass
class SynthesisConfig:
    method: str = "grad_add"
    p_inv: float = 10.0
    alpha: AlphaSchedule = field(default_factory=lambda: AlphaSchedule.constant(10.0))
    noise_scale: float = 0.1
    mask_granularity: Granularity = "element"
    saliency_target: Literal["logit", "prob"] = "logit"
    # "epoch": the schedule is indexed by epoch; "step": by optimizer step
    alpha_granularity: Literal["epoch", "step"] = "epoch"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown synthesis method {self.method!r}; expected one of {METHODS}")
        if self.mask_granularity not in ("element", "pixel"):
            raise ValueError(f"unknown mask granularity {self.mask_granularity!r}")
        if self.saliency_target not in ("logit", "prob"):
            raise ValueError(f"unknown saliency target {self.saliency_target!r}")
        if self.alpha_granularity not in ("epoch", "step"):
            raise ValueError(f"unknown alpha granularity {self.alpha_granularity!r}")
        if self.method.endswith("shuffle") or self.method.startswith("grad_"):
            _check_percentage(self.p_inv)
        if self.method == "gaussian_noise" and self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


def _check_percentage(p_inv: float) -> None:
    if not (0 < p_inv <= 100) or math.isnan(p_inv):
        raise InvalidPercentage(f"p_inv must lie in (0, 100], got {p_inv}")


def keep_count(p_inv: float, n: int) -> int:
    """Number of entries kept for a top-``p_inv``% selection over ``n`` entries."""
    _check_percentage(p_inv)
    # round() absorbs binary noise such as 0.1 * 30 = 3.0000000000000004
    return max(1, min(n, math.ceil(round(p_inv * n / 100.0, 9))))


def topk_mask(scores: torch.Tensor, p_inv: float) -> torch.Tensor:
    """Per-row boolean mask of entries whose score is >= the k-th largest score.

    ``scores`` is [B, ...]; selection is over everything but the first axis.
    With ``k = ceil(p_inv/100 * n)``, exactly k entries survive when scores are
    distinct; tied entries at the threshold are all kept.
    """
    flat = scores.reshape(scores.shape[0], -1)
    n = flat.shape[1]
    k = keep_count(p_inv, n)
    # k-th largest == (n - k + 1)-th smallest
    thresh = flat.kthvalue(n - k + 1, dim=1, keepdim=True).values
    return (flat >= thresh).reshape(scores.shape)


def compute_saliency(model: torch.nn.Module, x: torch.Tensor, y: torch.Tensor,
                     target: str = "logit") -> torch.Tensor:
    """Gradient of each sample's true-class logit (or probability) w.r.t. its input.

    Parameters see no gradient from this pass; the result is detached.
    """
    if x.dim() != 4:
        raise ShapeMismatch(f"expected [B, C, H, W] images, got shape {tuple(x.shape)}")
    xg = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        out = model(xg)
        if not isinstance(out, torch.Tensor) or not out.requires_grad:
            raise NonDifferentiableModel("model output carries no gradient w.r.t. the input")
        if target == "prob":
            out = F.softmax(out, dim=1)
        picked = out.gather(1, y.long().view(-1, 1)).sum()
        (grad,) = torch.autograd.grad(picked, xg, allow_unused=True)
    if grad is None:
        raise NonDifferentiableModel("model output does not depend on the input")
    return grad.detach()


def pixel_scores(G: torch.Tensor) -> torch.Tensor:
    """Reduce [B, C, H, W] saliency to [B, H, W] by log of the channel sum of exp(G).

    The log keeps the ordering of sum(exp(G)) while avoiding overflow.
    """
    return torch.logsumexp(G, dim=1)


def sparsify(G: torch.Tensor, p_inv: float, granularity: Granularity = "element"):
    """Zero all but the top ``p_inv``% saliency entries of each image.

    Returns ``(G_inv, mask)``. ``mask`` is [B, C, H, W] for element granularity
    (ranked by |G|) and [B, H, W] for pixel granularity (ranked by the channel
    reduction in :func:`pixel_scores`).
    """
    _check_percentage(p_inv)
    if granularity == "element":
        mask = topk_mask(G.abs(), p_inv)
        return G * mask, mask
    if granularity == "pixel":
        mask = topk_mask(pixel_scores(G), p_inv)
        return G * mask.unsqueeze(1), mask
    raise ValueError(f"unknown granularity {granularity!r}")


def synthesize_grad(x: torch.Tensor, G_inv: torch.Tensor, alpha: float, sign: int = 1) -> torch.Tensor:
    """``x + sign * alpha * G_inv``; deliberately not clamped to the pixel range."""
    if x.shape != G_inv.shape:
        raise ShapeMismatch(f"image {tuple(x.shape)} vs gradient {tuple(G_inv.shape)}")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return x + (sign * alpha) * G_inv


def synthesize_shuffle(x: torch.Tensor, mask: torch.Tensor,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """Permute whole pixels (all channels together) among the masked locations.

    ``mask`` is a [B, H, W] boolean map. Unmasked pixels are copied unchanged.
    """
    if mask.dim() != 3 or mask.shape != (x.shape[0], *x.shape[2:]):
        raise ShapeMismatch(f"pixel mask {tuple(mask.shape)} does not fit images {tuple(x.shape)}")
    b, c = x.shape[:2]
    flat = x.reshape(b, c, -1)
    out = flat.clone()
    mflat = mask.reshape(b, -1)
    for i in range(b):
        idx = mflat[i].nonzero().squeeze(1)
        if idx.numel() == 0:
            raise EmptyMask(f"image {i} has no masked pixels")
        perm = torch.randperm(idx.numel(), generator=generator)
        out[i][:, idx] = flat[i][:, idx[perm]]
    return out.reshape(x.shape)


def random_pixel_mask(shape: tuple[int, int, int], p_inv: float,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniformly random [B, H, W] mask holding ``keep_count(p_inv, H*W)`` pixels per image."""
    b, h, w = shape
    k = keep_count(p_inv, h * w)
    scores = torch.rand(b, h * w, generator=generator)
    idx = scores.argsort(dim=1, descending=True)[:, :k]
    mask = torch.zeros(b, h * w, dtype=torch.bool)
    mask.scatter_(1, idx, True)
    return mask.reshape(b, h, w)


def synthesize_gaussian(x: torch.Tensor, noise_scale: float,
                        generator: torch.Generator | None = None) -> torch.Tensor:
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x + noise_scale * eps.to(x.device)


def synthesize(model: torch.nn.Module, x: torch.Tensor, y: torch.Tensor,
               cfg: SynthesisConfig, step: int,
               generator: torch.Generator | None = None) -> torch.Tensor:
    """Build a detached batch of virtual outliers from ``(x, y)``.

    ``step`` indexes the alpha schedule (epoch or optimizer step, per config).
    """
    method = cfg.method
    if method == "identity":
        return x.detach()
    if method == "gaussian_noise":
        return synthesize_gaussian(x.detach(), cfg.noise_scale, generator)
    if method == "random_shuffle":
        mask = random_pixel_mask((x.shape[0], *x.shape[2:]), cfg.p_inv, generator)
        return synthesize_shuffle(x.detach(), mask, generator)

    G = compute_saliency(model, x, y, target=cfg.saliency_target)
    if method == "invariant_shuffle":
        _, mask = sparsify(G, cfg.p_inv, "pixel")
        return synthesize_shuffle(x.detach(), mask, generator)
    G_inv, _ = sparsify(G, cfg.p_inv, cfg.mask_granularity)
    sign = 1 if method == "grad_add" else -1
    return synthesize_grad(x.detach(), G_inv, alpha_at(cfg.alpha, step), sign)
