"""Classifier g = head o standardize o backbone, joint-objective training, checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Literal

import torch
from torch import nn

from .core import AlphaSchedule, l2_normalize_features, loss_total, standardize_features
from .errors import NumericFailure
from .synthesis import SynthesisConfig, synthesize

log = logging.getLogger(__name__)

FeatureMode = Literal["standardized", "raw", "l2_normalized"]
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ClassifierConfig:
    num_classes: int = 2
    feature_dim: int = 64
    sigma: float = 0.5
    backbone: str = "small_cnn"
    in_channels: int = 3
    width: int = 32
    feature_mode: FeatureMode = "standardized"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; available: {sorted(BACKBONES)}")
        if self.feature_mode not in ("standardized", "raw", "l2_normalized"):
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")


@dataclass
class OptimizerConfig:
    name: Literal["sgd", "adam"] = "sgd"
    lr: float = 0.05
    fc_lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # only takes effect when momentum > 0
    nesterov: bool = True
    epochs: int = 10
    batch_size: int = 64
    cosine: bool = True

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.lr <= 0 or (self.fc_lr is not None and self.fc_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def small_cnn(cfg: ClassifierConfig) -> nn.Module:
    """Three conv blocks; the feature is the global-average-pooled last block
    (``feature_dim`` channels), as in ResNet-style extractors.

    No batch-coupled normalization, so per-sample input gradients are exact.
    """
    w = cfg.width
    return nn.Sequential(
        nn.Conv2d(cfg.in_channels, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(2 * w, cfg.feature_dim, 3, padding=1), nn.ReLU(),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(),
    )


def tiny_cnn(cfg: ClassifierConfig) -> nn.Module:
    """One conv layer; small enough for finite-difference checks."""
    return nn.Sequential(
        nn.Conv2d(cfg.in_channels, 4, 3, padding=1), nn.Tanh(),
        nn.AdaptiveAvgPool2d(2), nn.Flatten(),
        nn.Linear(16, cfg.feature_dim),
    )


BACKBONES = {"small_cnn": small_cnn, "tiny_cnn": tiny_cnn}


@dataclass
class ForwardOutput:
    features: torch.Tensor
    std_features: torch.Tensor
    logits: torch.Tensor


class Classifier(nn.Module):
    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = BACKBONES[cfg.backbone](cfg)
        self.fc = nn.Linear(cfg.feature_dim, cfg.num_classes)

    def transform_features(self, h: torch.Tensor, mode: FeatureMode | None = None) -> torch.Tensor:
        mode = mode or self.cfg.feature_mode
        if mode == "standardized":
            return standardize_features(h, self.cfg.sigma)
        if mode == "l2_normalized":
            return l2_normalize_features(h, self.cfg.sigma)
        if mode == "raw":
            return h
        raise ValueError(f"unknown feature mode {mode!r}")

    def forward_output(self, x: torch.Tensor, mode: FeatureMode | None = None) -> ForwardOutput:
        h = self.backbone(x)
        hs = self.transform_features(h, mode)
        return ForwardOutput(features=h, std_features=hs, logits=self.fc(hs))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.transform_features(self.backbone(x)))


def forward(model: Classifier, x: torch.Tensor, mode: FeatureMode | None = None) -> ForwardOutput:
    return model.forward_output(x, mode)


def make_optimizer(model: Classifier, opt: OptimizerConfig) -> torch.optim.Optimizer:
    fc_params = list(model.fc.parameters())
    fc_ids = {id(p) for p in fc_params}
    body = [p for p in model.parameters() if id(p) not in fc_ids]
    groups = [{"params": body, "lr": opt.lr},
              {"params": fc_params, "lr": opt.fc_lr if opt.fc_lr is not None else opt.lr}]
    if opt.name == "sgd":
        return torch.optim.SGD(groups, lr=opt.lr, momentum=opt.momentum,
                               weight_decay=opt.weight_decay, nesterov=opt.nesterov and opt.momentum > 0)
    if opt.name == "adam":
        return torch.optim.Adam(groups, lr=opt.lr, weight_decay=opt.weight_decay)
    raise ValueError(f"unknown optimizer {opt.name!r}")


def make_scheduler(optimizer: torch.optim.Optimizer, opt: OptimizerConfig):
    """Per-epoch cosine decay, or None."""
    if not opt.cosine:
        return None
    return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(opt.epochs, 1))


@dataclass
class EpochStats:
    epoch: int
    ce: float
    kl: float
    accuracy: float
    alpha: float | None
    steps: int

    def as_row(self) -> dict:
        return asdict(self)


def train_epoch(model: Classifier, loader: Iterable, cfg: SynthesisConfig, lam: float,
                optimizer: torch.optim.Optimizer, epoch: int = 0, *,
                generator: torch.Generator | None = None, global_step: int = 0,
                kl_direction: str = "u||p", norm_check_every: int = 50) -> EpochStats:
    """One pass over ``loader`` minimizing CE(x) + lam * KL(x') per batch.

    Outliers are synthesized from the pre-update model and detached. With
    ``lam == 0`` the outlier branch is skipped entirely (kl reported as 0),
    which makes that configuration plain cross-entropy training.
    """
    model.train()
    ce_sum = kl_sum = 0.0
    correct = seen = 0
    step = global_step
    alpha = None
    for b, (x, y) in enumerate(loader):
        sched_step = epoch if cfg.alpha_granularity == "epoch" else step
        if lam != 0:
            x_out = synthesize(model, x, y, cfg, sched_step, generator)
            if cfg.method.startswith("grad_"):
                alpha = cfg.alpha(sched_step)
            out = model.forward_output(torch.cat([x, x_out]))
            logits_id, logits_ood = out.logits[: len(x)], out.logits[len(x):]
            parts = loss_total(logits_id, y, logits_ood, lam, kl_direction)
            loss, ce, kl = parts.total, parts.ce, parts.kl
        else:
            out = model.forward_output(x)
            logits_id = out.logits
            ce = loss = nn.functional.cross_entropy(logits_id, y)
            kl = torch.zeros(())
        if not torch.isfinite(loss):
            raise NumericFailure(f"non-finite loss at epoch {epoch}, batch {b}")
        if norm_check_every and b % norm_check_every == 0 and model.cfg.feature_mode == "standardized":
            expected = model.cfg.sigma * math.sqrt(model.cfg.feature_dim - 1)
            norms = out.std_features.detach().norm(dim=1)
            assert torch.allclose(norms, torch.full_like(norms, expected), rtol=1e-4), \
                "standardized feature norm drifted from sigma*sqrt(m-1)"
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        step += 1
        n = len(y)
        ce_sum += float(ce.detach()) * n
        kl_sum += float(kl.detach()) * n
        correct += int((logits_id.detach().argmax(1) == y).sum())
        seen += n
    seen = max(seen, 1)
    return EpochStats(epoch=epoch, ce=ce_sum / seen, kl=kl_sum / seen,
                      accuracy=100.0 * correct / seen, alpha=alpha, steps=step - global_step)


@torch.no_grad()
def evaluate_accuracy(model: Classifier, loader: Iterable) -> float:
    model.eval()
    correct = seen = 0
    for x, y in loader:
        correct += int((model(x).argmax(1) == y).sum())
        seen += len(y)
    return 100.0 * correct / max(seen, 1)


def save_checkpoint(path: str | Path, model: Classifier, synthesis: SynthesisConfig,
                    optimizer: torch.optim.Optimizer | None = None, scheduler=None,
                    **metadata) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "state_dict": model.state_dict(),
        "classifier": asdict(model.cfg),
        "synthesis": synthesis_to_dict(synthesis),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "metadata": metadata,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[Classifier, dict]:
    """Return the restored model (eval mode) and the raw checkpoint dict."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    model = Classifier(ClassifierConfig(**payload["classifier"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def synthesis_to_dict(cfg: SynthesisConfig) -> dict:
    d = asdict(cfg)
    d["alpha"] = asdict(cfg.alpha)
    return d


def synthesis_from_dict(d: dict) -> SynthesisConfig:
    d = dict(d)
    alpha = d.pop("alpha", None)
    fields = {f.name for f in dataclasses.fields(SynthesisConfig)}
    unknown = set(d) - fields
    if unknown:
        raise ValueError(f"unknown synthesis fields {sorted(unknown)}")
    if alpha is not None:
        d["alpha"] = alpha if isinstance(alpha, AlphaSchedule) else AlphaSchedule(**alpha)
    return SynthesisConfig(**d)
