"""Post-hoc OOD scores: MSP, temperature scaling, energy, ODIN and i-ODIN.

All scorers return higher values for inputs that look more in-distribution.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Literal

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonDifferentiableModel
from .metrics import auroc
from .synthesis import _check_percentage, topk_mask

MaskMode = Literal["none", "topk_percent", "top_channel"]
ODIN_EPSILONS = (0.0014, 0.0028, 0.0042, 0.0056, 0.0070, 0.0084, 0.0098)
ODIN_TEMPERATURES = (1.0, 10.0, 100.0, 1000.0)
SCORE_COLUMNS = ("sample_id", "label", "postprocessor", "score")


@dataclass
class OdinConfig:
    temperature: float = 1000.0
    epsilon: float = 0.0014
    mask_mode: MaskMode = "none"
    p_inv: float = 10.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.mask_mode not in ("none", "topk_percent", "top_channel"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.mask_mode == "topk_percent":
            _check_percentage(self.p_inv)


@dataclass
class ScoreBatch:
    scores: np.ndarray
    postprocessor: str
    convention: str = "higher_is_id"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise FloatingPointError(f"{self.postprocessor}: non-finite scores")

    def __len__(self) -> int:
        return len(self.scores)


def _batches(x: torch.Tensor, batch_size: int | None):
    if batch_size is None:
        yield x
        return
    for i in range(0, len(x), batch_size):
        yield x[i:i + batch_size]


@torch.no_grad()
def _logits(model, x: torch.Tensor, batch_size: int | None) -> torch.Tensor:
    model.eval()
    return torch.cat([model(xb) for xb in _batches(x, batch_size)])


def score_msp(model, x: torch.Tensor, batch_size: int | None = 256) -> ScoreBatch:
    p = F.softmax(_logits(model, x, batch_size), dim=1)
    return ScoreBatch(p.max(dim=1).values.numpy(), "msp")


def score_tempscale(model, x: torch.Tensor, temperature: float = 1000.0,
                    batch_size: int | None = 256) -> ScoreBatch:
    p = F.softmax(_logits(model, x, batch_size) / temperature, dim=1)
    return ScoreBatch(p.max(dim=1).values.numpy(), "tempscale")


def score_energy(model, x: torch.Tensor, temperature: float = 1.0,
                 batch_size: int | None = 256) -> ScoreBatch:
    """Negative free energy ``T * logsumexp(logits / T)``."""
    z = _logits(model, x, batch_size)
    return ScoreBatch((temperature * torch.logsumexp(z / temperature, dim=1)).numpy(), "energy")


def perturbation_mask(grad: torch.Tensor, cfg: OdinConfig) -> torch.Tensor | None:
    """Where the ODIN step is applied; None means everywhere."""
    if cfg.mask_mode == "none":
        return None
    if cfg.mask_mode == "topk_percent":
        return topk_mask(grad.abs(), cfg.p_inv)
    # one channel per pixel: the one with the largest gradient magnitude
    best = grad.abs().argmax(dim=1, keepdim=True)
    return torch.zeros_like(grad, dtype=torch.bool).scatter_(1, best, True)


def odin_perturb(model, x: torch.Tensor, cfg: OdinConfig) -> torch.Tensor:
    """``x - eps * sign(-grad log S(x; T))``, restricted to the configured mask."""
    xg = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        z = model(xg)
        if not z.requires_grad:
            raise NonDifferentiableModel("model output carries no gradient w.r.t. the input")
        log_s = F.log_softmax(z / cfg.temperature, dim=1).max(dim=1).values
        (grad,) = torch.autograd.grad(log_s.sum(), xg, allow_unused=True)
    if grad is None:
        raise NonDifferentiableModel("model output does not depend on the input")
    step = torch.sign(-grad)
    mask = perturbation_mask(grad, cfg)
    if mask is not None:
        step = step * mask
    return x.detach() - cfg.epsilon * step


def score_odin(model, x: torch.Tensor, cfg: OdinConfig | None = None,
               batch_size: int | None = 256) -> ScoreBatch:
    cfg = cfg or OdinConfig()
    model.eval()
    out = []
    for xb in _batches(x, batch_size):
        x_tilde = odin_perturb(model, xb, cfg)
        with torch.no_grad():
            p = F.softmax(model(x_tilde) / cfg.temperature, dim=1)
        out.append(p.max(dim=1).values)
    name = "odin" if cfg.mask_mode == "none" else f"iodin_{cfg.mask_mode}"
    return ScoreBatch(torch.cat(out).numpy(), name)


@dataclass
class OdinGrid:
    temperatures: tuple[float, ...] = ODIN_TEMPERATURES
    epsilons: tuple[float, ...] = ODIN_EPSILONS
    mask_mode: MaskMode = "none"
    p_inv: float = 10.0

    def configs(self) -> Iterable[OdinConfig]:
        # ascending (epsilon, T) so strict improvement keeps the smallest on ties
        for eps, t in itertools.product(sorted(self.epsilons), sorted(self.temperatures)):
            yield OdinConfig(temperature=t, epsilon=eps, mask_mode=self.mask_mode, p_inv=self.p_inv)


def tune_odin(model, x_id_val: torch.Tensor, x_ood_val: torch.Tensor,
              grid: OdinGrid | None = None) -> OdinConfig:
    """Exhaustive grid search for the highest validation AUROC.

    Ties go to the smallest epsilon, then the smallest temperature.
    """
    grid = grid or OdinGrid()
    best, best_auc = None, -np.inf
    for cfg in grid.configs():
        auc = auroc(score_odin(model, x_id_val, cfg).scores, score_odin(model, x_ood_val, cfg).scores)
        if auc > best_auc:
            best, best_auc = cfg, auc
    if best is None:
        raise ValueError("empty ODIN grid")
    return best


@dataclass
class PostprocessorSet:
    """Named scorers resolved from identifiers such as ``msp`` or ``iodin_channel``."""

    odin: OdinConfig = field(default_factory=OdinConfig)
    temperature: float = 1000.0

    def get(self, name: str) -> Callable[[torch.nn.Module, torch.Tensor], ScoreBatch]:
        if name == "msp":
            return score_msp
        if name == "energy":
            return score_energy
        if name == "tempscale":
            return lambda m, x: _renamed(score_tempscale(m, x, self.temperature), name)
        modes = {"odin": "none", "iodin": "topk_percent", "iodin_channel": "top_channel"}
        if name in modes:
            cfg = replace(self.odin, mask_mode=modes[name])
            return lambda m, x: _renamed(score_odin(m, x, cfg), name)
        raise KeyError(f"unknown postprocessor {name!r}; known: {POSTPROCESSORS}")


POSTPROCESSORS = ("msp", "tempscale", "energy", "odin", "iodin", "iodin_channel")


def _renamed(batch: ScoreBatch, name: str) -> ScoreBatch:
    batch.postprocessor = name
    return batch


def write_scores(path: str | Path, rows: Iterable[tuple[str, str, str, float]]) -> Path:
    """Columns: sample_id, label (ID/OOD or set name), postprocessor, score."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCORE_COLUMNS)
        for sid, label, pp, s in rows:
            w.writerow([sid, label, pp, repr(float(s))])
    return path


def read_scores(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["score"] = float(r["score"])
    return rows
