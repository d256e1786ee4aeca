"""Training objectives and the online-CAM auxiliary head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .network import Mode, ModelVariant
from .volume_io import ConfigurationError

PROB_EPS = 1e-8


@dataclass
class LossWeights:
    cls: float = 1.0
    clst: float = 0.8
    sep: float = 0.08
    map: float = 0.5
    oc: float = 0.05
    l1: float = 0.01
    gamma: float = 2.0
    lse_r: float = 10.0

    def __post_init__(self):
        if any(v < 0 for v in vars(self).values()):
            raise ConfigurationError("loss weights must be non-negative")

    def coefficient(self, term: str) -> float:
        return getattr(self, term)


@dataclass
class LossBreakdown:
    stage: int
    terms: dict = field(default_factory=dict)
    total: Optional[torch.Tensor] = None

    def values(self) -> dict:
        return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in self.terms.items()}

    def to_json(self, step: int) -> str:
        return json.dumps({"step": step, "stage": self.stage, "terms": self.values(), "total": float(self.total.detach() if torch.is_tensor(self.total) else self.total)}, sort_keys=True)


def lse_pool(x: torch.Tensor, r: float = 10.0, dims=(-3, -2, -1)) -> torch.Tensor:
    """Log-mean-exp pooling over ``dims`` with sharpness ``r``."""
    n = 1
    for d in dims:
        n *= x.shape[d]
    m = x.amax(dim=dims, keepdim=True).detach()
    z = torch.exp(r * (x - m)).sum(dim=dims, keepdim=True)
    out = m + torch.log(z / n) / r
    for d in sorted((d % x.dim() for d in dims), reverse=True):
        out = out.squeeze(d)
    return out


def online_cam_logits(i: torch.Tensor, w_convmap: torch.Tensor, w_cls: torch.Tensor, r: float = 10.0) -> torch.Tensor:
    """``w_convmap`` is the (K, E, 1, 1, 1) weight of the final mapping conv, used live."""
    pooled = lse_pool(i, r)  # B,E
    k, e = w_convmap.shape[:2]
    return pooled @ w_convmap.reshape(k, e).t() @ w_cls


def online_cam_probability(i: torch.Tensor, w_convmap: torch.Tensor, w_cls: torch.Tensor, r: float = 10.0) -> torch.Tensor:
    return torch.softmax(online_cam_logits(i, w_convmap, w_cls, r), dim=-1)


def _sample_weights(labels: torch.Tensor, class_counts, dtype) -> torch.Tensor:
    counts = torch.as_tensor(class_counts, dtype=dtype)
    if torch.any(counts[labels] <= 0):
        raise ConfigurationError("class counts must be positive for every class in the batch")
    return 1.0 / counts[labels]


def classification_loss(p: torch.Tensor, labels: torch.Tensor, class_counts, gamma: float = 2.0) -> torch.Tensor:
    """Class-weighted focal loss: sum_i (1/N^c) (1 - p_c)^gamma (-log p_c)."""
    pc = p.gather(1, labels.view(-1, 1)).squeeze(1).clamp(PROB_EPS, 1 - PROB_EPS)
    w = _sample_weights(labels, class_counts, pc.dtype)
    return (w * (1 - pc) ** gamma * -torch.log(pc)).sum()


def focal_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor, class_counts, gamma: float = 2.0) -> torch.Tensor:
    """Same value as ``classification_loss(softmax(logits))`` but through log-softmax,
    so confidently wrong predictions keep a finite, non-zero gradient."""
    log_pc = torch.log_softmax(logits, dim=-1).gather(1, labels.view(-1, 1)).squeeze(1)
    w = _sample_weights(labels, class_counts, log_pc.dtype)
    return (w * (1 - log_pc.exp()) ** gamma * -log_pc).sum()


def online_cam_loss(oc_logits: torch.Tensor, labels: torch.Tensor, class_counts, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss on the online-CAM logits. These are unbounded (LSE of ReLU features),
    so a probability clamp would silence the gradient exactly when it is needed."""
    return focal_loss_from_logits(oc_logits, labels, class_counts, gamma)


def cluster_and_separation_loss(s: torch.Tensor, labels: torch.Tensor, class_of: torch.Tensor, class_counts):
    """Class-weighted cluster (1 - best own-class similarity) and separation
    (best other-class similarity) terms, both to be minimized."""
    n_cls = len(class_counts)
    for c in range(n_cls):
        if not torch.any(class_of == c):
            raise ConfigurationError(f"class {c} has no prototypes")
    own = class_of.view(1, -1) == labels.view(-1, 1)  # B,K
    neg_inf = torch.finfo(s.dtype).min
    best_own = torch.where(own, s, torch.full_like(s, neg_inf)).amax(1)
    best_other = torch.where(~own, s, torch.full_like(s, neg_inf)).amax(1)
    w = _sample_weights(labels, class_counts, s.dtype)
    return (w * (1 - best_own)).sum(), (w * best_other).sum()


def mapping_loss(m0: torch.Tensor, transform_pairs: Optional[Sequence] = None) -> torch.Tensor:
    """Mean absolute attention (sparsity), plus optional transform consistency.

    ``transform_pairs`` holds ``(m0_of_transformed_input, transform)`` where
    ``transform`` maps attention maps of the original input into the frame of
    the transformed one.
    """
    loss = m0.abs().mean()
    if transform_pairs:
        consistency = [(m0_t - fn(m0)).abs().mean() for m0_t, fn in transform_pairs]
        loss = loss + torch.stack(consistency).mean()
    return loss


def l1_loss(w_cls: torch.Tensor, class_of: torch.Tensor) -> torch.Tensor:
    """L1 norm of classification weights linking prototypes to other classes."""
    mask = torch.ones_like(w_cls)
    mask[torch.arange(len(class_of)), class_of] = 0
    return (w_cls * mask).abs().sum()


STAGE1_ORDER = ("cls", "clst", "sep", "map", "oc")
STAGE3_ORDER = ("cls", "l1")


def required_terms(stage: int, variant: ModelVariant) -> tuple:
    if stage == 3:
        return STAGE3_ORDER
    if stage != 1:
        raise ConfigurationError(f"no loss for stage {stage}")
    if variant.mode == Mode.CNN:
        return ("cls",)
    terms = ["cls", "clst", "sep"]
    if variant.mode == Mode.PROTO_AM:
        terms.append("map")
        if variant.online_cam:
            terms.append("oc")
    return tuple(terms)


def stage_loss(terms: dict, stage: int, weights: LossWeights, variant: ModelVariant) -> LossBreakdown:
    """Weighted sum of the stage's active terms; inactive terms are dropped."""
    needed = required_terms(stage, variant)
    missing = [t for t in needed if t not in terms]
    if missing:
        raise ConfigurationError(f"stage {stage} loss for {variant.name} is missing {missing}")
    active = {t: terms[t] for t in needed}
    total = sum(weights.coefficient(t) * v for t, v in active.items())
    return LossBreakdown(stage, active, total)
