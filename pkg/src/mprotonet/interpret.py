"""Activation maps and interpretability / classification metrics."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .network import MProtoNet, Mode, ForwardTrace


class MetricError(ValueError):
    pass


class EmptyMapWarning(UserWarning):
    pass


class DegenerateMapWarning(UserWarning):
    pass


class MapSource(str, enum.Enum):
    PROTO_MEAN = "PROTO_MEAN"
    GRADCAM = "GRADCAM"
    PROTOPNET_PREPOOL = "PROTOPNET_PREPOOL"
    RANDOM = "RANDOM"


@dataclass
class SaliencyMap:
    values: np.ndarray
    resolution: str  # "native" or "volume"
    source: MapSource
    degenerate: bool = False


@dataclass
class DeletionCurve:
    t: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.t.shape != self.p.shape or self.t.ndim != 1 or len(self.t) < 2:
            raise MetricError("curve needs matching 1-D t and p with at least two points")
        if np.any(np.diff(self.t) <= 0):
            raise MetricError("curve fractions must be strictly increasing")

    def to_dict(self) -> dict:
        return {"t": [float(v) for v in self.t], "p": [float(v) for v in self.p]}


@dataclass
class MetricsReport:
    """Per-model metric summaries and paired p-values against a reference."""

    summaries: dict = field(default_factory=dict)  # model -> metric -> {"mean","std","values"}
    p_values: dict = field(default_factory=dict)  # model -> metric -> p
    reference: Optional[str] = None
    errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"models": self.summaries, "reference": self.reference}
        if self.p_values:
            out["p_values"] = self.p_values
        if self.errors:
            out["errors"] = self.errors
        return out


# ---------------------------------------------------------------------------
# maps
# ---------------------------------------------------------------------------


def max_normalize(a: np.ndarray):
    peak = float(a.max()) if a.size else 0.0
    if peak <= 0:
        return np.zeros_like(a), True
    return a / peak, False


def min_max_normalize(a: np.ndarray):
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 1e-12:
        return np.zeros_like(a), True
    return (a - lo) / (hi - lo), False


def grad_cam(activations: torch.Tensor, score: torch.Tensor) -> torch.Tensor:
    """GradCAM of a scalar ``score`` w.r.t. activations of shape (C, *spatial).

    Channel weights are spatially averaged gradients; the weighted channel
    sum is rectified (not normalized).
    """
    (grads,) = torch.autograd.grad(score, activations, retain_graph=True)
    dims = tuple(range(1, activations.dim()))
    weights = grads.mean(dim=dims, keepdim=True)
    return F.relu((weights * activations).sum(0))


def class_activation_map(
    model: MProtoNet,
    x: torch.Tensor,
    cls: int,
    trace: Optional[ForwardTrace] = None,
) -> SaliencyMap:
    """Native-resolution activation map of class ``cls`` for a single input.

    Attention-map models use the mean of that class's attention maps and the
    CNN uses GradCAM on the add-on output, both max-normalized; ProtoPNet
    averages that class's similarity fields before top-alpha pooling
    (min-max normalized).
    """
    if x.shape[0] != 1:
        raise MetricError("class_activation_map works on one case at a time")
    mode = model.variant.mode
    if mode == Mode.CNN:
        model.eval()
        with torch.enable_grad():
            f = model.features(x)
            g = model.add_on(f)[0]
            logit = g.mean(dim=(1, 2, 3)) @ model.last_layer
            cam = grad_cam(g, logit[cls]).detach().numpy()
        values, degenerate = max_normalize(cam)
        source = MapSource.GRADCAM
    else:
        if trace is None:
            model.eval()
            with torch.no_grad():
                trace = model(x)
        own = (model.class_of == cls).numpy()
        if mode == Mode.PROTO_AM:
            values, degenerate = max_normalize(trace.M[0].detach().numpy()[own].mean(0))
            source = MapSource.PROTO_MEAN
        else:
            field_ = trace.similarity_field[0].detach().numpy()[own].mean(0)
            values, degenerate = min_max_normalize(field_)
            source = MapSource.PROTOPNET_PREPOOL
    if degenerate:
        warnings.warn("activation map is constant; returning zeros", DegenerateMapWarning)
    return SaliencyMap(np.asarray(values, dtype=np.float32), "native", source, degenerate)


def upsample(values: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))[None, None]
    return F.interpolate(t, size=tuple(target_shape), mode="trilinear", align_corners=False)[0, 0].numpy()


def upsample_and_threshold(smap, target_shape: Sequence[int], tau: float = 0.5) -> np.ndarray:
    values = smap.values if isinstance(smap, SaliencyMap) else smap
    return upsample(values, target_shape) > tau


def activation_precision(smap, wt_mask: np.ndarray, tau: float = 0.5) -> float:
    """Fraction of the thresholded, upsampled map lying inside ``wt_mask``.

    ``smap`` may be a native-resolution map (upsampled and thresholded here)
    or a boolean array already at mask resolution.
    """
    if isinstance(smap, np.ndarray) and smap.dtype == bool:
        binary = smap
    else:
        binary = upsample_and_threshold(smap, wt_mask.shape, tau)
    if binary.shape != wt_mask.shape:
        raise MetricError(f"map {binary.shape} and mask {wt_mask.shape} differ")
    selected = int(binary.sum())
    if selected == 0:
        warnings.warn("thresholded activation map is empty; AP set to 0", EmptyMapWarning)
        return 0.0
    return int(np.logical_and(binary, wt_mask.astype(bool)).sum()) / selected


# ---------------------------------------------------------------------------
# incremental deletion
# ---------------------------------------------------------------------------


def deletion_order(volume_map: np.ndarray) -> np.ndarray:
    """Flat voxel indices by descending map value, ties in index order."""
    return np.argsort(-volume_map.ravel(), kind="stable")


@torch.no_grad()
def incremental_deletion(
    model: MProtoNet,
    x: torch.Tensor,
    volume_map: np.ndarray,
    step: float = 0.05,
    target: Optional[int] = None,
    chunk: int = 7,
) -> DeletionCurve:
    """Zero the top-t fraction of voxels (all modalities) for t = 0, step, ..., 1
    and record the probability of the originally predicted class."""
    model.eval()
    n_steps = int(round(1.0 / step))
    fractions = np.array([j / n_steps for j in range(n_steps + 1)])
    order = torch.from_numpy(deletion_order(volume_map))
    n_vox = order.numel()
    if target is None:
        target = int(model(x).p[0].argmax())
    probs = []
    base = x[0].reshape(x.shape[1], -1)
    for start in range(0, len(fractions), chunk):
        batch = []
        for t in fractions[start : start + chunk]:
            flat = base.clone()
            flat[:, order[: int(round(t * n_vox))]] = 0.0
            batch.append(flat.view(x.shape[1:]))
        probs.append(model(torch.stack(batch)).p[:, target])
    return DeletionCurve(fractions, torch.cat(probs).double().numpy())


def ids(curve: DeletionCurve) -> float:
    """Area under the deletion curve normalized between its start and end values."""
    area = float(np.trapezoid(curve.p, curve.t))
    span_t = curve.t[-1] - curve.t[0]
    p0, p_last = curve.p[0], curve.p[-1]
    if abs(p0 - p_last) < 1e-6:
        return 1.0
    value = (area / span_t - p_last) / (p0 - p_last)
    return float(min(max(value, 0.0), 1.0))


# ---------------------------------------------------------------------------
# classification metric and statistics
# ---------------------------------------------------------------------------


def balanced_accuracy(predictions, labels, n_classes: int = 2) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    recalls = []
    for c in range(n_classes):
        sel = labels == c
        if not sel.any():
            raise MetricError(f"class {c} absent from labels")
        recalls.append(float((predictions[sel] == c).mean()))
    return float(np.mean(recalls))


def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, dof: float) -> float:
    t2 = t * t
    if t2 < dof:
        # x = dof/(dof+t^2) is near 1 here; use the complement to avoid cancellation
        tail = 0.5 * (1.0 - regularized_incomplete_beta(0.5, dof / 2.0, t2 / (dof + t2)))
    else:
        tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t2))
    return 1.0 - tail if t > 0 else tail


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided paired Student's t-test p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError("paired samples must be 1-D and of equal length")
    if len(a) < 2:
        raise MetricError("need at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if not np.any(d):
        return 1.0
    if sd <= 1e-12 * abs(mean):
        # constant nonzero difference (up to rounding): infinitely significant
        return 0.0
    t = mean / (sd / math.sqrt(len(d)))
    return float(min(1.0, 2.0 * t_cdf(-abs(t), len(d) - 1)))


def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return {"mean": float(v.mean()), "std": std, "values": [float(x) for x in v]}
