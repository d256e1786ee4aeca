"""Three-stage training (joint training, prototype reassignment, last layer)
and the stratified cross-validation harness."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from . import interpret
from .network import (
    BackboneConfig,
    MProtoNet,
    Mode,
    ModelVariant,
    build_model,
    read_container,
    model_from_container,
    save_checkpoint,
)
from .objectives import (
    LossWeights,
    focal_loss_from_logits,
    cluster_and_separation_loss,
    l1_loss,
    mapping_loss,
    online_cam_loss,
    online_cam_logits,
    stage_loss,
)
from .volume_io import (
    CLASSES,
    AugmentationConfig,
    CaseStore,
    ConfigurationError,
    DatasetManifest,
    augment,
    make_folds,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class LeakageError(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    stage1_epochs: int = 100
    warmup_epochs: int = 20
    cosine_epochs: int = 80
    batch_size: int = 32
    cycle_period: int = 10
    stage3_epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 0.01
    stage3_lr: float = 1e-3
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs + self.cosine_epochs != self.stage1_epochs:
            raise ConfigurationError("warmup + cosine epochs must equal stage-1 epochs")
        if self.stage1_epochs % self.cycle_period:
            raise ConfigurationError("cycle period must divide the stage-1 epochs")

    @classmethod
    def paper(cls, seed: int = 0) -> "TrainSchedule":
        return cls(seed=seed)

    @classmethod
    def desk(cls, seed: int = 0) -> "TrainSchedule":
        return cls(stage1_epochs=20, warmup_epochs=4, cosine_epochs=16, batch_size=8, cycle_period=10, seed=seed)

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "TrainSchedule":
        if name not in ("paper", "desk"):
            raise ConfigurationError(f"unknown preset {name!r}")
        return getattr(cls, name)(seed)


def learning_rate(epoch: float, schedule: TrainSchedule) -> float:
    """Linear warm-up from 0, then cosine annealing to 0; ``epoch`` may be fractional."""
    base = schedule.lr
    if epoch < schedule.warmup_epochs:
        return base * epoch / schedule.warmup_epochs
    progress = (epoch - schedule.warmup_epochs) / schedule.cosine_epochs
    return 0.5 * base * (1.0 + math.cos(math.pi * min(progress, 1.0)))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


class CaseDataset:
    """Cases of a fold served in deterministic mini-batches.

    All randomness (order, augmentation) is derived from
    ``(seed, stream, epoch)``, so any epoch can be replayed in isolation.
    """

    def __init__(self, store: CaseStore, ids: Sequence[str], augmentation: Optional[AugmentationConfig] = None):
        self.store = store
        self.ids = list(ids)
        self.augmentation = augmentation
        self.seen_ids: set = set()

    def __len__(self):
        return len(self.ids)

    def labels(self) -> torch.Tensor:
        return torch.tensor([CLASSES.index(self.store.manifest.labels()[i]) for i in self.ids])

    def load(self, case_id: str, rng: Optional[np.random.Generator] = None):
        case = self.store.get(case_id)
        if self.augmentation is not None and rng is not None:
            case = augment(case, self.augmentation, rng)
        return case

    def batches(self, batch_size: int, seed: int = 0, stream: int = 0, epoch: int = 0, shuffle: bool = True,
                augment_batch: bool = False) -> Iterator:
        rng = np.random.default_rng([seed, stream, epoch])
        order = rng.permutation(len(self.ids)) if shuffle else np.arange(len(self.ids))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            ids = [self.ids[i] for i in idx]
            self.seen_ids.update(ids)
            cases = []
            for i in idx:
                case_rng = np.random.default_rng([seed, stream, epoch, int(i)]) if augment_batch else None
                cases.append(self.load(self.ids[i], case_rng))
            x = torch.from_numpy(np.stack([np.asarray(c.volume, dtype=np.float32) for c in cases]))
            y = torch.tensor([c.label_index for c in cases])
            yield ids, x, y


def class_counts(dataset: CaseDataset) -> list:
    labels = dataset.labels()
    return [int((labels == c).sum()) for c in range(len(CLASSES))]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _check_finite(terms: dict, where: str) -> None:
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise TrainingError(f"non-finite {name} loss ({float(value)}) during {where}")


def stage1_terms(model: MProtoNet, x, y, counts, weights: LossWeights) -> dict:
    trace = model(x)
    terms = {"cls": focal_loss_from_logits(trace.logits, y, counts, weights.gamma)}
    if model.variant.has_prototypes:
        terms["clst"], terms["sep"] = cluster_and_separation_loss(trace.S, y, model.class_of, counts)
    if model.variant.mode == Mode.PROTO_AM:
        terms["map"] = mapping_loss(trace.M0)
        if model.variant.online_cam:
            oc_logits = online_cam_logits(trace.I, model.conv_map.weight, model.last_layer, weights.lse_r)
            terms["oc"] = online_cam_loss(oc_logits, y, counts, weights.gamma)
    return terms


def make_stage1_optimizer(model: MProtoNet, schedule: TrainSchedule) -> torch.optim.Optimizer:
    params = model.body_parameters() if model.variant.has_prototypes else list(model.parameters())
    return torch.optim.AdamW(params, lr=schedule.lr, weight_decay=schedule.weight_decay)


def make_stage3_optimizer(model: MProtoNet, schedule: TrainSchedule) -> torch.optim.Optimizer:
    return torch.optim.Adam([model.last_layer], lr=schedule.stage3_lr)


def train_stage1(
    model: MProtoNet,
    dataset: CaseDataset,
    schedule: TrainSchedule,
    weights: LossWeights,
    epochs: Sequence[int],
    optimizer: Optional[torch.optim.Optimizer] = None,
    log_fh=None,
    step: int = 0,
) -> int:
    """Run the given stage-1 epochs; the classification layer stays frozen
    for prototype models. Returns the updated global step counter."""
    optimizer = optimizer or make_stage1_optimizer(model, schedule)
    counts = class_counts(dataset)
    frozen = model.variant.has_prototypes
    model.last_layer.requires_grad_(not frozen)
    model.train()
    n_batches = math.ceil(len(dataset) / schedule.batch_size)
    for epoch in epochs:
        batches = dataset.batches(schedule.batch_size, schedule.seed, 1, epoch, augment_batch=schedule.augment)
        for b, (_, x, y) in enumerate(batches):
            lr = learning_rate(epoch + b / n_batches, schedule)
            for group in optimizer.param_groups:
                group["lr"] = lr
            terms = stage1_terms(model, x, y, counts, weights)
            _check_finite(terms, f"stage-1 epoch {epoch}")
            breakdown = stage_loss(terms, 1, weights, model.variant)
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            optimizer.step()
            step += 1
            if log_fh is not None:
                log_fh.write(breakdown.to_json(step) + "\n")
    model.last_layer.requires_grad_(True)
    return step


@torch.no_grad()
def collect_traces(model: MProtoNet, dataset: CaseDataset, batch_size: int = 8) -> dict:
    """Evaluation-mode forward pass over a dataset without augmentation."""
    model.eval()
    out = {"ids": [], "labels": [], "S": [], "H": [], "M": [], "G": [], "field": []}
    for ids, x, y in dataset.batches(batch_size, shuffle=False):
        trace = model(x)
        out["ids"] += ids
        out["labels"].append(y)
        if trace.S is not None:
            out["S"].append(trace.S)
        if trace.H is not None:
            out["H"].append(trace.H)
            out["M"].append(trace.M)
        if trace.similarity_field is not None:
            out["G"].append(trace.G.flatten(2))
            out["field"].append(trace.similarity_field)
    return {k: (torch.cat(v) if v and isinstance(v[0], torch.Tensor) else v) for k, v in out.items()}


@torch.no_grad()
def reassign_prototypes(model: MProtoNet, dataset: CaseDataset):
    """Replace every prototype by its most similar same-class training feature.

    Records provenance ``{"case_id", "similarity", "attention"}`` per prototype.
    """
    if not model.variant.has_prototypes:
        raise ConfigurationError("the CNN baseline has no prototypes")
    data = collect_traces(model, dataset)
    labels = data["labels"].numpy()
    for k in range(model.cfg.n_prototypes):
        c = int(model.class_of[k])
        pool = np.flatnonzero(labels == c)
        if pool.size == 0:
            raise ConfigurationError(f"no training cases of class {CLASSES[c]} for prototype {k}")
        if model.variant.mode == Mode.PROTO_AM:
            sims = data["S"][pool, k].numpy()
            best = int(pool[np.argmax(sims)])
            model.prototypes[k] = data["H"][best, k]
            attention = data["M"][best, k].numpy()
            record = {"case_id": data["ids"][best], "similarity": float(sims.max())}
        else:
            fields = data["field"][pool, k].flatten(1).numpy()
            flat_best = int(np.argmax(fields))
            row, loc = divmod(flat_best, fields.shape[1])
            best = int(pool[row])
            model.prototypes[k] = data["G"][best, :, loc]
            attention = data["field"][best, k].numpy()
            record = {"case_id": data["ids"][best], "similarity": float(fields.max()), "location": loc}
        record["attention"] = attention.astype(np.float32)
        model.provenance[k] = record
    return model.prototype_bank()


def fit_last_layer(
    model: MProtoNet,
    similarities: torch.Tensor,
    labels: torch.Tensor,
    counts,
    schedule: TrainSchedule,
    weights: LossWeights,
    epoch_offset: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    log_fh=None,
    step: int = 0,
) -> int:
    """Stage-3 optimization of the classification layer on fixed similarity scores."""
    optimizer = optimizer or make_stage3_optimizer(model, schedule)
    for group in optimizer.param_groups:
        group["lr"] = schedule.stage3_lr
    n = len(labels)
    for epoch in range(schedule.stage3_epochs):
        rng = np.random.default_rng([schedule.seed, 3, epoch_offset + epoch])
        order = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            terms = {
                "cls": focal_loss_from_logits(similarities[idx] @ model.last_layer, labels[idx], counts, weights.gamma),
                "l1": l1_loss(model.last_layer, model.class_of),
            }
            _check_finite(terms, f"stage-3 epoch {epoch}")
            breakdown = stage_loss(terms, 3, weights, model.variant)
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            optimizer.step()
            step += 1
            if log_fh is not None:
                log_fh.write(breakdown.to_json(step) + "\n")
    return step


def train_stage3(
    model: MProtoNet,
    dataset: CaseDataset,
    schedule: TrainSchedule,
    weights: LossWeights,
    epoch_offset: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    log_fh=None,
    step: int = 0,
) -> int:
    """Train only the classification layer; everything else is left untouched.

    Similarities are computed once in evaluation mode (no augmentation) since
    the layers producing them are frozen.
    """
    data = collect_traces(model, dataset)
    body = [p.requires_grad for p in model.body_parameters()]
    for p in model.body_parameters():
        p.requires_grad_(False)
    try:
        return fit_last_layer(
            model, data["S"], data["labels"], class_counts(dataset), schedule, weights,
            epoch_offset, optimizer, log_fh, step,
        )
    finally:
        for p, flag in zip(model.body_parameters(), body):
            p.requires_grad_(flag)


# ---------------------------------------------------------------------------
# optimizer state (de)serialization for resumable checkpoints
# ---------------------------------------------------------------------------


def optimizer_to_arrays(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    arrays = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            arrays[f"{prefix}/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return json.loads(json.dumps(sd["param_groups"])), arrays


def optimizer_from_arrays(opt: torch.optim.Optimizer, groups: list, arrays: dict, prefix: str) -> None:
    state: dict = {}
    for name, value in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(value.copy())
    opt.load_state_dict({"state": state, "param_groups": groups})


# ---------------------------------------------------------------------------
# one fold, cross-validation
# ---------------------------------------------------------------------------


@dataclass
class EvalOptions:
    deletion_step: float = 0.05
    random_baseline: bool = False
    with_interpretability: bool = True


@dataclass
class FoldResult:
    fold: int
    bac: float
    ids: Optional[float]
    ap: Optional[float]
    checkpoint: Optional[str] = None
    log: Optional[str] = None
    ids_random: Optional[float] = None
    cases: list = field(default_factory=list)
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        return cls(**d)


def train_model(
    model: MProtoNet,
    dataset: CaseDataset,
    schedule: TrainSchedule,
    weights: LossWeights,
    checkpoint_path=None,
    log_path=None,
    resume: bool = False,
    stop_after_cycle: Optional[int] = None,
    on_stage_end=None,
) -> MProtoNet:
    """Full schedule: stage-1 epochs, with stage-2 and stage-3 after every
    ``cycle_period`` stage-1 epochs. Checkpoints after each cycle when a path
    is given; ``resume`` continues from such a checkpoint.

    ``on_stage_end(stage, cycle, model)`` is called after every stage (and
    once before the first, with stage 0)."""
    notify = on_stage_end or (lambda *a: None)
    opt1 = make_stage1_optimizer(model, schedule)
    opt3 = make_stage3_optimizer(model, schedule) if model.variant.has_prototypes else None
    n_cycles = schedule.stage1_epochs // schedule.cycle_period
    start_cycle, step = 0, 0

    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        header, arrays = read_container(checkpoint_path)
        restored = model_from_container(header, arrays)
        model.load_state_dict(restored.state_dict())
        model.provenance = restored.provenance
        opt1 = make_stage1_optimizer(model, schedule)
        optimizer_from_arrays(opt1, header["optim1_groups"], arrays, "optim1")
        if opt3 is not None:
            opt3 = make_stage3_optimizer(model, schedule)
            if header.get("optim3_groups") is not None:
                optimizer_from_arrays(opt3, header["optim3_groups"], arrays, "optim3")
        torch.set_rng_state(torch.from_numpy(arrays["rng/torch"]))
        start_cycle, step = header["cycle"] + 1, header["step"]
        log.info("resumed at cycle %d (step %d)", start_cycle, step)

    log_fh = open(log_path, "a" if start_cycle else "w") if log_path else None
    try:
        notify(0, start_cycle, model)
        for cycle in range(start_cycle, n_cycles):
            epochs = range(cycle * schedule.cycle_period, (cycle + 1) * schedule.cycle_period)
            step = train_stage1(model, dataset, schedule, weights, epochs, opt1, log_fh, step)
            notify(1, cycle, model)
            if model.variant.has_prototypes:
                reassign_prototypes(model, dataset)
                notify(2, cycle, model)
                step = train_stage3(model, dataset, schedule, weights, cycle * schedule.stage3_epochs, opt3, log_fh, step)
                notify(3, cycle, model)
            if checkpoint_path is not None:
                g1, a1 = optimizer_to_arrays(opt1, "optim1")
                header = {"cycle": cycle, "epoch": epochs[-1], "stage": 3 if opt3 else 1, "step": step,
                          "optim1_groups": g1, "complete": cycle == n_cycles - 1}
                arrays = {**a1, "rng/torch": torch.get_rng_state().numpy()}
                if opt3 is not None:
                    g3, a3 = optimizer_to_arrays(opt3, "optim3")
                    header["optim3_groups"] = g3
                    arrays.update(a3)
                save_checkpoint(checkpoint_path, model, header, arrays)
            if log_fh is not None:
                log_fh.flush()
            if stop_after_cycle is not None and cycle >= stop_after_cycle:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return model


def evaluate_fold(
    model: MProtoNet,
    store: CaseStore,
    test_ids: Sequence[str],
    options: EvalOptions,
    seed: int = 0,
) -> dict:
    """Held-out metrics: BAC over the fold, mean per-case IDS and AP."""
    model.eval()
    labels = store.manifest.labels()
    preds, truth, cases = [], [], []
    for n, cid in enumerate(test_ids):
        case = store.get(cid)
        x = torch.from_numpy(np.array(case.volume, dtype=np.float32))[None]
        with torch.no_grad():
            trace = model(x)
        prob = trace.p[0].double().numpy()
        pred = int(prob.argmax())
        c = CLASSES.index(labels[cid])
        preds.append(pred)
        truth.append(c)
        record = {"case": cid, "label": c, "pred": pred, "p": [float(v) for v in prob]}
        if options.with_interpretability:
            correct_map = interpret.class_activation_map(model, x, c, trace)
            record["ap"] = interpret.activation_precision(correct_map, case.wt_mask)
            pred_map = correct_map if pred == c else interpret.class_activation_map(model, x, pred, trace)
            volume_map = interpret.upsample(pred_map.values, case.wt_mask.shape)
            curve = interpret.incremental_deletion(model, x, volume_map, options.deletion_step, target=pred)
            record["ids"] = interpret.ids(curve)
            record["curve"] = curve.to_dict()
            if options.random_baseline:
                # uniform-random saliency drawn on the map grid and upsampled like any
                # model map, so both delete blobs of the same granularity
                rng = np.random.default_rng([seed, n])
                random_map = interpret.upsample(rng.random(pred_map.values.shape), case.wt_mask.shape)
                rcurve = interpret.incremental_deletion(model, x, random_map, options.deletion_step, target=pred)
                record["ids_random"] = interpret.ids(rcurve)
        cases.append(record)
    # BAC is undefined on a single-class subset (e.g. a hand-picked list of cases)
    bac = interpret.balanced_accuracy(preds, truth) if len(set(truth)) == len(CLASSES) else None
    out = {"bac": bac, "cases": cases}
    if options.with_interpretability:
        out["ids"] = float(np.mean([r["ids"] for r in cases]))
        out["ap"] = float(np.mean([r["ap"] for r in cases]))
        if options.random_baseline:
            out["ids_random"] = float(np.mean([r["ids_random"] for r in cases]))
    return out


def run_fold(
    store: CaseStore,
    train_ids: Sequence[str],
    test_ids: Sequence[str],
    variant: ModelVariant,
    schedule: TrainSchedule,
    backbone: BackboneConfig,
    weights: LossWeights,
    fold: int = 0,
    fold_dir=None,
    options: Optional[EvalOptions] = None,
    resume: bool = False,
) -> FoldResult:
    options = options or EvalOptions()
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise LeakageError(f"fold {fold}: held-out cases in training set: {sorted(overlap)[:5]}")
    torch.use_deterministic_algorithms(True)
    model = build_model(variant, backbone, seed=schedule.seed * 1000 + fold)
    aug = AugmentationConfig(rng_seed=schedule.seed) if schedule.augment else None
    dataset = CaseDataset(store, train_ids, aug)
    ckpt = log_path = None
    if fold_dir is not None:
        fold_dir = Path(fold_dir)
        fold_dir.mkdir(parents=True, exist_ok=True)
        ckpt, log_path = fold_dir / "checkpoint.mproto", fold_dir / "train_log.jsonl"
    train_model(model, dataset, schedule, weights, ckpt, log_path, resume=resume)
    leaked = dataset.seen_ids & set(test_ids)
    if leaked:
        raise LeakageError(f"fold {fold}: held-out cases reached training batches: {sorted(leaked)[:5]}")
    metrics = evaluate_fold(model, store, test_ids, options, seed=schedule.seed * 1000 + fold)
    result = FoldResult(
        fold=fold,
        bac=metrics["bac"],
        ids=metrics.get("ids"),
        ap=metrics.get("ap"),
        checkpoint=str(ckpt.name) if ckpt else None,
        log=str(log_path.name) if log_path else None,
        ids_random=metrics.get("ids_random"),
        cases=metrics["cases"],
        train_ids=sorted(dataset.seen_ids),
        test_ids=list(test_ids),
    )
    if fold_dir is not None:
        (fold_dir / "fold_result.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True))
    return result


def aggregate(results: Sequence[FoldResult]) -> dict:
    out = {}
    for metric in ("bac", "ids", "ap", "ids_random"):
        values = [getattr(r, metric) for r in results]
        if values and all(v is not None for v in values):
            out[metric] = interpret.summarize(values)
    return out


def run_cross_validation(
    manifest: DatasetManifest,
    store: CaseStore,
    variant: ModelVariant,
    schedule: TrainSchedule,
    backbone: BackboneConfig,
    weights: Optional[LossWeights] = None,
    k: int = 5,
    fold_seed: int = 0,
    out_dir=None,
    options: Optional[EvalOptions] = None,
    folds: Optional[Sequence[int]] = None,
):
    """Train/evaluate every fold; returns ``(fold_results, summary)``."""
    weights = weights or LossWeights()
    split = make_folds(manifest, k, fold_seed)
    results = []
    for fold in folds if folds is not None else range(k):
        fold_dir = Path(out_dir) / f"fold{fold}" if out_dir is not None else None
        try:
            results.append(
                run_fold(store, split.train_ids(fold), split.fold_ids(fold), variant, schedule, backbone,
                         weights, fold, fold_dir, options)
            )
        except Exception as exc:
            raise TrainingError(f"fold {fold}: {exc}") from exc
        log.info("%s fold %d: BAC %.3f IDS %s AP %s", variant.name, fold, results[-1].bac, results[-1].ids, results[-1].ap)
    return results, aggregate(results)
