"""Experiment orchestration: configs, cross-validated variant comparisons,
reports, overlays and case-based explanations.

Usage::

    python -m mprotonet synth-data --out runs/data
    python -m mprotonet train --config exp.json --variant MProtoNet_C --seed 0
    python -m mprotonet report --config exp.json
    python -m mprotonet explain --config exp.json --checkpoint runs/.../checkpoint.mproto --case synth_7_000
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import interpret
from .network import VARIANTS, BackboneConfig, Mode, ModelVariant, load_checkpoint
from .objectives import LossWeights
from .trainer import (
    EvalOptions,
    FoldResult,
    TrainingError,
    TrainSchedule,
    evaluate_fold,
    run_cross_validation,
)
from .volume_io import (
    CLASSES,
    INPUT_SHAPE,
    MODALITIES,
    CaseEntry,
    CaseStore,
    ConfigurationError,
    DatasetManifest,
    load_case,
    preprocess,
    synthesize_dataset,
    write_preprocessed,
)

log = logging.getLogger("mprotonet")

SCHEMA_VERSION = 1
METRICS = ("bac", "ids", "ap")
METRIC_LABELS = {"bac": "BAC", "ids": "IDS (lower is better)", "ap": "AP"}


class UnsupportedVariantError(ConfigurationError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class DataSource:
    """Synthetic cohort parameters, or a manifest written by ``prepare``."""

    kind: str = "synthetic"  # "synthetic" | "manifest"
    n_cases: int = 60
    class_ratio: float = 0.5
    seed: int = 7
    shape: tuple = INPUT_SHAPE
    manifest: Optional[str] = None

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.kind not in ("synthetic", "manifest"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "manifest" and not self.manifest:
            raise ConfigurationError("dataset kind 'manifest' needs a manifest path")


@dataclass
class ExperimentConfig:
    out_dir: str
    variants: list
    seeds: list
    preset: str = "desk"
    dataset: DataSource = field(default_factory=DataSource)
    backbone: str = "toy"  # "toy" | "paper"
    backbone_overrides: dict = field(default_factory=dict)
    k: int = 5
    fold_seed: int = 0
    deletion_step: float = 0.05
    random_baseline: bool = True
    reference: str = "XProtoNet"
    overlay_cases: int = 2
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DataSource(**self.dataset)
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"config schema {self.schema_version} unsupported (expected {SCHEMA_VERSION})")
        if not self.variants:
            raise ConfigurationError("at least one variant is required")
        for name in self.variants:
            ModelVariant.from_name(name)
        if not self.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in self.seeds):
            raise ConfigurationError("seeds must be an explicit non-empty list of integers")
        TrainSchedule.preset(self.preset)
        if self.backbone not in ("toy", "paper"):
            raise ConfigurationError(f"unknown backbone {self.backbone!r}")

    def backbone_config(self) -> BackboneConfig:
        overrides = dict(self.backbone_overrides)
        overrides.setdefault("input_shape", self.dataset.shape)
        if self.backbone == "paper":
            return BackboneConfig(**{**asdict(BackboneConfig.paper()), **overrides})
        return BackboneConfig.toy(**overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["shape"] = list(self.dataset.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def open_dataset(config: ExperimentConfig):
    """Manifest and case store; caches go under the output directory."""
    out = Path(config.out_dir)
    src = config.dataset
    if src.kind == "synthetic":
        manifest = synthesize_dataset(src.n_cases, src.class_ratio, src.seed)
    else:
        manifest = DatasetManifest.load(src.manifest)
    return manifest, CaseStore(manifest, out / "cache", shape=src.shape)


def _input(case) -> torch.Tensor:
    return torch.from_numpy(np.array(case.volume, dtype=np.float32))[None]


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def variant_dir(config: ExperimentConfig, seed: int, variant: str) -> Path:
    return Path(config.out_dir) / f"seed{seed}" / variant


def train_variant(config: ExperimentConfig, variant: str, seed: int, manifest=None, store=None) -> dict:
    """Cross-validate one variant for one seed; the outcome is cached on disk."""
    if manifest is None:
        manifest, store = open_dataset(config)
    out = variant_dir(config, seed, variant)
    result_path = out / "variant_result.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    out.mkdir(parents=True, exist_ok=True)
    options = EvalOptions(config.deletion_step, config.random_baseline)
    try:
        results, summary = run_cross_validation(
            manifest, store, ModelVariant.from_name(variant), TrainSchedule.preset(config.preset, seed),
            config.backbone_config(), LossWeights(), config.k, config.fold_seed, out, options,
        )
        outcome = {"variant": variant, "seed": seed, "summary": summary,
                   "folds": [_fold_digest(r) for r in results]}
    except TrainingError as exc:
        log.error("%s seed %d failed: %s", variant, seed, exc)
        outcome = {"variant": variant, "seed": seed, "error": str(exc)}
    result_path.write_text(json.dumps(outcome, indent=1, sort_keys=True))
    return outcome


def _fold_digest(r: FoldResult) -> dict:
    cases = [{k: v for k, v in c.items() if k != "curve"} for c in r.cases]
    return {"fold": r.fold, "bac": r.bac, "ids": r.ids, "ap": r.ap, "ids_random": r.ids_random,
            "checkpoint": r.checkpoint, "test_ids": r.test_ids, "cases": cases}


def comparisons(outcomes: dict, reference: str) -> dict:
    """Paired t-tests (pairs = folds) of every MProtoNet ablation against the reference."""
    ref = outcomes.get(reference)
    if ref is None or "error" in ref:
        return {}
    out = {}
    for name, res in outcomes.items():
        if not name.startswith("MProtoNet") or "error" in res:
            continue
        out[name] = {}
        for metric in METRICS:
            a, b = res["summary"].get(metric), ref["summary"].get(metric)
            if a is not None and b is not None:
                out[name][metric] = interpret.paired_t_test(a["values"], b["values"])
    return out


def build_report(config: ExperimentConfig, outcomes_by_seed: dict) -> dict:
    runs = []
    for seed in config.seeds:
        outcomes = outcomes_by_seed[seed]
        report = interpret.MetricsReport(reference=config.reference if config.reference in outcomes else None)
        for name, res in outcomes.items():
            if "error" in res:
                report.errors[name] = res["error"]
            else:
                report.summaries[name] = res["summary"]
        report.p_values = comparisons(outcomes, config.reference)
        run = {"seed": seed, **report.to_dict()}
        run["folds"] = {name: res["folds"] for name, res in outcomes.items() if "folds" in res}
        runs.append(run)
    cfg = config.to_dict()
    cfg.pop("out_dir")  # the report is a function of the experiment, not where it was written
    return {"schema_version": SCHEMA_VERSION, "config": cfg, "runs": runs}


def run_experiment(config: ExperimentConfig, render: bool = True) -> dict:
    """Every variant for every seed, then report.json (+ CSV and overlays)."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, store = open_dataset(config)
    by_seed = {}
    for seed in config.seeds:
        by_seed[seed] = {v: train_variant(config, v, seed, manifest, store) for v in config.variants}
    report = build_report(config, by_seed)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    if render:
        render_report(report, out, config, store)
    return report


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def format_cell(summary: Optional[dict]) -> str:
    if summary is None:
        return ""
    return f"{summary['mean']:.3f}±{summary['std']:.3f}"


def write_csv(report: dict, path) -> None:
    with_p = any(run.get("p_values") for run in report["runs"])
    header = ["seed", "model"] + [METRIC_LABELS[m] for m in METRICS]
    if with_p:
        ref = next(run["reference"] for run in report["runs"] if run.get("p_values"))
        header += [f"p {METRIC_LABELS[m].split()[0]} vs {ref}" for m in METRICS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for run in report["runs"]:
            for name, summary in run["models"].items():
                row = [run["seed"], name] + [format_cell(summary.get(m)) for m in METRICS]
                if with_p:
                    pv = run.get("p_values", {}).get(name, {})
                    row += [f"{pv[m]:.4f}" if m in pv else "" for m in METRICS]
                w.writerow(row)
            for name, err in run.get("errors", {}).items():
                w.writerow([run["seed"], name] + ["failed"] * len(METRICS) + ([""] * len(METRICS) if with_p else []))


def max_area_slices(mask: np.ndarray) -> tuple:
    """Per axis, the slice index with the largest mask area (middle if empty)."""
    out = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        area = mask.sum(axis=other)
        out.append(int(np.argmax(area)) if area.max() > 0 else mask.shape[axis] // 2)
    return tuple(out)


def _take(vol: np.ndarray, axis: int, idx: int) -> np.ndarray:
    return np.take(vol, idx, axis=axis).T


def draw_overlay(axes, t1ce: np.ndarray, volume_map: np.ndarray, wt_mask: np.ndarray, title: Optional[str] = None):
    """Axial, coronal and sagittal tumor-centered T1CE slices with the map blended on top."""
    idx = max_area_slices(wt_mask)
    for ax, axis in zip(axes, (2, 1, 0)):
        ax.imshow(_take(t1ce, axis, idx[axis]), cmap="gray", origin="lower")
        ax.imshow(_take(volume_map, axis, idx[axis]), cmap="viridis", vmin=0.0, vmax=1.0, alpha=0.5, origin="lower")
        m = _take(wt_mask, axis, idx[axis])
        if m.any() and not m.all():
            ax.contour(m, levels=[0.5], colors="red", linewidths=0.8, origin="lower")
        ax.set_axis_off()
    if title:
        axes[0].set_title(title, fontsize=8)


def _figure(rows: int, cols: int):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    return plt, fig, axes


def _save(plt, fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def case_map(model, x, cls: int, shape) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", interpret.DegenerateMapWarning)
        smap = interpret.class_activation_map(model, x, cls)
    return interpret.upsample(smap.values, shape)


def render_overlays(report: dict, out_dir, config: ExperimentConfig, store: CaseStore) -> list:
    """overlays/<case>_<model>.png per model plus overlays/<case>.png with one column per model."""
    out = Path(out_dir) / "overlays"
    run = report["runs"][0]
    models = [m for m in run["models"] if m in run["folds"]]
    if not models or config.overlay_cases <= 0:
        return []
    first = run["folds"][models[0]][0]
    cases = first["test_ids"][: config.overlay_cases]
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for cid in cases:
        case = store.get(cid)
        x = _input(case)
        t1ce = np.asarray(case.volume[MODALITIES.index("t1ce")])
        plt, fig_all, axes_all = _figure(3, len(models))
        for j, name in enumerate(models):
            fold = next(f for f in run["folds"][name] if cid in f["test_ids"])
            ckpt = variant_dir(config, run["seed"], name) / f"fold{fold['fold']}" / fold["checkpoint"]
            model, _, _ = load_checkpoint(ckpt)
            model.eval()
            vmap = case_map(model, x, case.label_index, case.wt_mask.shape)
            _, fig, axes = _figure(3, 1)
            draw_overlay(axes[:, 0], t1ce, vmap, case.wt_mask, name)
            _save(plt, fig, out / f"{cid}_{name}.png")
            draw_overlay(axes_all[:, j], t1ce, vmap, case.wt_mask, name)
            written.append(out / f"{cid}_{name}.png")
        _save(plt, fig_all, out / f"{cid}.png")
    return written


def render_report(report: dict, out_dir, config: Optional[ExperimentConfig] = None, store: Optional[CaseStore] = None):
    """report.csv and, when the trained checkpoints are reachable, overlay PNGs."""
    out = Path(out_dir)
    write_csv(report, out / "report.csv")
    if config is not None and store is not None:
        render_overlays(report, out, config, store)


# ---------------------------------------------------------------------------
# explanations
# ---------------------------------------------------------------------------


@dataclass
class PrototypeContribution:
    index: int
    prototype_class: str
    similarity: float
    weight: float
    contribution: float
    source_case: str
    source_similarity: float
    self_similarity: Optional[float] = None


@dataclass
class ExplanationBundle:
    case: str
    model: str
    predicted: str
    probabilities: list
    logit: float
    prototypes: list
    overlays: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def explain_case(model, case, n: int = 3, store: Optional[CaseStore] = None, out_dir=None) -> ExplanationBundle:
    """Top-``n`` prototypes by contribution s_k * W_cls[k, c] to the predicted class."""
    if model.variant.mode != Mode.PROTO_AM:
        raise UnsupportedVariantError(f"{model.variant.name} has no attention-map prototypes to explain")
    if any(p is None for p in model.provenance):
        raise ConfigurationError("prototypes have no provenance; run prototype reassignment first")
    model.eval()
    x = _input(case)
    with torch.no_grad():
        trace = model(x)
    s = trace.S[0].double()
    w = model.last_layer.detach().double()
    c = int(trace.p[0].argmax())
    contrib = s * w[:, c]
    order = sorted(range(len(contrib)), key=lambda k: (-float(contrib[k]), k))[:n]
    entries = []
    for k in order:
        prov = model.provenance[k]
        self_sim = None
        if store is not None:
            try:
                src = store.get(prov["case_id"])
            except KeyError:
                src = None
            if src is not None:
                with torch.no_grad():
                    self_sim = float(model(_input(src)).S[0, k])
        entries.append(PrototypeContribution(
            k, CLASSES[int(model.class_of[k])], float(s[k]), float(w[k, c]), float(contrib[k]),
            prov["case_id"], float(prov["similarity"]), self_sim,
        ))
    bundle = ExplanationBundle(
        case.id, model.variant.name, CLASSES[c], [float(v) for v in trace.p[0]],
        float(trace.logits[0, c]), [asdict(e) for e in entries],
    )
    if out_dir is not None:
        out = Path(out_dir) / "explanations"
        out.mkdir(parents=True, exist_ok=True)
        t1ce = np.asarray(case.volume[MODALITIES.index("t1ce")])
        for e in entries:
            plt, fig, axes = _figure(3, 2)
            case_att = interpret.upsample(trace.M[0, e.index].numpy(), case.wt_mask.shape)
            draw_overlay(axes[:, 0], t1ce, case_att, case.wt_mask, f"{case.id} s={e.similarity:.3f}")
            src = store.get(e.source_case) if store is not None else None
            att = model.provenance[e.index].get("attention")
            if src is not None and att is not None:
                src_att = interpret.upsample(np.asarray(att), src.wt_mask.shape)
                draw_overlay(axes[:, 1], np.asarray(src.volume[MODALITIES.index("t1ce")]), src_att, src.wt_mask,
                             f"p{e.index} from {e.source_case}")
            else:
                for ax in axes[:, 1]:
                    ax.set_axis_off()
            name = f"{case.id}_proto{e.index}.png"
            _save(plt, fig, out / name)
            bundle.overlays.append(name)
        (out / f"{case.id}.json").write_text(json.dumps(bundle.to_dict(), indent=1, sort_keys=True))
    return bundle


# ---------------------------------------------------------------------------
# per-case evaluation exports
# ---------------------------------------------------------------------------


def export_mask(binary: np.ndarray, path, spacing=(1.5, 1.5, 1.5)) -> None:
    import nibabel as nib

    affine = np.diag(list(spacing) + [1.0])
    nib.save(nib.Nifti1Image(binary.astype(np.uint8), affine), str(path))


def evaluate_checkpoint(checkpoint, store: CaseStore, case_ids: Sequence[str], out_dir, deletion_step: float = 0.05) -> dict:
    """Per-case ``interpret/<case>.json`` ({case, curve, ids, ap}) and thresholded-map NIfTI masks."""
    model, _, _ = load_checkpoint(checkpoint)
    metrics = evaluate_fold(model, store, case_ids, EvalOptions(deletion_step))
    out = Path(out_dir)
    (out / "interpret").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for rec in metrics["cases"]:
        doc = {"case": rec["case"], "curve": rec["curve"], "ids": rec["ids"], "ap": rec["ap"]}
        (out / "interpret" / f"{rec['case']}.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        case = store.get(rec["case"])
        vmap = case_map(model, _input(case), rec["label"], case.wt_mask.shape)
        export_mask(vmap > 0.5, out / "masks" / f"{rec['case']}_{model.variant.name}.nii.gz", case.spacing)
    return metrics


# ---------------------------------------------------------------------------
# BraTS preparation
# ---------------------------------------------------------------------------


def read_grade_table(path) -> dict:
    """Grades from a BraTS name-mapping CSV (columns ``Grade`` and ``BraTS_2020_subject_ID``)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {r["BraTS_2020_subject_ID"]: r["Grade"] for r in rows}


def prepare_brats(raw_dir, out_dir, grades: Optional[dict] = None) -> DatasetManifest:
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    pre = out_dir / "preprocessed"
    entries = []
    for case_dir in sorted(p for p in raw_dir.iterdir() if p.is_dir()):
        label = grades.get(case_dir.name) if grades else None
        case = preprocess(load_case(raw_dir, case_dir.name, label))
        write_preprocessed(pre, case)
        entries.append(CaseEntry(case.id, str(pre), case.label))
    manifest = DatasetManifest(entries)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        d = json.loads(Path(args.config).read_text())
    else:
        d = {"out_dir": args.out or "runs/experiment", "variants": ["XProtoNet", "MProtoNet_C"], "seeds": [0]}
    if getattr(args, "variant", None):
        d["variants"] = [args.variant]
    if getattr(args, "seed", None) is not None:
        d["seeds"] = [args.seed]
    if getattr(args, "preset", None):
        d["preset"] = args.preset
    if args.out:
        d["out_dir"] = args.out
    return ExperimentConfig.from_dict(d)


def cmd_synth_data(args) -> int:
    cfg = _config_from_args(args)
    manifest, store = open_dataset(cfg)
    store.materialize()
    manifest.save(Path(cfg.out_dir) / "manifest.json")
    print(f"{len(manifest.cases)} cases {manifest.class_counts} -> {cfg.out_dir}")
    return 0


def cmd_prepare(args) -> int:
    grades = read_grade_table(args.grades) if args.grades else None
    manifest = prepare_brats(args.raw, args.out, grades)
    print(f"{len(manifest.cases)} cases {manifest.class_counts} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    manifest, store = open_dataset(cfg)
    failed = 0
    for seed in cfg.seeds:
        for v in cfg.variants:
            res = train_variant(cfg, v, seed, manifest, store)
            if "error" in res:
                failed += 1
                print(f"{v} seed {seed}: FAILED {res['error']}")
            else:
                cells = "  ".join(f"{METRIC_LABELS[m].split()[0]} {format_cell(res['summary'].get(m))}" for m in METRICS)
                print(f"{v} seed {seed}: {cells}")
    return 1 if failed else 0


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    manifest, store = open_dataset(cfg)
    ckpt = Path(args.checkpoint)
    if args.cases:
        ids = args.cases
    elif (ckpt.parent / "fold_result.json").exists():
        ids = json.loads((ckpt.parent / "fold_result.json").read_text())["test_ids"]
    else:
        ids = manifest.ids
    metrics = evaluate_checkpoint(ckpt, store, ids, cfg.out_dir, cfg.deletion_step)
    bac = "n/a" if metrics["bac"] is None else f"{metrics['bac']:.3f}"
    print(f"BAC {bac}  IDS {metrics['ids']:.3f}  AP {metrics['ap']:.3f}  ({len(ids)} cases)")
    return 0


def cmd_explain(args) -> int:
    cfg = _config_from_args(args)
    manifest, store = open_dataset(cfg)
    model, _, _ = load_checkpoint(args.checkpoint)
    bundle = explain_case(model, store.get(args.case), args.n, store, cfg.out_dir)
    print(json.dumps(bundle.to_dict(), indent=1))
    return 0


def cmd_report(args) -> int:
    cfg = _config_from_args(args)
    report = run_experiment(cfg)
    print(Path(cfg.out_dir, "report.csv").read_text(), end="")
    return 1 if any(run.get("errors") for run in report["runs"]) else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mprotonet", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant=True):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--out", help="output directory (overrides the config)")
        if variant:
            sp.add_argument("--variant", choices=sorted(VARIANTS))
            sp.add_argument("--seed", type=int)
            sp.add_argument("--preset", choices=("paper", "desk"))
        return sp

    common(sub.add_parser("synth-data", help="generate and cache the synthetic cohort"), variant=False)
    sp = sub.add_parser("prepare", help="preprocess a BraTS directory into a manifest")
    sp.add_argument("--raw", required=True)
    sp.add_argument("--grades", help="name-mapping CSV with HGG/LGG grades")
    sp.add_argument("--out", required=True)
    common(sub.add_parser("train", help="cross-validate variant(s)"))
    sp = common(sub.add_parser("evaluate", help="per-case IDS/AP for a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cases", nargs="*")
    sp = common(sub.add_parser("explain", help="case-based explanation from a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--case", required=True)
    sp.add_argument("-n", type=int, default=3)
    common(sub.add_parser("report", help="run all variants and write report.json/report.csv/overlays"))
    return p


COMMANDS = {
    "synth-data": cmd_synth_data,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
