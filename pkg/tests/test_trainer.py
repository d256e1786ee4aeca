import json
import math

import numpy as np
import pytest
import torch

from conftest import small_backbone, small_schedule
from mprotonet.interpret import balanced_accuracy
from mprotonet.network import VARIANTS, build_model, load_checkpoint
from mprotonet.objectives import LossWeights
from mprotonet.trainer import (
    CaseDataset,
    EvalOptions,
    FoldResult,
    LeakageError,
    TrainSchedule,
    aggregate,
    fit_last_layer,
    learning_rate,
    reassign_prototypes,
    run_cross_validation,
    run_fold,
    train_model,
    train_stage1,
    train_stage3,
)
from mprotonet.volume_io import AugmentationConfig, ConfigurationError, make_folds


def snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def changed(before, model):
    return {n for n, p in model.named_parameters() if not torch.equal(before[n], p.detach())}


# -- schedule -------------------------------------------------------------------


def test_learning_rate_schedule_paper():
    s = TrainSchedule.paper()
    assert learning_rate(0, s) == 0.0
    assert learning_rate(10, s) == pytest.approx(5e-4)
    assert learning_rate(20, s) == pytest.approx(1e-3)
    assert learning_rate(60, s) == pytest.approx(5e-4)
    assert learning_rate(99, s) == pytest.approx(0.0005 * (1 + math.cos(math.pi * 79 / 80)))
    assert learning_rate(99, s) == pytest.approx(3.855e-7, rel=1e-3)


def test_learning_rate_continuous_at_warmup_end():
    s = TrainSchedule.paper()
    assert learning_rate(20 - 1e-9, s) == pytest.approx(learning_rate(20, s), abs=1e-9)


def test_presets():
    d = TrainSchedule.desk()
    assert (d.stage1_epochs, d.warmup_epochs, d.cosine_epochs, d.batch_size, d.cycle_period) == (20, 4, 16, 8, 10)
    with pytest.raises(ConfigurationError):
        TrainSchedule(stage1_epochs=100, warmup_epochs=10, cosine_epochs=80)
    with pytest.raises(ConfigurationError):
        TrainSchedule.preset("fast")


# -- data ------------------------------------------------------------------------


def test_batches_deterministic_and_complete(small_store):
    ds = CaseDataset(small_store, small_store.manifest.ids, AugmentationConfig())
    a = [(ids, x) for ids, x, _ in ds.batches(5, seed=1, epoch=2, augment_batch=True)]
    b = [(ids, x) for ids, x, _ in ds.batches(5, seed=1, epoch=2, augment_batch=True)]
    assert [i for i, _ in a] == [i for i, _ in b]
    assert all(torch.equal(x, y) for (_, x), (_, y) in zip(a, b))
    assert sorted(sum((i for i, _ in a), [])) == sorted(small_store.manifest.ids)
    other = [ids for ids, _, _ in ds.batches(5, seed=1, epoch=3)]
    assert other != [i for i, _ in a]


# -- stage contracts ------------------------------------------------------------------


@pytest.mark.parametrize("name", ["ProtoPNet", "XProtoNet", "MProtoNet_C"])
def test_stage1_keeps_classification_layer(small_store, name):
    model = build_model(VARIANTS[name], small_backbone(), seed=0)
    ds = CaseDataset(small_store, small_store.manifest.ids)
    before = snapshot(model)
    train_stage1(model, ds, small_schedule(), LossWeights(), epochs=[1])
    diff = changed(before, model)
    assert "last_layer" not in diff
    assert "prototypes" in diff and any(n.startswith("features") for n in diff)


def test_cnn_trains_end_to_end(small_store):
    model = build_model(VARIANTS["CNN"], small_backbone(), seed=0)
    ds = CaseDataset(small_store, small_store.manifest.ids)
    before = snapshot(model)
    train_stage1(model, ds, small_schedule(), LossWeights(), epochs=[1])
    assert "last_layer" in changed(before, model)
    with pytest.raises(ConfigurationError):
        reassign_prototypes(model, ds)


@pytest.mark.parametrize("name", ["ProtoPNet", "MProtoNet_C"])
def test_stage2_changes_only_prototypes(small_store, name):
    model = build_model(VARIANTS[name], small_backbone(), seed=0)
    ds = CaseDataset(small_store, small_store.manifest.ids)
    before = snapshot(model)
    reassign_prototypes(model, ds)
    assert changed(before, model) == {"prototypes"}
    assert all(rec is not None for rec in model.provenance)


@pytest.mark.parametrize("name", ["ProtoPNet", "MProtoNet_C"])
def test_stage3_changes_only_classification_layer(small_store, name):
    model = build_model(VARIANTS[name], small_backbone(), seed=0)
    ds = CaseDataset(small_store, small_store.manifest.ids)
    before = snapshot(model)
    train_stage3(model, ds, small_schedule(), LossWeights())
    assert changed(before, model) == {"last_layer"}
    assert all(p.requires_grad for p in model.parameters())


def test_reassignment_brute_force(small_store):
    model = build_model(VARIANTS["XProtoNet"], small_backbone(), seed=2).eval()
    ds = CaseDataset(small_store, small_store.manifest.ids)
    labels = small_store.manifest.labels()
    per_case = {}
    with torch.no_grad():
        for cid in ds.ids:
            x = torch.from_numpy(np.asarray(small_store.get(cid).volume, np.float32))[None]
            per_case[cid] = model(x)
    expected = []
    for k in range(model.cfg.n_prototypes):
        cls = ("HGG", "LGG")[int(model.class_of[k])]
        best_sim, best_id = -2.0, None
        for cid in ds.ids:
            if labels[cid] != cls:
                continue
            s = float(per_case[cid].S[0, k])
            if s > best_sim:
                best_sim, best_id = s, cid
        expected.append((best_id, per_case[best_id].H[0, k]))
    reassign_prototypes(model, ds)
    for k, (cid, h) in enumerate(expected):
        assert model.provenance[k]["case_id"] == cid
        assert torch.allclose(model.prototypes[k].detach(), h, atol=1e-5)
        assert model.provenance[k]["attention"].shape == (4, 4, 3)


def test_reassignment_singleton_pool(small_store):
    ids = small_store.manifest.ids
    labels = small_store.manifest.labels()
    lgg = [i for i in ids if labels[i] == "LGG"][:1]
    subset = [i for i in ids if labels[i] == "HGG"] + lgg
    model = build_model(VARIANTS["MProtoNet_C"], small_backbone(), seed=0)
    reassign_prototypes(model, CaseDataset(small_store, subset))
    for k in range(model.cfg.n_prototypes):
        if int(model.class_of[k]) == 1:
            assert model.provenance[k]["case_id"] == lgg[0]
        else:
            assert labels[model.provenance[k]["case_id"]] == "HGG"


def test_stage3_separable_reaches_full_accuracy():
    torch.manual_seed(0)
    model = build_model(VARIANTS["XProtoNet"], small_backbone(), seed=0)
    n = 40
    labels = torch.tensor([0, 1] * (n // 2))
    own = (model.class_of.view(1, -1) == labels.view(-1, 1)).float()
    sims = 0.6 * own + 0.1 * torch.rand(n, model.cfg.n_prototypes)
    with torch.no_grad():
        model.last_layer.copy_(torch.zeros_like(model.last_layer))
    fit_last_layer(model, sims, labels, [20, 20], small_schedule(stage3_epochs=50), LossWeights())
    preds = (sims @ model.last_layer.detach()).argmax(1)
    assert balanced_accuracy(preds.numpy(), labels.numpy()) == 1.0


# -- full schedule, checkpoints, resume ---------------------------------------------


def test_resume_is_bit_compatible(small_store, tmp_path):
    ids = small_store.manifest.ids
    sched = small_schedule(augment=True)
    full = build_model(VARIANTS["MProtoNet_C"], small_backbone(), seed=4)
    train_model(full, CaseDataset(small_store, ids, AugmentationConfig()), sched, LossWeights(), tmp_path / "a.mproto",
                tmp_path / "a.jsonl")

    part = build_model(VARIANTS["MProtoNet_C"], small_backbone(), seed=4)
    train_model(part, CaseDataset(small_store, ids, AugmentationConfig()), sched, LossWeights(), tmp_path / "b.mproto",
                tmp_path / "b.jsonl", stop_after_cycle=0)
    resumed = build_model(VARIANTS["MProtoNet_C"], small_backbone(), seed=99)
    train_model(resumed, CaseDataset(small_store, ids, AugmentationConfig()), sched, LossWeights(),
                tmp_path / "b.mproto", tmp_path / "b.jsonl", resume=True)
    for (n, p), (_, q) in zip(full.named_parameters(), resumed.named_parameters()):
        assert torch.equal(p, q), n
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    _, header, _ = load_checkpoint(tmp_path / "b.mproto")
    assert header["complete"] and header["cycle"] == 1


def test_train_log_records_stages(small_store, tmp_path):
    model = build_model(VARIANTS["MProtoNet_C"], small_backbone(), seed=0)
    train_model(model, CaseDataset(small_store, small_store.manifest.ids), small_schedule(stage1_epochs=1,
                warmup_epochs=1, cosine_epochs=0), LossWeights(), log_path=tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert {r["stage"] for r in rows} == {1, 3}
    assert set(rows[0]["terms"]) == {"cls", "clst", "sep", "map", "oc"}
    assert set(rows[-1]["terms"]) == {"cls", "l1"}
    assert [r["step"] for r in rows] == list(range(1, len(rows) + 1))


# -- folds ------------------------------------------------------------------------------------


def test_leak_audit(small_store, tmp_path):
    ids = small_store.manifest.ids
    with pytest.raises(LeakageError):
        run_fold(small_store, ids, ids[:2], VARIANTS["CNN"], small_schedule(), small_backbone(), LossWeights())


def test_run_fold_outputs(small_store, tmp_path):
    split = make_folds(small_store.manifest, 3, 0)
    res = run_fold(small_store, split.train_ids(0), split.fold_ids(0), VARIANTS["MProtoNet_C"],
                   small_schedule(stage1_epochs=1, warmup_epochs=1, cosine_epochs=0), small_backbone(), LossWeights(),
                   0, tmp_path / "f0", EvalOptions(deletion_step=0.25, random_baseline=True))
    assert set(res.test_ids).isdisjoint(res.train_ids)
    assert 0 <= res.bac <= 1 and 0 <= res.ids <= 1 and 0 <= res.ap <= 1 and 0 <= res.ids_random <= 1
    assert (tmp_path / "f0" / "checkpoint.mproto").exists()
    saved = json.loads((tmp_path / "f0" / "fold_result.json").read_text())
    assert FoldResult.from_dict(saved).bac == res.bac
    assert len(saved["cases"]) == len(res.test_ids)
    assert len(saved["cases"][0]["curve"]["t"]) == 5


def test_aggregate_uses_sample_std():
    results = [FoldResult(i, b, 0.1 * i, 0.5, None) for i, b in enumerate([0.8, 0.85, 0.9])]
    summary = aggregate(results)
    assert summary["bac"]["mean"] == pytest.approx(0.85)
    assert summary["bac"]["std"] == pytest.approx(0.05)
    assert "ids_random" not in summary


def test_cross_validation_cnn_smoke(small_store, tmp_path):
    results, summary = run_cross_validation(
        small_store.manifest, small_store, VARIANTS["CNN"], small_schedule(stage1_epochs=1, warmup_epochs=1,
        cosine_epochs=0), small_backbone(), k=3, out_dir=tmp_path, options=EvalOptions(with_interpretability=False))
    assert len(results) == 3
    assert set(summary) == {"bac"}
    seen = sorted(sum((r.test_ids for r in results), []))
    assert seen == sorted(small_store.manifest.ids)


def test_stage1_loss_decreases_over_first_epochs(tmp_path):
    # 20-case toy run, 10-epoch schedule: epoch-mean total loss strictly decreases
    # over the first five epochs for at least four of five seeds
    import io

    from mprotonet.volume_io import CaseStore, synthesize_dataset
    from conftest import SMALL_SHAPE

    man = synthesize_dataset(20, 0.5, 13)
    store = CaseStore(man, tmp_path / "cache", shape=SMALL_SHAPE)
    decreasing = 0
    for seed in range(5):
        schedule = TrainSchedule(stage1_epochs=10, warmup_epochs=2, cosine_epochs=8, batch_size=8, seed=seed)
        model = build_model(VARIANTS["MProtoNet_C"], small_backbone(), seed=seed)
        dataset = CaseDataset(store, man.ids, AugmentationConfig(rng_seed=seed))
        log = io.StringIO()
        train_stage1(model, dataset, schedule, LossWeights(), range(5), log_fh=log)
        totals = [json.loads(line)["total"] for line in log.getvalue().splitlines()]
        per_epoch = np.array(totals).reshape(5, -1).mean(1)
        decreasing += bool(np.all(np.diff(per_epoch) < 0))
    assert decreasing >= 4
