import math
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from mprotonet.interpret import (
    DeletionCurve,
    EmptyMapWarning,
    MapSource,
    MetricError,
    activation_precision,
    balanced_accuracy,
    class_activation_map,
    deletion_order,
    grad_cam,
    ids,
    incremental_deletion,
    paired_t_test,
    regularized_incomplete_beta,
    summarize,
    t_cdf,
    upsample,
)
from mprotonet.network import BackboneConfig, VARIANTS, build_model


def trilinear_oracle(v, out_shape):
    """Per-voxel trilinear interpolation with half-pixel centers, edge clamped."""
    out = np.zeros(out_shape)
    axes = []
    for n_in, n_out in zip(v.shape, out_shape):
        coords = []
        for j in range(n_out):
            src = max((j + 0.5) * n_in / n_out - 0.5, 0.0)
            i0 = min(int(math.floor(src)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            coords.append((i0, i1, src - i0))
        axes.append(coords)
    for a, (x0, x1, lx) in enumerate(axes[0]):
        for b, (y0, y1, ly) in enumerate(axes[1]):
            for c, (z0, z1, lz) in enumerate(axes[2]):
                total = 0.0
                for xi, wx in ((x0, 1 - lx), (x1, lx)):
                    for yi, wy in ((y0, 1 - ly), (y1, ly)):
                        for zi, wz in ((z0, 1 - lz), (z1, lz)):
                            total += wx * wy * wz * v[xi, yi, zi]
                out[a, b, c] = total
    return out


# -- upsampling and activation precision ----------------------------------------


def test_upsample_matches_trilinear_oracle():
    rng = np.random.default_rng(0)
    v = rng.random((4, 4, 3)).astype(np.float32)
    ours = upsample(v, (32, 32, 24))
    np.testing.assert_allclose(ours, trilinear_oracle(v.astype(np.float64), (32, 32, 24)), atol=1e-6)


def test_upsample_constant_preserved():
    v = np.full((16, 16, 12), 0.7, np.float32)
    np.testing.assert_allclose(upsample(v, (128, 128, 96)), 0.7, atol=1e-6)


def test_activation_precision_counts():
    binary = np.zeros((4, 4, 4), bool)
    binary[0, 0, :4] = True
    mask = np.zeros((4, 4, 4), np.uint8)
    mask[0, 0, :3] = 1
    assert activation_precision(binary, mask) == 0.75


def test_activation_precision_full_volume_map():
    mask = np.zeros((8, 8, 6), np.uint8)
    mask[:4] = 1
    assert activation_precision(np.ones((8, 8, 6), bool), mask) == pytest.approx(0.5)
    assert activation_precision(mask.astype(bool), mask) == 1.0


def test_activation_precision_empty_map_warns():
    with pytest.warns(EmptyMapWarning):
        assert activation_precision(np.zeros((2, 2, 2), np.float32), np.ones((16, 16, 12), np.uint8)) == 0.0


def test_activation_precision_native_map():
    native = np.zeros((2, 2, 2), np.float32)
    native[0] = 1.0
    mask = np.zeros((8, 8, 8), np.uint8)
    mask[:4] = 1
    # interpolated values exceed 0.5 only in the first half along axis 0
    assert activation_precision(native, mask) == 1.0


def test_activation_precision_shape_error():
    with pytest.raises(MetricError):
        activation_precision(np.ones((4, 4, 4), bool), np.ones((4, 4, 3), np.uint8))


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_activation_precision_brute_force(seed):
    rng = np.random.default_rng(seed)
    native = rng.random((2, 2, 2)).astype(np.float32)
    mask = rng.random((6, 6, 4)) < 0.4
    up = trilinear_oracle(native.astype(np.float64), (6, 6, 4))
    sel = up > 0.5
    # exclude knife-edge voxels where float32 and float64 could disagree
    if np.any(np.abs(up - 0.5) < 1e-5):
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyMapWarning)
        got = activation_precision(native, mask.astype(np.uint8))
    expected = (sel & mask).sum() / sel.sum() if sel.sum() else 0.0
    assert got == pytest.approx(expected, abs=1e-12)


# -- deletion curves and IDS ----------------------------------------------------------


def test_ids_reference_curves():
    t = np.linspace(0, 1, 21)
    assert ids(DeletionCurve(t, np.full(21, 0.8))) == 1.0
    assert ids(DeletionCurve(t, 1 - t)) == pytest.approx(0.5, abs=1e-12)
    sudden = np.zeros(21)
    sudden[0] = 1.0
    assert ids(DeletionCurve(t, sudden)) == pytest.approx(0.025, abs=1e-12)
    late = np.ones(21)
    late[-1] = 0.0
    assert ids(DeletionCurve(t, late)) == pytest.approx(0.975, abs=1e-12)


def test_ids_clamped():
    t = np.linspace(0, 1, 21)
    # probability rises above its start before falling: raw value exceeds 1
    p = np.concatenate([[0.6], np.full(19, 1.0), [0.0]])
    assert ids(DeletionCurve(t, p)) == 1.0


@given(st.integers(0, 10_000), st.floats(0.1, 5.0), st.floats(-3.0, 3.0))
@settings(max_examples=100)
def test_ids_affine_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, 21)
    p = rng.random(21)
    if abs(p[0] - p[-1]) < 1e-3:
        return
    assert ids(DeletionCurve(t, a * p + b)) == pytest.approx(ids(DeletionCurve(t, p)), abs=1e-9)


def test_deletion_curve_validation():
    with pytest.raises(MetricError):
        DeletionCurve([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(MetricError):
        DeletionCurve([0.0, 0.5, 1.0], [1.0, 1.0])


def test_deletion_order_stable_ties():
    m = np.array([[[0.5, 1.0], [0.5, 1.0]]])
    assert deletion_order(m).tolist() == [1, 3, 0, 2]


class ProbeModel:
    """Probability depends on a single voxel: p1 = sigmoid(10 * x[0, probe])."""

    def __init__(self, probe):
        self.probe = probe

    def eval(self):
        return self

    def __call__(self, x):
        v = x[:, 0].reshape(len(x), -1)[:, self.probe]
        p1 = torch.sigmoid(10 * v)
        return SimpleNamespace(p=torch.stack([1 - p1, p1], dim=1))


def test_single_voxel_probe():
    shape = (4, 8, 8, 6)
    x = torch.ones((1,) + shape)
    n_vox = 8 * 8 * 6
    model = ProbeModel(probe=17)
    ranked = np.zeros(shape[1:], np.float32)
    ranked.ravel()[17] = 1.0  # the probe is deleted first
    curve = incremental_deletion(model, x, ranked, step=0.05)
    assert curve.p[0] == pytest.approx(float(torch.sigmoid(torch.tensor(10.0))))
    assert np.allclose(curve.p[1:], 0.5)
    assert ids(curve) == pytest.approx(0.025, abs=1e-9)
    # probe ranked last: survives until the final fraction
    last = np.ones(shape[1:], np.float32)
    last.ravel()[17] = 0.0
    curve = incremental_deletion(model, x, last, step=0.05)
    assert np.allclose(curve.p[:-1], curve.p[0]) and curve.p[-1] == pytest.approx(0.5)
    assert ids(curve) == pytest.approx(0.975, abs=1e-9)
    assert int(round(0.05 * n_vox)) >= 1


def test_deletion_zeroes_all_modalities():
    seen = []

    class Recorder(ProbeModel):
        def __call__(self, x):
            seen.append(x.clone())
            return super().__call__(x)

    x = torch.ones(1, 4, 4, 4, 4)
    vmap = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
    incremental_deletion(Recorder(0), x, vmap, step=0.25, target=1)
    batch = torch.cat(seen)
    assert torch.equal(batch[0], x[0])
    for j, t in enumerate([0.0, 0.25, 0.5, 0.75, 1.0]):
        zeros = (batch[j] == 0).all(0).sum().item()
        assert zeros == round(t * 64)
        assert torch.equal((batch[j] == 0).any(0), (batch[j] == 0).all(0))


# -- activation maps ------------------------------------------------------------------


def test_grad_cam_linear_score():
    a = torch.rand(3, 4, 4, 2, requires_grad=True)
    w = torch.tensor([1.0, -2.0, 0.5])
    score = (a.mean(dim=(1, 2, 3)) * w).sum()
    cam = grad_cam(a, score)
    expected = torch.relu((w.view(3, 1, 1, 1) / 32 * a).sum(0))
    assert torch.allclose(cam, expected.detach(), atol=1e-7)


def tiny_cfg():
    return BackboneConfig.toy(input_shape=(32, 32, 24), stem_channels=4, widths=(4, 8), embedding_channels=8,
                              prototypes_per_class=3)


def test_class_activation_map_sources():
    x = torch.randn(1, 4, 32, 32, 24)
    for name, source in (("CNN", MapSource.GRADCAM), ("ProtoPNet", MapSource.PROTOPNET_PREPOOL),
                         ("MProtoNet_C", MapSource.PROTO_MEAN)):
        model = build_model(VARIANTS[name], tiny_cfg(), seed=0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            smap = class_activation_map(model, x, 1)
        assert smap.source == source and smap.values.shape == (4, 4, 3)
        assert smap.values.min() >= 0 and smap.values.max() <= 1 + 1e-6


def test_proto_mean_map_is_class_mean():
    model = build_model(VARIANTS["XProtoNet"], tiny_cfg(), seed=0).eval()
    x = torch.randn(1, 4, 32, 32, 24)
    with torch.no_grad():
        trace = model(x)
    smap = class_activation_map(model, x, 0, trace)
    mean = trace.M[0, :3].mean(0).numpy()
    np.testing.assert_allclose(smap.values, mean / mean.max(), atol=1e-6)
    assert smap.values.max() == pytest.approx(1.0)


# -- balanced accuracy -------------------------------------------------------------


def test_balanced_accuracy_values():
    assert balanced_accuracy([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert balanced_accuracy([0, 0, 0, 0], [0, 0, 0, 1]) == 0.5
    assert balanced_accuracy([0, 1, 1, 1], [0, 0, 1, 1]) == 0.75
    with pytest.raises(MetricError):
        balanced_accuracy([0, 0], [0, 0])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=40), st.integers(0, 1000))
def test_balanced_accuracy_brute_force_and_permutation(pairs, seed):
    preds, labels = map(np.array, zip(*pairs))
    if len(set(labels)) < 2:
        return
    recall = []
    for c in (0, 1):
        hits = sum(1 for p, l in pairs if l == c and p == c)
        recall.append(hits / sum(1 for _, l in pairs if l == c))
    assert balanced_accuracy(preds, labels) == pytest.approx(sum(recall) / 2, abs=1e-12)
    perm = np.random.default_rng(seed).permutation(len(pairs))
    assert balanced_accuracy(preds[perm], labels[perm]) == pytest.approx(balanced_accuracy(preds, labels), abs=1e-12)


# -- statistics ---------------------------------------------------------------------------


@given(st.floats(0.05, 50), st.floats(0.05, 50), st.floats(0.0, 1.0))
@settings(max_examples=200)
def test_incomplete_beta_matches_reference(a, b, x):
    assert regularized_incomplete_beta(a, b, x) == pytest.approx(float(special.betainc(a, b, x)), abs=1e-10)


@given(st.floats(-30, 30), st.integers(1, 60))
@settings(max_examples=200)
def test_t_cdf_matches_reference(t, dof):
    assert t_cdf(t, dof) == pytest.approx(float(stats.t.cdf(t, dof)), abs=1e-10)


def test_paired_t_test_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(3, 12))
        a = rng.normal(0.8, 0.05, n)
        b = a + rng.normal(rng.normal(0, 0.03), 0.03, n)
        assert paired_t_test(a, b) == pytest.approx(stats.ttest_rel(a, b).pvalue, abs=1e-6)


def test_paired_t_test_degenerate():
    assert paired_t_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7]) == 1.0
    assert paired_t_test([0.6, 0.7, 0.8], [0.5, 0.6, 0.7]) == 0.0
    with pytest.raises(MetricError):
        paired_t_test([0.5], [0.4])
    with pytest.raises(MetricError):
        paired_t_test([0.5, 0.2], [0.4])


@given(st.lists(st.floats(0, 1), min_size=3, max_size=10), st.integers(0, 1000))
def test_paired_t_test_symmetric_and_permutation_invariant(a, seed):
    rng = np.random.default_rng(seed)
    a = np.array(a)
    b = np.clip(a + rng.normal(0, 0.1, len(a)), 0, 1)
    p = paired_t_test(a, b)
    perm = rng.permutation(len(a))
    assert paired_t_test(b, a) == pytest.approx(p, abs=1e-12)
    assert paired_t_test(a[perm], b[perm]) == pytest.approx(p, abs=1e-9)
    assert 0.0 <= p <= 1.0


def test_summarize_uses_sample_std():
    s = summarize([0.8, 0.85, 0.9])
    assert s["mean"] == pytest.approx(0.85)
    assert s["std"] == pytest.approx(0.05)
