import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instrupose import functional as F
from instrupose.gradcheck import check_gradients
from instrupose.scene import (
    SceneAnnotation,
    SceneOutput,
    TargetStack,
    argmax_joints,
    composite_loss,
    extract_joints,
    gaussian_map,
    loss_terms,
    map_ce,
    presence_ce,
    synthesize_targets,
    target_entropy,
)
from instrupose.tensor import Tensor

from oracles import cross_entropy_sum, gaussian_at_centers, scene_cross_entropy_enumerated


def random_annotation(rng, M, N, w, h, p=0.5):
    presence = rng.uniform(size=M) < p
    joints = np.full((M, N, 2), np.nan)
    for m in np.flatnonzero(presence):
        joints[m, :, 0] = rng.uniform(0, w - 1, size=N)
        joints[m, :, 1] = rng.uniform(0, h - 1, size=N)
    return SceneAnnotation((w, h), presence, joints)


def random_output(rng, M, N, h, w):
    maps = F.spatial_softmax(Tensor(rng.standard_normal((1, M * N, h, w)) * 2)).data.reshape(M, N, h, w)
    return SceneOutput(Tensor(rng.uniform(0.02, 0.98, size=M)), Tensor(maps))


# --------------------------------------------------------------- annotation
def test_annotation_accepts_nested_lists_with_none():
    ann = SceneAnnotation((8, 8), [True, False], [[[1, 2], [3, 4]], None])
    assert ann.joints.shape == (2, 2, 2)
    assert np.isnan(ann.joints[1]).all()


def test_annotation_rejects_out_of_bounds():
    with pytest.raises(ValueError, match="outside"):
        SceneAnnotation((8, 8), [True], [[[8.0, 1.0]]])


def test_annotation_rejects_partial_and_stray_joints():
    with pytest.raises(ValueError, match="missing"):
        SceneAnnotation((8, 8), [True], [[[1.0, 1.0], None]])
    with pytest.raises(ValueError, match="absent"):
        SceneAnnotation((8, 8), [False], [[[1.0, 1.0]]])


# ------------------------------------------------------------------ targets
def test_absent_instrument_gets_exact_uniform():
    t = synthesize_targets(SceneAnnotation((4, 4), [False], np.full((1, 2, 2), np.nan)))
    assert np.all(t.joint_maps == 1.0 / 16)
    assert t.presence_targets.tolist() == [0.0]


def test_single_pixel_image():
    t = synthesize_targets(SceneAnnotation((1, 1), [True], [[[0.0, 0.0]]]))
    assert t.joint_maps.tolist() == [[[[1.0]]]]


def test_gaussian_center_and_ratio():
    ann = SceneAnnotation((21, 21), [True], [[[10.0, 10.0]]])
    g = synthesize_targets(ann, 10.0).joint_maps[0, 0]
    assert np.unravel_index(g.argmax(), g.shape) == (10, 10)
    assert abs(g[13, 10] / g[10, 10] - math.exp(-9 / 20)) < 1e-6
    assert abs(g[10, 13] / g[10, 10] - math.exp(-9 / 20)) < 1e-6


def test_gaussian_matches_density_oracle():
    want = gaussian_at_centers(3.3, 5.7, 11, 9, 10.0)
    want /= want.sum()
    np.testing.assert_allclose(gaussian_map(3.3, 5.7, 11, 9, 10.0), want, rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 4), st.integers(2, 24), st.integers(2, 24))
def test_targets_are_distributions(seed, M, N, w, h):
    rng = np.random.default_rng(seed)
    ann = random_annotation(rng, M, N, w, h)
    t = synthesize_targets(ann)
    assert t.joint_maps.shape == (M, N, h, w)
    assert np.all(t.joint_maps >= 0)
    np.testing.assert_allclose(t.joint_maps.sum(axis=(-1, -2)), 1.0, atol=1e-9)
    for m in np.flatnonzero(~ann.presence):
        assert np.all(t.joint_maps[m] == 1.0 / (w * h))


def test_integer_joint_argmax_is_the_joint():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x, y = rng.integers(0, 30), rng.integers(0, 20)
        g = gaussian_map(float(x), float(y), 30, 20)
        assert tuple(argmax_joints(g)) == (x, y)


def test_bad_sigma_rejected():
    with pytest.raises(ValueError):
        synthesize_targets(SceneAnnotation((4, 4), [True], [[[1.0, 1.0]]]), 0.0)


# ------------------------------------------------------------ cross-entropy
@pytest.mark.parametrize("t,p,want", [(1, 0.5, math.log(2)), (1, 0.9, -math.log(0.9)), (0, 1e-300, 0.0)])
def test_presence_ce_values(t, p, want):
    assert presence_ce(t, p).item() == pytest.approx(want, abs=1e-11)


def test_map_ce_uniform():
    assert map_ce(np.full((2, 2), 0.25), Tensor(np.full((2, 2), 0.25))).item() == pytest.approx(math.log(4), abs=1e-15)


def test_map_ce_matched_one_hot():
    onehot = np.zeros((3, 3))
    onehot[1, 2] = 1.0
    assert map_ce(onehot, Tensor(onehot)).item() == pytest.approx(0.0, abs=1e-11)


def test_map_ce_matches_sum_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = rng.dirichlet(np.ones(9)).reshape(3, 3)
        q = rng.dirichlet(np.ones(9)).reshape(3, 3)
        assert abs(map_ce(t, Tensor(q)).item() - cross_entropy_sum(t, q)) < 1e-12


def test_map_ce_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        map_ce(np.ones((2, 2)) / 4, Tensor(np.ones((3, 3)) / 9))


def test_composite_at_targets_equals_entropy():
    rng = np.random.default_rng(2)
    for _ in range(10):
        ann = random_annotation(rng, 3, 2, 9, 7)
        t = synthesize_targets(ann)
        out = SceneOutput(Tensor(t.presence_targets), Tensor(t.joint_maps))
        ent = -sum(float(np.sum(m * np.log(m))) for m in t.joint_maps.reshape(-1, 7, 9))
        assert composite_loss(out, t).item() == pytest.approx(ent, abs=1e-9)
        assert target_entropy(t) == pytest.approx(ent, abs=1e-9)


def test_composite_analytic_small_case():
    t = TargetStack(np.array([1.0]), gaussian_map(0.5, 0.5, 2, 2)[None, None])
    out = SceneOutput(Tensor([0.5]), Tensor(np.full((1, 1, 2, 2), 0.25)))
    assert composite_loss(out, t).item() == pytest.approx(math.log(2) + math.log(4), abs=1e-12)


def test_composite_matches_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(20):
        ann = random_annotation(rng, 2, 1, 3, 3)
        t = synthesize_targets(ann)
        out = random_output(rng, 2, 1, 3, 3)
        want = scene_cross_entropy_enumerated(t.presence_targets, t.joint_maps, out.presence_probs.data,
                                              out.joint_maps.data)
        assert abs(composite_loss(out, t).item() - want) < 1e-10


def test_dropping_absent_term_differs_by_a_constant():
    rng = np.random.default_rng(4)
    for _ in range(10):
        ann = random_annotation(rng, 2, 1, 3, 3)
        t = synthesize_targets(ann)
        out = random_output(rng, 2, 1, 3, 3)
        want = scene_cross_entropy_enumerated(t.presence_targets, t.joint_maps, out.presence_probs.data,
                                              out.joint_maps.data, absent_model="uniform")
        absent = int((~ann.presence).sum())
        got = composite_loss(out, t, supervise_absent=False).item() + absent * math.log(9)
        assert abs(got - want) < 1e-10


def test_batched_loss_is_batch_mean():
    rng = np.random.default_rng(5)
    anns = [random_annotation(rng, 2, 2, 5, 4) for _ in range(3)]
    outs = [random_output(rng, 2, 2, 4, 5) for _ in range(3)]
    ts = [synthesize_targets(a) for a in anns]
    singles = [composite_loss(o, t).item() for o, t in zip(outs, ts)]
    batched = SceneOutput(Tensor(np.stack([o.presence_probs.data for o in outs])),
                          Tensor(np.stack([o.joint_maps.data for o in outs])))
    assert composite_loss(batched, TargetStack.stack(ts)).item() == pytest.approx(np.mean(singles), abs=1e-12)


def test_presence_weight_scales_presence_sum():
    rng = np.random.default_rng(6)
    t = synthesize_targets(random_annotation(rng, 2, 1, 4, 4))
    out = random_output(rng, 2, 1, 4, 4)
    plain = loss_terms(out, t)
    heavy = loss_terms(out, t, presence_weight=3.0)
    assert heavy.total.item() == pytest.approx(3 * plain.presence.item() + plain.maps.item(), abs=1e-12)


def test_composite_gradients():
    rng = np.random.default_rng(7)
    t = synthesize_targets(random_annotation(rng, 2, 2, 4, 4, p=0.7))
    logits = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
    pres = Tensor(rng.standard_normal(2), requires_grad=True)

    def loss():
        maps = F.spatial_softmax(logits).reshape(2, 2, 4, 4)
        return composite_loss(SceneOutput(F.sigmoid(pres), maps), t)

    assert check_gradients(loss, [logits, pres]) < 1e-4


def test_loss_minimized_at_targets_by_descent():
    rng = np.random.default_rng(8)
    ann = SceneAnnotation((3, 3), [True, False], [[[1.2, 0.7]], None])
    t = synthesize_targets(ann)
    logits = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    pres = Tensor(np.zeros(2), requires_grad=True)
    floor = target_entropy(t)
    for _ in range(3000):
        logits.grad = pres.grad = None
        out = SceneOutput(F.sigmoid(pres), F.spatial_softmax(logits).reshape(2, 1, 3, 3))
        loss = composite_loss(out, t)
        assert loss.item() >= floor - 1e-12
        loss.backward()
        logits.data -= 0.5 * logits.grad
        pres.data -= 0.5 * pres.grad
    np.testing.assert_allclose(out.joint_maps.data, t.joint_maps, atol=1e-3)
    assert loss.item() - floor < 5e-3


# ----------------------------------------------------------------- decoding
def test_extract_unique_max():
    maps = np.zeros((1, 1, 6, 10))
    maps[0, 0, 3, 7] = 1.0
    det = extract_joints(SceneOutput(Tensor([0.9]), Tensor(maps)))
    assert det[0].present and tuple(det[0].joints[0]) == (7, 3)


def test_extract_uniform_is_origin():
    det = extract_joints(SceneOutput(Tensor([0.9]), Tensor(np.full((1, 2, 4, 4), 1 / 16))))
    assert det[0].joints.tolist() == [[0, 0], [0, 0]]


def test_extract_threshold_semantics():
    out = SceneOutput(Tensor([0.49, 0.5]), Tensor(np.full((2, 1, 2, 2), 0.25)))
    assert [d.present for d in extract_joints(out, 0.5)] == [False, True]
    with pytest.raises(ValueError):
        extract_joints(out, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([np.exp, np.cbrt, lambda v: 3 * v - 7, np.arctan]))
def test_argmax_invariant_to_increasing_maps(seed, f):
    maps = np.random.default_rng(seed).standard_normal((2, 3, 5, 6))
    assert np.array_equal(argmax_joints(maps), argmax_joints(f(maps)))
