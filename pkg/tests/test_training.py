import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instrupose.data import SyntheticSceneSpec, generate_synthetic
from instrupose.network import DetectorNet, NetworkConfig, load_checkpoint
from instrupose.scene import SceneAnnotation, synthesize_targets
from instrupose.tensor import Tensor
from instrupose.training import (
    AdamState,
    NumericalError,
    TrainConfig,
    adam_step,
    augment,
    is_involution,
    train,
)


def scalar(v):
    return {"x": Tensor(np.array([v]), requires_grad=True)}


# -------------------------------------------------------------------- Adam
def test_adam_first_step_is_learning_rate():
    p = scalar(0.0)
    adam_step(p, AdamState(), lr=0.1, grads={"x": np.array([1.0])})
    assert p["x"].data[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    p = scalar(2.0)
    s = AdamState()
    adam_step(p, s, lr=0.1, grads={"x": np.array([1.0])})
    x1, m1, v1 = p["x"].data.copy(), s.m["x"].copy(), s.v["x"].copy()
    # without accumulated momentum a zero gradient leaves the parameter alone
    q = scalar(2.0)
    adam_step(q, AdamState(), lr=0.1, grads={"x": np.array([0.0])})
    assert q["x"].data[0] == 2.0
    adam_step(p, s, lr=0.1, grads={"x": np.array([0.0])})
    assert s.m["x"][0] == pytest.approx(0.9 * m1[0]) and s.v["x"][0] == pytest.approx(0.999 * v1[0])
    assert s.step == 2 and x1[0] != 2.0


def test_adam_descends_quadratic():
    p = scalar(1.0)
    s = AdamState()
    values = [1.0]
    for _ in range(10):
        x = p["x"]
        x.grad = None
        (x * x).sum().backward()
        adam_step(p, s, lr=0.05)
        values.append(float(p["x"].data[0] ** 2))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    p = {"w": Tensor(rng.standard_normal(5), requires_grad=True)}
    w = p["w"].data.copy()
    m = v = np.zeros(5)
    s = AdamState()
    for t in range(1, 6):
        g = rng.standard_normal(5)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam_step(p, s, lr=0.01, grads={"w": g})
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-14)


def test_adam_non_finite_gradient_aborts_before_update():
    p = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
    s = AdamState()
    with pytest.raises(NumericalError, match="b"):
        adam_step(p, s, lr=0.1, grads={"a": np.ones(2), "b": np.array([1.0, np.nan])})
    assert np.all(p["a"].data == 1.0) and s.step == 0 and not s.m


# ------------------------------------------------------------ augmentation
def random_annotation(rng, w, h, M=2, N=3):
    pres = rng.uniform(size=M) < 0.6
    joints = np.full((M, N, 2), np.nan)
    for m in np.flatnonzero(pres):
        joints[m] = np.column_stack([rng.integers(0, w, N), rng.integers(0, h, N)]).astype(float)
    return SceneAnnotation((w, h), pres, joints)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["hflip", "vflip"]))
def test_flip_twice_is_identity(seed, op):
    rng = np.random.default_rng(seed)
    ann = random_annotation(rng, 12, 10)
    img = rng.uniform(size=(1, 10, 12))
    img2, ann2 = augment(*augment(img, ann, op, [1, 0], [0, 2, 1]), op, [1, 0], [0, 2, 1])
    assert np.array_equal(img2, img) and ann2 == ann


def test_hflip_swaps_left_and_right_instruments():
    ann = SceneAnnotation((64, 64), [True, False], [[[0.0, 5.0], [10.0, 6.0]], None])
    img = np.zeros((1, 64, 64))
    img[0, 5, 0] = 1.0
    img2, ann2 = augment(img, ann, "hflip", [1, 0], [1, 0])
    assert ann2.presence.tolist() == [False, True]
    assert ann2.joints[1].tolist() == [[53.0, 6.0], [63.0, 5.0]]
    assert img2[0, 5, 63] == 1.0


def test_vflip_coordinates():
    ann = SceneAnnotation((8, 6), [True], [[[2.0, 0.0]]])
    _, ann2 = augment(np.zeros((1, 6, 8)), ann, "vflip")
    assert ann2.joints.tolist() == [[[2.0, 5.0]]]


def test_flip_targets_are_mirrored_targets():
    rng = np.random.default_rng(1)
    for _ in range(50):
        ann = random_annotation(rng, 16, 12)
        _, flipped = augment(np.zeros((1, 12, 16)), ann, "hflip")
        a, b = synthesize_targets(ann).joint_maps, synthesize_targets(flipped).joint_maps
        assert np.array_equal(b, a[..., ::-1])
        np.testing.assert_allclose(b.sum(axis=(-1, -2)), 1.0, atol=1e-9)


def test_augment_rejects_bad_permutation_and_op():
    ann = SceneAnnotation((4, 4), [True, True], [[[1.0, 1.0]], [[2.0, 2.0]]])
    with pytest.raises(ValueError, match="involution"):
        augment(np.zeros((1, 4, 4)), ann, "hflip", [0, 0], [0])
    with pytest.raises(ValueError, match="unknown"):
        augment(np.zeros((1, 4, 4)), ann, "rotate")


def test_involution_check():
    assert is_involution([1, 0, 2]) and not is_involution([1, 2, 0])


def test_subpixel_joint_beyond_last_center_is_clamped():
    ann = SceneAnnotation((8, 8), [True], [[[7.5, 3.0]]])
    _, out = augment(np.zeros((1, 8, 8)), ann, "hflip")
    assert out.joints[0, 0].tolist() == [0.0, 3.0]


# ------------------------------------------------------------- train config
@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(learning_rate=-1), dict(learning_rate=float("nan")),
                                dict(beta1=1.0), dict(hflip_joint_perm=[1, 2, 0]), dict(epochs=-1)])
def test_invalid_train_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_round_trip():
    cfg = TrainConfig(hflip=True, hflip_instrument_perm=[1, 0])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"momentum": 0.9})


# ------------------------------------------------------------- training loop
@pytest.fixture(scope="module")
def toy():
    ds = generate_synthetic(SyntheticSceneSpec(image_size=(16, 16), seed=3, tip_length_range=(0.2, 0.3)), 6)
    cfg = NetworkConfig(depth=2, base_features=2, input_size=(16, 16), num_instruments=2, num_joints=3)
    return ds.load_images(), ds.annotations, cfg


def run(toy, tmp=None, **kw):
    X, A, ncfg = toy
    net = DetectorNet.build(ncfg, 0)
    tc = TrainConfig(**{**dict(learning_rate=1e-3, batch_size=4, epochs=2, hflip=True, vflip=True,
                                hflip_instrument_perm=[1, 0], hflip_joint_perm=[0, 2, 1],
                                vflip_joint_perm=[0, 2, 1]), **kw})
    return net, train(net, X, A, tc, run_dir=tmp)


def test_training_is_reproducible(toy, tmp_path):
    _, r1 = run(toy, tmp_path / "a")
    _, r2 = run(toy, tmp_path / "b")
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert r1.checkpoint == r2.checkpoint
    assert len(r1.history) == 2 * 2  # epochs * ceil(6 / 4)


def test_loss_log_columns(toy, tmp_path):
    _, r = run(toy, tmp_path)
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["step", "epoch", "loss", "presence_term", "map_term"]
    assert [float(v) for v in rows[1][2:]] == [r.history[0][k] for k in ("loss", "presence_term", "map_term")]
    assert (tmp_path / "final.ckpt").read_bytes() == r.checkpoint


def test_zero_learning_rate_leaves_parameters(toy):
    X, A, ncfg = toy
    before = DetectorNet.build(ncfg, 0).state_dict()
    net, _ = run(toy, learning_rate=0.0, epochs=3)
    after = net.state_dict()
    for k in before:
        if "running" not in k:
            assert np.array_equal(before[k], after[k]), k


def test_resume_continues_bit_identically(toy, tmp_path):
    _, full = run(toy, tmp_path / "full", epochs=4, checkpoint_every=2)
    mid = (tmp_path / "full" / "epoch_0002.ckpt").read_bytes()
    X, A, ncfg = toy
    net = DetectorNet.build(ncfg, 0)
    tc = TrainConfig(**load_checkpoint(mid).metadata["train_config"])
    resumed = train(net, X, A, tc, resume=mid)
    assert resumed.checkpoint == full.checkpoint
    assert resumed.history == full.history[len(full.history) // 2:]


def test_early_descent_on_fixed_batch(toy):
    X, A, ncfg = toy
    net = DetectorNet.build(ncfg, 0)
    r = train(net, X[:2], A[:2], TrainConfig(learning_rate=1e-3, batch_size=2, epochs=5))
    losses = [h["loss"] for h in r.history]
    assert losses[1] < losses[0]


def test_mismatched_dataset_rejected(toy):
    X, A, ncfg = toy
    with pytest.raises(ValueError, match="does not match"):
        train(DetectorNet.build(ncfg, 0), X[:3], A, TrainConfig(epochs=1))
    with pytest.raises(ValueError, match="does not match"):
        train(DetectorNet.build(ncfg, 0), X[:, :, :8], A, TrainConfig(epochs=1))


def test_non_finite_loss_aborts(toy):
    X, A, ncfg = toy
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        train(DetectorNet.build(ncfg, 0), bad, A, TrainConfig(epochs=1, batch_size=6))
