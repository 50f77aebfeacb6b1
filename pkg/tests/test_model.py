import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zslattack import autodiff as ad
from zslattack import data
from zslattack.autodiff import Tensor
from zslattack.model import (
    DatasetError,
    LabelError,
    RemseState,
    SemanticSpace,
    TrainConfig,
    forward,
    init_model,
    ModelConfig,
    patchify,
    predict_concepts,
    remse_loss,
    remse_weights,
    sce_loss,
    seen_accuracy,
    train,
    unpatchify,
)

from conftest import tiny_model


# ------------------------------------------------------------------ patchify

def test_whole_image_patch():
    img = np.arange(16.0).reshape(4, 4, 1)
    out = patchify(img, 4).data
    assert out.shape == (1, 16)
    np.testing.assert_array_equal(out[0], np.arange(16.0))


def test_patches_in_raster_order():
    img = np.arange(16.0).reshape(4, 4, 1)
    out = patchify(img, 2).data
    np.testing.assert_array_equal(
        out, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]
    )


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((5, 4, 1)), 2)


def test_unpatchify_inverts():
    img = np.random.default_rng(0).uniform(size=(2, 8, 8, 3))
    np.testing.assert_array_equal(unpatchify(patchify(img, 4).data, (8, 8, 3), 4), img)


# ------------------------------------------------------------------- forward

def test_golden_forward(golden):
    model, g = golden
    out = forward(model, np.array(g["image"]))
    np.testing.assert_allclose(out.v_patch.data, g["v_patch"], atol=1e-12)
    np.testing.assert_allclose(out.v_final.data, g["v_final"], atol=1e-12)
    np.testing.assert_allclose(out.s_hat.data, g["s_hat"], atol=1e-12)


def test_zero_backbone_gives_zero_concepts():
    model = tiny_model()
    model.backbone_weight[:] = 0.0
    out = forward(model, np.random.default_rng(1).uniform(size=(4, 4, 1)))
    np.testing.assert_array_equal(out.v_patch.data, 0.0)
    np.testing.assert_allclose(out.attention.data, 1.0 / 3)
    np.testing.assert_array_equal(out.s_hat.data, 0.0)


def test_single_patch_global_equals_patch_row():
    config = ModelConfig(image_shape=(2, 2, 1), n_concepts=2, patch=2, d_v=3, d_e=2, d_attn=2)
    model = init_model(config, np.random.default_rng(0))
    model.w_v = np.zeros((3, 3))
    out = forward(model, np.random.default_rng(1).uniform(size=(2, 2, 1)))
    # with zero values the final features are v_global broadcast to each concept
    np.testing.assert_allclose(out.v_final.data, np.repeat(out.v_patch.data, 2, axis=0))


def test_batch_matches_single():
    model = tiny_model(use_relu=True)
    imgs = np.random.default_rng(2).uniform(size=(3, 4, 4, 1))
    batch = predict_concepts(model, imgs)
    for i in range(3):
        np.testing.assert_allclose(batch[i], predict_concepts(model, imgs[i]), atol=1e-14)


def test_forward_rejects_wrong_shape():
    with pytest.raises(ad.DimensionError):
        forward(tiny_model(), np.zeros((6, 6, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_attention_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    model = tiny_model(seed % 7)
    out = forward(model, rng.uniform(size=(2, 4, 4, 1)) * rng.uniform(0.1, 10))
    np.testing.assert_allclose(out.attention.data.sum(axis=-1), 1.0, atol=1e-12)


def test_forward_deterministic():
    model = tiny_model(3)
    img = np.random.default_rng(3).uniform(size=(4, 4, 1))
    assert np.array_equal(predict_concepts(model, img), predict_concepts(model, img.copy()))


def test_input_standardization_is_per_channel():
    imgs = np.random.default_rng(0).uniform(size=(5, 4, 4, 2))
    imgs[..., 1] = 0.5 + 0.1 * imgs[..., 1]
    config = ModelConfig(image_shape=(4, 4, 2), n_concepts=3, patch=2)
    model = init_model(config, np.random.default_rng(0), imgs)
    std = (imgs - model.input_mean) / model.input_std
    np.testing.assert_allclose(std.reshape(-1, 2).mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(std.reshape(-1, 2).std(axis=0), 1.0, atol=1e-12)


# -------------------------------------------------------------------- losses

def test_sce_uniform_posterior(golden_space):
    # equal cosine to classes 0 and 1
    assert sce_loss(np.array([1.0, 1.0]), 0, [0, 1], golden_space, 7.0).item() == pytest.approx(np.log(2))


def test_sce_confident(golden_space):
    loss = sce_loss(np.array([1.0, 0.0]), 0, [0, 1], golden_space, 10.0).item()
    assert loss == pytest.approx(np.log1p(np.exp(-10.0)), rel=1e-12)
    assert loss <= 5e-5


def test_sce_zero_temperature(golden_space):
    s = np.array([0.3, -2.0])
    assert sce_loss(s, 2, [0, 1, 2, 3], golden_space, 0.0).item() == pytest.approx(np.log(4))


def test_sce_label_outside_set(golden_space):
    with pytest.raises(LabelError):
        sce_loss(np.array([1.0, 0.0]), 2, [0, 1], golden_space, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.sampled_from([0.5, 2.0, 10.0]))
def test_sce_scale_invariant(v, c):
    s = np.array(v)
    if np.linalg.norm(s) < 1e-3:
        return
    space = SemanticSpace(np.array([[1.0, 0.2], [0.1, 1.0], [0.7, 0.7]]), [0, 1], [2])
    a = sce_loss(s, 1, [0, 1, 2], space, 8.0).item()
    b = sce_loss(c * s, 1, [0, 1, 2], space, 8.0).item()
    assert abs(a - b) <= 1e-10


def _plain_normalized_mse(s, labels, space):
    pred = s / np.linalg.norm(s, axis=1, keepdims=True)
    proto = space.prototypes / np.linalg.norm(space.prototypes, axis=1, keepdims=True)
    return float(np.mean(np.sum((pred - proto[labels]) ** 2, axis=1)))


def test_remse_zero_exponents_is_plain_mse(golden_space):
    rng = np.random.default_rng(0)
    s = rng.normal(size=(6, 2))
    labels = np.array([0, 1, 0, 1, 1, 0])
    loss = remse_loss(s, labels, golden_space, RemseState(0.0, 0.0)).item()
    assert loss == pytest.approx(_plain_normalized_mse(s, labels, golden_space), abs=1e-12)


def test_remse_weight_examples():
    m = np.array([[0.1, 0.1 * np.e, 0.3], [0.2, 0.05, 0.05]])
    p, q = remse_weights(m, alpha_re=1.0, beta_re=1.0)
    assert p[0, 0] == 1.0 and p[1, 1] == 1.0 and p[1, 2] == 1.0
    assert p[0, 1] == pytest.approx(2.0)
    assert q[0, 0] == 1.0 and q[1, 1] == 1.0
    p3, _ = remse_weights(m, alpha_re=0.0, beta_re=3.0)
    assert p3[0, 0] == 1.0 and p3[0, 1] == pytest.approx(8.0)


def test_remse_state_records_class_errors(golden_space):
    state = RemseState(1.0, 1.0)
    remse_loss(np.array([[1.0, 0.5], [0.2, 1.0], [0.9, 0.1]]), [0, 1, 0], golden_space, state)
    assert state.m_prime.shape == (2, 2)
    assert np.all(state.m_prime >= 0)


def test_remse_rejects_empty_and_unseen(golden_space):
    with pytest.raises(ad.ContractError):
        remse_loss(np.zeros((0, 2)), [], golden_space, RemseState())
    with pytest.raises(LabelError):
        remse_loss(np.ones((1, 2)), [2], golden_space, RemseState())


def test_remse_state_rejects_negative_exponent():
    with pytest.raises(ValueError):
        RemseState(alpha_re=-1.0)


def test_remse_weights_are_constants(golden_space):
    """The gradient equals the gradient of the weighted sum with frozen weights."""
    rng = np.random.default_rng(4)
    s0 = rng.normal(size=(4, 2))
    labels = [0, 1, 1, 0]
    state = RemseState(1.0, 2.0)
    x = Tensor(s0, requires_grad=True)
    ad.backward(remse_loss(x, labels, golden_space, state))
    p, q = remse_weights(state.m_prime, 1.0, 2.0)
    inverse = np.searchsorted(state.classes, labels)
    w = (p * q)[inverse]
    proto = golden_space.prototypes / np.linalg.norm(golden_space.prototypes, axis=1, keepdims=True)

    def frozen(z):
        pred = z / np.linalg.norm(z, axis=1, keepdims=True)
        return float(np.sum(w * (pred - proto[labels]) ** 2) / len(labels))

    np.testing.assert_allclose(x.grad, ad.fd_gradient(frozen, s0.copy(), 1e-6), rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize("use_relu", [False, True])
def test_image_gradients_match_finite_differences(use_relu, golden_space):
    model = tiny_model(5, d_s=2, use_relu=use_relu)
    img = np.random.default_rng(5).uniform(size=(2, 4, 4, 1))
    labels = [0, 1]
    for loss in (
        lambda s: sce_loss(ad.take(s, 0), 0, [0, 1, 2, 3], golden_space, 6.0),
        lambda s: remse_loss(s, labels, golden_space, RemseState(0.0, 0.0)),
    ):
        x = Tensor(img, requires_grad=True)
        ad.backward(loss(forward(model, x).s_hat))
        numeric = ad.fd_gradient(lambda z: loss(forward(model, z).s_hat).item(), img.copy(), 1e-5)
        assert np.linalg.norm(x.grad - numeric) <= 1e-4 * np.linalg.norm(numeric)


# ------------------------------------------------------------------ training

@pytest.fixture(scope="module")
def small_set():
    spec = data.SyntheticSpec(n_seen=3, n_unseen=2, d_s=4, image_side=8, patch=4, train_per_class=8,
                              test_seen_per_class=2, test_unseen_per_class=2, seed=3)
    ds = data.generate(spec)
    tr = ds.split(data.TRAIN)
    config = ModelConfig(image_shape=(8, 8, 3), n_concepts=4, d_v=8, d_e=4, d_attn=4)
    return ds, tr, init_model(config, np.random.default_rng(0), tr.images)


def test_zero_lr_keeps_parameters(small_set):
    ds, tr, m0 = small_set
    m1, trace = train(m0, tr.images, tr.labels, ds.space, TrainConfig(epochs=3, lr=0.0), np.random.default_rng(1))
    for name in m0.ARRAYS:
        np.testing.assert_array_equal(getattr(m1, name), getattr(m0, name))
    assert m1.tau == m0.tau and len(trace) == 3


def test_lambda_zero_trace_is_pure_sce(small_set):
    ds, tr, m0 = small_set
    _, trace = train(m0, tr.images, tr.labels, ds.space, TrainConfig(epochs=3, lam=0.0), np.random.default_rng(1))
    for e in trace:
        assert e.total == pytest.approx(e.sce, abs=1e-12)


def test_training_is_deterministic_and_pure(small_set):
    ds, tr, m0 = small_set
    before = m0.backbone_weight.copy()
    runs = [train(m0, tr.images, tr.labels, ds.space, TrainConfig(epochs=2), np.random.default_rng(9))[0] for _ in range(2)]
    np.testing.assert_array_equal(runs[0].backbone_weight, runs[1].backbone_weight)
    np.testing.assert_array_equal(m0.backbone_weight, before)


def test_training_reduces_loss(small_set):
    ds, tr, m0 = small_set
    _, trace = train(m0, tr.images, tr.labels, ds.space, TrainConfig(epochs=20), np.random.default_rng(1))
    assert trace[-1].total < trace[0].total


def test_train_rejects_unseen_samples(small_set):
    ds, _, m0 = small_set
    te = ds.split(data.TEST_UNSEEN)
    with pytest.raises(DatasetError):
        train(m0, te.images, te.labels, ds.space, TrainConfig(epochs=1), np.random.default_rng(0))


def test_tau_stays_positive(small_set):
    ds, tr, m0 = small_set
    m0 = m0.copy()
    m0.tau = 1e-3
    m1, _ = train(m0, tr.images, tr.labels, ds.space, TrainConfig(epochs=2, lr=0.5), np.random.default_rng(0))
    assert m1.tau >= 1e-3


def test_divergence_raises(small_set):
    ds, tr, m0 = small_set
    with pytest.raises(ad.NumericError), np.errstate(all="ignore"):
        train(m0, tr.images, tr.labels, ds.space, TrainConfig(epochs=5, lr=1e4), np.random.default_rng(0))


def test_seen_accuracy_on_trained_small_model(small_set):
    ds, tr, m0 = small_set
    m1, _ = train(m0, tr.images, tr.labels, ds.space, TrainConfig(epochs=60), np.random.default_rng(1))
    assert seen_accuracy(m1, tr.images, tr.labels, ds.space) >= 0.95
