import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import grads_match, numeric_grad_kinkaware
from mmq.autodiff import Tensor, conv2d, grad, softmax_cross_entropy
from mmq.errors import DataError, DimensionError
from mmq.network import (classify, extract_features, extract_features_batch, features,
                         head_logits, init_feature_net, init_head, load_feature_net, save_feature_net,
                         spatial_trace, zero_head)


def small_net(seed=0, size=31, fd=8, dtype=np.float32, filters=64):
    net = init_feature_net(np.random.default_rng(seed), feature_dim=fd, image_size=size, filters=filters)
    if dtype is not np.float32:
        net.params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in net.params.items()}
    return net


def test_spatial_trace_84():
    assert spatial_trace(84) == [84, 41, 20, 9, 4]
    assert spatial_trace(42) == [42, 20, 9, 4, 1]


def test_every_layer_has_64_filters():
    net = init_feature_net(np.random.default_rng(0), feature_dim=32, image_size=84)
    for i in range(1, 5):
        assert net.params[f"conv{i}.w"].shape[0] == 64
    assert extract_features(net, np.zeros((1, 84, 84), np.float32)).shape == (32,)


def test_zero_image_zero_bias_gives_zero_features():
    net = small_net()
    for k, v in net.params.items():
        if k.endswith(".b"):
            v.data[...] = 0.0
    assert not extract_features(net, np.zeros((1, 31, 31), np.float32)).data.any()


def test_identical_images_identical_features():
    net = small_net(3)
    img = np.random.default_rng(4).random((1, 31, 31)).astype(np.float32)
    batch = extract_features_batch(net, np.stack([img, img.copy()])).data
    assert batch[0].tobytes() == batch[1].tobytes()
    assert extract_features(net, img).data.tobytes() == extract_features(net, img).data.tobytes()


@pytest.mark.parametrize("shape", [(1, 30, 30), (1, 31, 32), (2, 31, 31)])
def test_wrong_input_shape(shape):
    with pytest.raises(DimensionError):
        extract_features(small_net(), np.zeros(shape, np.float32))


@settings(max_examples=15, deadline=None)
@given(size=st.integers(31, 60), fd=st.integers(1, 40))
def test_feature_width_property(size, fd):
    net = init_feature_net(np.random.default_rng(size), feature_dim=fd, image_size=size, filters=4)
    x = np.random.default_rng(fd).random((2, 1, size, size)).astype(np.float32)
    assert extract_features_batch(net, x).shape == (2, fd)


def relu_pattern(params, x, layers=4):
    h = Tensor(x.transpose(0, 2, 3, 1))
    signs = []
    for i in range(1, layers + 1):
        z = conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=2, channels_last=True)
        signs.append((z.data > 0).ravel())
        h = Tensor(np.maximum(z.data, 0))
    return np.concatenate(signs)


def test_composed_network_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    net = small_net(5, fd=6, dtype=np.float64, filters=4)
    x = rng.random((3, 1, 31, 31))
    labels = np.array([0, 2, 1])
    head = init_head(rng, 6, 3)
    params = {**net.params, **{k: Tensor(v.data.astype(np.float64), requires_grad=True)
                               for k, v in head.params.items()}}
    f = lambda: softmax_cross_entropy(head_logits(params, features(params, x)), labels)[0]
    keys = list(params)
    analytic = grad(f(), [params[k] for k in keys])
    numeric, valid = numeric_grad_kinkaware(lambda: f().item(), [params[k].data for k in keys],
                                            lambda: relu_pattern(params, x))
    checked = sum(v.sum() for v in valid)
    assert checked > 0.9 * sum(v.size for v in valid)
    for k, a, n, ok in zip(keys, analytic, numeric, valid):
        assert grads_match(a.data[ok], n[ok]), k


def test_classify_ties_and_dominant_logit():
    head = zero_head(4, 3)
    probs, label = classify(head, np.ones(4, np.float32))
    assert np.allclose(probs, 1 / 3) and label == 0
    head.params["head.b"].data[:] = [0.0, 0.0, 5.0]
    assert classify(head, np.ones(4, np.float32))[1] == 2


def test_classify_matches_hand_softmax():
    rng = np.random.default_rng(6)
    head = init_head(rng, 5, 4)
    feat = rng.normal(size=5).astype(np.float32)
    z = feat.astype(np.float64) @ head.params["head.w"].data + head.params["head.b"].data
    ref = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    probs, label = classify(head, feat)
    assert np.allclose(probs, ref, atol=1e-6) and label == int(np.argmax(ref))


def test_classify_width_mismatch():
    with pytest.raises(DimensionError):
        classify(zero_head(4, 3), np.ones(5, np.float32))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(0, 2**16))
def test_classify_is_simplex(bias, seed):
    head = init_head(np.random.default_rng(seed), 4, 3)
    head.params["head.b"].data[:] = bias
    probs, _ = classify(head, np.random.default_rng(seed).normal(size=4).astype(np.float32))
    assert probs.min() >= 0 and abs(probs.sum() - 1) < 1e-5


def test_checkpoint_round_trip(tmp_path):
    net = small_net(7)
    save_feature_net(tmp_path / "m.ckpt", net, {"round": 3})
    back, meta = load_feature_net(tmp_path / "m.ckpt")
    assert meta["round"] == "3" and back.image_size == 31 and back.feature_dim == 8
    for k in net.params:
        assert np.array_equal(net.params[k].data, back.params[k].data)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_feature_net(tmp_path / "bad.ckpt")
