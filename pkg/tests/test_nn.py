import numpy as np
import pytest

import vidkit.tensor as T
from vidkit import nn
from vidkit.tensor import GradTape, Tensor, backward


def test_build_mlp_stage_and_tap_count():
    net = nn.build_mlp(64, 16, 10)
    trainable_stages = [n for n, l in net.layers if isinstance(l, (nn.Linear, nn.BottleneckLinear))]
    assert len(trainable_stages) == 5
    assert set(net.taps) == {"fc1", "fc2", "fc3", "fc4", "penultimate", "logits"}


def test_build_mlp_degenerate_bottleneck():
    net = nn.build_mlp(8, 4, 3)
    bn = dict(net.layers)["fc2"]
    assert bn.down.weight.shape == (4, 1)


def test_build_mlp_rejects_indivisible_width():
    with pytest.raises(ValueError):
        nn.build_mlp(8, 6, 3)


def test_mlp_param_count_closed_form():
    for d, h, c in [(64, 16, 10), (256, 32, 10), (100, 8, 4)]:
        net = nn.build_mlp(d, h, c)
        linear_params = sum(
            p.data.size
            for name, p in net.named_params()
            if name.startswith("fc") or name.startswith("head")
        )
        assert linear_params == nn.mlp_param_count(d, h, c)


def test_build_cnn_tap_spatial_sizes():
    net = nn.build_cnn([8, 16], 10, (1, 16, 16))
    nn.init_params(net, 0)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 16, 16)))
    logits, taps = nn.forward_with_taps(net, x, "eval")
    assert taps["group1"].shape == (2, 8, 16, 16)
    assert taps["group2"].shape == (2, 16, 8, 8)
    assert taps["penultimate"].shape == (2, 16)
    assert logits.shape == (2, 10)


def test_build_cnn_single_group_logits():
    net = nn.build_cnn([4], 3, (1, 8, 8))
    nn.init_params(net, 0)
    x = Tensor(np.zeros((1, 1, 8, 8)))
    logits, taps = nn.forward_with_taps(net, x, "eval")
    assert taps["logits"].shape == (1, 3)


def test_build_cnn_channel_mismatch_errors():
    net = nn.build_cnn([4], 3, (3, 8, 8))
    nn.init_params(net, 0)
    with pytest.raises(T.ShapeError):
        nn.forward_with_taps(net, Tensor(np.zeros((1, 1, 8, 8))), "eval")


def test_zero_weight_network_zero_logits():
    net = nn.build_mlp(12, 8, 5)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 12)))
    logits, _ = nn.forward_with_taps(net, x, "eval")
    assert np.array_equal(logits.data, np.zeros((3, 5)))


def test_eval_mode_idempotent():
    net = nn.build_mlp(12, 8, 5)
    nn.init_params(net, 3)
    x = Tensor(np.random.default_rng(2).normal(size=(4, 12)))
    _, taps1 = nn.forward_with_taps(net, x, "eval")
    _, taps2 = nn.forward_with_taps(net, x, "eval")
    for k in taps1:
        assert np.array_equal(taps1[k].data, taps2[k].data)


def test_train_mode_dropout_seed_replay():
    net = nn.build_mlp(12, 8, 5)
    nn.init_params(net, 3)
    x = Tensor(np.random.default_rng(2).normal(size=(4, 12)))
    out1, _ = nn.forward_with_taps(net, x, "train", rng=np.random.default_rng(9))
    out2, _ = nn.forward_with_taps(net, x, "train", rng=np.random.default_rng(9))
    assert np.array_equal(out1.data, out2.data)


def test_init_deterministic_and_seed_sensitive():
    a = nn.build_mlp(12, 8, 5)
    b = nn.build_mlp(12, 8, 5)
    c = nn.build_mlp(12, 8, 5)
    nn.init_params(a, 7)
    nn.init_params(b, 7)
    nn.init_params(c, 8)
    for (na, pa), (_, pb), (_, pc) in zip(a.named_params(), b.named_params(), c.named_params()):
        assert np.array_equal(pa.data, pb.data)
        if na.endswith(".weight") and not np.array_equal(pa.data, pc.data):
            break
    else:
        pytest.fail("two seeds produced identical weights")


def test_bias_zero_after_init():
    net = nn.build_cnn([4, 8], 3, (1, 16, 16))
    nn.init_params(net, 0)
    for name, p in net.named_params():
        if name.endswith(".bias"):
            assert np.array_equal(p.data, np.zeros_like(p.data))


def test_taps_participate_in_gradient_graph():
    net = nn.build_mlp(6, 8, 3, drop_rate=0.0)
    nn.init_params(net, 1)
    x = Tensor(np.random.default_rng(4).normal(size=(5, 6)))
    w = dict(net.named_params())["fc1.weight"]
    eps = 1e-5

    def tap_value(name):
        _, taps = nn.forward_with_taps(net, x, "eval")
        return taps[name].data.copy()

    for tap in ("fc2", "fc3", "fc4", "penultimate"):
        base = tap_value(tap)
        w.data[0, 0] += eps
        bumped = tap_value(tap)
        w.data[0, 0] -= eps
        assert not np.array_equal(base, bumped)


def test_gradients_flow_through_mlp():
    net = nn.build_mlp(6, 8, 3, drop_rate=0.0)
    nn.init_params(net, 1)
    x = Tensor(np.random.default_rng(4).normal(size=(5, 6)))
    labels = np.array([0, 1, 2, 0, 1])
    with GradTape() as tape:
        logits, _ = nn.forward_with_taps(net, x, "train")
        loss = T.cross_entropy(logits, labels)
    backward(loss, tape)
    for name, p in net.named_params():
        assert p.grad is not None, name


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = nn.build_cnn([4, 8], 3, (1, 16, 16))
    nn.init_params(net, 5)
    # push running stats away from defaults
    x = Tensor(np.random.default_rng(0).normal(size=(4, 1, 16, 16)))
    nn.forward_with_taps(net, x, "train", rng=np.random.default_rng(0))
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    nn.save_checkpoint(net, p1)
    other = nn.build_cnn([4, 8], 3, (1, 16, 16))
    nn.load_checkpoint(other, p1)
    nn.save_checkpoint(other, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_float32_storage(tmp_path):
    net = nn.build_mlp(6, 8, 3)
    nn.init_params(net, 2)
    p = tmp_path / "s.ckpt"
    nn.save_checkpoint(net, p, dtype="float32")
    other = nn.build_mlp(6, 8, 3)
    nn.load_checkpoint(other, p)
    for (_, a), (_, b) in zip(net.named_params(), other.named_params()):
        assert np.allclose(a.data, b.data, atol=1e-6)


def test_forward_rejects_bad_mode():
    net = nn.build_mlp(6, 8, 3)
    with pytest.raises(ValueError):
        nn.forward_with_taps(net, Tensor(np.zeros((1, 6))), "predict")
