import numpy as np
import pytest

from cmeseg import model, ops
from cmeseg.errors import (BadWidthScale, CorruptCheckpoint, DimsMismatch,
                           InputTooSmall, NoForwardState, ShapeMismatch)
from cmeseg.model import BlockSpec, build_fcn8
from cmeseg.ops import Tensor

from .support import numeric_grad_at


def mini_net(ws="1/64", seed=0, dtype=np.float64, classes=2):
    return build_fcn8(ws, num_classes=classes, seed=seed, dtype=dtype)


def rand_image(rng, h, w):
    return Tensor(rng.random((1, 3, h, w)))


# --------------------------------------------------------------- topology

# the architecture table this implementation must reproduce row for row
TABLE = [
    BlockSpec(1, "conv", 3, 1, 64, 100, repeats=2),
    BlockSpec(2, "pool", 2, 2, None, 0),
    BlockSpec(3, "conv", 3, 1, 128, 1, repeats=2),
    BlockSpec(4, "pool", 2, 2, None, 0),
    BlockSpec(5, "conv", 3, 1, 256, 1, repeats=3),
    BlockSpec(6, "pool", 2, 2, None, 0),
    BlockSpec(7, "conv", 3, 1, 512, 1, repeats=3),
    BlockSpec(8, "pool", 2, 2, None, 0),
    BlockSpec(9, "conv", 3, 1, 512, 1, repeats=3),
    BlockSpec(10, "pool", 2, 2, None, 0),
    BlockSpec(11, "conv", 7, 1, 4096, 0, repeats=2),
    BlockSpec(12, "conv", 1, 1, 21, 0),
    BlockSpec(13, "deconv", 4, 2, 21),
    BlockSpec(14, "conv", 1, 1, 21, 0, fusion="x2"),
    BlockSpec(14, "crop", fusion="x2"),
    BlockSpec(14, "fuse", fusion="x2"),
    BlockSpec(14, "deconv", 4, 2, 21, fusion="x2"),
    BlockSpec(15, "conv", 1, 1, 21, 0, fusion="x4"),
    BlockSpec(15, "crop", fusion="x4"),
    BlockSpec(15, "fuse", fusion="x4"),
    BlockSpec(15, "deconv", 16, 8, 21, fusion="x4"),
    BlockSpec(16, "crop"),
    BlockSpec(17, "conv", 1, 1, 2, 0),
    BlockSpec(17, "dice"),
    BlockSpec(19, "softmax_loss"),
]


class TestBuild:
    def test_block_table_at_full_width(self):
        assert model._table_blocks(1, 2) == TABLE

    def test_full_width_parameter_inventory(self):
        shapes = model.expected_param_shapes(1)
        assert shapes["conv1_1.weight"] == (64, 3, 3, 3)
        assert shapes["conv1_2.weight"] == (64, 64, 3, 3)
        assert shapes["conv2_1.weight"] == (128, 64, 3, 3)
        assert shapes["conv3_3.weight"] == (256, 256, 3, 3)
        assert shapes["conv4_1.weight"] == (512, 256, 3, 3)
        assert shapes["conv5_3.weight"] == (512, 512, 3, 3)
        assert shapes["fc6.weight"] == (4096, 512, 7, 7)
        assert shapes["fc7.weight"] == (4096, 4096, 7, 7)
        assert shapes["score_fr.weight"] == (21, 4096, 1, 1)
        assert shapes["upscore2.weight"] == (21, 21, 4, 4)
        assert shapes["score_pool4.weight"] == (21, 512, 1, 1)
        assert shapes["score_pool3.weight"] == (21, 256, 1, 1)
        assert shapes["upscore8.weight"] == (21, 21, 16, 16)
        assert shapes["score_final.weight"] == (2, 21, 1, 1)

    def test_eighth_width_scaling(self):
        net = build_fcn8("1/8", seed=0)
        assert net.params["conv1_1.weight"].dims[0] == 8
        assert net.params["fc6.weight"].dims[0] == 512
        # score maps and class head are structural, not scaled
        assert net.params["score_fr.weight"].dims[0] == 21
        assert net.params["score_final.weight"].dims[0] == 2

    def test_build_matches_expected_inventory(self):
        net = mini_net("1/16")
        assert net.param_inventory() == model.expected_param_shapes(
            "1/16", net.num_classes)

    def test_same_seed_bitwise_identical(self):
        a = build_fcn8("1/32", seed=11)
        b = build_fcn8("1/32", seed=11)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        a = build_fcn8("1/32", seed=1)
        b = build_fcn8("1/32", seed=2)
        assert not np.array_equal(a.params["conv1_1.weight"].data,
                                  b.params["conv1_1.weight"].data)

    def test_deconvs_are_bilinear_initialized(self):
        net = mini_net()
        k = net.params["upscore2.weight"].data
        ref = ops.bilinear_init(4, 2, model.SCORE_CHANNELS).data
        np.testing.assert_allclose(k, ref)

    @pytest.mark.parametrize("ws", [0, -1, "1/3", "1/128", "0.3"])
    def test_bad_width_scale(self, ws):
        with pytest.raises(BadWidthScale):
            build_fcn8(ws)

    def test_two_fusion_edges(self):
        net = mini_net()
        assert [e.name for e in net.fusion_edges] == ["x2", "x4"]
        assert [e.source for e in net.fusion_edges] == ["pool4", "pool3"]


# ---------------------------------------------------------------- forward

class TestForward:
    def test_output_matches_input_extent(self):
        rng = np.random.default_rng(0)
        net = mini_net()
        for h, w in ((32, 45), (96, 96), (67, 101), (128, 33)):
            scores, heat = model.forward(net, rand_image(rng, h, w))
            assert scores.dims == (1, 2, h, w)
            np.testing.assert_allclose(heat.data.sum(axis=1), 1.0, atol=1e-9)

    def test_wrong_channels_rejected(self):
        net = mini_net()
        with pytest.raises(ShapeMismatch):
            model.forward(net, Tensor(np.zeros((1, 1, 64, 64))))

    def test_too_small_rejected(self):
        net = mini_net()
        with pytest.raises(InputTooSmall):
            model.forward(net, Tensor(np.zeros((1, 3, 31, 64))))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        net = mini_net()
        img = rand_image(rng, 48, 48)
        a, _ = model.forward(net, img)
        b, _ = model.forward(net, img)
        assert np.array_equal(a.data, b.data)

    def test_fusion_edges_contribute_additively(self):
        # scores are affine in each fusion score map, with no cross term:
        # f(w4,w3) + f(0,0) == f(w4,0) + f(0,w3)
        rng = np.random.default_rng(2)
        net = mini_net(seed=5)
        img = rand_image(rng, 48, 48)

        saved = {}
        for layer in ("score_pool4", "score_pool3"):
            for part in ("weight", "bias"):
                saved[f"{layer}.{part}"] = net.params[f"{layer}.{part}"].data

        def run(zero4, zero3):
            for layer, z in (("score_pool4", zero4), ("score_pool3", zero3)):
                for part in ("weight", "bias"):
                    key = f"{layer}.{part}"
                    net.params[key] = Tensor(
                        np.zeros_like(saved[key]) if z else saved[key])
            s, _ = model.forward(net, img)
            return s.data

        both = run(False, False)
        none = run(True, True)
        only3 = run(True, False)
        only4 = run(False, True)
        np.testing.assert_allclose(both + none, only3 + only4,
                                   rtol=1e-9, atol=1e-9)


# --------------------------------------------------------------- backward

class TestBackward:
    def test_zero_loss_grad_gives_zero_param_grads(self):
        rng = np.random.default_rng(3)
        net = mini_net()
        img = rand_image(rng, 48, 48)
        model.forward(net, img, train=True)
        grads = model.backward(net, Tensor(np.zeros((1, 2, 48, 48))))
        assert all(not g.any() for g in grads.values())

    def test_requires_forward_state(self):
        net = mini_net()
        with pytest.raises(NoForwardState):
            model.backward(net, Tensor(np.zeros((1, 2, 32, 32))))

    def test_backward_deterministic(self):
        rng = np.random.default_rng(4)
        net = mini_net()
        img = rand_image(rng, 48, 48)
        g = Tensor(rng.standard_normal((1, 2, 48, 48)))
        model.forward(net, img, train=True)
        a = model.backward(net, g)
        model.forward(net, img, train=True)
        b = model.backward(net, g)
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_whole_network_finite_difference_sample(self):
        # biases are perturbed off zero so the pad-100 zero plateaus do
        # not sit exactly on relu/pool kinks (the FD step must also stay
        # well below the plateau offsets)
        net = build_fcn8("1/16", seed=7, dtype=np.float64)
        rng0 = np.random.default_rng(99)
        for name, t in net.params.items():
            if name.endswith(".bias"):
                t.data += rng0.normal(0, 0.1, t.data.shape)
        img = Tensor(np.random.default_rng(2).random((1, 3, 32, 32)))
        probe = np.random.default_rng(3).standard_normal((1, 2, 32, 32))

        def objective():
            s, _ = model.forward(net, img)
            return float((s.data * probe).sum())

        model.forward(net, img, train=True)
        grads = model.backward(net, Tensor(probe))
        rng = np.random.default_rng(4)
        names = list(net.params)
        for _ in range(12):
            name = names[rng.integers(len(names))]
            arr = net.params[name].data
            i = int(rng.integers(arr.size))
            num = numeric_grad_at(objective, arr, i, h=1e-6)
            an = grads[name].reshape(-1)[i]
            denom = max(abs(an), abs(num))
            if denom < 1e-6:
                assert abs(an - num) < 1e-8
            else:
                assert abs(an - num) / denom < 1e-3, (name, i, an, num)

    def test_grad_buffers_filled(self):
        rng = np.random.default_rng(5)
        net = mini_net()
        img = rand_image(rng, 48, 48)
        model.forward(net, img, train=True)
        model.backward(net, Tensor(rng.standard_normal((1, 2, 48, 48))))
        for name, t in net.params.items():
            assert t.grad is not None and t.grad.shape == t.data.shape


# ------------------------------------------------------------- checkpoints

class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        net = build_fcn8("1/32", seed=3, dtype=np.float32)
        path = tmp_path / "net.ckpt"
        model.save_checkpoint(net, path, extras={"epoch": 4, "lr": 1e-5})
        other = build_fcn8("1/32", seed=888, dtype=np.float32)
        other, extras = model.load_checkpoint(path, other)
        for name in net.params:
            assert np.array_equal(net.params[name].data,
                                  other.params[name].data), name
        assert extras["epoch"] == 4.0
        assert extras["lr"] == pytest.approx(1e-5)

    def test_truncated_file_rejected(self, tmp_path):
        net = build_fcn8("1/32", seed=3)
        path = tmp_path / "net.ckpt"
        model.save_checkpoint(net, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(CorruptCheckpoint):
            model.load_checkpoint(path, net)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "net.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(CorruptCheckpoint):
            model.load_checkpoint(path, build_fcn8("1/32"))

    def test_width_mismatch_rejected(self, tmp_path):
        net = build_fcn8("1/16", seed=3)
        path = tmp_path / "net.ckpt"
        model.save_checkpoint(net, path)
        with pytest.raises(DimsMismatch):
            model.load_checkpoint(path, build_fcn8("1/32"))

    def test_wire_format_header(self, tmp_path):
        net = build_fcn8("1/32", seed=3)
        path = tmp_path / "net.ckpt"
        model.save_checkpoint(net, path)
        raw = path.read_bytes()
        assert raw[:8] == b"FCN8CKPT"
        version = int.from_bytes(raw[8:12], "little")
        count = int.from_bytes(raw[12:16], "little")
        assert version == 1
        assert count == len(net.params)
