import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histobench.errors import FormatError, ParameterError, ShapeError, StateError
from histobench.nn import (
    CHECKPOINT_MAGIC,
    GraphBuilder,
    InceptionSpec,
    LayerNode,
    MiniInceptionConfig,
    MiniResNetConfig,
    Network,
    TrainState,
    attach_head,
    build_backbone_with_head,
    build_conv_baseline,
    build_mlp_baseline,
    count_params,
    inception_block,
    load_checkpoint,
    residual_block,
    save_checkpoint,
)


def tiny_net(seed=0, in_shape=(2, 6, 6), filters=3, hidden=4):
    g = GraphBuilder(in_shape)
    c = g.conv2d(0, filters, (3, 3), padding="same", name="c1")
    r = g.relu(c)
    p = g.maxpool(r, name="p1")
    f = g.flatten(p)
    d = g.dense(f, hidden, name="d1")
    r2 = g.relu(d)
    o = g.dense(r2, 1, name="out")
    g.sigmoid(o, name="out_sig")
    return g.build("tiny", seed)


class TestParamCounts:
    def test_mlp_baseline_count(self):
        assert count_params(build_mlp_baseline()) == 21_235_201

    def test_conv_baseline_count(self):
        assert count_params(build_conv_baseline()) == 71_585

    def test_count_is_sum_of_sizes(self):
        net = tiny_net()
        assert count_params(net) == sum(p.size for p in net.params().values())


class TestBaselineShapes:
    def test_mlp_layer_shapes(self):
        net = build_mlp_baseline()
        names = [n.name for n in net.nodes]
        assert names == ["input", "flatten", "hidden", "hidden_relu",
                         "output", "output_sigmoid"]
        assert net.node_shapes[names.index("flatten")] == (27648,)
        assert net.node_shapes[names.index("hidden")] == (768,)

    def test_conv_layer_shapes(self):
        net = build_conv_baseline()
        shapes = dict(zip((n.name for n in net.nodes), net.node_shapes))
        assert shapes["conv"] == (32, 94, 94)
        assert shapes["pool"] == (32, 47, 47)
        assert shapes["flatten"] == (70688,)

    def test_forward_output_shape(self, rng):
        net = tiny_net()
        out = net.forward(rng.standard_normal((5, 2, 6, 6)))
        assert out.shape == (5, 1)
        assert ((out > 0) & (out < 1)).all()


class TestNetworkValidation:
    def test_first_node_must_be_input(self):
        with pytest.raises(ParameterError):
            Network("x", [LayerNode("relu", "r", [0], {}, {})], (3,))

    def test_duplicate_names_rejected(self):
        g = GraphBuilder((4, 4, 4))
        g.relu(0, name="a")
        with pytest.raises(ParameterError):
            g.relu(0, name="a")

    def test_dangling_node_rejected(self):
        nodes = [
            LayerNode("input", "input", [], {}, {}),
            LayerNode("relu", "r1", [0], {}, {}),
            LayerNode("relu", "r2", [0], {}, {}),  # nothing consumes r1
            LayerNode("sigmoid", "s", [2], {}, {}),
        ]
        with pytest.raises(ParameterError, match="dangling"):
            Network("x", nodes, (1,))

    def test_output_must_be_single_sigmoid(self):
        g = GraphBuilder((2, 4, 4))
        f = g.flatten(0)
        g.dense(f, 1, name="d")
        with pytest.raises(ParameterError):
            g.build("no_sigmoid", 0)
        g2 = GraphBuilder((2, 4, 4))
        f2 = g2.flatten(0)
        d2 = g2.dense(f2, 2, name="d")
        g2.sigmoid(d2)
        with pytest.raises(ParameterError):
            g2.build("two_units", 0)

    def test_param_shape_mismatch(self):
        nodes = [
            LayerNode("input", "input", [], {}, {}),
            LayerNode("flatten", "f", [0], {}, {}),
            LayerNode("dense", "d", [1], {"weights": np.zeros((3, 1)),
                                          "bias": np.zeros(1)}, {"units": 1}),
            LayerNode("sigmoid", "s", [2], {}, {}),
        ]
        with pytest.raises(ShapeError):
            Network("x", nodes, (2, 2))  # flatten width 4, weights expect 3

    def test_forward_input_shape_checked(self, rng):
        net = tiny_net()
        with pytest.raises(ShapeError):
            net.forward(rng.standard_normal((5, 2, 6, 7)))
        with pytest.raises(ShapeError):
            net.forward(rng.standard_normal((2, 6, 6)))
        with pytest.raises(ShapeError):
            net.forward(np.empty((0, 2, 6, 6)))


class TestBackwardState:
    def test_backward_without_training_forward(self, rng):
        net = tiny_net()
        net.forward(rng.standard_normal((2, 2, 6, 6)))  # inference: no tape
        with pytest.raises(StateError):
            net.backward(np.ones((2, 1)))

    def test_double_backward(self, rng):
        net = tiny_net()
        net.forward(rng.standard_normal((2, 2, 6, 6)), training=True,
                    rng=np.random.default_rng(0))
        net.backward(np.ones((2, 1)))
        with pytest.raises(StateError):
            net.backward(np.ones((2, 1)))

    def test_backward_accepts_flat_upstream(self, rng):
        net = tiny_net()
        x = rng.standard_normal((3, 2, 6, 6))
        net.forward(x, training=True, rng=np.random.default_rng(0))
        g1 = net.backward(np.ones(3))
        net.forward(x, training=True, rng=np.random.default_rng(0))
        g2 = net.backward(np.ones((3, 1)))
        for k in g1:
            np.testing.assert_array_equal(g1[k], g2[k])

    def test_backward_grad_keys_cover_params(self, rng):
        net = tiny_net()
        net.forward(rng.standard_normal((2, 2, 6, 6)), training=True,
                    rng=np.random.default_rng(0))
        grads = net.backward(np.ones((2, 1)))
        assert set(grads) == set(net.params())
        for k, g in grads.items():
            assert g.shape == net.params()[k].shape

    def test_want_input_grad(self, rng):
        net = tiny_net()
        x = rng.standard_normal((2, 2, 6, 6))
        net.forward(x, training=True, rng=np.random.default_rng(0))
        grads, d_x = net.backward(np.ones((2, 1)), want_input_grad=True)
        assert d_x.shape == x.shape
        assert set(grads) == set(net.params())

    def test_upstream_shape_mismatch(self, rng):
        net = tiny_net()
        net.forward(rng.standard_normal((2, 2, 6, 6)), training=True,
                    rng=np.random.default_rng(0))
        with pytest.raises(ShapeError):
            net.backward(np.ones((3, 1)))


class TestActivationsAndParams:
    def test_activations_align_with_nodes(self, rng):
        net = tiny_net()
        x = rng.standard_normal((2, 2, 6, 6))
        acts = net.activations(x)
        assert len(acts) == len(net.nodes)
        np.testing.assert_array_equal(acts[0], x)
        np.testing.assert_allclose(acts[-1], net.forward(x))

    def test_snapshot_is_isolated(self):
        net = tiny_net()
        snap = net.snapshot_params()
        snap["d1.weights"][:] = 99.0
        assert not np.any(net.params()["d1.weights"] == 99.0)

    def test_load_params_roundtrip_and_mismatch(self):
        net, other = tiny_net(seed=0), tiny_net(seed=1)
        other.load_params(net.snapshot_params())
        for k, v in net.params().items():
            np.testing.assert_array_equal(v, other.params()[k])
        with pytest.raises(ParameterError):
            net.load_params({"nope": np.zeros(1)})


class TestInitialization:
    def test_same_seed_reproduces(self):
        a, b = build_conv_baseline(seed=5), build_conv_baseline(seed=5)
        for k, v in a.params().items():
            np.testing.assert_array_equal(v, b.params()[k])

    def test_different_seed_differs(self):
        a, b = build_conv_baseline(seed=5), build_conv_baseline(seed=6)
        assert any(not np.array_equal(v, b.params()[k]) for k, v in a.params().items())

    def test_biases_start_at_zero(self):
        net = build_backbone_with_head("mini_resnet")
        for k, v in net.params().items():
            if k.endswith(".bias"):
                assert not v.any()

    def test_he_scaling_for_relu_consumer(self):
        net = build_mlp_baseline(seed=3)
        w = net.params()["hidden.weights"]
        assert abs(w.std() / math.sqrt(2.0 / 27648) - 1.0) < 0.05

    def test_glorot_scaling_for_sigmoid_consumer(self):
        net = build_mlp_baseline(seed=3)
        w = net.params()["output.weights"]
        assert abs(w.std() / math.sqrt(2.0 / (768 + 1)) - 1.0) < 0.2

    def test_he_found_through_pooling(self):
        # conv -> maxpool -> relu: the walk crosses the shape-only pool
        g = GraphBuilder((8, 16, 16))
        c = g.conv2d(0, 64, (3, 3), padding="same", name="c")
        p = g.maxpool(c)
        r = g.relu(p)
        f = g.flatten(r)
        d = g.dense(f, 1)
        g.sigmoid(d)
        net = g.build("walk", 0)
        w = net.params()["c.kernels"]
        assert abs(w.std() / math.sqrt(2.0 / 72) - 1.0) < 0.1


class TestBlocks:
    def test_residual_block_requires_matching_channels(self):
        g = GraphBuilder((3, 8, 8))
        with pytest.raises(ShapeError):
            residual_block(g, 0, channels=16, name="r")

    def test_residual_block_shape_and_names(self):
        g = GraphBuilder((8, 8, 8))
        out = residual_block(g, 0, channels=8, name="blk")
        assert g.shapes[out] == (8, 8, 8)
        names = {n.name for n in g.nodes}
        assert {"blk_conv1", "blk_conv2"} <= names

    def test_residual_block_is_identity_plus_relu_at_zero_weights(self, rng):
        g = GraphBuilder((4, 6, 6))
        out = residual_block(g, 0, channels=4, name="blk")
        f = g.flatten(out)
        d = g.dense(f, 1)
        g.sigmoid(d)
        net = g.build("res_id", 0)
        for k, v in net.params().items():
            if k.startswith("blk_"):
                v[:] = 0.0
        x = rng.standard_normal((2, 4, 6, 6))
        acts = net.activations(x)
        np.testing.assert_allclose(acts[out], np.maximum(x, 0.0))

    def test_inception_block_concat_width(self):
        g = GraphBuilder((4, 8, 8))
        out = inception_block(g, 0, InceptionSpec(2, 2, 2, 2), name="blk")
        assert g.shapes[out] == (8, 8, 8)

    def test_inception_branch_omission(self):
        g = GraphBuilder((4, 8, 8))
        out = inception_block(g, 0, InceptionSpec(None, 3, None, None), name="blk")
        assert g.shapes[out] == (3, 8, 8)
        names = {n.name for n in g.nodes}
        assert "blk_b3" in names and "blk_b1" not in names

    def test_inception_zero_width_rejected(self):
        g = GraphBuilder((4, 8, 8))
        with pytest.raises(ParameterError):
            inception_block(g, 0, InceptionSpec(0, 2, 2, 2))
        with pytest.raises(ParameterError):
            inception_block(g, 0, InceptionSpec(None, None, None, None))

    def test_attach_head_width_704(self):
        g = GraphBuilder((3, 10, 10))
        c = g.conv2d(0, 64, (3, 3), padding="valid", name="c")
        r = g.relu(c)
        p = g.maxpool(r, window=(2, 2))  # -> (64, 4, 4)
        p2 = g.maxpool(p, window=(2, 2), stride=(1, 1))  # -> (64, 3, 3)
        attach_head(g, p2)
        idx = next(i for i, n in enumerate(g.nodes) if n.name == "head_concat")
        assert g.shapes[idx] == (64 * 3 * 3 + 64 + 64,)
        assert g.shapes[idx] == (704,)


class TestBackbones:
    def test_mini_resnet_builds_and_runs(self, rng):
        net = build_backbone_with_head(
            "mini_resnet", MiniResNetConfig(input_shape=(3, 24, 24)), seed=0)
        out = net.forward(rng.standard_normal((2, 3, 24, 24)))
        assert out.shape == (2, 1)

    def test_mini_inception_builds_and_runs(self, rng):
        cfg = MiniInceptionConfig(
            stem_filters=8, blocks=(InceptionSpec(4, 4, 2, 2),),
            input_shape=(3, 24, 24))
        net = build_backbone_with_head("mini_inception", cfg, seed=0)
        out = net.forward(rng.standard_normal((2, 3, 24, 24)))
        assert out.shape == (2, 1)

    def test_stage_widening_via_projection(self):
        net = build_backbone_with_head("mini_resnet")
        names = {n.name for n in net.nodes}
        # stage 1 matches the stem width, later stages widen through 1x1
        assert "stage1_widen" not in names
        assert {"stage2_widen", "stage3_widen"} <= names

    def test_spatial_collapse_rejected(self):
        cfg = MiniResNetConfig(stage_channels=(16, 16, 16, 16), input_shape=(3, 8, 8))
        with pytest.raises(ParameterError, match="spatial extent"):
            build_backbone_with_head("mini_resnet", cfg)

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            build_backbone_with_head("resnet50")


class TestCheckpoint:
    def make_state(self, net, with_moments=True):
        params = net.params()
        rng = np.random.default_rng(0)
        m = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        v = {k: rng.standard_normal(p.shape) ** 2 for k, p in params.items()}
        if not with_moments:
            m, v = {}, {}
        return TrainState(epoch=4, best_val_loss=0.123, adam_step=17,
                          adam_m=m, adam_v=v)

    def test_roundtrip_bitwise(self, tmp_path, rng):
        net = tiny_net(seed=2)
        state = self.make_state(net)
        path = tmp_path / "model.ckpt"
        save_checkpoint(net, state, path)
        loaded, lstate = load_checkpoint(path)
        assert loaded.name == net.name
        assert loaded.input_shape == net.input_shape
        assert loaded.node_shapes == net.node_shapes
        for k, v in net.params().items():
            np.testing.assert_array_equal(v, loaded.params()[k])
        assert lstate.epoch == 4 and lstate.adam_step == 17
        assert lstate.best_val_loss == 0.123
        for k in state.adam_m:
            np.testing.assert_array_equal(lstate.adam_m[k], state.adam_m[k])
            np.testing.assert_array_equal(lstate.adam_v[k], state.adam_v[k])
        x = rng.standard_normal((2,) + net.input_shape)
        np.testing.assert_array_equal(net.forward(x), loaded.forward(x))

    def test_trained_flag_follows_state(self, tmp_path):
        net = tiny_net()
        save_checkpoint(net, TrainState(epoch=3), tmp_path / "a.ckpt")
        assert load_checkpoint(tmp_path / "a.ckpt")[0].trained
        save_checkpoint(net, TrainState(epoch=0), tmp_path / "b.ckpt")
        assert not load_checkpoint(tmp_path / "b.ckpt")[0].trained
        save_checkpoint(net, None, tmp_path / "c.ckpt")
        net2, state = load_checkpoint(tmp_path / "c.ckpt")
        assert state is None and not net2.trained

    def test_infinite_best_loss_roundtrips(self, tmp_path):
        net = tiny_net()
        save_checkpoint(net, TrainState(epoch=1), tmp_path / "m.ckpt")
        _, state = load_checkpoint(tmp_path / "m.ckpt")
        assert state.best_val_loss == math.inf

    def test_moment_coverage_checked(self, tmp_path):
        net = tiny_net()
        state = self.make_state(net)
        state.adam_m.pop("d1.weights")
        with pytest.raises(ParameterError):
            save_checkpoint(net, state, tmp_path / "m.ckpt")

    def test_no_tmp_file_left_behind(self, tmp_path):
        net = tiny_net()
        save_checkpoint(net, None, tmp_path / "m.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        net = tiny_net()
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, None, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="format_version"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        net = tiny_net()
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, None, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        net = tiny_net()
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, None, path)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        net = tiny_net()
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, None, path)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_corrupt_header_json(self, tmp_path):
        net = tiny_net()
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, None, path)
        blob = bytearray(path.read_bytes())
        blob[14] = 0xFF  # inside the JSON header
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_missing_file_is_os_error(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_magic_constant(self):
        assert CHECKPOINT_MAGIC == b"HBCK"

    def test_backbone_checkpoint_roundtrip(self, tmp_path, rng):
        cfg = MiniInceptionConfig(stem_filters=4,
                                  blocks=(InceptionSpec(2, 2, None, 2),),
                                  input_shape=(3, 16, 16))
        net = build_backbone_with_head("mini_inception", cfg, seed=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, None, path)
        loaded, _ = load_checkpoint(path)
        x = rng.standard_normal((2, 3, 16, 16))
        np.testing.assert_array_equal(net.forward(x), loaded.forward(x))


@given(st.lists(st.integers(1, 6), min_size=1, max_size=3), st.integers(0, 2**31 - 1))
@settings(max_examples=25)
def test_dense_stack_param_count_property(widths, seed):
    g = GraphBuilder((2, 3, 3))
    x = g.flatten(0)
    fan = 18
    expected = 0
    for w in widths:
        x = g.relu(g.dense(x, w))
        expected += fan * w + w
        fan = w
    x = g.dense(x, 1)
    expected += fan + 1
    g.sigmoid(x)
    net = g.build("stack", seed)
    assert count_params(net) == expected
