import json
import struct

import numpy as np
import pytest

from renal_edl import network as net
from renal_edl.errors import ConfigurationError, NumericFault, ValidationError
from renal_edl.evidential import from_evidence
from renal_edl.network import (
    ModelState,
    NetworkConfig,
    OptimizerConfig,
    adam_step,
    backward,
    forward,
    forward_batch,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
)

from conftest import synthetic_cubes

TINY = NetworkConfig(input_side=8, stage1_channels=2, block_channels=2, dtype="float64")


def finite_difference_grads(state, x, y, w, h=1e-3):
    out = {}
    for name, p in state.params.items():
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up, _ = backward(state, x, y, w)
            p[i] = old - h
            dn, _ = backward(state, x, y, w)
            p[i] = old
            fd[i] = (up - dn) / (2 * h)
        out[name] = fd
    return out


def max_rel_error(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


class TestConfig:
    @pytest.mark.parametrize("side", [0, 12, 20])
    def test_side_must_be_multiple_of_eight(self, side):
        with pytest.raises(ValidationError):
            NetworkConfig(input_side=side)

    def test_optimizer_bounds(self):
        with pytest.raises(ValidationError):
            OptimizerConfig(learning_rate=0)
        with pytest.raises(ValidationError):
            OptimizerConfig(beta1=1.0)

    def test_paper_defaults(self):
        cfg = OptimizerConfig()
        assert (cfg.learning_rate, cfg.batch_size, cfg.epochs) == (1e-4, 32, 300)
        assert (cfg.beta1, cfg.beta2, cfg.epsilon) == (0.9, 0.999, 1e-8)


class TestForward:
    def test_stage_shapes_reference_config(self, rng):
        state = init_state(NetworkConfig(), 0)
        x = rng.random((1, 32, 32, 32, 1)).astype(np.float32)
        cache = {}
        ev = net._forward(state, x, cache)
        assert cache["pool0"][1].shape == (1, 16, 16, 16, 16)
        assert cache["pool1"][1].shape == (1, 8, 8, 8, 16)
        assert cache["pool2"][1].shape == (1, 4, 4, 4, 16)
        assert cache["g"].shape == (1, 16)
        assert ev.shape == (1, 3)

    def test_projection_when_widths_differ(self, rng):
        cfg = NetworkConfig(input_side=8, stage1_channels=3, block_channels=5)
        state = init_state(cfg, 0)
        assert "block1.proj.w" in state.params and "block2.proj.w" not in state.params
        assert forward(state, rng.random((8, 8, 8))).shape == (3,)

    def test_zero_head_gives_zero_evidence(self, rng):
        state = init_state(NetworkConfig(input_side=16), 3)
        state.params["head.w"][:] = 0
        state.params["head.b"][:] = 0
        ev = forward(state, rng.random((16, 16, 16)))
        np.testing.assert_array_equal(ev, 0)
        assert from_evidence(ev).uncertainty == 1.0

    def test_deterministic_bitwise(self):
        x = np.random.default_rng(42).random((32, 32, 32))
        a = forward(init_state(NetworkConfig(), 42), x)
        b = forward(init_state(NetworkConfig(), 42), x)
        assert a.tobytes() == b.tobytes()

    def test_outputs_nonnegative_over_random_draws(self):
        rng = np.random.default_rng(0)
        cfg = NetworkConfig(input_side=16, head_bias_init=0.0)
        for seed in range(100):
            state = init_state(cfg, seed)
            ev = forward(state, rng.random((16, 16, 16)))
            assert ev.shape == (3,) and np.all(ev >= 0) and np.all(np.isfinite(ev))

    def test_softplus_head_strictly_positive(self, rng):
        state = init_state(NetworkConfig(input_side=8, evidence_activation="softplus"), 1)
        assert np.all(forward_batch(state, rng.random((5, 8, 8, 8))) > 0)

    def test_shape_mismatch(self, rng):
        state = init_state(NetworkConfig(input_side=16), 0)
        with pytest.raises(ValidationError):
            forward(state, rng.random((8, 8, 8)))

    def test_non_finite_activation_names_layer(self, rng):
        state = init_state(NetworkConfig(input_side=8), 0)
        state.params["block1.conv2.b"][:] = np.inf
        with pytest.raises(NumericFault, match="block1"):
            forward(state, rng.random((8, 8, 8)))

    def test_residual_block_identity_when_convs_zero(self, rng):
        state = init_state(NetworkConfig(input_side=16), 0)
        for name in ("block1.conv1.w", "block1.conv1.b", "block1.conv2.w", "block1.conv2.b"):
            state.params[name][:] = 0
        x = rng.standard_normal((2, 8, 8, 8, 16)).astype(np.float32)
        out = net._block_forward(state.params, "block1", x, {})
        np.testing.assert_array_equal(out, np.maximum(x, 0))

    def test_pooling_routes_gradient_to_first_maximum(self):
        x = np.zeros((1, 2, 2, 2, 1))
        x[0, 1, 1, 1, 0] = 3.0
        out, ctx = net._pool_forward(x)
        assert out.item() == 3.0
        dx = net._pool_backward(np.ones_like(out), ctx)
        assert dx.sum() == 1.0 and dx[0, 1, 1, 1, 0] == 1.0
        ties = np.ones((1, 2, 2, 2, 1))
        out, ctx = net._pool_forward(ties)
        dx = net._pool_backward(np.ones_like(out), ctx)
        assert dx[0, 0, 0, 0, 0] == 1.0 and dx.sum() == 1.0


class TestBackward:
    def test_matches_finite_differences_tiny_network(self):
        state = init_state(TINY, 3)
        rng = np.random.default_rng(0)
        x = rng.random((2, 8, 8, 8))
        y = np.array([0, 2])
        w = np.array([1.0, 0.5, 2.0])
        _, grads = backward(state, x, y, w)
        fd = finite_difference_grads(state, x, y, w)
        for name in state.params:
            assert grads[name].shape == state.params[name].shape
            assert max_rel_error(grads[name], fd[name]) <= 1e-3, name

    def test_softplus_head_gradients(self):
        cfg = NetworkConfig(input_side=8, stage1_channels=2, block_channels=3, evidence_activation="softplus", dtype="float64")
        state = init_state(cfg, 5)
        x = np.random.default_rng(1).random((1, 8, 8, 8))
        _, grads = backward(state, x, [1], [1.0, 1.0, 1.0])
        # a smaller step keeps the difference quotient off nearby ReLU kinks
        fd = finite_difference_grads(state, x, np.array([1]), np.ones(3), h=1e-5)
        for name in state.params:
            assert max_rel_error(grads[name], fd[name]) <= 1e-3, name

    def test_zero_weight_zero_gradient(self, rng):
        state = init_state(NetworkConfig(input_side=8), 0)
        loss, grads = backward(state, rng.random((8, 8, 8)), 1, [1.0, 0.0, 1.0])
        assert loss == 0.0
        for g in grads.values():
            assert not np.any(g)

    def test_duplicated_batch_equals_single(self, rng):
        state = init_state(TINY, 2)
        x = rng.random((8, 8, 8))
        l1, g1 = backward(state, x, 2, np.ones(3))
        l2, g2 = backward(state, np.stack([x, x]), [2, 2], np.ones(3))
        assert l2 == pytest.approx(l1, rel=1e-14)
        for name in g1:
            np.testing.assert_allclose(g2[name], g1[name], rtol=1e-12, atol=0)

    def test_chunking_does_not_change_gradient(self, rng):
        state = init_state(TINY, 2)
        x = rng.random((5, 8, 8, 8))
        y = [0, 1, 2, 1, 0]
        _, a = backward(state, x, y, np.ones(3), chunk=1)
        _, b = backward(state, x, y, np.ones(3), chunk=5)
        for name in a:
            np.testing.assert_allclose(a[name], b[name], rtol=1e-10, atol=1e-14)

    def test_label_validation(self, rng):
        state = init_state(TINY, 0)
        with pytest.raises(ValidationError):
            backward(state, rng.random((8, 8, 8)), 3, np.ones(3))
        with pytest.raises(ValidationError):
            backward(state, rng.random((2, 8, 8, 8)), [0], np.ones(3))


def _scalar_state(theta=1.0):
    return ModelState(NetworkConfig(), {"t": np.array([theta])}, {"t": np.zeros(1)}, {"t": np.zeros(1)})


class TestAdam:
    def test_first_step_is_unit_normalized(self):
        new = adam_step(_scalar_state(), {"t": np.array([1.0])}, OptimizerConfig(learning_rate=0.1))
        assert new.params["t"][0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)
        assert new.step == 1
        assert new.m["t"][0] == pytest.approx(0.1) and new.v["t"][0] == pytest.approx(0.001)

    def test_input_state_untouched(self):
        state = _scalar_state()
        adam_step(state, {"t": np.array([1.0])}, OptimizerConfig())
        assert state.params["t"][0] == 1.0 and state.step == 0

    def test_zero_gradient_leaves_parameters(self):
        state = init_state(NetworkConfig(input_side=8), 0)
        zeros = {k: np.zeros_like(v) for k, v in state.params.items()}
        new = adam_step(state, zeros, OptimizerConfig())
        for k in state.params:
            np.testing.assert_array_equal(new.params[k], state.params[k])

    def test_quadratic_descent(self):
        state = _scalar_state(1.0)
        cfg = OptimizerConfig(learning_rate=0.05)
        losses = []
        for _ in range(100):
            theta = state.params["t"][0]
            losses.append(theta * theta)
            state = adam_step(state, {"t": np.array([2 * theta])}, cfg)
        losses.append(state.params["t"][0] ** 2)
        # strictly decreasing until the iterate first reaches the minimum's neighbourhood
        first_cross = next(i for i, f in enumerate(losses) if f < 0.05**2)
        assert np.all(np.diff(losses[: first_cross + 1]) < 0)
        assert losses[-1] < 1e-3 * losses[0]

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            adam_step(_scalar_state(), {"t": np.zeros(2)}, OptimizerConfig())
        with pytest.raises(ValidationError):
            adam_step(_scalar_state(), {"u": np.zeros(1)}, OptimizerConfig())


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        state = init_state(NetworkConfig(input_side=16), 9)
        x = rng.random((3, 16, 16, 16))
        _, grads = backward(state, x, [0, 1, 2], [1.0, 2.0, 3.0])
        state = adam_step(state, grads, OptimizerConfig())
        state.class_counts = (5, 6, 7)
        path = tmp_path / "model.bin"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        assert loaded.config == state.config and loaded.step == 1 and loaded.seed == 9
        assert loaded.class_counts == (5, 6, 7)
        for group in ("params", "m", "v"):
            for k, arr in getattr(state, group).items():
                assert getattr(loaded, group)[k].tobytes() == arr.tobytes()
        assert forward_batch(loaded, x).tobytes() == forward_batch(state, x).tobytes()

    def test_documented_layout(self, tmp_path):
        state = init_state(NetworkConfig(input_side=8, stage1_channels=2, block_channels=2), 1)
        path = tmp_path / "m.bin"
        save_checkpoint(state, path)
        raw = path.read_bytes()
        assert raw[:8] == net.MAGIC
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12 : 12 + hlen])
        assert header["dtype"] == "f32le" and header["seed"] == 1 and header["step"] == 0
        entry = next(t for t in header["tensors"] if t["name"] == "param/head.w")
        start = 12 + hlen + entry["offset"]
        arr = np.frombuffer(raw[start : start + entry["nbytes"]], dtype="<f4").reshape(entry["shape"])
        np.testing.assert_array_equal(arr, state.params["head.w"])

    def test_rejects_foreign_file(self, tmp_path):
        bad = tmp_path / "x.bin"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(ValidationError):
            load_checkpoint(bad)


class TestTrain:
    def test_identical_seeds_identical_traces(self, rng):
        x = rng.random((12, 8, 8, 8)).astype(np.float32)
        y = np.arange(12) % 3
        cfg = NetworkConfig(input_side=8, stage1_channels=4, block_channels=4)
        opt = OptimizerConfig(learning_rate=1e-3, batch_size=4, epochs=3)
        a = train(x, y, cfg, opt, seed=11)
        b = train(x, y, cfg, opt, seed=11)
        assert np.asarray(a.loss_trace).tobytes() == np.asarray(b.loss_trace).tobytes()
        for k in a.state.params:
            assert a.state.params[k].tobytes() == b.state.params[k].tobytes()
        c = train(x, y, cfg, opt, seed=12)
        assert c.loss_trace != a.loss_trace

    def test_missing_class_is_configuration_error(self, rng):
        x = rng.random((4, 8, 8, 8))
        with pytest.raises(ConfigurationError):
            train(x, [0, 0, 1, 1], NetworkConfig(input_side=8), OptimizerConfig(epochs=1), seed=0)

    def test_empty_split(self):
        with pytest.raises(ConfigurationError):
            train(np.zeros((0, 8, 8, 8)), [], NetworkConfig(input_side=8), OptimizerConfig(epochs=1), seed=0)

    def test_loss_decreases_on_separable_cohort(self):
        x, y = synthetic_cubes(120, "easy", side=16, seed=4)
        opt = OptimizerConfig(learning_rate=1e-3, batch_size=8, epochs=30)
        result = train(x, y, NetworkConfig(input_side=16), opt, seed=0)
        assert len(result.loss_trace) == 30
        assert result.loss_trace[-1] < result.loss_trace[0]
        assert result.state.class_counts == tuple(np.bincount(y, minlength=3))

    def test_permuted_labels_stay_at_chance_on_held_out_data(self):
        x, y = synthetic_cubes(240, "easy", side=16, seed=5, proportions=(1 / 3, 1 / 3, 1 / 3))
        y_perm = np.random.default_rng(99).permutation(y)
        opt = OptimizerConfig(learning_rate=1e-3, batch_size=8, epochs=30)
        result = train(x[:120], y_perm[:120], NetworkConfig(input_side=16), opt, seed=0)
        pred = np.argmax(forward_batch(result.state, x[120:]), axis=1)
        assert np.mean(pred == y_perm[120:]) <= 0.45
