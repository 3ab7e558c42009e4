import struct
import zlib

import numpy as np
import pytest

from dardkit import losses
from dardkit.errors import (
    ConfigError,
    ContractViolation,
    IncompatibleCheckpointError,
    InputDomainError,
    IntegrityError,
)
from dardkit.models import (
    CHECKPOINT_MAGIC,
    ModelState,
    SgdConfig,
    build_model,
    forward_logits,
    input_gradient,
    load_checkpoint,
    load_checkpoint_metadata,
    save_checkpoint,
    sgd_step,
)

from helpers import QuadraticHead, fd_gradient, loss_value, relative_errors

rng = np.random.default_rng(11)


class TestForward:
    def test_zero_weight_mlp_gives_zero_logits(self):
        model = build_model("mlp-2x64", (5,), 4, seed=0)
        model.set_params(np.zeros(model.n_params, dtype=np.float32))
        x = rng.uniform(0, 1, size=(3, 5))
        np.testing.assert_array_equal(forward_logits(model, x), np.zeros((3, 4)))

    def test_forward_is_pure(self):
        model = build_model("cnn-tiny", (2, 4, 4), 3, seed=2)
        x = rng.uniform(0, 1, size=(2, 2, 4, 4))
        first = forward_logits(model, x)
        second = forward_logits(model, x)
        np.testing.assert_array_equal(first, second)

    def test_linear_hand_computed_logits(self):
        model = build_model("linear", (2,), 2, seed=0)
        model.set_params(np.array([1.0, -1.0, -1.0, 1.0, 0.0, 0.0], dtype=np.float32))
        logits = forward_logits(model, np.array([[0.3, 0.7]]))
        np.testing.assert_allclose(logits, [[-0.4, 0.4]], rtol=1e-12)

    def test_shape_mismatch_names_shapes(self):
        model = build_model("mlp-2x64", (5,), 4, seed=0)
        with pytest.raises(ContractViolation, match=r"\(n, 5\)"):
            forward_logits(model, np.zeros((2, 6)))

    def test_non_finite_input_rejected(self):
        model = build_model("mlp-2x64", (5,), 4, seed=0)
        x = np.zeros((2, 5))
        x[1, 3] = np.nan
        with pytest.raises(InputDomainError):
            forward_logits(model, x)

    def test_logits_finite_for_all_architectures(self):
        cases = [
            ("linear", (7,)),
            ("mlp-2x64", (7,)),
            ("cnn-tiny", (3, 6, 6)),
        ]
        for arch, shape in cases:
            model = build_model(arch, shape, 5, seed=3)
            x = rng.uniform(0, 1, size=(16, *shape))
            assert np.isfinite(forward_logits(model, x)).all()

    def test_unknown_architecture(self):
        with pytest.raises(ConfigError):
            build_model("resnet-18", (3, 32, 32), 10)


GRAD_CASES = [
    ("linear", (6,), 3),
    ("mlp-2x64", (8,), 5),
    ("cnn-tiny", (2, 4, 4), 3),
]


class TestInputGradients:
    @pytest.mark.parametrize("arch,shape,k", GRAD_CASES)
    @pytest.mark.parametrize(
        "kind,params",
        [("ce", {}), ("dice", {}), ("dpgd", {"lam": 0.3}), ("dpgd", {"lam": 0.0})],
    )
    def test_matches_central_differences(self, arch, shape, k, kind, params):
        model = build_model(arch, shape, k, seed=5)
        for probe in range(5):
            x = rng.uniform(0.05, 0.95, size=(3, *shape))
            y = rng.integers(0, k, size=3)
            analytic = input_gradient(model, x, y, kind, **params)
            numeric = fd_gradient(lambda v: loss_value(model, v, y, kind, **params), x)
            errs = relative_errors(analytic, numeric)
            assert errs.size == 0 or errs.max() < 1e-4

    def test_zero_gradient_at_loss_minimum(self):
        model = QuadraticHead(np.array([0.4, 0.6, 0.2]))
        at_minimum = model.anchor.astype(np.float64)[None, :]
        grad = input_gradient(model, at_minimum, np.array([0]), "ce")
        np.testing.assert_array_equal(grad, np.zeros((1, 3)))

    def test_gradient_scales_linearly_with_loss(self):
        # doubling the logit gradient must double the input gradient bitwise
        model = build_model("mlp-2x64", (6,), 4, seed=7)
        x = rng.uniform(0, 1, size=(4, 6))
        y = rng.integers(0, 4, size=4)
        logits, cache = model.forward_cached(x)
        _, dlogits = losses.cross_entropy_logit_grad(logits, y)
        _, dx = model.backward(cache, dlogits)
        _, dx2 = model.backward(cache, 2.0 * dlogits)
        np.testing.assert_array_equal(dx2, 2.0 * dx)

    def test_unsupported_loss_kind(self):
        model = build_model("linear", (4,), 2, seed=0)
        with pytest.raises(ConfigError):
            input_gradient(model, np.zeros((1, 4)), np.array([0]), "hinge")


class TestParameterGradients:
    @pytest.mark.parametrize("arch,shape,k", GRAD_CASES)
    def test_matches_central_differences(self, arch, shape, k):
        model = build_model(arch, shape, k, seed=9)
        x = rng.uniform(0, 1, size=(4, *shape))
        y = rng.integers(0, k, size=4)
        logits, cache = model.forward_cached(x)
        _, dlogits = losses.cross_entropy_logit_grad(logits, y)
        analytic, _ = model.backward(cache, dlogits)

        base = model.get_params().astype(np.float64)

        def value(theta):
            model.set_params(theta.astype(np.float32))
            out = losses.cross_entropy(model.forward(x), y)
            model.set_params(base.astype(np.float32))
            return out

        # float32 parameter storage limits finite-difference fidelity; probe
        # a subset of coordinates with a larger step
        idx = rng.choice(base.size, size=min(40, base.size), replace=False)
        numeric = np.zeros(base.size)
        h = 1e-3
        for i in idx:
            tp, tm = base.copy(), base.copy()
            tp[i] += h
            tm[i] -= h
            numeric[i] = (value(tp) - value(tm)) / (2 * h)
        errs = relative_errors(analytic[idx], numeric[idx], min_mag=1e-4)
        assert errs.size == 0 or errs.max() < 1e-2


class TestSgdStep:
    def test_zero_gradient_is_fixed_point(self):
        state = ModelState(rng.normal(size=20).astype(np.float32), "linear")
        cfg = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        new, buf = sgd_step(state, np.zeros(20), cfg, np.zeros(20))
        np.testing.assert_array_equal(new.parameters, state.parameters)
        np.testing.assert_array_equal(buf, np.zeros(20))

    def test_vanilla_gd(self):
        theta = rng.normal(size=10).astype(np.float32)
        g = rng.normal(size=10)
        cfg = SgdConfig(learning_rate=0.05, momentum=0.0, weight_decay=0.0)
        new, _ = sgd_step(ModelState(theta, "linear"), g, cfg, np.zeros(10))
        expected = (theta.astype(np.float64) - 0.05 * g).astype(np.float32)
        np.testing.assert_array_equal(new.parameters, expected)

    def test_two_momentum_steps_displacement(self):
        # constant gradient g: step1 moves lr*g, step2 moves lr*1.9*g
        theta = np.zeros(8, dtype=np.float32)
        g = rng.normal(size=8)
        cfg = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        state = ModelState(theta, "linear")
        buf = np.zeros(8)
        state, buf = sgd_step(state, g, cfg, buf)
        state, buf = sgd_step(state, g, cfg, buf)
        np.testing.assert_allclose(
            state.parameters, -0.1 * g * (1 + 1.9), rtol=1e-6
        )

    def test_weight_decay_folds_into_gradient(self):
        theta = rng.normal(size=6).astype(np.float32)
        cfg = SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.01)
        new, _ = sgd_step(ModelState(theta, "linear"), np.zeros(6), cfg, np.zeros(6))
        expected = (
            theta.astype(np.float64) - 0.1 * 0.01 * theta.astype(np.float64)
        ).astype(np.float32)
        np.testing.assert_array_equal(new.parameters, expected)

    def test_length_mismatch(self):
        state = ModelState(np.zeros(5, dtype=np.float32), "linear")
        with pytest.raises(ContractViolation):
            sgd_step(state, np.zeros(6), SgdConfig(), np.zeros(5))

    def test_defaults(self):
        cfg = SgdConfig()
        assert (cfg.learning_rate, cfg.momentum, cfg.weight_decay) == (0.1, 0.9, 5e-4)


class TestDeterminism:
    def test_same_seed_same_init(self):
        a = build_model("mlp-2x64", (8,), 5, seed=42)
        b = build_model("mlp-2x64", (8,), 5, seed=42)
        np.testing.assert_array_equal(a.get_params(), b.get_params())

    def test_training_steps_bitwise_reproducible(self):
        def run():
            model = build_model("mlp-2x64", (6,), 3, seed=1)
            local = np.random.default_rng(0)
            buf = np.zeros(model.n_params)
            cfg = SgdConfig()
            for _ in range(5):
                x = local.uniform(0, 1, size=(8, 6))
                y = local.integers(0, 3, size=8)
                logits, cache = model.forward_cached(x)
                _, dlogits = losses.cross_entropy_logit_grad(logits, y)
                grads, _ = model.backward(cache, dlogits)
                state, buf = sgd_step(model.state(), grads, cfg, buf)
                model.load_state(state)
            return model.get_params()

        np.testing.assert_array_equal(run(), run())


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        state = ModelState(rng.normal(size=37).astype(np.float32), "mlp-2x64")
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        assert loaded == state

    def test_truncated_file_is_rejected_atomically(self, tmp_path):
        state = ModelState(rng.normal(size=16).astype(np.float32), "mlp-2x64")
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_corrupted_payload_fails_checksum(self, tmp_path):
        state = ModelState(rng.normal(size=16).astype(np.float32), "mlp-2x64")
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, path)
        data = bytearray(path.read_bytes())
        data[20] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_future_version_is_incompatible(self, tmp_path):
        arch = b"mlp-2x64"
        body = (
            CHECKPOINT_MAGIC
            + struct.pack("<H", 2)
            + struct.pack("<H", len(arch))
            + arch
            + struct.pack("<Q", 0)
        )
        body += struct.pack("<I", zlib.crc32(body))
        path = tmp_path / "future.ckpt"
        path.write_bytes(body)
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_architecture_mismatch_on_load(self, tmp_path):
        mlp = build_model("mlp-2x64", (8,), 4, seed=0)
        path = tmp_path / "mlp.ckpt"
        save_checkpoint(mlp.state(), path)
        cnn = build_model("cnn-tiny", (2, 4, 4), 4, seed=0)
        with pytest.raises(IncompatibleCheckpointError):
            cnn.load_state(load_checkpoint(path))

    def test_parameter_count_mismatch_on_load(self, tmp_path):
        small = build_model("mlp-2x64", (4,), 3, seed=0)
        path = tmp_path / "small.ckpt"
        save_checkpoint(small.state(), path)
        big = build_model("mlp-2x64", (16,), 3, seed=0)
        with pytest.raises(IncompatibleCheckpointError):
            big.load_state(load_checkpoint(path))

    def test_metadata_sidecar(self, tmp_path):
        state = ModelState(np.zeros(4, dtype=np.float32), "linear")
        path = tmp_path / "tagged.ckpt"
        save_checkpoint(state, path, metadata={"recipe": "sat"})
        assert load_checkpoint_metadata(path) == {"recipe": "sat"}
        assert load_checkpoint(path) == state
