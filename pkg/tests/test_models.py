"""Architecture forwards, invariances, and checkpoint round-trips."""

import numpy as np
import pytest

from _gradcheck import probe_gradcheck
from auroracast import autodiff as ad
from auroracast import models as M
from auroracast.autodiff import Tape, Tensor
from auroracast.errors import ConfigError, DataError
from auroracast.losses import mse_op, sparse_masked_loss_op


SMALL_CONV = dict(trunk=(24, 16), n_lat=32, n_mlt=32)


def _zero_params(arch):
    return {name: Tensor(np.zeros(shape), requires_grad=True)
            for name, shape in M.param_shapes(arch).items()}


class TestBaseline:
    def test_default_widths(self):
        arch = M.BaselineArch(input_width=133)
        assert arch.widths == (133, 266, 64, 32, 256, 1024, 256, 64, 1)

    def test_zero_weights_output_bias(self):
        arch = M.BaselineArch(input_width=5, hidden=(8, 4))
        params = _zero_params(arch)
        params["out.b"].data[:] = 3.5
        y = M.forward_baseline(arch, params, np.random.default_rng(0).standard_normal((7, 5)))
        assert np.allclose(y.data, 3.5)

    def test_identical_rows_identical_outputs(self):
        arch = M.BaselineArch(input_width=6, hidden=(10, 5))
        params = M.init_params(arch, seed=1, dtype=np.float64)
        row = np.random.default_rng(1).standard_normal(6)
        y = M.forward_baseline(arch, params, np.stack([row, row]))
        assert y.data[0] == y.data[1]

    def test_width_mismatch(self):
        arch = M.BaselineArch(input_width=6, hidden=(4,))
        params = M.init_params(arch, seed=0)
        with pytest.raises(ValueError):
            M.forward_baseline(arch, params, np.zeros((2, 5)))

    def test_batch_permutation_equivariance(self):
        arch = M.BaselineArch(input_width=4, hidden=(12, 6))
        params = M.init_params(arch, seed=2, dtype=np.float64)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((9, 4))
        perm = rng.permutation(9)
        y = M.forward_baseline(arch, params, x).data
        y_p = M.forward_baseline(arch, params, x[perm]).data
        assert np.array_equal(y_p, y[perm])

    def test_inference_bitwise_repeatable(self):
        arch = M.BaselineArch(input_width=4, hidden=(8,))
        params = M.init_params(arch, seed=4, dtype=np.float64)
        x = np.random.default_rng(5).standard_normal((3, 4))
        a = M.forward_baseline(arch, params, x).data
        b = M.forward_baseline(arch, params, x).data
        assert np.array_equal(a, b)

    def test_gradcheck_probe_weights(self):
        arch = M.BaselineArch(input_width=5, hidden=(7, 4))
        params = M.init_params(arch, seed=6, dtype=np.float64)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((6, 5))
        y_true = rng.standard_normal(6)

        def loss_value():
            pred = M.forward_baseline(arch, params, x)
            return np.mean((pred.data - y_true) ** 2)

        tape = Tape()
        pred = M.forward_baseline(arch, params, x, tape)
        loss = mse_op(tape, pred, y_true)
        tape.backward(loss)
        probe_gradcheck(loss_value, params, ("dense0.w", "dense1.b", "out.w", "out.b"))
        for p in params.values():
            p.grad = None


class TestMultitask:
    def _setup(self, seed=0):
        arch = M.MultiTaskArch(input_width=5, trunk=(10, 6))
        params = M.init_params(arch, seed=seed, dtype=np.float64)
        return arch, params

    def test_probs_sum_to_one(self):
        arch, params = self._setup()
        x = np.random.default_rng(1).standard_normal((11, 5))
        probs, flux, selected = M.forward_multitask(arch, params, x)
        assert np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)
        assert flux.shape == (11, 3)
        assert selected.shape == (11,)

    def test_forced_class_zero(self):
        arch, params = self._setup()
        params["head_class.w"].data[:] = 0.0
        params["head_class.b"].data[:] = np.array([50.0, 0.0, 0.0])
        x = np.random.default_rng(2).standard_normal((6, 5))
        probs, flux, selected = M.forward_multitask(arch, params, x)
        assert np.array_equal(selected, flux.data[:, 0])

    def test_selection_matches_loop_oracle(self):
        arch, params = self._setup(seed=3)
        x = np.random.default_rng(4).standard_normal((30, 5))
        probs, flux, selected = M.forward_multitask(arch, params, x)
        for i in range(30):
            best = 0
            for k in range(1, 3):
                if probs.data[i, k] > probs.data[i, best]:
                    best = k
            assert selected[i] == flux.data[i, best]

    def test_logit_scaling_never_changes_selection(self):
        arch, params = self._setup(seed=5)
        x = np.random.default_rng(6).standard_normal((20, 5))
        _, _, selected = M.forward_multitask(arch, params, x)
        for c in (0.5, 2.0, 10.0):
            params_scaled = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}
            params_scaled["head_class.w"].data *= c
            params_scaled["head_class.b"].data *= c
            _, _, sel2 = M.forward_multitask(arch, params_scaled, x)
            assert np.array_equal(selected, sel2)


class TestConvDecoder:
    def test_shape_trace_default(self):
        arch = M.ConvDecoderArch(input_width=10)
        assert arch.side == 16
        params = M.init_params(arch, seed=0)
        x = np.random.default_rng(0).standard_normal((2, 10))
        out = M.forward_convdecoder(arch, params, x)
        assert out.shape == (2, 128, 128)

    def test_shape_trace_small(self):
        arch = M.ConvDecoderArch(input_width=8, **SMALL_CONV)
        assert arch.side == 4
        params = M.init_params(arch, seed=1)
        out = M.forward_convdecoder(arch, params, np.zeros((3, 8)))
        assert out.shape == (3, 32, 32)

    def test_identical_rows_identical_maps(self):
        arch = M.ConvDecoderArch(input_width=8, **SMALL_CONV)
        params = M.init_params(arch, seed=2, dtype=np.float64)
        row = np.random.default_rng(3).standard_normal(8)
        out = M.forward_convdecoder(arch, params, np.stack([row, row])).data
        assert np.array_equal(out[0], out[1])

    def test_seam_continuity_random_params(self):
        # the seam column difference must not exceed the largest interior
        # column-to-column difference (periodic construction)
        for seed in (0, 1, 2, 3, 4):
            arch = M.ConvDecoderArch(input_width=8, **SMALL_CONV)
            params = M.init_params(arch, seed=seed, dtype=np.float64)
            x = np.random.default_rng(100 + seed).standard_normal((1, 8))
            grid = M.forward_convdecoder(arch, params, x).data[0]
            seam = np.abs(grid[:, 0] - grid[:, -1]).max()
            interior = np.abs(np.diff(grid, axis=1)).max()
            assert seam <= interior

    def test_width_roll_before_pad_rolls_output(self):
        # rolling the columns of the tensor entering the periodic pad rolls
        # the final output columns identically (exact)
        rng = np.random.default_rng(8)
        k = Tensor(rng.standard_normal((1, 3, 7, 7)))
        b = Tensor(rng.standard_normal(1))
        x = rng.standard_normal((1, 3, 32, 32))

        def head(arr):
            h = ad.pad_periodic_mlt(Tensor(arr), 3)
            h = ad.pad_zero_lat(h, 3)
            h = ad.conv2d(h, k)
            return ad.add_channel_bias(h, b).data

        base = head(x)
        for shift in (1, 5, 8, 31):
            rolled = head(np.roll(x, shift, axis=-1))
            assert np.array_equal(rolled, np.roll(base, shift, axis=-1))

    def test_gradcheck_through_full_decoder(self):
        arch = M.ConvDecoderArch(input_width=5, trunk=(6,), n_lat=16, n_mlt=16,
                                 filters=(2, 2), kernels=(3, 5), strides=(2, 2),
                                 final_kernel=7, overlap=3)
        params = M.init_params(arch, seed=3, dtype=np.float64)
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 5))
        values = rng.standard_normal((2, 16, 16))
        mask = rng.random((2, 16, 16)) < 0.3
        mask[0, 0, 0] = True

        def loss_value():
            pred = M.forward_convdecoder(arch, params, x)
            err = (pred.data[mask] - values[mask])
            return float((err**2).sum() / mask.sum())

        tape = Tape()
        pred = M.forward_convdecoder(arch, params, x, tape)
        loss = sparse_masked_loss_op(tape, pred, values, mask)
        tape.backward(loss)
        probe_gradcheck(loss_value, params, ("deconv1.k", "deconv2.b", "final.k", "to_grid.w"))
        for p in params.values():
            p.grad = None

    def test_arch_validation(self):
        with pytest.raises(ValueError):
            M.ConvDecoderArch(input_width=4, n_lat=30, n_mlt=30)
        with pytest.raises(ValueError):
            M.ConvDecoderArch(input_width=4, final_kernel=5)
        with pytest.raises(ValueError):
            M.ConvDecoderArch(input_width=4, kernels=(1, 5))

    def test_spatial_feature_guard(self):
        with pytest.raises(ConfigError, match="spatial"):
            M.assert_global_only(["sin_mlt", "AE_lag0m"])
        M.assert_global_only(["AE_lag0m", "Bz_avg30m"])


class TestCheckpoints:
    def _model(self, tmp_path, arch=None):
        arch = arch or M.BaselineArch(input_width=6, hidden=(8, 4))
        model = M.build_model(arch, seed=5)
        model.meta = {"seed": 5, "note": "probe"}
        path = tmp_path / "m.aur"
        M.save_checkpoint(model, path)
        return model, path

    def test_roundtrip_identical_forward(self, tmp_path):
        model, path = self._model(tmp_path)
        back = M.load_checkpoint(path)
        assert back.meta == model.meta
        x = np.random.default_rng(10).standard_normal((4, 6)).astype(np.float32)
        a = M.forward_baseline(model.arch, model.params, x).data
        b = M.forward_baseline(back.arch, back.params, x).data
        assert np.array_equal(a, b)

    def test_rewrite_identical_bytes(self, tmp_path):
        model, path = self._model(tmp_path)
        path2 = tmp_path / "m2.aur"
        M.save_checkpoint(model, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_conv_roundtrip(self, tmp_path):
        arch = M.ConvDecoderArch(input_width=8, **SMALL_CONV)
        model, path = self._model(tmp_path, arch)
        back = M.load_checkpoint(path)
        assert back.arch == arch
        x = np.random.default_rng(11).standard_normal((2, 8)).astype(np.float32)
        assert np.array_equal(
            M.forward_convdecoder(arch, model.params, x).data,
            M.forward_convdecoder(back.arch, back.params, x).data,
        )

    def test_corrupted_magic(self, tmp_path):
        _, path = self._model(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        # keep the CRC consistent so the magic check itself fires
        import struct
        import zlib

        body = bytes(raw[:-4])
        raw[-4:] = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="magic"):
            M.load_checkpoint(path)

    def test_crc_detects_corruption(self, tmp_path):
        _, path = self._model(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="CRC"):
            M.load_checkpoint(path)

    def test_truncation(self, tmp_path):
        _, path = self._model(tmp_path)
        path.write_bytes(path.read_bytes()[:30])
        with pytest.raises(DataError):
            M.load_checkpoint(path)

    def test_cross_arch_shape_mismatch(self, tmp_path):
        arch_a = M.BaselineArch(input_width=6, hidden=(8, 4))
        arch_b = M.BaselineArch(input_width=6, hidden=(9, 4))
        model = M.Model(arch=arch_a, params=M.init_params(arch_b, seed=0), meta={})
        path = tmp_path / "bad.aur"
        M.save_checkpoint(model, path)
        with pytest.raises(DataError, match="shape mismatch"):
            M.load_checkpoint(path)


class TestArchFromConfig:
    def test_defaults(self):
        arch = M.arch_from_config({}, input_width=20)
        assert isinstance(arch, M.BaselineArch)
        assert arch.hidden == M.default_hidden(20)

    def test_conv_with_grid(self):
        cfg = {"arch": "conv", "arch.grid": "32", "arch.hidden": "24,16"}
        arch = M.arch_from_config(cfg, input_width=10)
        assert isinstance(arch, M.ConvDecoderArch)
        assert arch.n_lat == 32 and arch.trunk == (24, 16)

    def test_unknown_arch(self):
        with pytest.raises(ConfigError):
            M.arch_from_config({"arch": "transformer"}, input_width=4)

    def test_bad_grid(self):
        with pytest.raises(ConfigError):
            M.arch_from_config({"arch": "conv", "arch.grid": "30"}, input_width=4)
