import numpy as np
import pytest
from oracles import bcrnn_oracle, crnn_i_oracle, relative_error

from crnn_recon import kspace as ks
from crnn_recon import model as mdl
from crnn_recon.tensor import grad_check
from crnn_recon.train import activation_pattern, mse_loss


def rand(rng, *shape):
    return rng.standard_normal(shape)


class TestUnitSteps:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.h_in = rand(rng, 2, 3, 2, 6, 5)
        self.h_prev = rand(rng, 2, 3, 4, 6, 5)
        self.w_l = rand(rng, 4, 2, 3, 3) * 0.5
        self.w_t = rand(rng, 4, 4, 3, 3) * 0.3
        self.w_i = rand(rng, 4, 4, 3, 3) * 0.3
        self.b = rand(rng, 4)
        self.b2 = rand(rng, 4)

    def test_crnn_i_matches_oracle(self):
        got, _ = mdl.crnn_i_step(self.h_in, self.h_prev, self.w_l, self.w_i, self.b)
        assert relative_error(got, crnn_i_oracle(self.h_in, self.h_prev, self.w_l, self.w_i, self.b)) < 1e-6

    def test_crnn_i_without_hidden_state(self):
        got, _ = mdl.crnn_i_step(self.h_in, None, self.w_l, self.w_i, self.b)
        assert relative_error(got, crnn_i_oracle(self.h_in, None, self.w_l, self.w_i, self.b)) < 1e-6

    def test_bcrnn_matches_oracle(self):
        got, _ = mdl.bcrnn_ti_step(self.h_in, self.h_prev, self.w_l, self.w_t, self.w_i, self.b, self.b2)
        want = bcrnn_oracle(self.h_in, self.h_prev, self.w_l, self.w_t, self.w_i, self.b, self.b2)
        assert relative_error(got, want) < 1e-6

    def test_bcrnn_single_frame_is_two_biased_cnns(self):
        h_in, h_prev = self.h_in[:, :1], self.h_prev[:, :1]
        got, _ = mdl.bcrnn_ti_step(h_in, h_prev, self.w_l, self.w_t, self.w_i, self.b, self.b2)
        a, _ = mdl.crnn_i_step(h_in, h_prev, self.w_l, self.w_i, self.b)
        c, _ = mdl.crnn_i_step(h_in, h_prev, self.w_l, self.w_i, self.b2)
        np.testing.assert_allclose(got, a + c, atol=1e-12)

    def test_zero_time_kernel_decouples_frames(self):
        zero_t = np.zeros_like(self.w_t)
        got, _ = mdl.bcrnn_ti_step(self.h_in, self.h_prev, self.w_l, zero_t, self.w_i, self.b, self.b)
        per_frame, _ = mdl.crnn_i_step(self.h_in, self.h_prev, self.w_l, self.w_i, self.b)
        np.testing.assert_allclose(got, 2 * per_frame, atol=1e-12)

    def test_hidden_shape_mismatch_is_rejected(self):
        with pytest.raises(ValueError, match="hidden state"):
            mdl.crnn_i_step(self.h_in, self.h_prev[:, :2], self.w_l, self.w_i, self.b)
        with pytest.raises(ValueError):
            mdl.bcrnn_ti_step(self.h_in, self.h_prev[..., :4], self.w_l, self.w_t, self.w_i, self.b, self.b2)

    def test_unit_backward_by_finite_differences(self):
        g = rand(np.random.default_rng(1), 2, 3, 4, 6, 5)
        h_in, h_prev = self.h_in, self.h_prev
        w_l, w_t, w_i, bf, bb = self.w_l, self.w_t, self.w_i, self.b, self.b2
        out, cache = mdl.bcrnn_ti_step(h_in, h_prev, w_l, w_t, w_i, bf, bb)
        gi, gp, grads = mdl.bcrnn_ti_backward(g, cache, w_l, w_t, w_i)

        def fn():
            o, c = mdl.bcrnn_ti_step(h_in, h_prev, w_l, w_t, w_i, bf, bb)
            return float(np.sum(o * g)), np.concatenate([(c[2] > 0).ravel(), (c[3] > 0).ravel()])

        params = {"h_in": h_in, "h_prev": h_prev, "input_weight": w_l, "time_weight": w_t,
                  "iter_weight": w_i, "bias_fwd": bf, "bias_bwd": bb}
        report = grad_check(fn, params, {"h_in": gi, "h_prev": gp, **grads}, max_coords=20)
        assert report.passed, str(report)


class TestConfig:
    def test_layouts(self):
        kinds = lambda v: [u.kind for u in mdl.NetworkConfig(variant=v).layout()]
        assert kinds("full") == [mdl.BCRNN, mdl.CRNN_I, mdl.CRNN_I, mdl.CRNN_I, mdl.CNN_OUT]
        assert kinds("iteration-only") == [mdl.CRNN_I] * 4 + [mdl.CNN_OUT]
        assert kinds("temporal-only") == [mdl.BCRNN_T, mdl.CNN, mdl.CNN, mdl.CNN, mdl.CNN_OUT]

    @pytest.mark.parametrize("kwargs", [dict(n_f=0), dict(k=2), dict(N=0), dict(variant="unet"),
                                        dict(dc_mode=-1.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            mdl.NetworkConfig(**kwargs)

    def test_round_trip(self):
        c = mdl.NetworkConfig(n_f=16, N=3, variant="temporal-only", dc_mode=0.5)
        assert mdl.NetworkConfig.from_dict(c.to_dict()) == c

    def test_temporal_only_has_no_iteration_kernels(self):
        names = mdl.param_shapes(mdl.NetworkConfig(variant="temporal-only"))
        assert not any("iter_weight" in n for n in names)

    def test_init_is_deterministic(self):
        c = mdl.NetworkConfig(n_f=4)
        a, b = mdl.init_params(c, seed=3), mdl.init_params(c, seed=3)
        assert all(np.array_equal(a[n], b[n]) for n in a)
        assert not np.array_equal(a["layer1.input_weight"], mdl.init_params(c, seed=4)["layer1.input_weight"])
        assert not any(a[n].any() for n in a if "bias" in n)


class TestCapacity:
    def test_nf64_breakdown(self):
        total, bd = mdl.count_parameters(mdl.NetworkConfig(n_f=64))
        assert total == 297_538
        assert bd["layer1 (bcrnn-t-i)"]["total"] == 2 * 64 * 9 + 2 * 64 * 64 * 9 + 2 * 64
        assert bd["layer5 (cnn-out)"]["total"] == 64 * 2 * 9 + 2

    def test_matches_initialised_store(self):
        for v in mdl.VARIANTS:
            c = mdl.NetworkConfig(n_f=5, variant=v)
            assert mdl.count_parameters(c)[0] == mdl.init_params(c).num_elements()


def tiny_problem(variant, seed=0, dtype=np.float64, T=3, H=16, W=16, n_f=4, N=2):
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal((T, H, W)) + 1j * rng.standard_normal((T, H, W))) * 0.3
    mask = ks.generate_mask(H, W, T, 2.0, seed=seed)
    x_u, kd = ks.undersample(x, mask)
    config = mdl.NetworkConfig(n_f=n_f, N=N, variant=variant)
    params = mdl.init_params(config, seed=seed, dtype=dtype, recurrent_gain=1.0, output_gain=1.0)
    for n in params:
        if "bias" in n:
            params[n][:] = rng.standard_normal(params[n].shape) * 0.1
    return x, x_u, kd, config, params


def network_grad_check(variant, max_coords=12):
    x, x_u, kd, config, params = tiny_problem(variant)
    res = mdl.forward(x_u, kd, config, params, keep_cache=True)
    _, g = mse_loss(res.x_rec, x)
    params.zero_grad()
    mdl.backward(res, g, config, params)

    def fn():
        out = mdl.forward(x_u, kd, config, params).x_rec
        return mse_loss(out, x)[0], activation_pattern(x_u, kd, config, params)

    return grad_check(fn, params.values, params.grads, max_coords=max_coords)


class TestNetwork:
    @pytest.mark.parametrize("variant", mdl.VARIANTS)
    def test_gradients(self, variant):
        report = network_grad_check(variant)
        assert report.passed, str(report)

    def test_input_gradient(self):
        x, x_u, kd, config, params = tiny_problem("full", seed=1)
        res = mdl.forward(x_u, kd, config, params, keep_cache=True)
        _, g = mse_loss(res.x_rec, x)
        gx = mdl.backward(res, g, config, params)
        rng = np.random.default_rng(5)
        v = rng.standard_normal(x_u.shape) + 1j * rng.standard_normal(x_u.shape)
        eps = 1e-6
        f = lambda z: mse_loss(mdl.forward(z, kd, config, params).x_rec, x)[0]
        numeric = (f(x_u + eps * v) - f(x_u - eps * v)) / (2 * eps)
        analytic = np.sum(gx.real * v.real + gx.imag * v.imag)
        assert abs(numeric - analytic) / abs(analytic) < 1e-4

    def test_output_is_data_consistent(self):
        x, x_u, kd, config, params = tiny_problem("full", dtype=np.float32)
        out = mdl.forward(x_u, kd, config, params).x_rec
        m = kd.mask.astype(bool)
        assert np.max(np.abs(ks.fft2c(out)[m] - kd.samples[m])) < 1e-5

    def test_zero_output_layer_returns_zero_filled(self):
        x, x_u, kd, config, params = tiny_problem("full")
        params["layer5.input_weight"][:] = 0
        params["layer5.bias"][:] = 0
        np.testing.assert_allclose(mdl.forward(x_u, kd, config, params, n_iter=5).x_rec, x_u, atol=1e-12)

    def test_batch_matches_single(self):
        x, x_u, kd, config, params = tiny_problem("full")
        single = mdl.forward(x_u, kd, config, params).x_rec
        batch = mdl.forward(np.stack([x_u, x_u]),
                            ks.KSpaceData(np.stack([kd.samples] * 2), np.stack([kd.mask] * 2)), config, params)
        np.testing.assert_allclose(batch.x_rec[1], single, atol=1e-12)

    def test_record_and_n_iter(self):
        x, x_u, kd, config, params = tiny_problem("iteration-only")
        res = mdl.forward(x_u, kd, config, params, n_iter=5, record=True)
        assert len(res.iterations) == 5 and len(res.activations) == 5
        np.testing.assert_array_equal(res.iterations[-1], res.x_rec)
        # the first N_test iterations do not depend on how many follow
        short = mdl.forward(x_u, kd, config, params, n_iter=2).x_rec
        np.testing.assert_allclose(res.iterations[1], short, atol=1e-12)
        with pytest.raises(ValueError):
            mdl.forward(x_u, kd, config, params, n_iter=0)

    def test_rejects_mismatched_params(self):
        x, x_u, kd, config, params = tiny_problem("full")
        with pytest.raises(ValueError, match="do not match"):
            mdl.forward(x_u, kd, mdl.NetworkConfig(n_f=8, N=2), params)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        config = mdl.NetworkConfig(n_f=4, N=3, variant="temporal-only")
        params = mdl.init_params(config, seed=2)
        path = tmp_path / "m.ckpt"
        mdl.checkpoint_save(params, config, path)
        loaded, cfg = mdl.checkpoint_load(path)
        assert cfg == config
        assert all(np.array_equal(loaded[n], params[n]) for n in params)

    def test_truncated_and_garbage(self, tmp_path):
        config = mdl.NetworkConfig(n_f=4, N=1)
        path = tmp_path / "m.ckpt"
        mdl.checkpoint_save(mdl.init_params(config), config, path)
        raw = path.read_bytes()
        (tmp_path / "short.ckpt").write_bytes(raw[:-7])
        with pytest.raises(mdl.CheckpointError, match="payload"):
            mdl.checkpoint_load(tmp_path / "short.ckpt")
        (tmp_path / "junk.ckpt").write_bytes(b"\x05\x00\x00\x00hello")
        with pytest.raises(mdl.CheckpointError):
            mdl.checkpoint_load(tmp_path / "junk.ckpt")
