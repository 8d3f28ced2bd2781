"""Cross-channel / cross-view enhancement: hand cases and invariants."""

import numpy as np
import pytest

from dualview import autodiff as ad
from dualview.autodiff import ShapeError, Tensor
from dualview.enhance import (CveParams, cross_channel_enhance, cross_view_enhance,
                              enhance_pair, geometric_vector, read_pgm, write_pgm)
from dualview.gradcheck import finite_difference_check


def make_params(channels, rng=None, r=16, dtype=np.float64):
    rng = rng or np.random.default_rng(0)
    return CveParams.create(rng, channels, dtype, reduction_ratio=r)


def zeroed(params):
    for conv in (params.theta1, params.theta2, params.theta3):
        conv.w.data[...] = 0.0
        conv.b.data[...] = 0.0
    return params


class TestCrossChannel:
    def test_normalized_input_passes_through(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 6, 6))
        x = (x - x.mean(axis=(2, 3), keepdims=True)) / x.std(axis=(2, 3), keepdims=True)
        out = cross_channel_enhance(Tensor(x), make_params(4, r=2))
        np.testing.assert_allclose(out.data, x, atol=1e-5)

    def test_zero_attention_params_halve_residual(self):
        rng = np.random.default_rng(2)
        x = rng.normal(1.0, 2.0, size=(2, 4, 5, 5))
        params = make_params(4, r=2)
        zeroed(params)
        out = cross_channel_enhance(Tensor(x), params)
        f_tilde = ad.instance_norm(Tensor(x), eps=1e-6).data
        expected = f_tilde + 0.5 * (x - f_tilde)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_bottleneck_shapes(self):
        params = make_params(32, r=16)
        assert params.theta1.w.shape == (2, 32, 1, 1)
        assert params.theta2.w.shape == (32, 2, 1, 1)
        x = np.random.default_rng(3).normal(size=(1, 32, 8, 8))
        out = cross_channel_enhance(Tensor(x), params)
        assert out.shape == (1, 32, 8, 8)

    def test_reduction_clamps_to_one(self):
        params = make_params(4, r=16)
        assert params.theta1.w.shape[0] == 1


class TestGeometricVector:
    def test_hand_case(self):
        w = Tensor(np.array([[0.1, 0.9, 0.3], [0.5, 0.2, 0.7]]).reshape(1, 1, 2, 3))
        v = geometric_vector(w)
        np.testing.assert_array_equal(v.data, [[0.5, 0.9, 0.7]])

    def test_constant_map(self):
        w = Tensor(np.full((1, 1, 4, 5), 0.5))
        np.testing.assert_array_equal(geometric_vector(w).data, np.full((1, 5), 0.5))

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(4)
        w = rng.uniform(0.01, 0.99, size=(10, 1, 6, 6))
        v = geometric_vector(Tensor(w)).data
        oracle = np.empty((10, 6))
        for b in range(10):
            for col in range(6):
                best = w[b, 0, 0, col]
                for row in range(1, 6):
                    best = max(best, w[b, 0, row, col])
                oracle[b, col] = best
        np.testing.assert_array_equal(v, oracle)

    def test_row_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        w = rng.uniform(size=(2, 1, 5, 4))
        perm = rng.permutation(5)
        v1 = geometric_vector(Tensor(w)).data
        v2 = geometric_vector(Tensor(w[:, :, perm, :])).data
        np.testing.assert_array_equal(v1, v2)

    def test_multichannel_rejected(self):
        with pytest.raises(ShapeError):
            geometric_vector(Tensor(np.zeros((1, 2, 3, 3))))


class TestCrossView:
    def test_zero_theta3_gives_1p25_scaling(self):
        rng = np.random.default_rng(6)
        params = make_params(4, r=2)
        zeroed(params)
        fp_cc = Tensor(rng.normal(size=(2, 4, 6, 6)))
        fp_mlo = Tensor(rng.normal(size=(2, 4, 6, 6)))
        out_cc, out_mlo = cross_view_enhance(fp_cc, fp_mlo, params)
        np.testing.assert_allclose(out_cc.data, 1.25 * fp_cc.data, atol=1e-9)
        np.testing.assert_allclose(out_mlo.data, 1.25 * fp_mlo.data, atol=1e-9)

    def test_all_ones_geometric_vector_is_identity_on_map(self):
        # v == 1 collapses the cross term to pure self-attention
        rng = np.random.default_rng(7)
        w = rng.uniform(0.1, 0.9, size=(2, 1, 5, 5))
        fp = rng.normal(size=(2, 4, 5, 5))
        ones = np.ones((2, 1, 1, 5))
        w_hat = w * ones
        expected = fp + w_hat * fp
        np.testing.assert_array_equal(w_hat, w)
        np.testing.assert_allclose(expected, fp + w * fp, atol=0)

    def test_swapping_views_swaps_outputs(self):
        rng = np.random.default_rng(8)
        params = make_params(3, r=2)
        a = Tensor(rng.normal(size=(2, 3, 4, 4)))
        b = Tensor(rng.normal(size=(2, 3, 4, 4)))
        out1 = cross_view_enhance(a, b, params)
        out2 = cross_view_enhance(b, a, params)
        assert out1[0].data.tobytes() == out2[1].data.tobytes()
        assert out1[1].data.tobytes() == out2[0].data.tobytes()

    def test_dim_mismatch(self):
        params = make_params(3, r=2)
        with pytest.raises(ShapeError):
            cross_view_enhance(Tensor(np.zeros((1, 3, 4, 4))),
                               Tensor(np.zeros((1, 3, 5, 5))), params)


class TestPairInvariants:
    def test_output_dims_and_bound(self):
        rng = np.random.default_rng(9)
        params = make_params(8)
        f_cc = Tensor(rng.normal(size=(2, 8, 6, 6)))
        f_mlo = Tensor(rng.normal(size=(2, 8, 6, 6)))
        out_cc, out_mlo, (i_cc, i_mlo) = enhance_pair(f_cc, f_mlo, params,
                                                      keep_intermediates=True)
        assert out_cc.shape == f_cc.shape and out_mlo.shape == f_mlo.shape
        for inter, out in ((i_cc, out_cc), (i_mlo, out_mlo)):
            w_hat = inter.w_hat.data
            assert np.all(w_hat > 0.0) and np.all(w_hat < 1.0)
            assert np.all(np.abs(out.data) <= 2.0 * np.abs(inter.f_tilde_plus.data) + 1e-12)
            np.testing.assert_allclose(
                inter.residual.data, inter.f.data - inter.f_tilde.data, atol=0)
            t = inter.t.data
            assert np.all(t > 0.0) and np.all(t < 1.0)

    def test_gradcheck_both_views(self):
        rng = np.random.default_rng(10)
        params = make_params(8)
        f_mlo = Tensor(rng.normal(size=(1, 8, 6, 6)))

        def f(z):
            out_cc, out_mlo, _ = enhance_pair(z, f_mlo, params)
            return ad.add(ad.tsum(out_cc), ad.tsum(out_mlo))

        rep = finite_difference_check(f, Tensor(rng.normal(size=(1, 8, 6, 6))),
                                      step=1e-6, tolerance=1e-4)
        assert rep.passed, rep.max_rel_err

    def test_gradcheck_spec_shape_2x4x6x6(self):
        rng = np.random.default_rng(11)
        params = make_params(4, r=2)
        f_mlo = Tensor(rng.normal(size=(2, 4, 6, 6)))

        def f(z):
            out_cc, out_mlo, _ = enhance_pair(z, f_mlo, params)
            return ad.add(ad.tsum(out_cc), ad.tsum(out_mlo))

        rep = finite_difference_check(f, Tensor(rng.normal(size=(2, 4, 6, 6))),
                                      step=1e-6, tolerance=1e-4)
        assert rep.passed, rep.max_rel_err


class TestPgm:
    def test_round_trip_and_scaling(self, tmp_path):
        arr = np.array([[0.0, 0.5], [1.0, 0.25]])
        path = tmp_path / "m.pgm"
        write_pgm(arr, path)
        back = read_pgm(path)
        assert back.shape == (2, 2)
        np.testing.assert_array_equal(back, [[0, 128], [255, 64]])

    def test_constant_map(self, tmp_path):
        path = tmp_path / "c.pgm"
        write_pgm(np.full((3, 3), 0.7), path)
        assert np.all(read_pgm(path) == 0)

    def test_header_format(self, tmp_path):
        path = tmp_path / "h.pgm"
        write_pgm(np.zeros((2, 5)), path)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n5 2\n255\n")
        assert len(blob) == len(b"P5\n5 2\n255\n") + 10
