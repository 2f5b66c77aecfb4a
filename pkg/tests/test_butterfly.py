import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from butterfly_moe import autodiff as ad
from butterfly_moe import butterfly as bf
from butterfly_moe.errors import ConfigError, DimensionError

from conftest import central_fd


def reference_apply(angles: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Scalar loop over stages and pairs, independent of the vectorised kernel."""
    L, half = angles.shape
    d = 2 * half
    y = np.array(x, dtype=np.float64)
    for stage in range(L):
        s = 1 << stage
        pair = 0
        for i in range(d):
            if i & s:
                continue
            a = angles[stage, pair]
            u, v = y[i], y[i + s]
            y[i], y[i + s] = u * math.cos(a) - v * math.sin(a), u * math.sin(a) + v * math.cos(a)
            pair += 1
    return y


def random_params(d, L, seed, std=1.0):
    return bf.init_butterfly(d, L, rng_seed=seed, std=std)


class TestInit:
    def test_shape_and_scale(self):
        p = bf.init_butterfly(8, 3, rng_seed=1)
        assert p.angles.shape == (3, 4) and p.n_params == 12
        assert np.all(np.abs(p.angles) < 0.1)

    def test_deterministic(self):
        np.testing.assert_array_equal(bf.init_butterfly(8, 3, rng_seed=1).angles, bf.init_butterfly(8, 3, rng_seed=1).angles)

    def test_variance(self):
        p = bf.init_butterfly(2 ** 17, 1, rng_seed=7)  # 65536 angles
        q = bf.init_butterfly(2 ** 16, 1, rng_seed=8)
        angles = np.concatenate([p.angles.ravel(), q.angles.ravel()])[:100_000]
        assert 0.9e-4 <= angles.var() <= 1.1e-4

    @pytest.mark.parametrize("dim,L", [(6, 1), (1, 1), (8, 0), (8, 4), (12, 2)])
    def test_bad_config(self, dim, L):
        with pytest.raises(ConfigError):
            bf.init_butterfly(dim, L, rng_seed=0)

    def test_bad_angle_count(self):
        with pytest.raises(ConfigError):
            bf.ButterflyParams(8, 3, np.zeros(11))

    def test_non_finite_angles(self):
        with pytest.raises(ConfigError):
            bf.ButterflyParams(4, 1, np.array([np.nan, 0.0]))


class TestApply:
    def test_zero_angles_identity(self, rng):
        x = rng.normal(size=(3, 16))
        np.testing.assert_array_equal(bf.apply(bf.ButterflyParams.zeros(16), x), x)

    def test_quarter_turn(self):
        p = bf.ButterflyParams(2, 1, np.array([[math.pi / 2]]))
        np.testing.assert_allclose(bf.apply(p, np.array([1.0, 0.0])), [0.0, 1.0], atol=1e-15)

    @pytest.mark.parametrize("d", [2, 4, 8, 32])
    def test_matches_reference_loop(self, d, rng):
        for L in range(1, bf.max_layers(d) + 1):
            p = random_params(d, L, int(rng.integers(1 << 30)))
            x = rng.normal(size=d)
            np.testing.assert_allclose(bf.apply(p, x), reference_apply(p.angles, x), atol=1e-13)

    def test_inverse_d16(self, rng):
        p = random_params(16, 4, 3)
        x = rng.normal(size=(5, 16))
        np.testing.assert_allclose(bf.apply(p, bf.apply(p, x, transpose=True)), x, atol=1e-10)
        np.testing.assert_allclose(bf.apply(p, bf.apply(p, x), transpose=True), x, atol=1e-10)

    def test_batch_leading_dims(self, rng):
        p = random_params(8, 2, 5)
        x = rng.normal(size=(2, 3, 8))
        np.testing.assert_allclose(bf.apply(p, x)[1, 2], bf.apply(p, x[1, 2]), atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            bf.apply(bf.ButterflyParams.zeros(8), np.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(m=st.integers(1, 8), seed=st.integers(0, 2 ** 31 - 1), data=st.data())
    def test_norm_preserved_and_inverse(self, m, seed, data):
        d = 2 ** m
        L = data.draw(st.integers(1, m))
        p = random_params(d, L, seed, std=2.0)
        x = np.random.default_rng(seed).normal(size=d)
        y = bf.apply(p, x)
        ratio = np.linalg.norm(y) / np.linalg.norm(x)
        assert 1 - 1e-10 <= ratio <= 1 + 1e-10
        assert np.max(np.abs(bf.apply(p, y, transpose=True) - x)) < 1e-9


class TestDense:
    def test_zero_is_identity(self):
        np.testing.assert_array_equal(bf.as_dense(bf.ButterflyParams.zeros(8)), np.eye(8))

    def test_column_probe(self, rng):
        p = random_params(4, 2, 11)
        B = bf.as_dense(p)
        for j in range(4):
            np.testing.assert_allclose(B[:, j], bf.apply(p, np.eye(4)[j]), atol=1e-15)
        x = rng.normal(size=4)
        assert np.max(np.abs(B @ x - bf.apply(p, x))) < 1e-12

    def test_transpose_flag_is_matrix_transpose(self, rng):
        p = random_params(16, 3, 2)
        x = rng.normal(size=16)
        np.testing.assert_allclose(bf.apply(p, x, transpose=True), bf.as_dense(p).T @ x, atol=1e-12)

    @pytest.mark.parametrize("d", [4, 8, 32])
    def test_determinant_plus_one(self, d):
        for seed in range(5):
            assert abs(np.linalg.det(bf.as_dense(random_params(d, bf.max_layers(d), seed))) - 1) < 1e-8


class TestBackward:
    def test_zero_grad_out(self, rng):
        p = random_params(8, 3, 0)
        gx, ga = bf.backward(p, rng.normal(size=(2, 8)), np.zeros((2, 8)))
        assert not gx.any() and not ga.any()

    def test_identity_transform_passes_grad(self, rng):
        g = rng.normal(size=(3, 8))
        gx, _ = bf.backward(bf.ButterflyParams.zeros(8), rng.normal(size=(3, 8)), g)
        np.testing.assert_array_equal(gx, g)

    @pytest.mark.parametrize("transpose", [False, True])
    @pytest.mark.parametrize("d", [8, 16])
    def test_fd(self, d, transpose, rng):
        for L in sorted({1, 2, 3, bf.max_layers(d)}):
            p = random_params(d, L, int(rng.integers(1 << 30)))
            x, w = rng.normal(size=(3, d)), rng.normal(size=(3, d))
            gx, ga = bf.backward(p, x, w, transpose)
            fa = central_fd(lambda: float((bf.apply(p, x, transpose) * w).sum()), p.angles)
            fx = central_fd(lambda: float((bf.apply(p, x, transpose) * w).sum()), x)
            assert np.max(np.abs(ga - fa) / (np.abs(fa) + 1e-8)) < 1e-4
            assert np.max(np.abs(gx - fx) / (np.abs(fx) + 1e-8)) < 1e-4

    def test_autodiff_op(self, rng):
        ang = ad.Tensor(rng.normal(size=(3, 4)), True)
        x = ad.Tensor(rng.normal(size=(2, 8)), True)
        w = rng.normal(size=(2, 8))
        ad.tsum(ad.mul(bf.butterfly_op(x, ang, transpose=True), ad.Tensor(w))).backward()
        p = bf.ButterflyParams(8, 3, ang.data)
        gx, ga = bf.backward(p, x.data, w, transpose=True)
        np.testing.assert_allclose(ang.grad, ga)
        np.testing.assert_allclose(x.grad, gx)


class TestCounts:
    def test_param_counts(self):
        assert bf.expert_param_count(512, 512, 9, 9) == 4608
        assert bf.expert_param_count(512, 512, 2, 2) == 1024
        assert bf.param_count(8, 1) == 4

    @pytest.mark.parametrize("d,L", [(8, 3), (8, 1), (64, 6), (256, 2), (512, 9)])
    def test_flop_counter(self, d, L):
        p = bf.ButterflyParams.zeros(d, L)
        with bf.FlopCounter() as fc:
            bf.apply(p, np.ones((5, d)))
        assert fc.flops == 5 * 6 * (d // 2) * L
        with bf.FlopCounter() as fc:
            bf.apply(p, np.ones(d), transpose=True)
        assert fc.flops == 6 * (d // 2) * L

    def test_counter_inactive_outside_context(self):
        with bf.FlopCounter() as fc:
            pass
        bf.apply(bf.ButterflyParams.zeros(8), np.ones(8))
        assert fc.flops == 0


def test_serialisation_round_trip(rng):
    p = random_params(32, 4, 9)
    buf = b"xx" + p.to_bytes()
    q, off = bf.ButterflyParams.from_bytes(buf, 2)
    assert off == len(buf) and (q.dim, q.num_layers) == (32, 4)
    np.testing.assert_array_equal(q.angles, p.angles.astype(np.float32))
    assert buf[2:10] == (32).to_bytes(4, "little") + (4).to_bytes(4, "little")
