import numpy as np
import pytest

from xbt import kernels
from xbt.adapters import lora_apply, lora_backward, lora_init
from gradcheck import TOL, finite_diff, normalized_rows, rel_err


def random_adapter(rng, d=6, r=3, alpha=6.0, dtype=np.float64):
    ad = lora_init(d, r, alpha=alpha, seed=int(rng.integers(1 << 30)), dtype=dtype)
    ad.b[:] = rng.standard_normal(ad.b.shape).astype(dtype) * 0.3
    return ad


class TestInit:
    def test_b_is_zero(self):
        ad = lora_init(16, 4, alpha=16.0, seed=0)
        assert not ad.b.any()

    def test_same_seed_bitwise(self):
        a = lora_init(16, 4, alpha=16.0, seed=5)
        b = lora_init(16, 4, alpha=16.0, seed=5)
        assert np.array_equal(a.a, b.a) and np.array_equal(a.b, b.b)

    def test_variance_within_three_sigma(self):
        ad = lora_init(64, 16, alpha=16.0, seed=3)
        sample_var = float(ad.a.var())
        target = 1.0 / 16
        # variance of the sample variance of n gaussians ~ 2 var^2 / n
        sigma = target * np.sqrt(2.0 / ad.a.size)
        assert abs(sample_var - target) < 3 * sigma

    def test_rank_validation(self):
        with pytest.raises(ValueError):
            lora_init(8, 9, alpha=16.0, seed=0)
        with pytest.raises(ValueError):
            lora_init(8, 0, alpha=16.0, seed=0)

    def test_dropout_validation(self):
        with pytest.raises(ValueError):
            lora_init(8, 2, alpha=16.0, seed=0, dropout_p=1.0)


class TestApply:
    def test_identity_at_init_bitwise(self):
        rng = np.random.default_rng(0)
        ad = lora_init(8, 2, alpha=16.0, seed=1)
        e = normalized_rows(rng, 5, 8, dtype=np.float32)
        out, _ = lora_apply(ad, e, training=False)
        assert np.array_equal(out, e)

    def test_doubling_alpha_doubles_delta(self):
        rng = np.random.default_rng(1)
        ad = random_adapter(rng, d=8, r=2, alpha=8.0)
        e = normalized_rows(rng, 4, 8)

        def branch_delta(alpha):
            u = kernels.matmul(e, np.ascontiguousarray(ad.a.T))
            return (alpha / ad.rank) * kernels.matmul(u, np.ascontiguousarray(ad.b.T))

        assert np.array_equal(branch_delta(16.0), 2.0 * branch_delta(8.0))

    def test_matches_dense_materialization_oracle(self):
        rng = np.random.default_rng(2)
        ad = random_adapter(rng, d=10, r=4, alpha=8.0)
        e = normalized_rows(rng, 6, 10)
        out, _ = lora_apply(ad, e, training=True)
        dense_w = (ad.alpha / ad.rank) * (ad.b @ ad.a)
        expected = kernels.l2_normalize_rows(e + e @ dense_w.T)
        assert np.abs(out - expected).max() < 1e-6

    def test_column_check(self):
        ad = lora_init(8, 2, alpha=16.0, seed=0)
        with pytest.raises(ValueError):
            lora_apply(ad, np.zeros((2, 9), dtype=np.float32), training=False)

    def test_deterministic_without_dropout(self):
        rng = np.random.default_rng(3)
        ad = random_adapter(rng)
        e = normalized_rows(rng, 4, 6)
        out1, _ = lora_apply(ad, e, training=True)
        out2, _ = lora_apply(ad, e, training=True)
        assert np.array_equal(out1, out2)

    def test_dropout_scales_branch_only(self):
        rng = np.random.default_rng(4)
        ad = random_adapter(rng, d=12, r=3)
        ad.dropout_p = 0.5
        e = normalized_rows(rng, 400, 12)
        out, cache = lora_apply(ad, e, training=True, rng=np.random.default_rng(7))
        mask = cache[3]
        assert set(np.unique(mask)) <= {0.0, 2.0}
        assert abs(mask.mean() - 1.0) < 0.05
        out_infer, _ = lora_apply(ad, e, training=False)
        assert not np.array_equal(out, out_infer)

    def test_dropout_reproducible_per_seed(self):
        rng = np.random.default_rng(5)
        ad = random_adapter(rng)
        ad.dropout_p = 0.3
        e = normalized_rows(rng, 8, 6)
        o1, _ = lora_apply(ad, e, training=True, rng=np.random.default_rng(11))
        o2, _ = lora_apply(ad, e, training=True, rng=np.random.default_rng(11))
        assert np.array_equal(o1, o2)


class TestBackward:
    def test_gradients_finite_diff(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            ad = random_adapter(rng)
            e = normalized_rows(rng, 4, 6)
            r = rng.standard_normal((4, 6))

            def loss():
                out, _ = lora_apply(ad, e, training=True)
                return float(np.sum(out * r))

            _, cache = lora_apply(ad, e, training=True)
            da, db, de = lora_backward(r, cache)
            assert rel_err(da, finite_diff(loss, ad.a)) < TOL
            assert rel_err(db, finite_diff(loss, ad.b)) < TOL
            assert rel_err(de, finite_diff(loss, e)) < TOL

    def test_gradient_at_zero_b_nonzero(self):
        # b starts at zero; its gradient must not, or training never starts
        rng = np.random.default_rng(7)
        ad = lora_init(6, 3, alpha=6.0, seed=2, dtype=np.float64)
        e = normalized_rows(rng, 4, 6)
        r = rng.standard_normal((4, 6))
        _, cache = lora_apply(ad, e, training=True)
        _, db, _ = lora_backward(r, cache)
        assert np.abs(db).max() > 0

    def test_identity_cache_rejects_backward(self):
        ad = lora_init(6, 3, alpha=6.0, seed=0)
        e = np.zeros((2, 6), dtype=np.float32)
        _, cache = lora_apply(ad, e, training=False)
        with pytest.raises(RuntimeError):
            lora_backward(np.zeros((2, 6), dtype=np.float32), cache)
