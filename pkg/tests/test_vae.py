import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from pecnet import autodiff as ad
from pecnet.autodiff import Tensor
from pecnet.nets import init_model, mlp_forward
from pecnet.vae import (
    LatentParams,
    SamplingConfig,
    decode_endpoint,
    kl_divergence,
    posterior_params,
    reparameterize,
    sample_prior,
)


@pytest.fixture(scope="module")
def model():
    return init_model(0, dtype=np.float64)


def zeroed(net):
    m = init_model(0, dtype=np.float64)
    for name, t in m.tensors.items():
        if name.startswith(net + "."):
            t.data[...] = 0
    return m


def feats(n, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(n, 16))), Tensor(rng.normal(size=(n, 16)))


class TestPosterior:
    def test_zero_encoder_gives_unit_gaussian(self):
        lp = posterior_params(zeroed("e_latent"), *feats(3))
        assert not lp.mu.data.any() and not lp.log_var.data.any()
        np.testing.assert_array_equal(lp.sigma, 1.0)

    def test_split_matches_slicing(self, model):
        pf, ef = feats(4)
        lp = posterior_params(model, pf, ef)
        raw = mlp_forward(model, "e_latent", Tensor(np.concatenate([pf.data, ef.data], axis=1))).data
        np.testing.assert_array_equal(lp.mu.data, raw[:, :16])
        np.testing.assert_array_equal(lp.log_var.data, np.clip(raw[:, 16:], -10, 10))

    def test_batch_order_preserved(self, model):
        pf, ef = feats(5)
        full = posterior_params(model, pf, ef)
        for i in range(5):
            one = posterior_params(model, Tensor(pf.data[i : i + 1]), Tensor(ef.data[i : i + 1]))
            np.testing.assert_allclose(one.mu.data[0], full.mu.data[i], atol=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self, model):
        pf, ef = feats(1)
        pf.data[0, 0] = np.inf
        with pytest.raises(FloatingPointError):
            posterior_params(model, pf, ef)


class TestReparameterize:
    def test_collapsed_sigma_returns_mu(self):
        mu = np.arange(16.0)
        z = reparameterize(LatentParams(Tensor(mu), ad.clamp(Tensor(np.full(16, -1e9)), -10, 10)), np.zeros(16))
        np.testing.assert_array_equal(z.data, mu)

    def test_standard_case(self):
        e = np.random.default_rng(0).normal(size=16)
        z = reparameterize(LatentParams(Tensor(np.zeros(16)), Tensor(np.zeros(16))), e)
        np.testing.assert_array_equal(z.data, e)

    def test_monte_carlo_moments(self):
        rng = np.random.default_rng(1)
        mu, log_var = np.array([0.5, -2.0]), np.array([0.3, -1.0])
        eps = rng.standard_normal((100_000, 2))
        z = reparameterize(LatentParams(Tensor(np.tile(mu, (100_000, 1))), Tensor(np.tile(log_var, (100_000, 1)))), eps).data
        var = np.exp(log_var)
        se_mean = np.sqrt(var / 100_000)
        se_var = var * np.sqrt(2 / (100_000 - 1))
        assert np.all(np.abs(z.mean(0) - mu) < 3 * se_mean)
        assert np.all(np.abs(z.var(0, ddof=1) - var) < 3 * se_var)


class TestDecode:
    def test_zero_decoder(self):
        out = decode_endpoint(zeroed("d_latent"), *feats(2))
        assert out.shape == (2, 2) and not out.data.any()

    def test_repeatable(self, model):
        z, pf = feats(3, seed=2)
        assert decode_endpoint(model, z, pf).data.tobytes() == decode_endpoint(model, z, pf).data.tobytes()

    def test_matches_hand_concatenation(self, model):
        z, pf = feats(3, seed=3)
        direct = mlp_forward(model, "d_latent", Tensor(np.hstack([z.data, pf.data]))).data
        np.testing.assert_array_equal(decode_endpoint(model, z, pf).data, direct)


class TestSamplePrior:
    def test_k1_truncated_is_zero(self):
        for c in (0.1, 1.2, 7.0):
            z = sample_prior(SamplingConfig(k=1, sigma_t=1.0, truncation_c=c, truncate=True), np.random.default_rng(0))
            assert z.shape == (1, 16) and not z.any()

    def test_untruncated_variance(self):
        cfg = SamplingConfig(k=20, sigma_t=1.0, truncate=False)
        rng = np.random.default_rng(2)
        z = np.concatenate([sample_prior(cfg, rng) for _ in range(5000)])  # 10^5 x 16
        se = np.sqrt(2 / (len(z) - 1))
        assert np.all(np.abs(z.var(axis=0, ddof=1) - 1.0) < 3 * se)

    def test_sigma_t_scales(self):
        z = sample_prior(SamplingConfig(k=20000, sigma_t=1.3), np.random.default_rng(0))
        assert abs(z.std() - 1.3) < 0.01

    def test_k2_truncation_bound(self):
        z = sample_prior(SamplingConfig(k=2, sigma_t=1.0, truncation_c=1.2, truncate=True), np.random.default_rng(3), n_agents=500)
        assert z.shape == (2, 500, 16)
        assert np.abs(z).max() <= 1.2

    def test_exhaustive_bound_check(self):
        cfg = SamplingConfig(k=3, sigma_t=1.0, truncation_c=0.5, truncate=True)
        z = sample_prior(cfg, np.random.default_rng(4), n_agents=62_500, dim=16)  # 3 * 62500 * 16 > 10^6 coordinates
        assert z.size >= 1_000_000
        assert np.abs(z).max() <= cfg.bound

    def test_rejection_not_clipping(self):
        cfg = SamplingConfig(k=2, sigma_t=1.0, truncation_c=0.5, truncate=True)
        z = sample_prior(cfg, np.random.default_rng(5), n_agents=10_000)
        # clipping would pile ~62% of the mass exactly on the bound
        assert np.mean(np.abs(z) == cfg.bound) < 1e-3

    def test_prefix_nesting_untruncated(self):
        big = sample_prior(SamplingConfig(k=20), np.random.default_rng(9), n_agents=4)
        small = sample_prior(SamplingConfig(k=5), np.random.default_rng(9), n_agents=4)
        np.testing.assert_array_equal(big[:5], small)

    def test_defaults(self):
        assert SamplingConfig.default_for(2).truncate and SamplingConfig.default_for(2).sigma_t == 1.0
        d = SamplingConfig.default_for(20)
        assert not d.truncate and d.sigma_t > 1

    def test_invalid(self):
        with pytest.raises(ValueError):
            SamplingConfig(k=0)


class TestKL:
    def test_identical_is_zero(self):
        assert float(kl_divergence(LatentParams(Tensor(np.zeros((1, 16))), Tensor(np.zeros((1, 16))))).data) == 0.0

    def test_unit_mean_shift(self):
        kl = kl_divergence(LatentParams(Tensor([[1.0]]), Tensor([[0.0]])))
        assert float(kl.data) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        mu, lv = rng.normal(), rng.uniform(-1.5, 1.5)
        s = np.exp(0.5 * lv)

        def integrand(x):
            q = np.exp(-0.5 * ((x - mu) / s) ** 2) / (s * np.sqrt(2 * np.pi))
            return q * (np.log(q) - (-0.5 * x**2 - 0.5 * np.log(2 * np.pi))) if q > 0 else 0.0

        expected, _ = integrate.quad(integrand, mu - 12 * s, mu + 12 * s, limit=200)
        got = float(kl_divergence(LatentParams(Tensor([[mu]]), Tensor([[lv]]))).data)
        assert got == pytest.approx(expected, abs=1e-3)

    def test_batch_average(self):
        a = LatentParams(Tensor([[1.0], [0.0]]), Tensor([[0.0], [0.0]]))
        assert float(kl_divergence(a).data) == pytest.approx(0.25)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-5, 5), min_size=16, max_size=16),
        st.lists(st.floats(-9, 9), min_size=16, max_size=16),
    )
    def test_nonnegative(self, mu, lv):
        kl = float(kl_divergence(LatentParams(Tensor([mu]), Tensor([lv]))).data)
        assert kl >= -1e-12
        if np.allclose(mu, 0) and np.allclose(lv, 0):
            assert kl < 1e-12
