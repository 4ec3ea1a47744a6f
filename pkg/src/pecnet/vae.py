"""Endpoint VAE: posterior encoding for training, prior sampling (with truncation) for inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .nets import LATENT_DIM, ModelParams, mlp_forward

LOG_VAR_BOUNDS = (-10.0, 10.0)


@dataclass
class LatentParams:
    mu: Tensor
    log_var: Tensor

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)


@dataclass(frozen=True)
class SamplingConfig:
    k: int = 20
    sigma_t: float = 1.3
    truncation_c: float = 1.2
    truncate: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.sigma_t <= 0 or self.truncation_c <= 0:
            raise ValueError("sigma_t and truncation_c must be positive")

    @property
    def bound(self) -> float:
        return self.truncation_c * np.sqrt(self.k - 1)

    @classmethod
    def default_for(cls, k: int, truncation_c: float = 1.2) -> "SamplingConfig":
        """Truncated unit prior for few samples, a widened untruncated prior otherwise."""
        if k <= 3:
            return cls(k=k, sigma_t=1.0, truncation_c=truncation_c, truncate=True)
        return cls(k=k, sigma_t=1.3, truncation_c=truncation_c, truncate=False)


def posterior_params(params: ModelParams, past_feat: Tensor, endpoint_feat: Tensor) -> LatentParams:
    out = mlp_forward(params, "e_latent", ad.concat([past_feat, endpoint_feat]))
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("latent encoder produced non-finite output (training diverged)")
    half = out.shape[-1] // 2
    mu = ad.slice_last(out, 0, half)
    log_var = ad.clamp(ad.slice_last(out, half, 2 * half), *LOG_VAR_BOUNDS)
    return LatentParams(mu, log_var)


def reparameterize(lp: LatentParams, eps) -> Tensor:
    """z = mu + sigma * eps with a caller-supplied standard-normal ``eps``."""
    eps = np.asarray(eps, dtype=lp.mu.dtype)
    sigma = ad.exp(ad.mul(lp.log_var, 0.5))
    return ad.add(lp.mu, ad.mul(sigma, eps))


def decode_endpoint(params: ModelParams, z: Tensor, past_feat: Tensor) -> Tensor:
    return mlp_forward(params, "d_latent", ad.concat([z, past_feat]))


def sample_prior(cfg: SamplingConfig, rng: np.random.Generator, n_agents: int | None = None, dim: int = LATENT_DIM) -> np.ndarray:
    """K draws from N(0, sigma_t^2 I), shape ``(K, dim)`` or ``(K, n_agents, dim)``.

    Truncation rejection-resamples each coordinate into +-c*sqrt(K-1).  With K=1 the
    bound is 0, so the result is the all-zero vector.
    """
    shape = (cfg.k, dim) if n_agents is None else (cfg.k, n_agents, dim)
    if cfg.truncate and cfg.k == 1:
        return np.zeros(shape)
    z = cfg.sigma_t * rng.standard_normal(shape)
    if cfg.truncate:
        bound = cfg.bound
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = cfg.sigma_t * rng.standard_normal(int(bad.sum()))
            bad = np.abs(z) > bound
    return z


def kl_divergence(lp: LatentParams) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over latent dims, averaged over the batch."""
    terms = ad.sub(ad.add(ad.square(lp.mu), ad.exp(lp.log_var)), ad.add(lp.log_var, 1.0))
    n = lp.mu.data.size // lp.mu.shape[-1]
    return ad.mul(ad.total(terms), 0.5 / n)
