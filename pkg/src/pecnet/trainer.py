"""Training with the endpoint-conditioned loss, best-of-K inference and the ablation protocols."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .data import (
    SceneBatch,
    gen_synthetic,
    group_into_batches,
    load_manifest,
    load_scene,
    to_world,
    window_samples,
)
from .nets import LATENT_DIM, ModelParams, architecture, init_model, mlp_forward
from .social import social_pool
from .vae import SamplingConfig, decode_endpoint, kl_divergence, posterior_params, reparameterize, sample_prior

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    """A non-finite loss or gradient was produced during training."""


class ConfigError(ValueError):
    pass


DEFAULT_T_DIST = {"ethucy_txt": 2.0, "sdd_annot": 50.0}


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch: int = 512
    lambda1: float = 1.0
    lambda2: float = 1.0
    epochs: int = 1
    steps: int = 0  # when > 0, overrides epochs
    seed: int = 0
    pool_rounds: int = 1
    t_dist: float | None = None  # None: 2.0 for metric data, 50 for pixel data
    manifest: str | None = None
    data_format: str = "ethucy_txt"
    test_scene: str | None = None
    precision: int = 32
    scale: float = 1.0
    t_p: int = 8
    t_f: int = 12
    stride: int = 20
    eval_stride: int = 1
    waypoint: int = 0  # 0 means t_f
    oracle: bool = False
    synthetic: bool = False
    n_scenes: int = 32
    n_test_scenes: int = 16
    agents_per_scene: int = 4
    jitter: float = 0.02
    data_seed: int = 0
    checkpoint: str | None = None
    checkpoint_every: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch <= 0 or self.epochs <= 0 or self.steps < 0:
            raise ConfigError("lr, batch and epochs must be positive")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.t_dist is None:
            self.t_dist = DEFAULT_T_DIST.get(self.data_format, 2.0)
        if self.t_dist <= 0:
            raise ConfigError(f"t_dist must be positive, got {self.t_dist}")
        if self.pool_rounds < 0:
            raise ConfigError("pool_rounds must be >= 0")
        if not 0 <= self.waypoint <= self.t_f:
            raise ConfigError(f"waypoint must be in 1..{self.t_f}")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def conditioning_index(self) -> int:
        return self.waypoint or self.t_f


@dataclass
class Losses:
    kl: Tensor
    ael: Tensor
    atl: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("kl", "ael", "atl", "total")}


@dataclass
class PredictionSet:
    """K endpoints and K futures per agent, in world coordinates.

    ``futures[k, a]`` is ``(t_f, 2)``; ``endpoints[k, a]`` is its conditioned row.
    """

    endpoints: np.ndarray  # (K, agents, 2)
    futures: np.ndarray  # (K, agents, t_f, 2)
    waypoint: int


# --------------------------------------------------------------------------- model passes


def _future_from_condition(params: ModelParams, past_feat: Tensor, cond: Tensor, mask, rounds: int, waypoint: int) -> Tensor:
    """Encode the conditioning point, pool socially, predict the remaining points and
    splice the conditioning point back in at position ``waypoint`` (1-based)."""
    X = ad.concat([past_feat, mlp_forward(params, "e_end", cond)])
    X = social_pool(X, mask, params, rounds)
    rest = mlp_forward(params, "p_future", X)
    cut = 2 * (waypoint - 1)
    parts = []
    if cut > 0:
        parts.append(ad.slice_last(rest, 0, cut))
    parts.append(cond)
    if cut < rest.shape[-1]:
        parts.append(ad.slice_last(rest, cut, rest.shape[-1]))
    return ad.concat(parts)


def forward_train(
    batch: SceneBatch,
    params: ModelParams,
    eps: np.ndarray,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    rounds: int = 1,
    waypoint: int | None = None,
    oracle: bool = False,
) -> Losses:
    """Training-path losses.  The endpoint sampled from the posterior (not the ground
    truth) drives pooling and prediction unless ``oracle`` is set."""
    dtype = params.dtype
    w = waypoint or batch.t_f
    alpha = len(batch)
    past = Tensor(batch.past.astype(dtype))
    target = Tensor(batch.future[:, w - 1].astype(dtype))
    future = Tensor(batch.future.reshape(alpha, -1).astype(dtype))

    past_feat = mlp_forward(params, "e_past", past)
    lp = posterior_params(params, past_feat, mlp_forward(params, "e_end", target))
    z = reparameterize(lp, eps)
    guess = decode_endpoint(params, z, past_feat)
    pred = _future_from_condition(params, past_feat, target if oracle else guess, batch.mask, rounds, w)

    kl = kl_divergence(lp)
    ael = ad.mul(ad.total(ad.square(ad.sub(guess, target))), 1.0 / alpha)
    atl = ad.mul(ad.total(ad.square(ad.sub(pred, future))), 1.0 / (alpha * batch.t_f))
    total = ad.add(ad.add(ad.mul(kl, lambda1), ad.mul(ael, lambda2)), atl)
    if not np.isfinite(total.data):
        raise TrainingDivergence(f"non-finite loss: kl={kl.data} ael={ael.data} atl={atl.data}")
    return Losses(kl, ael, atl, total)


def predict(
    batch: SceneBatch,
    params: ModelParams,
    cfg: SamplingConfig,
    rng: np.random.Generator,
    rounds: int = 1,
    waypoint: int | None = None,
    oracle: bool = False,
) -> PredictionSet:
    """K prior draws per agent; pooling runs jointly over the scene for each draw index."""
    dtype = params.dtype
    w = waypoint or batch.t_f
    alpha = len(batch)
    past_feat = mlp_forward(params, "e_past", Tensor(batch.past.astype(dtype)))
    pf = Tensor(np.broadcast_to(past_feat.data, (cfg.k,) + past_feat.shape))
    if oracle:
        cond = Tensor(np.broadcast_to(batch.future[:, w - 1].astype(dtype), (cfg.k, alpha, 2)))
    else:
        z = Tensor(sample_prior(cfg, rng, alpha).astype(dtype))
        cond = decode_endpoint(params, z, pf)
    flat = _future_from_condition(params, pf, cond, batch.mask, rounds, w)
    norm = flat.data.astype(np.float64).reshape(cfg.k, alpha, batch.t_f, 2)
    futures = to_world(norm, batch.offsets[None, :, None, :], batch.scale)
    if oracle:
        # the oracle hands over the true world-frame position
        futures[:, :, w - 1] = batch.raw_future[None, :, w - 1]
    return PredictionSet(futures[:, :, w - 1].copy(), futures, w)


# --------------------------------------------------------------------------- metrics


def ade(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Mean pointwise l2 distance over the future steps (last two axes are ``(t_f, 2)``)."""
    if np.shape(pred)[-2:] != np.shape(gt)[-2:]:
        raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(gt)}")
    return np.linalg.norm(np.asarray(pred) - gt, axis=-1).mean(axis=-1)


def fde(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if np.shape(pred)[-2:] != np.shape(gt)[-2:]:
        raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(gt)}")
    return np.linalg.norm(np.asarray(pred)[..., -1, :] - np.asarray(gt)[..., -1, :], axis=-1)


def best_of_k(futures: np.ndarray, gt: np.ndarray, waypoint: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-agent min-over-K ADE, FDE and way-point error for ``futures`` of shape (K, agents, t_f, 2)."""
    w = waypoint or gt.shape[-2]
    ades = ade(futures, gt[None]).min(axis=0)
    fdes = fde(futures, gt[None]).min(axis=0)
    wps = np.linalg.norm(futures[:, :, w - 1] - gt[None, :, w - 1], axis=-1).min(axis=0)
    return ades, fdes, wps


@dataclass
class EvalResult:
    ade: float
    fde: float
    waypoint_err: float
    trials: int
    per_trial: list[tuple[float, float, float]] = field(default_factory=list)


def evaluate_best_of_k(
    batches: Sequence[SceneBatch],
    params: ModelParams,
    cfg: SamplingConfig,
    trials: int = 100,
    base_seed: int = 0,
    rounds: int = 1,
    waypoint: int | None = None,
    oracle: bool = False,
) -> EvalResult:
    """Min over K per agent, mean over agents, mean over trials.  Trial t uses seed base_seed+t."""
    per_trial = []
    for t in range(trials):
        rng = np.random.default_rng(base_seed + t)
        a, f, wp = [], [], []
        for batch in batches:
            ps = predict(batch, params, cfg, rng, rounds=rounds, waypoint=waypoint, oracle=oracle)
            ba, bf, bw = best_of_k(ps.futures, batch.raw_future, ps.waypoint)
            a.append(ba)
            f.append(bf)
            wp.append(bw)
        per_trial.append(tuple(float(np.concatenate(v).mean()) for v in (a, f, wp)))
    arr = np.array(per_trial)
    return EvalResult(*map(float, arr.mean(axis=0)), trials=trials, per_trial=per_trial)


# --------------------------------------------------------------------------- training


def prepare_samples(cfg: TrainConfig) -> tuple[list, list, str]:
    """(train samples, test samples, dataset label) for a config."""
    if cfg.synthetic:
        train = window_samples(
            gen_synthetic(cfg.n_scenes, cfg.agents_per_scene, cfg.data_seed, cfg.jitter, length=cfg.t_p + cfg.t_f),
            cfg.t_p, cfg.t_f, stride=cfg.stride, scene_id="synthetic-train",
        )
        test = window_samples(
            gen_synthetic(cfg.n_test_scenes, cfg.agents_per_scene, cfg.data_seed + 1, cfg.jitter, length=cfg.t_p + cfg.t_f),
            cfg.t_p, cfg.t_f, stride=cfg.eval_stride, scene_id="synthetic-test",
        )
        return train, test, "synthetic"
    if not cfg.manifest:
        raise ConfigError("missing required key 'manifest' (or set synthetic=true)")
    scenes = load_manifest(cfg.manifest)
    if cfg.test_scene is None:
        raise ConfigError("missing required key 'test_scene' for leave-one-out evaluation")
    if cfg.test_scene not in scenes:
        raise ConfigError(f"test_scene {cfg.test_scene!r} not in manifest scenes {sorted(scenes)}")
    train, test = [], []
    for name, paths in scenes.items():
        if name == cfg.test_scene:
            test.extend(load_scene(paths, cfg.data_format, name, cfg.t_p, cfg.t_f, cfg.eval_stride))
        else:
            train.extend(load_scene(paths, cfg.data_format, name, cfg.t_p, cfg.t_f, cfg.stride))
    return train, test, cfg.test_scene


def model_meta(cfg: TrainConfig) -> dict[str, float]:
    return {
        "meta.pool_rounds": cfg.pool_rounds,
        "meta.waypoint": cfg.conditioning_index,
        "meta.oracle": float(cfg.oracle),
        "meta.t_p": cfg.t_p,
        "meta.t_f": cfg.t_f,
        "meta.scale": cfg.scale,
        "meta.t_dist": cfg.t_dist,
    }


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    step: int
    history: list[dict[str, float]]


def _checkpoint_arrays(params: ModelParams, adam: AdamState, step: int, cfg: TrainConfig) -> dict[str, np.ndarray]:
    arrays = dict(params.arrays())
    for name in params.tensors:
        if name in adam.m:
            arrays[f"adam.m.{name}"] = adam.m[name]
            arrays[f"adam.v.{name}"] = adam.v[name]
    scalars = {"adam.t": adam.t, "train.step": step, **model_meta(cfg)}
    arrays.update({k: np.array(v, dtype=np.float64) for k, v in scalars.items()})
    return arrays


def save_training_checkpoint(path, result: TrainResult, cfg: TrainConfig) -> None:
    ad.save_checkpoint(path, _checkpoint_arrays(result.params, result.adam, result.step, cfg))


def load_model(path, dtype=None) -> tuple[ModelParams, dict[str, float], dict[str, np.ndarray]]:
    arrays = ad.load_checkpoint(path)
    meta = {k.split(".", 1)[1]: float(v) for k, v in arrays.items() if k.startswith("meta.")}
    t_p, t_f = int(meta.get("t_p", 8)), int(meta.get("t_f", 12))
    if dtype is None:
        dtype = arrays["e_past.0.w"].dtype
    params = init_model(0, dtype=dtype, specs=architecture(t_p, t_f))
    params.load_arrays(arrays)
    return params, meta, arrays


def train(
    cfg: TrainConfig,
    batches: Sequence[SceneBatch] | None = None,
    resume: str | Path | None = None,
    callback: Callable[[int, dict[str, float], ModelParams], None] | None = None,
) -> TrainResult:
    """Adam over shuffled neighbour-preserving batches.

    Step s draws its latent noise from ``default_rng([seed, s])`` and epoch e shuffles
    with ``default_rng([seed, 1, e])``, so a resumed run replays the original exactly.
    """
    if batches is None:
        train_samples, _, _ = prepare_samples(cfg)
        batches = group_into_batches(train_samples, cfg.t_dist, cfg.batch, cfg.scale)
    if not batches:
        raise ConfigError("no training samples")
    params = init_model(cfg.seed, dtype=cfg.dtype, specs=architecture(cfg.t_p, cfg.t_f))
    adam = AdamState(lr=cfg.lr)
    step = 0
    if resume is not None:
        arrays = ad.load_checkpoint(resume)
        params.load_arrays(arrays)
        adam.t = int(arrays["adam.t"])
        for name in params.tensors:
            if f"adam.m.{name}" in arrays:
                adam.m[name] = arrays[f"adam.m.{name}"].astype(cfg.dtype)
                adam.v[name] = arrays[f"adam.v.{name}"].astype(cfg.dtype)
        step = int(arrays["train.step"])

    nb = len(batches)
    total_steps = cfg.steps or cfg.epochs * nb
    history: list[dict[str, float]] = []
    result = TrainResult(params, adam, step, history)
    order = None
    epoch = -1
    while step < total_steps:
        if step // nb != epoch:
            epoch = step // nb
            order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(nb)
        batch = batches[order[step % nb]]
        eps = np.random.default_rng([cfg.seed, step]).standard_normal((len(batch), LATENT_DIM))
        with Tape() as tape:
            losses = forward_train(
                batch, params, eps, cfg.lambda1, cfg.lambda2, cfg.pool_rounds, cfg.conditioning_index, cfg.oracle
            )
            grads = ad.backward(tape, losses.total)
        named = {t.name: g for t, g in grads.items()}
        try:
            ad.adam_step(params.tensors, named, adam)
        except ad.NonFiniteError as exc:
            raise TrainingDivergence(f"step {step}: {exc}") from exc
        step += 1
        result.step = step
        vals = losses.values()
        history.append(vals)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d  total=%.5f kl=%.4f ael=%.5f atl=%.5f", step, vals["total"], vals["kl"], vals["ael"], vals["atl"])
        if cfg.checkpoint and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_training_checkpoint(cfg.checkpoint, result, cfg)
        if callback is not None:
            callback(step, vals, params)
    if cfg.checkpoint:
        save_training_checkpoint(cfg.checkpoint, result, cfg)
    return result


def run_waypoint_ablation(
    cfg: TrainConfig,
    train_batches: Sequence[SceneBatch],
    test_batches: Sequence[SceneBatch],
    w_range: Sequence[int],
    oracle: bool,
    sampling: SamplingConfig,
    trials: int = 100,
) -> list[dict[str, float]]:
    """Train from scratch for each conditioning index and evaluate best-of-K on the test set."""
    rows = []
    for w in w_range:
        if not 1 <= w <= cfg.t_f:
            raise ConfigError(f"way-point index {w} outside 1..{cfg.t_f}")
        run_cfg = TrainConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "waypoint": w, "oracle": oracle, "checkpoint": None})
        res = train(run_cfg, train_batches)
        ev = evaluate_best_of_k(test_batches, res.params, sampling, trials, base_seed=cfg.seed, rounds=cfg.pool_rounds, waypoint=w, oracle=oracle)
        rows.append({"w": w, "ADE": ev.ade, "FDE": ev.fde, "waypoint_err": ev.waypoint_err})
    return rows
