"""The eight sub-networks (all ReLU MLPs with an affine output layer)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError, Tensor, linear, relu, uniform_init

# layer widths, input -> ... -> output
ARCHITECTURE: dict[str, tuple[int, ...]] = {
    "e_past": (16, 512, 256, 16),
    "e_end": (2, 8, 16, 16),
    "e_latent": (32, 8, 50, 32),
    "d_latent": (32, 1024, 512, 1024, 2),
    "phi": (32, 512, 64, 128),
    "theta": (32, 512, 64, 128),
    "g": (32, 512, 64, 32),
    "p_future": (32, 1024, 512, 256, 22),
}

LATENT_DIM = 16


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"MLP needs >= 2 positive widths, got {self.widths}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def n_params(self) -> int:
        return sum(n * m + m for n, m in zip(self.widths[:-1], self.widths[1:]))


@dataclass
class ModelParams:
    """All sub-network weights, keyed ``"<net>.<layer>.w"`` / ``"<net>.<layer>.b"``."""

    specs: dict[str, MlpSpec]
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def layers(self, net: str) -> list[tuple[Tensor, Tensor]]:
        n_layers = len(self.specs[net].widths) - 1
        return [(self.tensors[f"{net}.{i}.w"], self.tensors[f"{net}.{i}.b"]) for i in range(n_layers)]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            if k not in arrays:
                raise KeyError(f"checkpoint is missing parameter {k!r}")
            if arrays[k].shape != t.shape:
                raise DimensionError(f"parameter {k!r}: checkpoint shape {arrays[k].shape} vs model shape {t.shape}")
            t.data = np.array(arrays[k], dtype=t.dtype)

    def copy(self) -> "ModelParams":
        return ModelParams(
            dict(self.specs),
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()},
        )


def architecture(t_p: int = 8, t_f: int = 12, overrides: dict[str, tuple[int, ...]] | None = None) -> dict[str, MlpSpec]:
    widths = dict(ARCHITECTURE)
    widths["e_past"] = (2 * t_p,) + widths["e_past"][1:]
    widths["p_future"] = widths["p_future"][:-1] + (2 * (t_f - 1),)
    widths.update(overrides or {})
    return {name: MlpSpec(tuple(w)) for name, w in widths.items()}


def init_model(seed: int, dtype=np.float32, specs: dict[str, MlpSpec] | None = None) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; deterministic in ``seed``."""
    specs = specs or architecture()
    rng = np.random.default_rng(seed)
    tensors = {}
    for net, spec in specs.items():
        for i, (n, m) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            tensors[f"{net}.{i}.w"] = Tensor(uniform_init(rng, n, m, dtype), requires_grad=True, name=f"{net}.{i}.w")
            tensors[f"{net}.{i}.b"] = Tensor(np.zeros(m, dtype=dtype), requires_grad=True, name=f"{net}.{i}.b")
    return ModelParams(specs, tensors)


def mlp_forward(params: ModelParams, net: str, x: Tensor) -> Tensor:
    spec = params.specs[net]
    if x.shape[-1] != spec.n_in:
        raise DimensionError(f"{net}: expected input width {spec.n_in}, got shape {x.shape}")
    layers = params.layers(net)
    h = x
    for i, (W, b) in enumerate(layers):
        h = linear(h, W, b)
        if i < len(layers) - 1:
            h = relu(h)
    return h
