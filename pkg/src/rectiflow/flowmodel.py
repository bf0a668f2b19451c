"""Conditional velocity-field network with low-rank adaptation.

The network maps (state z, time t, condition c) to a velocity of z's
shape: the input is [z | sinusoidal time embedding | condition vector],
followed by two tanh hidden layers and a linear output layer. Low-rank
adapters can be attached to any layer; the effective weight is then
W + (alpha/rank) * B @ A, with the base weights left untouched by
training whenever the layer is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .lesiondata import CONDITION_DIM
from .numerics import Tensor
from .rng import Rng

TIME_FREQUENCIES = 8
TIME_DIM = 2 * TIME_FREQUENCIES
DEFAULT_HIDDEN = {16: 256, 32: 512}


def time_embedding(t) -> np.ndarray:
    """Sinusoidal embedding: (sin(2^i pi t), cos(2^i pi t)) for i = 0..7.

    Accepts a scalar or a 1-d array; returns shape (..., 16) with the
    sin/cos pair of each frequency adjacent.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    freqs = (2.0 ** np.arange(TIME_FREQUENCIES)) * np.pi
    ang = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (TIME_DIM,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def interpolate(z0, z1, t: float):
    """Linear path point (1 - t) * z0 + t * z1 for t in [0, 1]."""
    if isinstance(z0, Tensor):
        z0 = z0.data
    if isinstance(z1, Tensor):
        z1 = z1.data
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ShapeError(f"interpolate: endpoint shapes differ: {z0.shape} vs {z1.shape}")
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"interpolation time must be in [0, 1], got {t}")
    return (1.0 - t) * z0 + t * z1


@dataclass
class LoRAAdapter:
    """Low-rank factor pair; the update applied to a frozen weight is
    (alpha / rank) * B @ A."""

    A: Tensor  # (rank, k)
    B: Tensor  # (d, rank)
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LinearLayer:
    """Affine map with optional attached low-rank adapter.

    `frozen` excludes W and bias from `trainable_parameters()`; the
    adapter factors stay trainable regardless.
    """

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.data.ndim != 2 or bias.data.ndim != 1 or weight.shape[0] != bias.shape[0]:
            raise ShapeError(f"linear layer needs (d, k) weight and (d,) bias, got "
                             f"{weight.shape} and {bias.shape}")
        self.weight = weight
        self.bias = bias
        self.adapter: LoRAAdapter | None = None
        self.frozen = False

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def attach_lora(self, rank: int, alpha: float, rng: Rng) -> LoRAAdapter:
        """Attach a fresh adapter: A ~ N(0, 1/rank), B = 0.

        The zero B makes the adapted layer initially identical to the base
        layer, so pre-fine-tune behavior is unchanged.
        """
        d, k = self.weight.shape
        if rank < 1 or rank > min(d, k):
            raise ConfigError(f"adapter rank must be in [1, {min(d, k)}] for a "
                              f"{d}x{k} layer, got {rank}")
        if alpha <= 0:
            raise ConfigError(f"adapter alpha must be positive, got {alpha}")
        a = nm.parameter(rng.normals(rank * k).reshape(rank, k) / np.sqrt(rank))
        b = nm.parameter(np.zeros((d, rank)))
        self.adapter = LoRAAdapter(A=a, B=b, rank=rank, alpha=float(alpha))
        return self.adapter

    def effective_weight(self) -> Tensor:
        """W when no adapter; W + (alpha/rank) * B @ A otherwise."""
        if self.adapter is None:
            return self.weight
        update = nm.scale(nm.matmul(self.adapter.B, self.adapter.A), self.adapter.scaling)
        return nm.add(self.weight, update)

    def forward(self, x: Tensor) -> Tensor:
        """x (n, k) -> x @ W^T + bias, broadcast over rows."""
        return nm.add_bias(nm.matmul(x, nm.transpose(self.effective_weight())), self.bias)

    def parameters(self) -> list[Tensor]:
        out = [self.weight, self.bias]
        if self.adapter is not None:
            out += [self.adapter.A, self.adapter.B]
        return out

    def trainable_parameters(self) -> list[Tensor]:
        out = [] if self.frozen else [self.weight, self.bias]
        if self.adapter is not None:
            out += [self.adapter.A, self.adapter.B]
        return out


class VelocityFieldNet:
    """v(z, t, c): two tanh hidden layers over [z | time | condition]."""

    def __init__(self, d_data: int, hidden: int, resolution: int | None = None):
        if d_data < 1 or hidden < 1:
            raise ConfigError(f"d_data and hidden must be positive, got {d_data}, {hidden}")
        self.d_data = d_data
        self.hidden = hidden
        self.resolution = resolution
        d_in = d_data + TIME_DIM + CONDITION_DIM
        self.layers = [
            LinearLayer(nm.parameter(np.zeros((hidden, d_in))), nm.parameter(np.zeros(hidden))),
            LinearLayer(nm.parameter(np.zeros((hidden, hidden))), nm.parameter(np.zeros(hidden))),
            LinearLayer(nm.parameter(np.zeros((d_data, hidden))), nm.parameter(np.zeros(d_data))),
        ]

    @classmethod
    def create(cls, resolution: int, rng: Rng, hidden: int | None = None) -> "VelocityFieldNet":
        """Fresh network for a square RGB resolution, weights ~ N(0, 1/fan_in)."""
        if hidden is None:
            if resolution not in DEFAULT_HIDDEN:
                raise ConfigError(f"no default hidden width for resolution {resolution}; "
                                  f"known: {sorted(DEFAULT_HIDDEN)}")
            hidden = DEFAULT_HIDDEN[resolution]
        net = cls(d_data=3 * resolution * resolution, hidden=hidden, resolution=resolution)
        net.init_weights(rng)
        return net

    def init_weights(self, rng: Rng) -> None:
        # layer order fixed; W drawn row-major, biases left at zero
        for layer in self.layers:
            d, k = layer.weight.shape
            layer.weight.data[...] = rng.normals(d * k).reshape(d, k) / np.sqrt(k)
            layer.bias.data[...] = 0.0

    def forward_batch(self, z: np.ndarray, t: np.ndarray, cond: np.ndarray) -> Tensor:
        """Velocities for a batch: z (n, D), t (n,), cond (n, 10)."""
        z = np.asarray(z, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.d_data:
            raise ShapeError(f"state must be (n, {self.d_data}), got {z.shape}")
        if t.shape != (z.shape[0],):
            raise ShapeError(f"time must be ({z.shape[0]},), got {t.shape}")
        if cond.shape != (z.shape[0], CONDITION_DIM):
            raise ShapeError(f"condition must be ({z.shape[0]}, {CONDITION_DIM}), got {cond.shape}")
        x = nm.concat_cols([Tensor(z), Tensor(time_embedding(t)), Tensor(cond)])
        h = nm.tanh(self.layers[0].forward(x))
        h = nm.tanh(self.layers[1].forward(h))
        return self.layers[2].forward(h)

    def forward(self, z: np.ndarray, t: float, cond: np.ndarray) -> Tensor:
        """Single-sample convenience wrapper; z (D,), cond (10,)."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.d_data,):
            raise ShapeError(f"state must be ({self.d_data},), got {z.shape}")
        out = self.forward_batch(z[None, :], np.array([t]), np.asarray(cond)[None, :])
        return nm.reshape(out, (self.d_data,))

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.trainable_parameters()]

    def base_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def adapter_parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            if layer.adapter is not None:
                out += [layer.adapter.A, layer.adapter.B]
        return out

    def base_parameter_count(self) -> int:
        return sum(p.size for p in self.base_parameters())

    def adapter_parameter_count(self) -> int:
        """Equals sum over adapted layers of rank * (d + k)."""
        return sum(p.size for p in self.adapter_parameters())

    def freeze_base(self) -> None:
        # dropping requires_grad lets the backward sweep skip the frozen
        # weights' vjp dgemms entirely
        for layer in self.layers:
            layer.frozen = True
            layer.weight.requires_grad = False
            layer.bias.requires_grad = False


def lora_parameter_count(layers: list[LinearLayer] | VelocityFieldNet, rank: int,
                         enabled: tuple[bool, ...]) -> int:
    """Closed-form trainable-parameter count: sum of rank * (d + k)."""
    if isinstance(layers, VelocityFieldNet):
        layers = layers.layers
    return sum(rank * (l.d_out + l.d_in) for l, on in zip(layers, enabled) if on)


def flow_matching_loss(net: VelocityFieldNet, z0: np.ndarray, z1: np.ndarray,
                       cond: np.ndarray, rng: Rng) -> Tensor:
    """Mean over the batch of |v(z_t, t, c) - (z1 - z0)|^2, t ~ U[0, 1).

    One time draw per sample, taken from `rng` in batch order; z_t is the
    linear path point. The squared norm sums over state entries; only the
    batch dimension is averaged.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if z0.ndim != 2 or z0.shape[0] == 0:
        raise ContractError(f"batch must be non-empty and 2-d, got shape {z0.shape}")
    if z0.shape != z1.shape:
        raise ShapeError(f"endpoint batches differ: {z0.shape} vs {z1.shape}")
    n = z0.shape[0]
    t = rng.uniforms(n)
    z_t = (1.0 - t)[:, None] * z0 + t[:, None] * z1
    v = net.forward_batch(z_t, t, cond)
    diff = nm.sub(v, Tensor(z1 - z0))
    return nm.scale(nm.sum_all(nm.mul(diff, diff)), 1.0 / n)


# ---------------------------------------------------------------------------
# pixel <-> model-space codec (identity up to the affine range map)


def pixels_to_unit(image: np.ndarray) -> np.ndarray:
    """uint8 image -> flat float vector in [-1, 1], row-major (row, col, channel)."""
    return np.asarray(image, dtype=np.float64).reshape(-1) / 127.5 - 1.0


def unit_to_pixels(z: np.ndarray, resolution: int) -> np.ndarray:
    """Inverse of pixels_to_unit with clamping to the valid range first."""
    z = np.clip(np.asarray(z, dtype=np.float64), -1.0, 1.0)
    flat = np.rint((z + 1.0) * 127.5).astype(np.uint8)
    return flat.reshape(resolution, resolution, 3)
