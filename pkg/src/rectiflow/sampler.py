"""Deterministic ODE sampling: noise in, images out.

Integrators advance dz/dt = v(z, t) on the uniform grid t_k = k/steps with
the classical euler / midpoint / rk4 stage rules. The state update keeps a
running mean of the stage increments and reconstructs
    z_k = z_0 + t_k * mean(increments so far),
which is algebraically identical to the textbook update but floating-point
exact for constant fields: equal increments leave the mean bit-identical,
and t_steps = steps/steps = 1.0 exactly. The rk4 combination is likewise
written in difference form so equal stages collapse to the first one
without rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .flowmodel import VelocityFieldNet, unit_to_pixels
from .lesiondata import encode_caption, write_ppm
from .rng import Rng, derive_seed
from .trainer import Checkpoint

INTEGRATORS = ("euler", "midpoint", "rk4")
DEFAULT_STEPS = 20

_TAG_SAMPLE_NOISE = 401

Field = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SampleSpec:
    prompt: str = "This is an image containing a benign lesion."
    steps: int = DEFAULT_STEPS
    integrator: str = "euler"
    seed: int = 0
    count: int = 1
    dump_trajectory: bool = False

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"integrator must be one of {INTEGRATORS}, "
                              f"got {self.integrator!r}")


def _increment(f: Field, z: np.ndarray, t: float, dt: float, method: str) -> np.ndarray:
    if method == "euler":
        return f(z, t)
    if method == "midpoint":
        k1 = f(z, t)
        return f(z + (dt * 0.5) * k1, t + dt * 0.5)
    # rk4 in difference form: exact collapse to k1 when all stages agree
    k1 = f(z, t)
    k2 = f(z + (dt * 0.5) * k1, t + dt * 0.5)
    k3 = f(z + (dt * 0.5) * k2, t + dt * 0.5)
    k4 = f(z + dt * k3, t + dt)
    return k1 + (2.0 * (k2 - k1) + 2.0 * (k3 - k1) + (k4 - k1)) / 6.0


def integrate_field(f: Field, z0: np.ndarray, steps: int, method: str) -> list[np.ndarray]:
    """All steps+1 states of the flow from t=0 to t=1."""
    if method not in INTEGRATORS:
        raise ConfigError(f"integrator must be one of {INTEGRATORS}, got {method!r}")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    z0 = np.asarray(z0, dtype=np.float64)
    dt = 1.0 / steps
    states = [z0.copy()]
    z = z0
    mean_inc = None
    for k in range(steps):
        w = _increment(f, z, k / steps, dt, method)
        if mean_inc is None:
            mean_inc = w.copy()
        else:
            mean_inc = mean_inc + (w - mean_inc) / (k + 1)
        z = z0 + ((k + 1) / steps) * mean_inc
        states.append(z)
    return states


def integrate(net: VelocityFieldNet, cond: np.ndarray, z0: np.ndarray,
              spec: SampleSpec) -> list[np.ndarray]:
    """Trajectories for a batch of initial states z0 (n, D), shared spec.

    `cond` may be one condition vector (applied to every sample) or a
    batch of n vectors.
    """
    spec.validate()
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim == 1:
        z0 = z0[None, :]
    if z0.shape[1] != net.d_data:
        raise ShapeError(f"initial state must have {net.d_data} entries per sample, "
                         f"got {z0.shape}")
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (z0.shape[0], cond.shape[0]))

    def field(z, t):
        with nm.no_grad():
            return net.forward_batch(z, np.full(z.shape[0], t), cond).data

    return integrate_field(field, z0, spec.steps, spec.integrator)


def sample_images(ckpt: Checkpoint, spec: SampleSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Generate `spec.count` images from a checkpoint.

    Returns (images, trajectory) where images are uint8 (res, res, 3)
    arrays and trajectory is the list of batched integrator states. Noise
    is drawn image-major from a stream derived from spec.seed, so the
    output is a pure function of (checkpoint, spec).
    """
    spec.validate()
    net = ckpt.to_net()
    resolution = ckpt.arch.get("resolution")
    if resolution is None:
        raise ConfigError("checkpoint carries no resolution; cannot map states to pixels")
    cond = encode_caption(spec.prompt)
    rng = Rng(derive_seed(spec.seed, _TAG_SAMPLE_NOISE))
    z0 = rng.normals(spec.count * net.d_data).reshape(spec.count, net.d_data)
    states = integrate(net, cond, z0, spec)
    images = [unit_to_pixels(states[-1][i], resolution) for i in range(spec.count)]
    return images, states


def generate(ckpt: Checkpoint, spec: SampleSpec, out_dir: Path) -> list[Path]:
    """Generate images and write them as PPM files; returns written paths.

    Files are named sample_<seed>_<index>.ppm; with dump_trajectory set,
    each sample also gets a CSV of (step, t, state norm).
    """
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    images, states = sample_images(ckpt, spec)
    paths = []
    for i, img in enumerate(images):
        path = out / f"sample_{spec.seed}_{i}.ppm"
        write_ppm(path, img)
        paths.append(path)
    if spec.dump_trajectory:
        for i in range(spec.count):
            traj_path = out / f"sample_{spec.seed}_{i}_trajectory.csv"
            with open(traj_path, "w", encoding="utf-8") as f:
                f.write("step,t,z_norm\n")
                for k, state in enumerate(states):
                    norm = math.sqrt(float((state[i] ** 2).sum()))
                    f.write(f"{k},{k / spec.steps!r},{norm!r}\n")
            paths.append(traj_path)
    return paths


# ---------------------------------------------------------------------------
# solver validation against an analytic flow


def exponential_growth_field(z: np.ndarray, t: float) -> np.ndarray:
    """dz/dt = z; from z0 = 1 the exact flow reaches e at t = 1."""
    return z


def convergence_probe(integrator: str, steps_list: list[int],
                      field: Field = exponential_growth_field,
                      z0: float = 1.0, exact: float = math.e) -> list[tuple[int, float]]:
    """Absolute endpoint error of the integrator per step count."""
    rows = []
    for steps in steps_list:
        final = integrate_field(field, np.array([z0]), steps, integrator)[-1]
        rows.append((steps, abs(float(final[0]) - exact)))
    return rows
