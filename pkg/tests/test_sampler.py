"""Integrator exactness, convergence orders, and generation determinism."""

import math

import numpy as np
import pytest

from rectiflow import sampler as sp
from rectiflow.errors import CaptionParseError, ConfigError, ShapeError
from rectiflow.flowmodel import VelocityFieldNet
from rectiflow.lesiondata import read_ppm
from rectiflow.rng import Rng
from rectiflow.trainer import Checkpoint


def tiny_checkpoint(seed=1):
    net = VelocityFieldNet.create(16, Rng(seed), hidden=8)
    return Checkpoint.from_net(net, metadata={"seed": seed})


# ---------------------------------------------------------------------------
# exactness on trivial fields


@pytest.mark.parametrize("method", sp.INTEGRATORS)
@pytest.mark.parametrize("steps", [1, 5, 20])
def test_zero_field_returns_z0_exactly(method, steps):
    rng = Rng(10)
    for _ in range(20):
        z0 = rng.normals(6)
        final = sp.integrate_field(lambda z, t: np.zeros_like(z), z0, steps, method)[-1]
        assert np.array_equal(final, z0)


@pytest.mark.parametrize("method", sp.INTEGRATORS)
@pytest.mark.parametrize("steps", [1, 5, 20])
def test_constant_field_exact(method, steps):
    rng = Rng(11)
    for _ in range(20):
        z0 = rng.normals(6)
        k = rng.normals(6) * 10 ** (rng.uniform() * 4 - 2)
        final = sp.integrate_field(lambda z, t: k, z0, steps, method)[-1]
        assert np.array_equal(final, z0 + k)


def test_trajectory_length_and_start():
    z0 = Rng(3).normals(4)
    states = sp.integrate_field(lambda z, t: z, z0, 7, "euler")
    assert len(states) == 8
    assert np.array_equal(states[0], z0)


# ---------------------------------------------------------------------------
# analytic growth flow


def test_euler_20_steps_matches_compound_growth():
    final = sp.integrate_field(sp.exponential_growth_field, np.array([1.0]), 20, "euler")[-1]
    assert abs(float(final[0]) - (1 + 1 / 20) ** 20) < 1e-12


@pytest.mark.parametrize("method,lo,hi", [
    ("euler", 1.7, 2.3),
    ("midpoint", 3.4, 4.6),
    ("rk4", 12.0, 20.0),
])
def test_convergence_orders(method, lo, hi):
    rows = sp.convergence_probe(method, [10, 20, 40, 80])
    errs = dict(rows)
    for n in (10, 20, 40):
        ratio = errs[n] / errs[2 * n]
        assert lo <= ratio <= hi, f"{method}: halving ratio {ratio} at {n}->{2*n} steps"


def test_probe_rejects_unknown_integrator():
    with pytest.raises(ConfigError):
        sp.integrate_field(lambda z, t: z, np.ones(1), 4, "heun")


# ---------------------------------------------------------------------------
# spec validation


def test_spec_validation():
    with pytest.raises(ConfigError):
        sp.SampleSpec(steps=0).validate()
    with pytest.raises(ConfigError):
        sp.SampleSpec(count=0).validate()
    with pytest.raises(ConfigError):
        sp.SampleSpec(integrator="heun").validate()
    assert sp.SampleSpec().steps == 20


# ---------------------------------------------------------------------------
# network-driven integration and generation


def test_integrate_shape_check():
    net = VelocityFieldNet.create(16, Rng(1), hidden=8)
    with pytest.raises(ShapeError):
        sp.integrate(net, np.zeros(10), np.zeros((2, 99)), sp.SampleSpec())


def test_generate_writes_indexed_files(tmp_path):
    ckpt = tiny_checkpoint()
    spec = sp.SampleSpec(prompt="This is an image containing a malignant lesion.",
                         count=4, seed=7)
    paths = sp.generate(ckpt, spec, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == [f"sample_7_{i}.ppm" for i in range(4)]
    img = read_ppm(tmp_path / "sample_7_0.ppm")
    assert img.shape == (16, 16, 3)


def test_generate_deterministic(tmp_path):
    ckpt = tiny_checkpoint()
    spec = sp.SampleSpec(count=2, seed=3)
    sp.generate(ckpt, spec, tmp_path / "a")
    sp.generate(ckpt, spec, tmp_path / "b")
    for i in range(2):
        assert (tmp_path / "a" / f"sample_3_{i}.ppm").read_bytes() == \
               (tmp_path / "b" / f"sample_3_{i}.ppm").read_bytes()


def test_generate_trajectory_dump(tmp_path):
    ckpt = tiny_checkpoint()
    spec = sp.SampleSpec(count=1, seed=2, steps=5, dump_trajectory=True)
    sp.generate(ckpt, spec, tmp_path)
    lines = (tmp_path / "sample_2_0_trajectory.csv").read_text().splitlines()
    assert lines[0] == "step,t,z_norm"
    assert len(lines) == 7  # header + steps + 1 states


def test_generate_rejects_bad_prompt(tmp_path):
    with pytest.raises(CaptionParseError):
        sp.generate(tiny_checkpoint(), sp.SampleSpec(prompt="gibberish"), tmp_path)


def test_seed_changes_output(tmp_path):
    ckpt = tiny_checkpoint()
    a, _ = sp.sample_images(ckpt, sp.SampleSpec(count=1, seed=1))
    b, _ = sp.sample_images(ckpt, sp.SampleSpec(count=1, seed=2))
    assert not np.array_equal(a[0], b[0])
