import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from mpdiff.diffusion import (
    NoiseSchedule, SamplerConfig, estimate_sigma_data, heun_sample, heun_solve, loss_at_t, per_item_loss,
    precondition, sigma_steps, training_objective, uncertainty_weighted,
)
from mpdiff.net import DenoiserConfig, DenoiserNet, smoke_config
from mpdiff.rng import Rng
from mpdiff.tensor import NonFiniteError, Tensor

from conftest import golden_section

SD = 0.5**0.5


class StubNet:
    """Stands in for the network: ``F = scale * x_in``, ``u = u_value``."""

    def __init__(self, scale=0.0, u_value=0.0, in_channels=2):
        self.scale, self.u_value = scale, u_value
        self.dtype = np.dtype(np.float64)
        self.cfg = DenoiserConfig(in_channels=in_channels)

    def __call__(self, x_in, s, v, sigma, audit=None):
        return x_in * self.scale, Tensor(np.full(x_in.shape[0], self.u_value))


class OracleNet(StubNet):
    """Chooses ``F`` so the preconditioned output equals a fixed target ``x0``."""

    def __init__(self, x0, schedule):
        super().__init__(in_channels=x0.shape[1])
        self.x0, self.schedule = x0, schedule

    def __call__(self, x_in, s, v, sigma, audit=None):
        t = sigma.reshape(-1, 1, 1)
        x_t = x_in.data / self.schedule.c_in(t)
        f = (self.x0 - self.schedule.c_skip(t) * x_t) / self.schedule.c_out(t)
        return Tensor(f), Tensor(np.zeros(x_in.shape[0]))


def batch(B=3, C=2, L=8, seed=0):
    rng = Rng(seed)
    return rng.normal((B, C, L)), rng.normal((B, 3)), rng.normal((B, 3, 4))


class TestSchedule:
    def test_hand_values(self):
        sch = NoiseSchedule()
        assert sch.c_skip(SD) == pytest.approx(0.5)
        assert sch.c_out(SD) == pytest.approx(0.5)
        assert sch.c_in(SD) == pytest.approx(1.0)

    def test_weight_hand_value(self):
        assert NoiseSchedule().weight(SD) == pytest.approx(4.0)

    def test_small_t_limit(self):
        sch = NoiseSchedule()
        assert sch.c_skip(1e-8) == pytest.approx(1.0)
        assert sch.c_out(1e-8) == pytest.approx(0.0, abs=1e-7)

    def test_identities(self):
        sch = NoiseSchedule()
        t = np.logspace(-4, 3, 1000)
        assert_allclose(sch.weight(t) * sch.c_out(t) ** 2, 1.0, rtol=1e-12)
        assert_allclose(sch.c_in(t) ** 2 * (SD**2 + t**2), 1.0, rtol=1e-12)

    def test_sigma_is_t(self):
        assert NoiseSchedule.sigma(0.37) == 0.37

    def test_invalid(self):
        with pytest.raises(ValueError):
            NoiseSchedule(sigma_min=5.0, sigma_max=1.0)
        with pytest.raises(ValueError):
            NoiseSchedule(sigma_data=0.0)

    def test_sample_t_distribution(self):
        sch = NoiseSchedule()
        t = sch.sample_t(Rng(0), 200_000)
        assert t.min() >= sch.sigma_min and t.max() <= 2 * sch.sigma_max
        assert np.mean(np.log(t)) == pytest.approx(-1.2, abs=0.01)
        assert np.std(np.log(t)) == pytest.approx(1.2, abs=0.01)


class TestPrecondition:
    def test_zero_network_is_skip_only(self):
        sch = NoiseSchedule()
        x, s, v = batch()
        d, _ = precondition(x, s, v, 0.8, StubNet(), sch)
        assert_allclose(d.data, sch.c_skip(0.8) * x)

    def test_rejects_nonpositive_t(self):
        x, s, v = batch()
        with pytest.raises(ValueError):
            precondition(x, s, v, 0.0, StubNet(), NoiseSchedule())


class TestLoss:
    def test_perfect_denoiser(self):
        x, s, v = batch()
        sch = NoiseSchedule()
        assert float(loss_at_t((x, s, v), 1.3, OracleNet(x, sch), sch, Rng(0)).data) == pytest.approx(0, abs=1e-20)

    def test_zero_denoiser(self):
        x, s, v = batch()
        sch = NoiseSchedule()

        class Zero(StubNet):
            def __call__(self, x_in, s, v, sigma, audit=None):
                t = sigma.reshape(-1, 1, 1)
                x_t = x_in.data / sch.c_in(t)
                return Tensor(-sch.c_skip(t) * x_t / sch.c_out(t)), Tensor(np.zeros(x_in.shape[0]))

        j = float(loss_at_t((x, s, v), 0.9, Zero(), sch, Rng(1)).data)
        assert j == pytest.approx(np.mean(x**2), rel=1e-10)

    def test_reproducible(self):
        cfg = smoke_config(in_channels=2, cond_dim=3, speaker_dim=3)
        net = DenoiserNet(cfg)
        net.out_gain.data[...] = 1.0
        b = batch()
        a = loss_at_t(b, 0.5, net, NoiseSchedule(), Rng(3)).data
        c = loss_at_t(b, 0.5, net, NoiseSchedule(), Rng(3)).data
        assert a.tobytes() == c.tobytes()

    def test_per_item_is_mean(self):
        d, x = Tensor(np.ones((2, 3, 4))), Tensor(np.zeros((2, 3, 4)))
        assert_array_equal(per_item_loss(d, x).data, [1.0, 1.0])


class TestObjective:
    def test_u_zero_gives_weighted_loss(self):
        x, s, v = batch()
        sch = NoiseSchedule()
        stats = {}
        obj = training_objective((x, s, v), StubNet(scale=0.3), sch, Rng(0), stats=stats)
        expected = np.mean(sch.weight(stats["t"]) * stats["loss"])
        assert float(obj.data) == pytest.approx(expected, rel=1e-12)

    def test_u_enters_as_designed(self):
        x, s, v = batch()
        sch = NoiseSchedule()
        stats = {}
        obj = training_objective((x, s, v), StubNet(scale=0.3, u_value=0.7), sch, Rng(0), stats=stats)
        expected = np.mean(sch.weight(stats["t"]) * math.exp(-0.7) * stats["loss"] + 0.7)
        assert float(obj.data) == pytest.approx(expected, rel=1e-12)

    def test_fixed_t(self):
        x, s, v = batch()
        stats = {}
        training_objective((x, s, v), StubNet(), NoiseSchedule(), Rng(0), t=0.4, stats=stats)
        assert_array_equal(stats["t"], 0.4)

    def test_nonfinite_u(self):
        x, s, v = batch()
        with pytest.raises(NonFiniteError):
            training_objective((x, s, v), StubNet(u_value=np.nan), NoiseSchedule(), Rng(0))

    def test_uncertainty_optimum(self):
        rng = np.random.default_rng(0)
        for lam, loss in zip(np.exp(rng.normal(0, 2, 20)), np.exp(rng.normal(0, 2, 20))):
            u = golden_section(lambda u: uncertainty_weighted(lam * loss, u), -30, 30)
            assert abs(u - math.log(lam * loss)) < 1e-6

    def test_gradient_small_net(self):
        cfg = smoke_config(in_channels=2, cond_dim=3, speaker_dim=3)
        net = DenoiserNet(cfg, dtype=np.float64)
        for h in net.film_heads():
            h.gain.data[...] = 2.0
        net.out_gain.data[...] = 1.0
        net.u_weight.data[...] = 0.3
        assert net.num_params() <= 1000
        b = batch()

        def objective():
            return training_objective(b, net, NoiseSchedule(), Rng(5))

        objective().backward()
        for name, p in net.parameters().items():
            g = p.grad.reshape(-1)
            flat = p.data.reshape(-1)
            for i in range(0, flat.size, max(1, flat.size // 3)):
                old = flat[i]
                flat[i] = old + 1e-6
                fp = float(objective().data)
                flat[i] = old - 1e-6
                fm = float(objective().data)
                flat[i] = old
                num = (fp - fm) / 2e-6
                assert abs(num - g[i]) <= 1e-2 * max(abs(num), abs(g[i])) + 1e-8, name


class TestSampler:
    def test_grid(self):
        sch = NoiseSchedule()
        g = sigma_steps(sch, 32)
        assert len(g) == 33 and g[-1] == 0.0
        assert g[0] == pytest.approx(sch.sigma_max) and g[-2] == pytest.approx(sch.sigma_min)
        assert np.all(np.diff(g) < 0)

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            sigma_steps(NoiseSchedule(), 0)
        with pytest.raises(ValueError):
            SamplerConfig(steps=0)

    def test_point_dataset_single_step(self):
        sch = NoiseSchedule()
        x0 = Rng(0).normal((2, 3, 5))
        out = heun_sample(np.zeros((2, 3)), np.zeros((2, 3, 4)), OracleNet(x0, sch), sch,
                          SamplerConfig(steps=1), Rng(1), 5)
        assert_allclose(out, x0, atol=1e-12)

    def test_deterministic(self):
        cfg = smoke_config(in_channels=2, cond_dim=3, speaker_dim=3)
        net = DenoiserNet(cfg)
        net.out_gain.data[...] = 1.0
        _, s, v = batch(B=2)
        a = heun_sample(s, v, net, NoiseSchedule(), SamplerConfig(8), Rng(4), 8)
        b = heun_sample(s, v, net, NoiseSchedule(), SamplerConfig(8), Rng(4), 8)
        assert a.tobytes() == b.tobytes()

    def test_no_noise_after_start(self):
        sch = NoiseSchedule()
        calls = []

        def denoise(x, sigma):
            calls.append(sigma)
            return x * SD**2 / (SD**2 + sigma**2)

        x0 = Rng(0).normal(10) * sch.sigma_max
        a = heun_solve(denoise, x0, sigma_steps(sch, 8))
        b = heun_solve(denoise, x0, sigma_steps(sch, 8))
        assert_array_equal(a, b)
        assert len(calls) == 2 * (2 * 8 - 1)


def gaussian_errors(steps, schedule=NoiseSchedule()):
    sd, s0 = schedule.sigma_data, schedule.sigma_max
    x0 = Rng(0).normal(1000) * s0
    exact = x0 * sd / math.sqrt(sd**2 + s0**2)
    out = heun_solve(lambda x, s: x * sd**2 / (sd**2 + s**2), x0, sigma_steps(schedule, steps))
    return [float(np.max(np.abs(out - exact) / np.abs(exact)))]


def test_gaussian_ode_second_order():
    errs = {m: gaussian_errors(m)[0] for m in (16, 32, 64, 128)}
    for m in (16, 32, 64):
        assert 3.2 <= errs[m] / errs[2 * m] <= 4.8
    assert errs[128] < 1e-3


def test_gaussian_ode_short_range_accurate():
    # on a narrow noise range the 32-step solve is well inside 1e-3
    sch = NoiseSchedule(sigma_data=1.0, sigma_max=1.0)
    assert gaussian_errors(32, sch)[0] < 1e-3


class TestSigmaData:
    def test_standardized(self):
        x = Rng(0).normal((50, 4, 100)) * SD
        assert estimate_sigma_data(x) == pytest.approx(SD, abs=0.02)

    def test_unit(self):
        assert estimate_sigma_data(Rng(1).normal((10, 3, 200))) == pytest.approx(1.0, abs=0.02)

    def test_zero_data(self):
        assert estimate_sigma_data(np.zeros((2, 3, 100))) == 0.0
        with pytest.raises(ValueError):
            NoiseSchedule(sigma_data=0.0)

    def test_empty_and_short(self):
        with pytest.raises(ValueError):
            estimate_sigma_data([])
        with pytest.raises(ValueError):
            estimate_sigma_data(np.ones((1, 2, 50)))
