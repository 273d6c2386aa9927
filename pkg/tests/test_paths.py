import numpy as np
import pytest
from scipy import stats

from oracles import euler_chi_loop
from perpetuity.density import invariant_density
from perpetuity.errors import DomainExit, ModelError, NumericalRangeError
from perpetuity.model import cir_model, ou_model
from perpetuity.paths import (PathConfig, _zero_start_chi, discount_log, dump_path, load_dump,
                              reverse_from_forward, reverse_from_forward_batch, reversed_drift,
                              simulate_forward, simulate_forward_batch, simulate_reversed,
                              simulate_reversed_batch)


def _short(T=50.0, delta=1 / 24, **kw):
    return PathConfig(T, delta, **kw)


class TestConfig:
    def test_steps_and_times(self):
        c = PathConfig(1.0, 0.25)
        assert c.n_steps == 4
        np.testing.assert_array_equal(c.times, [0, 0.25, 0.5, 0.75, 1.0])

    @pytest.mark.parametrize("kw", [dict(horizon=0.0, step=0.1), dict(horizon=1.0, step=-1),
                                    dict(horizon=0.1, step=1.0),
                                    dict(horizon=1.0, step=0.1, scheme="milstein")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PathConfig(**kw)

    def test_with(self):
        assert PathConfig(1.0, 0.1).with_(seed=5).seed == 5


class TestForward:
    def test_euler_matches_loop(self):
        spec = ou_model(2.0, a=1.0, eta=[0.5], f={"linear": [1.0]}, signed_cashflow=True)
        cfg = PathConfig(5.0, 0.01, seed=3)
        p = simulate_forward(spec, cfg, z0=[0.7])
        z = 0.7
        R = 0.0
        X = [np.exp(-R) * z]
        for dw, db in zip(p.increments_W[:, 0], p.increments_B[:, 0]):
            R += (1.0 + 0.125) * 0.01 + 0.5 * db
            z = z - 2.0 * z * 0.01 + dw
            X.append(np.exp(-R) * z)
        assert p.Z[-1, 0] == pytest.approx(z, rel=1e-12)
        assert p.R[-1] == pytest.approx(R, rel=1e-12)
        assert p.X0_truncated == pytest.approx(np.trapezoid(X, dx=0.01), rel=1e-12)

    def test_sampled_start_needs_density(self, ou_z):
        with pytest.raises(ModelError):
            simulate_forward(ou_z, _short())

    def test_constant_rate_perpetuity(self):
        spec = ou_model(1.0, a=1.0, f=1.0)
        p = simulate_forward(spec, PathConfig(30.0, 0.01), z0=[0.0])
        # trapezoid integral of exp(-t) over [0, 30]
        h = 0.01
        expected = h * (0.5 + np.exp(-h) * (1 - np.exp(-h * 2999)) / (1 - np.exp(-h))
                        + 0.5 * np.exp(-30.0))
        assert p.X0_truncated == pytest.approx(expected, rel=1e-12)


class TestReversedDrift:
    def test_ou(self, ou_z, ou_z_density):
        z = np.linspace(-2, 2, 7)[:, None]
        np.testing.assert_allclose(reversed_drift(ou_z, ou_z_density)(z), -2.0 * z, rtol=1e-12)

    def test_one_dimensional_diffusions_are_reversible(self, cir, cir_density):
        z = np.linspace(0.2, 3, 7)[:, None]
        np.testing.assert_allclose(reversed_drift(cir, cir_density)(z), cir.m(z), atol=1e-10)

    def test_rotational_ou_reverses_the_rotation(self):
        gamma = np.array([[1.0, 1.0], [-1.0, 1.0]])
        spec = ou_model(gamma)
        dens = invariant_density(spec)
        z = np.array([[0.3, -0.4], [1.0, 2.0]])
        # time reversal of a stationary OU: drift -Sigma gamma' Sigma^{-1} z
        S = dens.cov
        expected = -(z @ (S @ gamma.T @ np.linalg.inv(S)).T)
        np.testing.assert_allclose(reversed_drift(spec, dens)(z), expected, rtol=1e-10)


class TestDiscount:
    def test_constant_theta_formula(self, rng):
        spec = ou_model(2.0, a=1.0, theta=[0.3], eta=[0.5])
        n, dt = 200, 0.05
        zeta = np.cumsum(rng.standard_normal((1, n + 1, 1)) * 0.2, axis=1)
        dB = rng.standard_normal((1, n, 1)) * np.sqrt(dt)
        ld = discount_log(spec, zeta, dB, dt)[0]
        z = zeta[0, :, 0]
        incr = ((0.3 * (-2.0 * z[:-1]) - 1.0 - 0.5 * (0.25 + 0.09)) * dt
                + 0.5 * dB[0, :, 0] + 0.3 * np.diff(z))
        np.testing.assert_allclose(ld, np.concatenate([[0.0], np.cumsum(incr)]), atol=1e-12)

    @pytest.mark.parametrize("scheme", ["euler", "milstein"])
    def test_delta_tracks_sde_to_first_order(self, scheme):
        """Integrate dDelta = Delta(-a dt + eta dB) with the same increments.

        The gap is measured against the path scale sup|Delta| = Delta_0 = 1.
        """
        spec = ou_model(2.0, a=1.0, eta=[0.5], f={"linear": [1.0]}, signed_cashflow=True)
        dens = invariant_density(spec)
        for delta in (1 / 24, 1 / 100):
            p = simulate_reversed(spec, dens, PathConfig(100.0, delta, seed=11), (1.0,))
            dB = p.increments_B[:, 0]
            fac = 1.0 - delta + 0.5 * dB
            if scheme == "milstein":
                fac = fac + 0.125 * (dB * dB - delta)
            sde = np.concatenate([[1.0], np.cumprod(fac)])
            gap = np.max(np.abs(sde - p.Delta)) / np.max(np.abs(p.Delta))
            assert gap <= 10 * delta, (delta, gap)

    def test_pointwise_relative_gap_grows_with_horizon(self):
        # noiseless: (1 - delta)^n against e^{-n delta}; log error is about -T delta / 2
        spec = ou_model(1.0, a=1.0)
        p = reverse_from_forward(spec, PathConfig(100.0, 1 / 24), (1.0,))
        euler = (1 - 1 / 24) ** np.arange(p.times.size)
        rel = np.abs(euler / p.Delta - 1.0)
        assert np.max(np.abs(euler - p.Delta)) <= 1 / 24
        n = p.times.size - 1
        assert rel[-1] == pytest.approx(-np.expm1(n * (np.log1p(-1 / 24) + 1 / 24)), rel=1e-9)
        assert rel[-1] > 0.8

    def test_forward_backward_identity(self):
        spec = ou_model(1.0, a=lambda z: 1.0 + 0.5 * np.tanh(z[:, 0]))
        cfg = PathConfig(20.0, 0.01, seed=4, stream_id=2)
        rev = reverse_from_forward(spec, cfg, (1.0,), z0=[0.0])
        fwd = simulate_forward_batch(spec, cfg.with_(horizon=40.0), [0.0], [2])[0]
        n = cfg.n_steps
        np.testing.assert_array_equal(rev.zeta, fwd.Z[::-1][:n + 1])
        R = fwd.R
        expected = R[2 * n - np.arange(n + 1)] - R[2 * n]
        rel = np.abs(np.exp(rev.log_Delta - expected) - 1.0)
        assert rel.max() <= 5 * cfg.step


class TestChi:
    def test_matches_direct_loop(self):
        spec = ou_model(2.0, a=1.0, eta=[0.5], f={"linear": [1.0]}, signed_cashflow=True)
        dens = invariant_density(spec)
        p = simulate_reversed(spec, dens, PathConfig(30.0, 0.01, seed=2), (0.5, 2.0))
        f = p.zeta[:, 0]
        for x in (0.5, 2.0):
            oracle = x * np.exp(p.log_Delta) + euler_chi_loop(p.log_Delta, f, 0.01)
            np.testing.assert_allclose(p.chi_for(x), oracle, rtol=1e-10, atol=1e-13)

    def test_blockwise_recursion_over_huge_range(self, rng):
        n, dt = 20000, 0.5
        ld = np.cumsum(np.concatenate([[0.0], -0.6 * dt + 0.3 * rng.standard_normal(n)]))[None]
        assert ld.min() < -5000
        f = 1.0 + rng.random((1, n + 1))
        Y = _zero_start_chi(ld, f, dt)
        r = np.exp(np.diff(ld[0]))
        y = np.zeros(n + 1)
        for i in range(n):
            y[i + 1] = r[i] * y[i] + 0.5 * dt * (f[0, i] * r[i] + f[0, i + 1])
        np.testing.assert_allclose(Y[0], y, rtol=1e-11)

    def test_linearity_in_x(self, ou_z, ou_z_density):
        p = simulate_reversed(ou_z, ou_z_density, _short(), (0.5, 5.0))
        cx, cy = p.chi_for(5.0), p.chi_for(0.5)
        scale = np.maximum.reduce([np.abs(cx), np.abs(cy), 4.5 * p.Delta])
        assert np.max(np.abs(cx - cy - 4.5 * p.Delta) / scale) <= 1e-12

    def test_degenerate_fixed_point(self):
        spec = ou_model(1.0, a=1.0, f=1.0)
        p = simulate_reversed(spec, invariant_density(spec), PathConfig(20.0, 1 / 24), (1.0,))
        assert np.max(np.abs(p.chi_for(1.0) - 1.0)) <= 10 / 24

    def test_growing_discount_raises(self):
        spec = ou_model(1.0, a=-1.0)
        with pytest.raises(NumericalRangeError):
            reverse_from_forward(spec, PathConfig(800.0, 0.5), (1.0,))


class TestStreams:
    def test_batch_equals_singles(self, ou_z, ou_z_density):
        cfg = _short(T=10.0, seed=9)
        batch = simulate_reversed_batch(ou_z, ou_z_density, cfg, (1.0,), [0, 1, 2])
        for sid, p in enumerate(batch):
            single = simulate_reversed(ou_z, ou_z_density, cfg.with_(stream_id=sid), (1.0,))
            np.testing.assert_array_equal(p.zeta, single.zeta)
            np.testing.assert_array_equal(p.chi_for(1.0), single.chi_for(1.0))

    def test_method_b_batch_equals_singles(self, ou_z):
        cfg = _short(T=10.0, seed=9)
        batch = reverse_from_forward_batch(ou_z, cfg, (1.0,), [4, 5])
        single = reverse_from_forward(ou_z, cfg.with_(stream_id=5), (1.0,))
        np.testing.assert_array_equal(batch[1].chi_for(1.0), single.chi_for(1.0))

    def test_streams_differ(self, ou_z, ou_z_density):
        a = simulate_reversed(ou_z, ou_z_density, _short(T=1.0), (1.0,))
        b = simulate_reversed(ou_z, ou_z_density, _short(T=1.0, stream_id=1), (1.0,))
        assert not np.array_equal(a.zeta, b.zeta)

    def test_autocorr_diagnostic(self, ou_z, ou_z_density):
        p = simulate_reversed(ou_z, ou_z_density, _short(T=500.0), (1.0,))
        ac = p.diagnostics["zeta_autocorr"]
        # OU with gamma=2 decorrelates like exp(-2 t)
        assert ac[24] == pytest.approx(np.exp(-2.0), abs=0.05)


class TestBoundary:
    def test_reflection_keeps_state_inside(self):
        spec = cir_model(1.0, 0.05, 1.5)
        p = reverse_from_forward(spec, PathConfig(50.0, 0.05), (1.0,), z0=[0.5])
        assert p.reflections > 0
        assert np.all(p.zeta > 0)

    def test_exit_without_reflection(self):
        spec = cir_model(1.0, 0.05, 1.5)
        with pytest.raises(DomainExit) as exc:
            reverse_from_forward(spec, PathConfig(50.0, 0.05, reflect=False), (1.0,), z0=[0.5])
        assert exc.value.time > 0


class TestStationarity:
    def test_slices_are_stationary(self, ou_z, ou_z_density):
        cfg = PathConfig(8.0, 1 / 24, seed=77)
        paths = simulate_reversed_batch(ou_z, ou_z_density, cfg, (1.0,), range(2000))
        n = cfg.n_steps
        for frac in (0.25, 0.5, 0.75, 1.0):
            vals = np.array([p.zeta[int(round(frac * n)), 0] for p in paths])
            assert stats.kstest(vals, stats.norm(scale=0.5).cdf).statistic <= 0.05


class TestDump:
    def test_roundtrip(self, tmp_path, ou_z, ou_z_density):
        p = simulate_reversed(ou_z, ou_z_density, _short(T=2.0), (1.0,))
        f = tmp_path / "p.bin"
        dump_path(p, f)
        back = load_dump(f)
        assert back["n_steps"] == 48 and back["d"] == 1 and back["k"] == 1
        np.testing.assert_array_equal(back["zeta"], p.zeta)
        np.testing.assert_array_equal(back["log_Delta"], p.log_Delta)
        np.testing.assert_array_equal(back["increments_W"], p.increments_W)
        assert f.read_bytes()[:4] == b"PRPT"

    def test_bad_magic(self, tmp_path):
        f = tmp_path / "x.bin"
        f.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(ValueError):
            load_dump(f)
