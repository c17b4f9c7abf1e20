import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from allfuse import bayes_opt as B
from allfuse.hyperparams import TUNED, HyperParams

from oracles import dense_gp_posterior, normal_quadrature_ei


def _random_theta(rng):
    return HyperParams(
        units=int(rng.choice([128, 256, 512, 1024])),
        optimizer=str(rng.choice(["SGD", "RMSprop"])),
        learning_rate=float(10 ** rng.uniform(-5, -1)),
        momentum=float(rng.uniform(0, 0.99)),
        dropout_rate=float(rng.uniform(0, 0.5)),
    )


def lr_testbed(theta):
    return 1.0 - (B.encode(theta)[B.LR_INDEX] - 0.3) ** 2


class TestEncode:
    def test_lr_endpoints(self):
        assert B.encode(HyperParams(learning_rate=1e-5))[B.LR_INDEX] == 0.0
        assert B.encode(HyperParams(learning_rate=1e-1))[B.LR_INDEX] == 1.0

    def test_units_endpoints(self):
        assert B.encode(HyperParams(units=128))[0] == 0.0
        assert B.encode(HyperParams(units=1024))[0] == 1.0

    def test_dimension_and_one_hot(self):
        v = B.encode(HyperParams(optimizer="RMSprop"))
        assert v.shape == (6,)
        assert v[1:3].tolist() == [0.0, 1.0]

    def test_injective_on_random_thetas(self):
        rng = np.random.default_rng(0)
        thetas = []
        while len(thetas) < 50:
            t = _random_theta(rng)
            if t not in thetas:
                thetas.append(t)
        vecs = [tuple(B.encode(t)) for t in thetas]
        for (i, a), (j, b) in itertools.combinations(enumerate(vecs), 2):
            assert a != b, (thetas[i], thetas[j])

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            HyperParams(learning_rate=0.5)
        with pytest.raises(ValueError):
            HyperParams(units=100)

    @pytest.mark.parametrize("arch", ["a", "b", "c"])
    def test_decode_inverts_encode(self, arch):
        t = TUNED[arch]
        back = B.decode(B.encode(t))
        assert back.units == t.units and back.optimizer == t.optimizer
        assert back.learning_rate == pytest.approx(t.learning_rate, rel=1e-12)
        assert back.momentum == pytest.approx(t.momentum, abs=1e-12)


def _kernel(rng, dim=6, noise=0.0):
    return B.KernelParams(variance=float(rng.uniform(0.5, 2.0)),
                          lengthscales=rng.uniform(0.2, 1.0, size=dim), noise=noise)


class TestGP:
    def test_single_point_interpolates(self):
        x = np.full((1, 6), 0.4)
        g = B.gp_fit((x, [0.73]), B.KernelParams())
        assert B.gp_predict(g, x[0])[0] == pytest.approx(0.73, abs=1e-9)

    def test_far_point_reverts_to_prior(self):
        rng = np.random.default_rng(1)
        X = rng.random((4, 6))
        y = rng.random(4)
        kp = B.KernelParams(variance=1.3, lengthscales=np.full(6, 0.1))
        g = B.gp_fit((X, y), kp)
        mu, var = B.gp_predict(g, np.full(6, 50.0))
        assert mu == pytest.approx(y.mean(), abs=1e-3)
        assert var == pytest.approx(1.3, abs=1e-3)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_solve(self, seed):
        rng = np.random.default_rng(seed)
        X, y, probes = rng.random((5, 6)), rng.random(5), rng.random((3, 6))
        kp = _kernel(rng, noise=1e-3)
        g = B.gp_fit((X, y), kp)
        mu, var = B.gp_predict_many(g, probes)
        mu_o, var_o = dense_gp_posterior(X, y, probes, kp.variance, kp.lengthscales, kp.noise, y.mean())
        np.testing.assert_allclose(mu, mu_o, atol=1e-8, rtol=0)
        np.testing.assert_allclose(var, var_o, atol=1e-8, rtol=0)

    def test_training_points_noiseless(self):
        rng = np.random.default_rng(3)
        X, y = rng.random((8, 6)), rng.random(8)
        g = B.gp_fit((X, y), _kernel(rng))
        for xi, yi in zip(X, y):
            mu, var = B.gp_predict(g, xi)
            assert abs(mu - yi) <= 1e-6
            assert var <= 1e-6

    def test_symmetric_midpoint(self):
        X = np.array([[0.2] * 6, [0.6] * 6])
        g = B.gp_fit((X, [0.1, 0.9]), B.KernelParams(lengthscales=np.full(6, 0.3)))
        assert B.gp_predict(g, np.full(6, 0.4))[0] == pytest.approx(0.5, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_variance_shrinks_with_data(self, seed):
        rng = np.random.default_rng(seed)
        kp = _kernel(rng, noise=1e-6)
        X, y = rng.random((6, 6)), rng.random(6)
        probes = rng.random((10, 6))
        prev = None
        for n in range(1, 7):
            _, var = B.gp_predict_many(B.gp_fit((X[:n], y[:n]), kp), probes)
            assert np.all(var >= 0)
            if prev is not None:
                assert np.all(var <= prev + 1e-9)
            prev = var

    def test_log_marginal_likelihood_matches_dense(self):
        rng = np.random.default_rng(9)
        X, y = rng.random((6, 6)), rng.random(6)
        kp = _kernel(rng, noise=1e-4)
        g = B.gp_fit((X, y), kp)
        K = B.se_kernel(X, X, kp) + kp.noise * np.eye(6)
        r = y - y.mean()
        ref = -0.5 * r @ np.linalg.solve(K, r) - 0.5 * np.linalg.slogdet(K)[1] - 3 * math.log(2 * math.pi)
        assert g.log_marginal_likelihood() == pytest.approx(ref, abs=1e-9)


class TestExpectedImprovement:
    def test_zero_sigma_no_gain(self):
        assert B.expected_improvement(0.4, 0.0, 0.5, 0.0) == 0.0
        assert B.expected_improvement(0.5, 0.0, 0.5, 0.0) == 0.0

    def test_zero_sigma_gain(self):
        assert B.expected_improvement(0.8, 0.0, 0.5, 0.1) == pytest.approx(0.2, abs=1e-15)

    def test_standard_normal_at_best(self):
        assert B.expected_improvement(0.0, 1.0, 0.0, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        mu, sigma, best = rng.normal(), rng.uniform(0.01, 2.0), rng.normal()
        xi = float(rng.choice([0.0, 0.01]))
        got = B.expected_improvement(mu, sigma ** 2, best, xi)
        assert got == pytest.approx(normal_quadrature_ei(mu, sigma, best, xi), abs=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        ei = B.expected_improvement(rng.normal(size=1000) * 5, rng.random(1000), 1.0)
        assert np.all(ei >= 0)


class TestProposal:
    def _single_obs_gp(self):
        theta = B.decode(np.full(6, 0.5))
        return B.gp_fit([B.Observation(theta, 0.6)], B.KernelParams(variance=0.1)), theta

    def test_moves_away_from_observed(self):
        g, theta = self._single_obs_gp()
        prop = B.propose_next(g, np.random.default_rng(0))
        assert not np.allclose(B.encode(prop), B.encode(theta))
        mu, var = B.gp_predict(g, B.encode(theta))
        assert B.expected_improvement(mu, var, 0.6) == pytest.approx(0.0, abs=1e-9)

    def test_deterministic(self):
        g, _ = self._single_obs_gp()
        assert B.propose_next(g, np.random.default_rng(5)) == B.propose_next(g, np.random.default_rng(5))

    def test_rescan_oracle(self):
        rng = np.random.default_rng(2)
        X = np.stack([B.project(rng.random(6)) for _ in range(6)])
        g = B.gp_fit((X, rng.random(6)), B.KernelParams(variance=0.2, noise=1e-6))
        prop = B.propose_next(g, np.random.default_rng(11))
        cands, _ = B.candidate_scan(g, np.random.default_rng(11))
        assert len(cands) == 2048
        mu, var = B.gp_predict_many(g, cands)
        all_ei = B.expected_improvement(mu, var, float(g.y.max()))
        mu_p, var_p = B.gp_predict(g, B.encode(prop))
        assert B.expected_improvement(mu_p, var_p, float(g.y.max())) >= all_ei.max() - 1e-15


class TestLoop:
    def test_finds_lr_optimum(self):
        grid = np.linspace(0, 1, 10_000)
        optimum = grid[np.argmax(1 - (grid - 0.3) ** 2)]
        tr = B.bo_loop(lr_testbed, k_init=5, n_max=25, seed=0)
        assert len(tr.iterations) == 25
        assert abs(B.encode(tr.best_theta)[B.LR_INDEX] - optimum) <= 0.05

    def test_constant_objective(self):
        tr = B.bo_loop(lambda t: 0.42, k_init=3, n_max=6, seed=1)
        assert tr.best_y == 0.42
        for rec in tr.iterations:
            HyperParams.from_dict(rec["theta"])

    def test_one_acquisition_step(self):
        tr = B.bo_loop(lr_testbed, k_init=5, n_max=6, seed=2)
        assert [r["ei"] is None for r in tr.iterations] == [True] * 5 + [False]

    def test_incumbent_monotone_and_deterministic(self):
        a = B.bo_loop(lr_testbed, k_init=4, n_max=10, seed=3)
        b = B.bo_loop(lr_testbed, k_init=4, n_max=10, seed=3)
        inc = a.incumbents()
        assert all(x <= y for x, y in zip(inc, inc[1:]))
        assert a.iterations == b.iterations
        assert a.best_y == max(r["y"] for r in a.iterations)

    def test_failure_recorded(self):
        calls = []

        def flaky(theta):
            calls.append(theta)
            if len(calls) == 2:
                raise RuntimeError("boom")
            return 0.5

        tr = B.bo_loop(flaky, k_init=3, n_max=5, seed=0)
        assert tr.iterations[1]["failed"] and tr.iterations[1]["y"] == 0.0
        assert len(tr.iterations) == 5

    def test_bad_budget(self):
        with pytest.raises(ValueError):
            B.bo_loop(lr_testbed, k_init=5, n_max=5)

    def test_jsonl_round_trip(self, tmp_path):
        tr = B.bo_loop(lr_testbed, k_init=3, n_max=5, seed=4)
        p = tmp_path / "trace.jsonl"
        tr.to_jsonl(p)
        lines = p.read_text().splitlines()
        assert len(lines) == 5
        assert set(json.loads(lines[-1])) >= {"iter", "theta", "y", "ei", "kernel"}
        back = B.BoTrace.from_jsonl(p)
        assert back.best_theta == tr.best_theta and back.best_y == tr.best_y
