import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpep.config import BiasSpec, Priors, main_effects_config
from mpep.data import StrataDataset
from mpep.likelihood import (LikelihoodError, Model, NonFiniteError, ParameterVector,
                             extra_time_at_risk, grad_log_posterior, joint_log_posterior,
                             log_lik_count, rmst)
from mpep.synthetic import generate_synthetic, reference_truth, skeleton

mpmath.mp.dps = 40


def oracle_log_lik(x, mu, family, theta=None, pi=None):
    """High-precision scalar evaluation straight from the pmf definitions."""
    x, mu = mpmath.mpf(x), mpmath.mpf(mu)
    if family in ("poisson", "zip"):
        p = mpmath.exp(-mu) * mu ** x / mpmath.factorial(x)
    else:
        t = mpmath.mpf(theta)
        p = (mpmath.gamma(x + t) / (mpmath.gamma(t) * mpmath.factorial(x))
             * (t / (t + mu)) ** t * (mu / (t + mu)) ** x)
    if family in ("zip", "zinb"):
        pi = mpmath.mpf(pi)
        p = (pi + (1 - pi) * p) if x == 0 else (1 - pi) * p
    return float(mpmath.log(p))


CASES = []
for x in (0, 1, 3, 7, 25, 140):
    for mu in (0.05, 1.0, 3.0, 22.5, 150.0):
        CASES.append((x, mu, "poisson", None, None))
        CASES.append((x, mu, "nb", 0.7, None))
        CASES.append((x, mu, "nb", 40.0, None))
        CASES.append((x, mu, "zip", None, 0.2))
        CASES.append((x, mu, "zinb", 3.0, 0.05))


class TestCountFamilies:
    def test_table_size(self):
        assert len(CASES) >= 50

    @pytest.mark.parametrize("x, mu, family, theta, pi", CASES)
    def test_matches_scalar_oracle(self, x, mu, family, theta, pi):
        got = log_lik_count(x, mu, family, theta, pi)
        assert got == pytest.approx(oracle_log_lik(x, mu, family, theta, pi), abs=1e-10)

    def test_worked_values(self):
        assert log_lik_count(0, 2.0) == pytest.approx(-2.0, abs=1e-14)
        assert log_lik_count(3, 3.0) == pytest.approx(3 * math.log(3) - 3 - math.log(6),
                                                      abs=1e-14)
        assert log_lik_count(3, 3.0) == pytest.approx(-1.4960, abs=1e-4)
        assert log_lik_count(0, 1.0, "zip", pi=0.2) == pytest.approx(
            math.log(0.2 + 0.8 * math.exp(-1)), abs=1e-14)
        # ln(0.2 + 0.8 / e) = -0.70461
        assert log_lik_count(0, 1.0, "zip", pi=0.2) == pytest.approx(-0.70461, abs=1e-5)

    def test_zip_without_inflation_is_poisson(self):
        x = np.arange(0, 60)
        for mu in (0.01, 1.7, 30.0):
            np.testing.assert_array_equal(log_lik_count(x, mu, "zip", pi=0.0),
                                          log_lik_count(x, mu, "poisson"))

    def test_nb_limit(self):
        # the gap is about ((x - mu)^2 - x) / (2 theta): below 1e-6 while |x - mu| <= 10
        for mu in (0.3, 1.0, 4.0, 12.0, 40.0):
            x = np.arange(max(0, math.ceil(mu - 10)), int(mu + 10) + 1)
            np.testing.assert_allclose(log_lik_count(x, mu, "nb", theta=1e8),
                                       log_lik_count(x, mu, "poisson"), atol=1e-6, rtol=0)

    @pytest.mark.parametrize("x, mu", [(79, 40.0), (0, 40.0), (60, 0.3)])
    def test_nb_far_tail_exact(self, x, mu):
        got = log_lik_count(x, mu, "nb", theta=1e8)
        assert got == pytest.approx(oracle_log_lik(x, mu, "nb", 1e8), abs=1e-10)
        gap = got - log_lik_count(x, mu, "poisson")
        assert gap == pytest.approx(((x - mu) ** 2 - x) / 2e8, rel=1e-3)

    @pytest.mark.parametrize("family, theta, pi", [("poisson", None, None),
                                                   ("nb", 0.8, None), ("nb", 25.0, None),
                                                   ("zip", None, 0.3), ("zinb", 2.0, 0.1)])
    @pytest.mark.parametrize("mu", [0.2, 5.0, 20.0])
    def test_normalised(self, family, theta, pi, mu):
        x = np.arange(0, 2000)
        total = np.exp(log_lik_count(x, mu, family, theta, pi)).sum()
        assert total == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("args", [(-1, 1.0), (1.5, 1.0), (1, 0.0), (1, -2.0)])
    def test_domain(self, args):
        with pytest.raises(LikelihoodError):
            log_lik_count(*args)

    def test_family_parameters_required(self):
        with pytest.raises(LikelihoodError):
            log_lik_count(1, 1.0, "nb")
        with pytest.raises(LikelihoodError):
            log_lik_count(1, 1.0, "zip", pi=1.0)
        with pytest.raises(LikelihoodError):
            log_lik_count(1, 1.0, "gamma")


class TestSurvivalAlgebra:
    def test_rmst_values(self):
        assert rmst(0.0) == 1.0
        assert rmst(1.0) == pytest.approx(0.6321206, abs=1e-6)
        assert rmst(0.05) == pytest.approx(0.9754115, abs=1e-6)

    def test_rmst_continuous_at_switch(self):
        s = 1e-6
        below = rmst(np.nextafter(s, 0))
        at = rmst(s)
        assert abs(below - at) < 1e-12
        exact = float(-mpmath.expm1(-mpmath.mpf(s)) / s)
        assert abs(at - exact) < 1e-15

    def test_rmst_monotone(self):
        lam = np.concatenate([np.linspace(0, 2e-6, 201), np.geomspace(1e-6, 50, 500)])
        lam.sort()
        r = rmst(lam)
        assert np.all(np.diff(r) <= 0)

    def test_rmst_negative(self):
        with pytest.raises(LikelihoodError):
            rmst(-0.1)

    def test_extra_time(self):
        assert extra_time_at_risk(100, 5, 0.05) == pytest.approx(97.664, abs=1e-3)
        assert extra_time_at_risk(100, 5, 0.05) == pytest.approx(
            5 + 95 * (1 - math.exp(-0.05)) / 0.05, abs=1e-12)
        assert extra_time_at_risk(40, 0, 0.0) == 40
        assert extra_time_at_risk(7, 7, 0.3) == 7

    def test_extra_time_floor(self):
        assert extra_time_at_risk(3, 5, 0.2) == 5


def toy_dataset(**kw):
    one = {f: ("a",) for f in ("sex", "age_group", "year", "region")}
    v = dict(n_c=120, P=20000, t_on=50.0, t_off=60.0, t_o=60.0, x_o=3, t_d=1.25,
             x_c_on=[[2]], x_c_off=[[5]], x_e=[[4]])
    v.update(kw)
    arrays = {k: np.atleast_1d(np.asarray(val, dtype=float)) for k, val in v.items()}
    return StrataDataset(levels=one, events=("deaths",), deaths_event="deaths", **arrays)


def norm_logpdf(x, m, s):
    return -0.5 * ((x - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)


def pois(x, mu):
    return x * math.log(mu) - mu - math.lgamma(x + 1)


class TestJointPosterior:
    def test_one_cell_by_hand(self):
        ds = toy_dataset()
        cfg = main_effects_config(["deaths"])
        model = Model(cfg, ds)
        assert model.names == ["deaths.intercept", "deaths.treatment[on]",
                               "exit.intercept", "prevalence.intercept",
                               "logit_prev_c[a,a,a,a]"]
        b0, b1, c0, g0, z = -3.1, -0.4, -2.7, -5.2, -5.0
        lp, ll = joint_log_posterior(np.array([b0, b1, c0, g0, z]), ds, cfg)

        lam_off, lam_on, lam_o = math.exp(b0), math.exp(b0 + b1), math.exp(c0)
        pe = 1 / (1 + math.exp(-g0))
        pc = 1 / (1 + math.exp(-z))
        n_e = pe * 20000
        t_e = 1.25 + (n_e - 1.25) * (1 - math.exp(-lam_o)) / lam_o
        terms = [pois(2, lam_on * 50), pois(5, lam_off * 60), pois(4, lam_off * t_e),
                 pois(3, lam_o * 60),
                 (math.lgamma(20001) - math.lgamma(121) - math.lgamma(20000 - 120 + 1)
                  + 120 * math.log(pc) + (20000 - 120) * math.log(1 - pc))]
        priors = sum(norm_logpdf(v, 0, 10) for v in (b0, b1, c0, g0, z))
        assert lp == pytest.approx(sum(terms) + priors, abs=1e-10)
        np.testing.assert_allclose(np.sort(ll), np.sort(terms), atol=1e-10)

    def test_zero_counts_give_minus_total_mean(self, rng):
        ds = skeleton((2, 2, 2, 1), ["deaths", "hosp"])
        ds = StrataDataset(levels=ds.levels, events=ds.events, deaths_event=None,
                           n_c=np.full(8, 100.0), P=ds.P, t_on=np.full(8, 30.0),
                           t_off=np.full(8, 40.0), t_o=np.full(8, 40.0), x_o=ds.x_o,
                           t_d=ds.t_d, x_c_on=ds.x_c_on, x_c_off=ds.x_c_off, x_e=ds.x_e)
        model = Model(main_effects_config(["deaths", "hosp"]), ds)
        q = rng.normal(scale=0.5, size=model.dim)
        ll, mu, _ = model.pointwise(q)
        counts = model.point_submodel != "cohort"
        np.testing.assert_allclose(ll[counts], -mu[counts], rtol=1e-13)

    def test_pmatch_one_is_identity(self, desk_config, desk_data, rng):
        base = Model(desk_config, desk_data)
        cfg = main_effects_config(list(desk_config.events), pmatch=True,
                                  priors=Priors(logit_pmatch=(3.0, 1.0)))
        adj = Model(cfg, desk_data)
        pm = adj.design.pmatch_q
        for _ in range(20):
            q = rng.normal(scale=0.3, size=base.dim) + np.where(
                np.arange(base.dim) == 0, -3.0, 0.0)
            qa = np.insert(q, pm, np.inf)  # pmatch exactly 1
            ll_b = base.pointwise(q)[0]
            ll_a = adj.pointwise(qa)[0]
            np.testing.assert_allclose(ll_a, ll_b, rtol=0, atol=1e-12)

    def test_zero_bias_is_identity(self, desk_config, desk_data, rng):
        base = Model(desk_config, desk_data)
        cfg = desk_config.with_bias(BiasSpec("hospitalisations"))
        biased = Model(cfg, desk_data)
        q = rng.normal(scale=0.3, size=base.dim)
        full = np.zeros(biased.dim)
        names = biased.names
        for i, n in enumerate(base.names):
            full[names.index(n)] = q[i]
        np.testing.assert_array_equal(biased.pointwise(full)[0], base.pointwise(q)[0])

    def test_row_order_invariance(self, desk_config, desk_data, rng):
        lines = desk_data.to_csv().strip().split("\n")
        perm = rng.permutation(len(lines) - 1)
        from mpep.data import parse_dataset
        shuffled = parse_dataset("\n".join([lines[0]] + [lines[1:][i] for i in perm]))
        q = rng.normal(scale=0.3, size=Model(desk_config, desk_data).dim)
        assert (joint_log_posterior(q, shuffled, desk_config)[0]
                == joint_log_posterior(q, desk_data, desk_config)[0])

    def test_non_finite_reports_term(self, desk_config, desk_data):
        model = Model(desk_config, desk_data)
        q = np.zeros(model.dim)
        q[model.design.index["deaths.beta"].start] = 800.0  # exp overflows
        with pytest.raises(NonFiniteError, match="deaths"):
            model.evaluate(q)
        assert model.log_prob(q) == -np.inf
        lp, g = model.log_prob_and_grad(q)
        assert lp == -np.inf and not g.any()

    def test_floor_counter(self, desk_config, desk_data, desk_truth):
        model = Model(desk_config, desk_data)
        q = desk_truth.values.copy()
        assert model.stats(q) == (0, 0)
        q[model.design.index["prevalence.beta"].start] = -40.0
        n_floor, _ = model.stats(q)
        assert n_floor == int((desk_data.t_d > 0).sum())
        q = desk_truth.values.copy()
        q[model.design.prev_c.slice] = 10.0
        q[model.design.index["prevalence.beta"].start] = 10.0
        assert model.stats(q)[1] == desk_data.n_strata


def fd_check(model, q, h=1e-5):
    _, g = model.log_prob_and_grad(q)
    fd = np.empty_like(q)
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = h
        fd[i] = (model.log_prob(q + e) - model.log_prob(q - e)) / (2 * h)
    big = np.abs(g) > 1e-3
    return np.max(np.abs(g - fd)[big] / np.abs(g[big]))


class TestGradient:
    @pytest.mark.parametrize("family", ["poisson", "nb", "zip", "zinb"])
    def test_families_with_extensions(self, family, rng):
        cfg = main_effects_config(["deaths", "hosp"], family=family, pmatch=True,
                                  priors=Priors(logit_pmatch=(2.0, 1.0)),
                                  bias=(BiasSpec("hosp", {"year": ("1",)}),))
        cfg = cfg.with_term("deaths", "year:treatment", True).with_term(
            "prevalence", "sex:region", True)
        truth = reference_truth(cfg, (2, 2, 2, 2))
        ds = generate_synthetic(truth, cfg, (2, 2, 2, 2), seed=4)
        model = Model(cfg, ds)
        for _ in range(3):
            q = truth.values + rng.normal(scale=0.2, size=model.dim)
            assert fd_check(model, q) < 1e-5

    def test_bias_coefficient_scalar_oracle(self):
        ds = toy_dataset()
        cfg = main_effects_config(["deaths"], bias=(BiasSpec("deaths"),))
        model = Model(cfg, ds)
        q = np.array([-3.1, -0.4, -2.7, -5.2, 0.35, -5.0])
        assert model.names[4].startswith("bias.deaths")
        lat = model.latent(q)
        mu0 = float(lat.lambda_c["deaths"][0, 0] * lat.t_e[0])  # mean before e^b
        b = q[4]
        expected = 4 - mu0 * math.exp(b) - b / 100.0  # likelihood + N(0, 10^2) prior
        assert grad_log_posterior(q, ds, cfg)[4] == pytest.approx(expected, rel=1e-12)

    def test_prior_only_parameter(self):
        ds = skeleton((1, 1, 2, 1), ["deaths"])
        cfg = main_effects_config(["deaths"]).with_term("deaths", "year:treatment", True)
        model = Model(cfg, ds)
        q = np.full(model.dim, 0.3)
        # with a negligible scale the raw values only feel their prior
        q[model.design.index["deaths.re[year:treatment].log_scale"].start] = -700.0
        g = model.log_prob_and_grad(q)[1]
        raw = model.design.index["deaths.re[year:treatment].raw"].start
        assert g[raw] == pytest.approx(-0.3, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(x=st.integers(0, 300), mu=st.floats(1e-3, 500), theta=st.floats(0.05, 1e4),
       pi=st.floats(0.0, 0.95))
def test_zinb_never_exceeds_probability_one(x, mu, theta, pi):
    assert log_lik_count(x, mu, "zinb", theta, pi) <= 1e-12
