import numpy as np
import pytest
from scipy import stats

from mpep.sampler import (PosteriorDraws, SamplerConfig, SamplerError, adaptation_windows,
                          check_gradient, initial_points, run_chains)


class Gaussian:
    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, float)
        self.prec = np.linalg.inv(np.asarray(cov, float))
        self.dim = self.mean.size

    def log_prob_and_grad(self, q):
        d = q - self.mean
        g = -self.prec @ d
        return 0.5 * float(d @ g), g


class NonCenteredFunnel:
    """v ~ N(0, 3), z ~ N(0, 1); x = z * exp(v / 2) is recovered afterwards."""
    dim = 10

    def log_prob_and_grad(self, q):
        v, z = q[0], q[1:]
        lp = -v * v / 18 - 0.5 * z @ z
        return lp, np.concatenate([[-v / 9], -z])


class HalfLine:
    """Log-normal on (0, inf) sampled through u = log(y); density includes the Jacobian."""
    dim = 1

    def log_prob_and_grad(self, q):
        u = q[0]
        return -0.5 * u * u, np.array([-u])


class Broken:
    dim = 3

    def log_prob_and_grad(self, q):
        return -np.inf, np.zeros(3)


def small(**kw):
    base = dict(chains=2, warmup=300, samples=500, seed=1)
    return SamplerConfig(**(base | kw))


def test_standard_normal_moments():
    d = run_chains(Gaussian([1.0, -2.0], np.eye(2)), small(samples=1000))
    x = d.flat()
    assert d.draws.shape == (2, 1000, 2)
    np.testing.assert_allclose(x.mean(0), [1.0, -2.0], atol=0.15)
    np.testing.assert_allclose(x.var(0), [1.0, 1.0], rtol=0.15)
    assert d.divergences.sum() == 0


def test_correlated_covariance_recovered():
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    d = run_chains(Gaussian([0.0, 0.0], cov), SamplerConfig(chains=4, warmup=500,
                                                            samples=1500, seed=3))
    est = np.cov(d.flat().T)
    np.testing.assert_allclose(est, cov, rtol=0.10, atol=0.03)


def test_funnel_few_divergences():
    d = run_chains(NonCenteredFunnel(), small(samples=1000))
    assert d.divergence_rate < 0.005
    assert not d.flagged


def test_ks_against_exact_normal():
    passes = 0
    for seed in range(20):
        d = run_chains(Gaussian([0.0], [[1.0]]), SamplerConfig(chains=2, warmup=200,
                                                               samples=250, thin=2,
                                                               seed=seed))
        passes += stats.kstest(d.flat()[:, 0], "norm").pvalue > 0.01
    assert passes >= 19


def test_constrained_parameter_stays_in_domain():
    d = run_chains(HalfLine(), small())
    y = np.exp(d.flat()[:, 0])
    assert np.all(y > 0)
    assert np.median(y) == pytest.approx(1.0, rel=0.15)


def test_deterministic_given_seed():
    t = Gaussian([0.0, 0.0, 0.0], np.diag([1.0, 4.0, 0.25]))
    a = run_chains(t, small(samples=100))
    b = run_chains(t, small(samples=100))
    np.testing.assert_array_equal(a.draws, b.draws)
    c = run_chains(t, small(samples=100, seed=2))
    assert not np.array_equal(a.draws, c.draws)


def test_chains_independent_of_chain_count():
    t = Gaussian([0.0, 0.0], np.eye(2))
    two = run_chains(t, small(samples=50))
    three = run_chains(t, small(samples=50, chains=3))
    np.testing.assert_array_equal(two.draws, three.draws[:2])


def test_adaptation_learns_scale():
    d = run_chains(Gaussian([0.0, 0.0], np.diag([100.0, 0.01])), small())
    ratio = d.inv_metric[:, 0] / d.inv_metric[:, 1]
    assert np.all((ratio > 1e3) & (ratio < 1e5))
    assert np.all(d.accept_stat.mean(axis=1) > 0.6)


def test_thinning():
    # every third of the 100 post-warmup iterations is kept
    d = run_chains(Gaussian([0.0], [[1.0]]), small(samples=100, thin=3))
    assert d.draws.shape == (2, 33, 1)
    assert d.thin == 3


def test_csv_round_trip(tmp_path):
    d = run_chains(Gaussian([0.0, 1.0], np.eye(2)), small(samples=40), names=["a", "b"])
    d.to_csv(tmp_path / "draws.csv")
    back = PosteriorDraws.from_csv(tmp_path / "draws.csv")
    np.testing.assert_array_equal(back.draws, d.draws)
    assert back.names == ["a", "b"]
    assert (tmp_path / "draws.csv").read_text().splitlines()[0] == "chain,iter,a,b"
    np.testing.assert_array_equal(back["b"], d["b"])


@pytest.mark.parametrize("kw", [dict(chains=1), dict(warmup=100), dict(samples=0),
                                dict(target_accept=1.0), dict(target_accept=0.0),
                                dict(thin=0)])
def test_config_validation(kw):
    with pytest.raises(SamplerError):
        SamplerConfig(**kw)


def test_init_failure_reported():
    with pytest.raises(SamplerError, match="100 attempts"):
        run_chains(Broken(), small())


def test_initial_points_within_jitter():
    pts = initial_points(Gaussian(np.zeros(5), np.eye(5)).log_prob_and_grad, 5,
                         SamplerConfig(chains=4))
    assert len(pts) == 4
    assert all(np.all(np.abs(p) <= 2.0) for p in pts)


def test_gradient_check_catches_wrong_gradient():
    def wrong(q):
        return -0.5 * float(q @ q), -2 * q
    with pytest.raises(SamplerError, match="gradient check"):
        check_gradient(wrong, np.ones(4))
    check_gradient(Gaussian(np.zeros(4), np.eye(4)).log_prob_and_grad, np.ones(4))


def test_adaptation_windows_default():
    w = adaptation_windows(1000)
    assert w[0][0] == 75 and w[-1][1] == 950
    lengths = [b - a for a, b in w]
    assert lengths[:3] == [25, 50, 100]
    assert all(w[i][1] == w[i + 1][0] for i in range(len(w) - 1))
