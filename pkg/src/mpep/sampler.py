"""No-U-turn Hamiltonian Monte Carlo with warmup adaptation.

Transitions follow the multinomial NUTS variant: trajectories double in
a random direction until the generalised no-U-turn criterion fails
(checked across the whole trajectory and across the seams between
sub-trees), with the new state drawn by biased progressive sampling.
Warmup tunes the step size by dual averaging and a diagonal inverse
metric from windowed variance estimates (fast / slow / fast phases).
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0
DIVERGENCE_FLAG_RATE = 0.01


class SamplerError(RuntimeError):
    pass


class Target(Protocol):
    dim: int

    def log_prob_and_grad(self, q: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    target_accept: float = 0.8
    max_depth: int = 10
    seed: int = 0
    init_buffer: int = 75
    term_buffer: int = 50
    base_window: int = 25
    jitter: float = 2.0
    thin: int = 1
    n_jobs: Optional[int] = None

    def __post_init__(self):
        if self.chains < 2:
            raise SamplerError("at least 2 chains are needed for R-hat")
        if self.warmup < 150:
            raise SamplerError("warmup must be at least 150 iterations")
        if self.samples < 1 or self.thin < 1:
            raise SamplerError("samples and thin must be positive")
        if not 0 < self.target_accept < 1:
            raise SamplerError("target_accept must lie in (0, 1)")


@dataclass
class PosteriorDraws:
    """Post-warmup draws on the unconstrained scale.

    ``draws`` has shape (chains, iterations, parameters).
    """

    draws: np.ndarray
    names: list[str]
    divergences: np.ndarray
    step_size: np.ndarray
    inv_metric: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    thin: int = 1
    warmup: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iter(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    def flat(self) -> np.ndarray:
        """Draws pooled over chains, shape (chains * iterations, parameters)."""
        return self.draws.reshape(-1, self.dim)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    @property
    def divergence_rate(self) -> float:
        return float(self.divergences.sum()) / (self.n_chains * self.n_iter * self.thin)

    @property
    def flagged(self) -> bool:
        return self.divergence_rate > DIVERGENCE_FLAG_RATE

    def to_csv(self, path) -> None:
        C, N, D = self.draws.shape
        chain = np.repeat(np.arange(C), N)
        it = np.tile(np.arange(N) * self.thin, C)
        header = "chain,iter," + ",".join(self.names)
        body = np.column_stack([chain, it, self.flat()])
        fmt = ["%d", "%d"] + ["%.17g"] * D
        np.savetxt(path, body, delimiter=",", header=header, comments="", fmt=fmt)

    @classmethod
    def from_csv(cls, path) -> "PosteriorDraws":
        with open(path) as fh:
            names = fh.readline().strip().split(",")[2:]
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        chains = data[:, 0].astype(int)
        C = chains.max() + 1
        draws = data[:, 2:].reshape(C, -1, len(names))
        z = np.zeros(C)
        thin = int(data[1, 1] - data[0, 1]) if draws.shape[1] > 1 else 1
        return cls(draws=draws, names=names, divergences=z.astype(int), step_size=z,
                   inv_metric=np.ones((C, len(names))), accept_stat=np.zeros(draws.shape[:2]),
                   tree_depth=np.zeros(draws.shape[:2], int),
                   n_leapfrog=np.zeros(draws.shape[:2], int), thin=max(thin, 1))


class _DualAveraging:
    gamma, t0, kappa = 0.05, 10.0, 0.75

    def __init__(self, delta):
        self.delta = delta

    def restart(self, eps):
        self.mu = math.log(10.0 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept):
        self.counter += 1
        accept = min(1.0, accept)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self):
        return math.exp(self.x_bar)


def adaptation_windows(warmup, init_buffer=75, term_buffer=50, base_window=25):
    """Slow-phase windows as (start, end) iteration pairs, end exclusive."""
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    last = warmup - term_buffer
    out = []
    start, size = init_buffer, base_window
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        out.append((start, end))
        start, size = end, 2 * size
    return out


class _Welford:
    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def regularized_variance(self):
        n = self.n
        var = self.m2 / max(n - 1, 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


class _Chain:
    """One NUTS chain; holds the current point and adaptation state."""

    def __init__(self, f: Callable, q, rng: np.random.Generator, max_depth: int):
        self.f = f
        self.rng = rng
        self.max_depth = max_depth
        self.q = np.array(q, dtype=float)
        self.lp, self.g = f(self.q)
        if not np.isfinite(self.lp):
            raise SamplerError("initial point has non-finite log density")
        self.inv_m = np.ones_like(self.q)
        self.eps = 1.0

    def _momentum(self):
        return self.rng.standard_normal(self.q.shape[0]) / np.sqrt(self.inv_m)

    def _h(self, lp, p):
        return -lp + 0.5 * float(np.dot(p * self.inv_m, p))

    def _leapfrog(self, q, p, g, eps):
        p = p + (0.5 * eps) * g
        q = q + eps * (self.inv_m * p)
        lp, g = self.f(q)
        p = p + (0.5 * eps) * g
        return q, p, g, lp

    def init_stepsize(self):
        q0, lp0, g0 = self.q, self.lp, self.g
        eps = self.eps

        def delta_h(eps):
            p = self._momentum()
            h0 = self._h(lp0, p)
            _, p1, _, lp1 = self._leapfrog(q0, p, g0, eps)
            h = self._h(lp1, p1)
            return h0 - h if np.isfinite(h) else -np.inf

        direction = 1 if delta_h(eps) > math.log(0.8) else -1
        for _ in range(200):
            dh = delta_h(eps)
            if direction == 1 and not dh > math.log(0.8):
                break
            if direction == -1 and not dh < math.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps * 0.5
            if eps > 1e7:
                raise SamplerError("step size diverged upwards: posterior may be improper")
            if eps == 0:
                raise SamplerError("step size collapsed to zero")
        self.eps = eps

    # trajectory building ------------------------------------------------

    def _build(self, depth, z, sign, h0, acc):
        """Extend ``z`` by 2**depth leapfrog steps.

        Returns (valid, z_end, proposal, log_sum_w, rho, p_sharp_beg,
        p_sharp_end, p_beg, p_end).
        """
        if depth == 0:
            q, p, g, lp = self._leapfrog(z[0], z[1], z[2], sign * self.eps)
            acc["n"] += 1
            h = self._h(lp, p) if np.isfinite(lp) else np.inf
            if not np.isfinite(h):
                h = np.inf
            if h - h0 > MAX_DELTA_H:
                acc["divergent"] = True
            dh = h0 - h
            acc["metro"] += 1.0 if dh > 0 else math.exp(dh)
            zn = (q, p, g, lp)
            ps = self.inv_m * p
            return (not acc["divergent"], zn, zn, dh, p.copy(), ps, ps, p, p)

        (ok, z, prop, lw_init, rho_init, ps_beg, ps_init_end, p_beg, p_init_end
         ) = self._build(depth - 1, z, sign, h0, acc)
        if not ok:
            return (False,) + (None,) * 8
        (ok, z, prop_final, lw_final, rho_final, ps_final_beg, ps_end, p_final_beg, p_end
         ) = self._build(depth - 1, z, sign, h0, acc)
        if not ok:
            return (False,) + (None,) * 8

        lw = np.logaddexp(lw_init, lw_final)
        if lw_final > lw or self.rng.random() < math.exp(lw_final - lw):
            prop = prop_final
        rho = rho_init + rho_final
        persist = _no_uturn(ps_beg, ps_end, rho)
        persist &= _no_uturn(ps_beg, ps_final_beg, rho_init + p_final_beg)
        persist &= _no_uturn(ps_init_end, ps_end, rho_final + p_init_end)
        return (persist, z, prop, lw, rho, ps_beg, ps_end, p_beg, p_end)

    def transition(self):
        p0 = self._momentum()
        z0 = (self.q, p0, self.g, self.lp)
        h0 = self._h(self.lp, p0)
        z_fwd = z_bck = z0
        ps0 = self.inv_m * p0
        p_fwd_fwd = p_fwd_bck = p_bck_fwd = p_bck_bck = p0
        ps_fwd_fwd = ps_fwd_bck = ps_bck_fwd = ps_bck_bck = ps0
        rho = p0.copy()
        log_sum_w = 0.0
        sample = z0
        acc = {"n": 0, "metro": 0.0, "divergent": False}
        depth = 0
        while depth < self.max_depth:
            if self.rng.random() > 0.5:
                rho_bck = rho
                p_bck_fwd, ps_bck_fwd = p_fwd_fwd, ps_fwd_fwd
                (ok, z_fwd, prop, lw_sub, rho_fwd, ps_fwd_bck, ps_fwd_fwd, p_fwd_bck,
                 p_fwd_fwd) = self._build(depth, z_fwd, 1.0, h0, acc)
            else:
                rho_fwd = rho
                p_fwd_bck, ps_fwd_bck = p_bck_bck, ps_bck_bck
                (ok, z_bck, prop, lw_sub, rho_bck, ps_bck_fwd, ps_bck_bck, p_bck_fwd,
                 p_bck_bck) = self._build(depth, z_bck, -1.0, h0, acc)
            if not ok:
                break
            depth += 1
            if lw_sub > log_sum_w or self.rng.random() < math.exp(lw_sub - log_sum_w):
                sample = prop
            log_sum_w = np.logaddexp(log_sum_w, lw_sub)
            rho = rho_bck + rho_fwd
            persist = _no_uturn(ps_bck_bck, ps_fwd_fwd, rho)
            persist &= _no_uturn(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
            persist &= _no_uturn(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
            if not persist:
                break
        self.q, _, self.g, self.lp = sample
        accept = acc["metro"] / max(acc["n"], 1)
        return accept, depth, acc["n"], acc["divergent"]


def _no_uturn(ps_minus, ps_plus, rho):
    return float(np.dot(ps_plus, rho)) > 0 and float(np.dot(ps_minus, rho)) > 0


def _run_chain(f, q0, seed_seq, cfg: SamplerConfig):
    rng = np.random.default_rng(seed_seq)
    chain = _Chain(f, q0, rng, cfg.max_depth)
    dim = chain.q.shape[0]
    n_keep = cfg.samples // cfg.thin
    out = np.empty((n_keep, dim))
    accept = np.empty(n_keep)
    depth = np.empty(n_keep, dtype=int)
    leaps = np.empty(n_keep, dtype=int)
    divergent = 0

    da = _DualAveraging(cfg.target_accept)
    chain.init_stepsize()
    da.restart(chain.eps)
    windows = adaptation_windows(cfg.warmup, cfg.init_buffer, cfg.term_buffer,
                                 cfg.base_window)
    w_idx = 0
    welford = _Welford(dim)
    for i in range(cfg.warmup):
        a, _, _, _ = chain.transition()
        chain.eps = da.update(a)
        if w_idx < len(windows) and windows[w_idx][0] <= i < windows[w_idx][1]:
            welford.add(chain.q)
            if i == windows[w_idx][1] - 1:
                chain.inv_m = welford.regularized_variance()
                welford = _Welford(dim)
                chain.init_stepsize()
                da.restart(chain.eps)
                w_idx += 1
    chain.eps = da.final()

    for i in range(cfg.samples):
        a, d, n, div = chain.transition()
        divergent += div
        if i % cfg.thin == 0 and i // cfg.thin < n_keep:
            k = i // cfg.thin
            out[k] = chain.q
            accept[k], depth[k], leaps[k] = a, d, n
    return out, divergent, chain.eps, chain.inv_m, accept, depth, leaps


def initial_points(f, dim, cfg: SamplerConfig, center=None, scale=None,
                   max_tries: int = 100) -> list[np.ndarray]:
    """Jittered starting points, one per chain, with finite log density."""
    center = np.zeros(dim) if center is None else np.asarray(center, float)
    scale = cfg.jitter if scale is None else scale
    points = []
    for c in range(cfg.chains):
        rng = np.random.default_rng([cfg.seed, c, 7])
        for _ in range(max_tries):
            q = center + rng.uniform(-1, 1, dim) * scale
            lp, g = f(q)
            if np.isfinite(lp) and np.all(np.isfinite(g)):
                points.append(q)
                break
        else:
            raise SamplerError(f"chain {c}: no finite starting point after "
                               f"{max_tries} attempts")
    return points


def check_gradient(f, q, n_coords: int = 8, h: float = 1e-5, rtol: float = 1e-3,
                   seed: int = 0) -> None:
    """Spot-check the gradient against central differences."""
    q = np.asarray(q, float)
    _, g = f(q)
    rng = np.random.default_rng(seed)
    for i in rng.choice(q.size, size=min(n_coords, q.size), replace=False):
        e = np.zeros_like(q)
        e[i] = h
        fd = (f(q + e)[0] - f(q - e)[0]) / (2 * h)
        if abs(g[i]) > 1e-3 and abs(fd - g[i]) > rtol * max(abs(g[i]), abs(fd)):
            raise SamplerError(f"gradient check failed at coordinate {i}: "
                               f"analytic {g[i]:.6g}, finite difference {fd:.6g}")


def run_chains(model: Target, config: SamplerConfig = SamplerConfig(),
               init: Optional[Sequence[np.ndarray]] = None,
               names: Optional[list[str]] = None, check_grad: bool = True) -> PosteriorDraws:
    """Sample ``config.chains`` independent chains from ``model``.

    ``model`` exposes ``dim`` and ``log_prob_and_grad(q)``.  Chain ``c``
    draws from its own stream seeded by ``(config.seed, c)``, so results
    do not depend on whether chains run serially or in processes.
    """
    f = model.log_prob_and_grad
    dim = model.dim
    if init is None:
        init = initial_points(f, dim, config)
    if len(init) != config.chains:
        raise SamplerError("need one initial point per chain")
    if check_grad:
        check_gradient(f, init[0], seed=config.seed)
    seeds = [np.random.SeedSequence([config.seed, c]) for c in range(config.chains)]
    n_jobs = config.n_jobs or min(config.chains, os.cpu_count() or 1)
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_run_chain, [f] * config.chains, init, seeds,
                                    [config] * config.chains))
    else:
        results = [_run_chain(f, q0, s, config) for q0, s in zip(init, seeds)]
    draws = np.stack([r[0] for r in results])
    pd = PosteriorDraws(
        draws=draws,
        names=list(names if names is not None else getattr(model, "names",
                                                            [f"q{i}" for i in range(dim)])),
        divergences=np.array([r[1] for r in results]),
        step_size=np.array([r[2] for r in results]),
        inv_metric=np.stack([r[3] for r in results]),
        accept_stat=np.stack([r[4] for r in results]),
        tree_depth=np.stack([r[5] for r in results]),
        n_leapfrog=np.stack([r[6] for r in results]),
        thin=config.thin, warmup=config.warmup, seed=config.seed)
    if pd.flagged:
        log.warning("%.2f%% of post-warmup transitions diverged",
                    100 * pd.divergence_rate)
    return pd
