"""Between-chain convergence and effective sample size.

Both statistics operate on a (chains, iterations) array.  Chains are
split in half before comparison, and bulk versions use normal scores of
the pooled ranks so that heavy tails do not mask poor mixing.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected an array of shape (chains, iterations)")
    return x


def split_chains(x) -> np.ndarray:
    x = _as_chains(x)
    half = x.shape[1] // 2
    if half < 2:
        raise ValueError("need at least 4 iterations per chain")
    # an odd middle draw is dropped
    return np.concatenate([x[:, :half], x[:, -half:]], axis=0)


def rank_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _is_constant(x) -> bool:
    return bool(np.ptp(x) == 0) or not np.all(np.isfinite(x))


def _rhat_raw(x) -> float:
    m, n = x.shape
    w = x.var(axis=1, ddof=1).mean()
    b = n * x.mean(axis=1).var(ddof=1)
    if w == 0:
        return np.inf
    return float(np.sqrt(((n - 1) / n * w + b / n) / w))


def rhat(x) -> float:
    """Rank-normalised split R-hat: the larger of bulk and folded-tail values.

    A constant sample returns ``inf`` so the gate always rejects it.
    """
    x = _as_chains(x)
    if _is_constant(x):
        return np.inf
    s = split_chains(x)
    bulk = _rhat_raw(rank_normalize(s))
    tail = _rhat_raw(rank_normalize(np.abs(s - np.median(s))))
    return max(bulk, tail)


def _autocov(x) -> np.ndarray:
    n = x.shape[-1]
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x - x.mean(axis=-1, keepdims=True), size, axis=-1)
    ac = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n]
    return ac / n


def _ess_raw(x) -> float:
    m, n = x.shape
    if _is_constant(x):
        return 0.0
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer's initial positive sequence over adjacent pairs, made monotone
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    k = 0
    while k < n_pairs and pairs[k] > 0:
        k += 1
    pairs = np.minimum.accumulate(pairs[:k]) if k else pairs[:1]
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def ess_basic(x) -> float:
    """ESS of the mean without splitting or rank normalisation."""
    return _ess_raw(_as_chains(x))


def ess_bulk(x) -> float:
    x = _as_chains(x)
    if _is_constant(x):
        return 0.0
    return _ess_raw(rank_normalize(split_chains(x)))


def ess_tail(x, prob: float = 0.05) -> float:
    """Smaller of the ESS of the lower and upper ``prob`` quantile indicators."""
    x = _as_chains(x)
    if _is_constant(x):
        return 0.0
    s = split_chains(x)
    lo, hi = np.quantile(s, [prob, 1 - prob])
    return min(_ess_raw((s <= lo).astype(float)), _ess_raw((s <= hi).astype(float)))


def ess(x) -> dict:
    return {"bulk": ess_bulk(x), "tail": ess_tail(x)}


def converged(x, rhat_max: float = 1.05, ess_min: float = 400.0) -> bool:
    """Gate used for every fitted parameter."""
    return rhat(x) < rhat_max and ess_bulk(x) >= ess_min and ess_tail(x) >= ess_min
