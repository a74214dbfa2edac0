"""Model assessment: residual deviance, pD, DIC and source consistency.

Residual deviance compares each datapoint's fitted log-likelihood with
a saturated fit of the same family whose mean equals the observation,
holding any dispersion or zero-inflation parameter at its drawn value.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import xlogy

COUNT_FAMILIES = ("poisson", "nb", "zip", "zinb")
UNITS = ("year", "sex", "age_group", "region", "stratum", "total")


class DiagnosticsError(ValueError):
    pass


def resdev_contribution(x, mu, family: str, theta=None, pi=None, size=None):
    """Per-point residual deviance, vectorised over broadcastable inputs.

    ``family`` is a count family or ``"binomial"`` (then ``mu`` is the
    expected count and ``size`` the number of trials).
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if family == "binomial":
        n = np.asarray(size, dtype=float)
        p = mu / n
        return 2.0 * (xlogy(x, x / n) - xlogy(x, p)
                      + xlogy(n - x, (n - x) / n) - xlogy(n - x, 1.0 - p))
    if family not in COUNT_FAMILIES:
        raise DiagnosticsError(f"unknown family {family!r}")
    zero = x == 0
    xs = np.where(zero, 1.0, x)
    # mu = 0 or pi = 0 give harmless infinities in branches np.where discards
    with np.errstate(divide="ignore", invalid="ignore"):
        if family in ("poisson", "zip"):
            pos = 2.0 * (x * np.log(xs / mu) + mu - x)
            d0 = 2.0 * mu
        else:
            theta = np.asarray(theta, dtype=float)
            pos = 2.0 * (x * np.log(xs / mu)
                         + (x + theta) * np.log((theta + mu) / (theta + x)))
            d0 = 2.0 * theta * np.log1p(mu / theta)
        if family in ("zip", "zinb"):
            pi = np.asarray(pi, dtype=float)
            # saturated zero probability is 1, so only the fitted term remains
            d0 = -2.0 * np.logaddexp(np.log(pi), np.log1p(-pi) - 0.5 * d0)
    return np.where(zero, d0, pos)


@dataclass
class SubmodelDeviance:
    submodel: str
    family: str
    n_points: int
    resdev: float
    pd: float
    dic: float
    loglik_at_mean: float
    mean_loglik: float


@dataclass
class DevianceReport:
    submodels: list[SubmodelDeviance]
    point_labels: list[str]
    point_submodel: list[str]
    point_resdev: np.ndarray
    resdev: float
    pd: float
    dic: float
    n_points: int
    n_draws: int
    warnings: list[str] = field(default_factory=list)

    def __getitem__(self, submodel: str) -> SubmodelDeviance:
        for s in self.submodels:
            if s.submodel == submodel:
                return s
        raise KeyError(submodel)

    def to_dict(self) -> dict:
        return {
            "submodels": [vars(s) for s in self.submodels],
            "total": {"resdev": self.resdev, "pd": self.pd, "dic": self.dic,
                      "n_points": self.n_points},
            "n_draws": self.n_draws,
            "warnings": self.warnings,
            "points": [{"label": l, "submodel": s, "resdev": float(r)} for l, s, r in
                       zip(self.point_labels, self.point_submodel, self.point_resdev)],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, allow_nan=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_text(self) -> str:
        w = max(len(s.submodel) for s in self.submodels + [_total_row(self)])
        lines = [f"{'sub-model':<{w}}  {'family':<8} {'points':>6} {'ResDev':>10} "
                 f"{'pD':>8} {'DIC':>12}"]
        for s in self.submodels + [_total_row(self)]:
            lines.append(f"{s.submodel:<{w}}  {s.family:<8} {s.n_points:>6d} "
                         f"{s.resdev:>10.1f} {s.pd:>8.1f} {s.dic:>12.1f}")
        return "\n".join(lines)


def _total_row(r: DevianceReport) -> SubmodelDeviance:
    return SubmodelDeviance("total", "", r.n_points, r.resdev, r.pd, r.dic,
                            math.nan, math.nan)


def _pointwise(model, q):
    q = np.atleast_2d(q)
    ll = np.empty((q.shape[0], model.n_points))
    mu = np.empty_like(ll)
    lik = np.empty(q.shape[0])
    for i, row in enumerate(q):
        ll[i], mu[i], out = model.pointwise(np.ascontiguousarray(row))
        lik[i] = out[1]
    return ll, mu, lik


def _unconstrained(draws) -> np.ndarray:
    arr = getattr(draws, "draws", draws)
    arr = np.asarray(arr, dtype=float)
    return arr.reshape(-1, arr.shape[-1])


def deviance_report(draws, model, family: Optional[str] = None,
                    include_cohort: bool = True) -> DevianceReport:
    """Residual deviance, pD and DIC per sub-model and in total.

    pD is twice the gap between the data log-likelihood at the posterior
    mean (unconstrained scale) and the posterior mean data log-likelihood;
    DIC is ``-2 l(mean) + 2 pD``.  Priors are excluded throughout.

    Parameters
    ----------
    draws : PosteriorDraws or array (..., dim)
    model : Model
    family : str, optional
        Expected family of every count sub-model; a mismatch raises.
    include_cohort : bool
        Whether the binomial cohort-size points enter the totals.
    """
    cfg = model.config
    if family is not None:
        wrong = [s for s in cfg.submodels if cfg.family(s) != family]
        if wrong:
            raise DiagnosticsError(f"sub-models {wrong} were fitted with a family other "
                                   f"than {family!r}")
    q = _unconstrained(draws)
    if q.shape[0] == 0:
        raise DiagnosticsError("no draws")
    ll, mu, _ = _pointwise(model, q)
    # centred on the first draw so a point mass averages to itself exactly
    q_bar = q[0] + (q - q[0]).mean(axis=0)
    ll_hat, _, _ = _pointwise(model, q_bar)
    ll_hat = ll_hat[0]
    warnings = []
    if not np.all(np.isfinite(ll_hat)):
        warnings.append("non-finite log-likelihood at the posterior mean; DIC undefined")

    theta, pi = model.point_nuisance(q)
    fams = model.point_family
    x = model.point_x
    sub = model.point_submodel
    S = model.n_strata
    size = np.tile(np.asarray(model.dataset.P, float), len(x) // S)
    dev = np.zeros_like(mu)
    for fam in np.unique(fams):
        m = fams == fam
        dev[:, m] = resdev_contribution(x[m], mu[:, m], fam, theta[:, m], pi[:, m],
                                        size[m])
    point_resdev = dev.mean(axis=0)
    ll_bar = ll.mean(axis=0)
    gap = (ll_hat - ll).mean(axis=0)

    order = list(dict.fromkeys(sub))
    if not include_cohort:
        order.remove("cohort")
    rows = []
    for s in order:
        m = sub == s
        l_hat = float(ll_hat[m].sum())
        l_bar = float(ll_bar[m].sum())
        pd = 2.0 * float(gap[m].sum())
        rows.append(SubmodelDeviance(
            submodel=s, family=str(fams[m][0]), n_points=int(m.sum()),
            resdev=float(point_resdev[m].sum()), pd=pd, dic=-2.0 * l_hat + 2.0 * pd,
            loglik_at_mean=l_hat, mean_loglik=l_bar))
    keep = np.isin(sub, order)
    return DevianceReport(
        submodels=rows, point_labels=list(np.asarray(model.point_labels)[keep]),
        point_submodel=list(sub[keep]), point_resdev=point_resdev[keep],
        resdev=float(sum(r.resdev for r in rows)), pd=float(sum(r.pd for r in rows)),
        dic=float(sum(r.dic for r in rows)), n_points=int(keep.sum()),
        n_draws=q.shape[0], warnings=warnings)


def residual_deviance(draws, model, family: Optional[str] = None,
                      include_cohort: bool = True) -> DevianceReport:
    return deviance_report(draws, model, family, include_cohort)


def pd_and_dic(draws, model, include_cohort: bool = True) -> tuple[float, float]:
    r = deviance_report(draws, model, include_cohort=include_cohort)
    if r.warnings:
        return r.pd, math.nan
    return r.pd, r.dic


# -- consistency between sources ---------------------------------------------

@dataclass
class UnitConsistency:
    unit: str
    pr_positive: float
    p_value: float
    delta_mean: float
    delta_lower: float
    delta_upper: float


@dataclass
class ConsistencyResult:
    aggregation: str
    units: list[UnitConsistency]
    delta: np.ndarray  # (draws, units)

    def __getitem__(self, unit: str) -> UnitConsistency:
        for u in self.units:
            if u.unit == unit:
                return u
        raise KeyError(unit)

    @property
    def p_values(self) -> np.ndarray:
        return np.array([u.p_value for u in self.units])

    def to_dict(self) -> dict:
        return {"aggregation": self.aggregation, "units": [vars(u) for u in self.units]}


def two_sided_p(pr_positive: float) -> float:
    return 2.0 * min(pr_positive, 1.0 - pr_positive)


def unit_labels(dataset, unit: str) -> tuple[list[str], np.ndarray]:
    """Labels of the aggregation units and each stratum's unit index."""
    if unit not in UNITS:
        raise DiagnosticsError(f"unknown aggregation {unit!r}; choose from {UNITS}")
    S = dataset.n_strata
    if unit == "total":
        return ["total"], np.zeros(S, dtype=int)
    if unit == "stratum":
        return [",".join(dataset.labels(k)) for k in dataset.keys()], np.arange(S)
    return list(dataset.levels[unit]), dataset.factor_codes()[unit]


def aggregate_population(draws, model, unit: str = "year") -> tuple[list[str], np.ndarray]:
    """Draw-wise population size N summed within aggregation units."""
    labels, idx = unit_labels(model.dataset, unit)
    N = model.latent(_unconstrained(draws)).N
    out = np.zeros((N.shape[0], len(labels)))
    np.add.at(out.T, idx, N.T)
    return labels, out


def consistency_from_samples(a, b, labels: Sequence[str], seed: int = 0,
                             aggregation: str = "custom") -> ConsistencyResult:
    """Consistency p-values from two independent posterior samples.

    ``a`` and ``b`` have shape (draws, units).  Each is shuffled with its
    own stream before pairing, and the longer one is truncated.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1] or a.shape[1] != len(labels):
        raise DiagnosticsError("the two samples cover different aggregation units")
    ss = np.random.SeedSequence(seed).spawn(2)
    a = a[np.random.default_rng(ss[0]).permutation(a.shape[0])]
    b = b[np.random.default_rng(ss[1]).permutation(b.shape[0])]
    n = min(a.shape[0], b.shape[0])
    delta = a[:n] - b[:n]
    units = []
    for j, lab in enumerate(labels):
        d = delta[:, j]
        pr = float(np.mean(d > 0))
        lo, hi = np.quantile(d, [0.025, 0.975])
        units.append(UnitConsistency(str(lab), pr, two_sided_p(pr), float(d.mean()),
                                     float(lo), float(hi)))
    return ConsistencyResult(aggregation, units, delta)


def consistency_pvalue(fit_a, fit_b, unit: str = "year", seed: int = 0) -> ConsistencyResult:
    """Node-split comparison of two single-source fits.

    ``fit_a``/``fit_b`` are fitted results exposing ``draws`` and
    ``model`` (or ``(draws, model)`` pairs) over the same strata.
    """
    (da, ma), (db, mb) = _pair(fit_a), _pair(fit_b)
    la, Na = aggregate_population(da, ma, unit)
    lb, Nb = aggregate_population(db, mb, unit)
    if la != lb:
        raise DiagnosticsError("fits are aggregated over different units")
    return consistency_from_samples(Na, Nb, la, seed, unit)


def _pair(fit):
    if isinstance(fit, tuple):
        return fit
    return fit.draws, fit.model


def consistency_text(result: ConsistencyResult) -> str:
    w = max([len(u.unit) for u in result.units] + [len(result.aggregation)])
    lines = [f"{result.aggregation:<{w}}  {'Pr(d>0)':>8} {'p':>6} {'mean d':>12}"]
    for u in result.units:
        lines.append(f"{u.unit:<{w}}  {u.pr_positive:>8.3f} {u.p_value:>6.3f} "
                     f"{u.delta_mean:>12.1f}")
    return "\n".join(lines)


__all__ = ["DiagnosticsError", "resdev_contribution", "DevianceReport",
           "SubmodelDeviance", "deviance_report", "residual_deviance", "pd_and_dic",
           "ConsistencyResult", "UnitConsistency", "two_sided_p", "unit_labels",
           "aggregate_population", "consistency_from_samples", "consistency_pvalue",
           "consistency_text"]
