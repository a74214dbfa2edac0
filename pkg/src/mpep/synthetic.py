"""Synthetic datasets drawn from the model at known parameter values."""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .config import EXIT, PREVALENCE, ModelConfig
from .data import FACTORS, StrataDataset
from .design import Design, build_design
from .likelihood import Model, ParameterVector, rmst


class SimulationError(ValueError):
    pass


def skeleton(shape: Union[Sequence[int], Mapping[str, int]], events: Sequence[str],
             population=100_000.0, deaths_event: Optional[str] = "auto") -> StrataDataset:
    """Dataset with the requested cross-classification and all counts zero."""
    if isinstance(shape, Mapping):
        shape = tuple(int(shape[f]) for f in FACTORS)
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise SimulationError(f"shape must give four positive factor sizes, got {shape}")
    levels = {
        "sex": ("female", "male") if shape[0] == 2 else tuple(str(i) for i in range(shape[0])),
        "age_group": tuple(f"A{i + 1}" for i in range(shape[1])),
        "year": tuple(str(i) for i in range(shape[2])),
        "region": tuple(str(i) for i in range(shape[3])),
    }
    S = int(np.prod(shape))
    E = len(events)
    if deaths_event == "auto":
        deaths_event = "deaths" if "deaths" in events else None
    P = np.broadcast_to(np.asarray(population, dtype=float), (S,)).copy()
    z = np.zeros(S)
    return StrataDataset(levels=levels, events=tuple(events), deaths_event=deaths_event,
                         n_c=z, P=P, t_on=z, t_off=z, t_o=z, x_o=z, t_d=z,
                         x_c_on=np.zeros((E, S)), x_c_off=np.zeros((E, S)),
                         x_e=np.zeros((E, S)))


def draw_counts(rng: np.random.Generator, mu, family: str, theta=None, pi=None):
    """Counts with mean ``mu`` from the given family.

    Every family consumes the same uniform stream for zero inflation, so
    ``zip`` with ``pi = 0`` reproduces ``poisson`` draw for draw.
    """
    mu = np.asarray(mu, dtype=float)
    u = rng.random(mu.shape)
    if family in ("nb", "zinb"):
        lam = rng.gamma(theta, mu / theta)
    else:
        lam = mu
    x = rng.poisson(lam).astype(float)
    if family in ("zip", "zinb"):
        x = np.where(u < pi, 0.0, x)
    return x


def _scalar(v) -> float:
    return float(np.asarray(v).reshape(-1)[0])


def _nuisance(pv: ParameterVector, design: Design, sub: str):
    theta = pi = None
    if f"{sub}.log_theta" in design.family:
        theta = math.exp(_scalar(pv[f"{sub}.log_theta"]))
    if f"{sub}.logit_pi" in design.family:
        pi = 1.0 / (1.0 + math.exp(-_scalar(pv[f"{sub}.logit_pi"])))
    return theta, pi


def generate_synthetic(truth, config: ModelConfig,
                       shape: Union[Sequence[int], Mapping[str, int]], seed: int,
                       population=100_000.0, followup: float = 0.9,
                       on_fraction: float = 0.5, extra_multiplier=None,
                       deaths_event: Optional[str] = "auto") -> StrataDataset:
    """Draw a dataset from the model at ``truth``.

    Parameters
    ----------
    truth : ParameterVector or mapping
        Parameter values for ``config``; a mapping may give block names
        (broadcast) or element names and must cover every parameter.
    shape : sizes of sex, age group, year, region.
    seed : int
    population : scalar or per-stratum general population.
    followup, on_fraction : cohort person-time is
        ``n_c * followup``, split on/off treatment by ``on_fraction``.
    extra_multiplier : mapping event -> factor, optional
        Scales the expected extra counts of an event (a deliberately
        misspecified source).

    Notes
    -----
    Extra deaths are drawn first with ``t_d = 0``; ``t_d`` is then set to
    a uniform fraction of them and the remaining event types use the
    resulting ``t_e``.  The extra population is rounded to whole people
    for count generation only.
    """
    skel = skeleton(shape, config.events, population, deaths_event)
    design = build_design(config, skel)
    model = Model(config, skel, design)
    if isinstance(truth, ParameterVector):
        pv = ParameterVector(design, truth.values)
    else:
        pv = ParameterVector.from_mapping(design, truth)
    if not np.all(np.isfinite(pv.values)):
        raise SimulationError("truth contains non-finite values")

    with np.errstate(over="ignore", invalid="ignore"):
        lat = model.latent(pv.values)
    for name, arr in [("Prev^c", lat.prev_c), ("Prev^e", lat.prev_e)]:
        if np.any(~(arr > 0)) or np.any(~(arr < 1)):
            raise SimulationError(f"truth implies {name} outside (0, 1)")
    rates = [lat.lambda_o] + list(lat.lambda_c.values())
    if any(np.any(~np.isfinite(r)) or np.any(r <= 0) for r in rates):
        raise SimulationError("truth implies a non-positive or infinite rate")

    rng = np.random.default_rng(seed)
    E, S = len(config.events), skel.n_strata
    P = skel.P
    pm = 1.0
    if config.pmatch:
        pm = 1.0 / (1.0 + math.exp(-_scalar(pv["logit_pmatch"])))
    mult = dict(extra_multiplier or {})

    n_c = rng.binomial(P.astype(np.int64), lat.prev_c).astype(float)
    t_on = n_c * followup * on_fraction
    t_off = n_c * followup * (1.0 - on_fraction)
    t_o = t_off.copy()
    theta, pi = _nuisance(pv, design, EXIT)
    x_o = draw_counts(rng, lat.lambda_o * t_o, config.family(EXIT), theta, pi)

    x_on = np.zeros((E, S))
    x_off = np.zeros((E, S))
    for i, e in enumerate(config.events):
        theta, pi = _nuisance(pv, design, e)
        lam = lat.lambda_c[e]
        x_on[i] = draw_counts(rng, pm * lam[1] * t_on, config.family(e), theta, pi)
        x_off[i] = draw_counts(rng, pm * lam[0] * t_off, config.family(e), theta, pi)

    r = rmst(lat.lambda_o)
    # counts are generated from a whole number of extra people
    n_e = np.round(lat.n_e)

    def extra_mean(i, e, t_e):
        lam = lat.lambda_c[e]
        bias = np.zeros(S)
        bq = design.bias_q[i]
        bias[bq >= 0] = pv.values[bq[bq >= 0]]
        mu = pm * lam[0] * t_e * np.exp(bias) + (1 - pm) * (lam[0] * t_off + lam[1] * t_on)
        return mu * mult.get(e, 1.0)

    x_e = np.zeros((E, S))
    t_d = np.zeros(S)
    order = list(range(E))
    if skel.deaths_event is not None:
        d = config.events.index(skel.deaths_event)
        order.remove(d)
        theta, pi = _nuisance(pv, design, skel.deaths_event)
        x_e[d] = draw_counts(rng, extra_mean(d, skel.deaths_event, n_e * r),
                             config.family(skel.deaths_event), theta, pi)
        t_d = x_e[d] * rng.uniform(0.25, 0.75, S)
    t_e = t_d + np.maximum(n_e - t_d, 0.0) * r
    for i in order:
        e = config.events[i]
        theta, pi = _nuisance(pv, design, e)
        x_e[i] = draw_counts(rng, extra_mean(i, e, t_e), config.family(e), theta, pi)

    return StrataDataset(levels=skel.levels, events=skel.events,
                         deaths_event=skel.deaths_event, n_c=n_c, P=P, t_on=t_on,
                         t_off=t_off, t_o=t_o, x_o=x_o, t_d=t_d,
                         x_c_on=x_on, x_c_off=x_off, x_e=x_e)


def reference_truth(config: ModelConfig, shape, population=100_000.0,
                    seed: int = 0) -> ParameterVector:
    """Plausible parameter values for desk-scale studies.

    Rates are per person-year: the first event type around 0.015
    off treatment, later ones around 0.05; other-cause exit 0.03; cohort
    prevalence near 0.8% and extra prevalence near 0.5%.  Random-effect
    raw values are standard normal draws (seeded) with scale 0.2.
    """
    design = build_design(config, skeleton(shape, config.events, population))
    pv = ParameterVector(design)
    rng = np.random.default_rng(seed)

    def effects(reg, intercept, treatment=0.0):
        rd = design.regressions[reg]
        vals = []
        for col in rd.columns:
            if col == "intercept":
                v = intercept
            elif col == "treatment[on]":
                v = treatment
            elif col.startswith("sex["):
                v = 0.25
            elif col.startswith("age["):
                v = -0.15 * (design.dataset.levels["age_group"].index(col[4:-1]))
            elif col.startswith("year["):
                v = 0.06 * int(col[5:-1]) if col[5:-1].isdigit() else 0.05
            elif col.startswith("region["):
                v = 0.2
            else:
                v = 0.1
            vals.append(v)
        pv[f"{reg}.beta"] = vals
        for blk in rd.re:
            pv[blk.raw.name] = rng.standard_normal(blk.raw.size)
            pv[blk.log_scale.name] = math.log(0.2)

    for i, e in enumerate(config.events):
        effects(e, math.log(0.015 if i == 0 else 0.05), -0.8 if i == 0 else -0.5)
    effects(EXIT, math.log(0.03))
    effects(PREVALENCE, math.log(0.005 / 0.995))
    for name, blk in design.family.items():
        pv[name] = math.log(50.0) if name.endswith("log_theta") else math.log(0.05 / 0.95)
    for blk in design.index.of_kind("bias"):
        pv[blk.name] = 0.0
    if config.pmatch:
        pv["logit_pmatch"] = math.log(0.9 / 0.1)
    codes = design.dataset.factor_codes()
    pv["logit_prev_c"] = (math.log(0.008 / 0.992) + 0.3 * codes["sex"]
                          - 0.1 * codes["age_group"])
    return pv
