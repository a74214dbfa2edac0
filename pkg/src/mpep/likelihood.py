"""Joint posterior for the cohort, exit, extra-event and cohort-size data.

Expected counts per stratum ``s`` and event type ``i``:

* cohort, on/off treatment: ``pmatch * lambda_i[s, status] * t[s, status]``
* other-cause exits: ``lambda_o[s] * t_o[s]``
* extra events: ``pmatch * lambda_i[s, off] * t_e[s] * exp(bias)
  + (1 - pmatch) * (lambda_i[s, off] * t_off[s] + lambda_i[s, on] * t_on[s])``

with ``t_e = t_d + (n_e - t_d) * rmst(lambda_o)`` and ``n_e = Prev^e * P``;
``pmatch`` is 1 and ``bias`` is 0 unless those extensions are enabled.
The cohort size is ``n_c ~ Binomial(P, Prev^c)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Optional, Union

import numpy as np
from scipy.special import gammaln

from . import _kernel as K
from .config import EXIT, PREVALENCE, ModelConfig
from .data import StrataDataset
from .design import Design, build_design


class LikelihoodError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def rmst(lambda_o):
    """Restricted mean survival over one year at constant hazard ``lambda_o``.

    Equals ``(1 - exp(-lambda_o)) / lambda_o``, with a series expansion
    below ``1e-6`` so that ``rmst(0) == 1``.
    """
    lam = np.asarray(lambda_o, dtype=float)
    if np.any(lam < 0) or np.any(np.isnan(lam)):
        raise LikelihoodError("rmst requires a non-negative rate")
    small = lam < K.RMST_SWITCH
    safe = np.where(small, 1.0, lam)
    out = np.where(small, 1.0 - lam / 2.0 + lam * lam / 6.0, -np.expm1(-safe) / safe)
    return float(out) if out.ndim == 0 else out


def extra_time_at_risk(n_e, t_d, lambda_o):
    """Person-years at risk in the extra population.

    ``t_d + max(n_e - t_d, 0) * rmst(lambda_o)``.  The floor keeps the
    expression defined when a sampler visits ``n_e < t_d``.
    """
    n_e = np.asarray(n_e, dtype=float)
    t_d = np.asarray(t_d, dtype=float)
    if np.any(n_e < 0) or np.any(t_d < 0):
        raise LikelihoodError("n_e and t_d must be non-negative")
    out = t_d + np.maximum(n_e - t_d, 0.0) * rmst(lambda_o)
    return float(out) if np.ndim(out) == 0 else out


def _logit(p):
    return math.log(p) - math.log1p(-p)


def log_lik_count(x, mu, family: str = "poisson", theta=None, pi=None):
    """Log-probability of count(s) ``x`` with mean ``mu``.

    ``family`` is one of ``poisson``, ``nb`` (dispersion ``theta``),
    ``zip`` (zero-inflation ``pi``) or ``zinb`` (both).
    """
    if family not in K.FAMILY_CODE:
        raise LikelihoodError(f"unknown family {family!r}")
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    mu_arr = np.broadcast_to(np.asarray(mu, dtype=float), x_arr.shape).copy()
    if np.any(x_arr < 0) or np.any(x_arr != np.round(x_arr)):
        raise LikelihoodError("counts must be non-negative integers")
    if np.any(~(mu_arr > 0)) or np.any(~np.isfinite(mu_arr)):
        raise LikelihoodError("mean must be positive and finite")
    lt = np.zeros_like(x_arr)
    zp = np.zeros_like(x_arr)
    if family in ("nb", "zinb"):
        if theta is None or not theta > 0 or not np.isfinite(theta):
            raise LikelihoodError(f"{family} requires theta > 0")
        lt[:] = math.log(theta)
    if family in ("zip", "zinb"):
        if pi is None or not 0 <= pi < 1:
            raise LikelihoodError(f"{family} requires 0 <= pi < 1")
        zp[:] = -np.inf if pi == 0 else _logit(pi)
    out = K.count_loglik_array(x_arr, mu_arr, K.FAMILY_CODE[family], lt, zp)
    return float(out[0]) if np.ndim(x) == 0 and np.ndim(mu) == 0 else out


@dataclass(frozen=True)
class LatentQuantities:
    prev_c: np.ndarray
    prev_e: np.ndarray
    n_e: np.ndarray
    N: np.ndarray
    t_e: np.ndarray
    lambda_c: Mapping[str, np.ndarray]   # event -> (..., 2, S) [off, on]
    lambda_o: np.ndarray

    @property
    def prev(self):
        return self.prev_c + self.prev_e


class ParameterVector:
    """Flat unconstrained vector with named access by block or element."""

    def __init__(self, design: Design, values=None):
        self.design = design
        self.values = (np.zeros(design.dim) if values is None
                       else np.array(values, dtype=float))
        if self.values.shape != (design.dim,):
            raise ValueError(f"expected {design.dim} values, got {self.values.shape}")

    def _locate(self, name):
        idx = self.design.index
        if name in idx:
            return idx[name].slice
        return idx.position(name)

    def __getitem__(self, name):
        return self.values[self._locate(name)]

    def __setitem__(self, name, value):
        self.values[self._locate(name)] = value

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.design.names, self.values.tolist()))

    @classmethod
    def from_mapping(cls, design: Design, values: Mapping[str, object],
                     complete: bool = True) -> "ParameterVector":
        pv = cls(design)
        set_ = np.zeros(design.dim, dtype=bool)
        for name, v in values.items():
            try:
                loc = pv._locate(name)
            except ValueError:
                raise KeyError(f"unknown parameter {name!r}") from None
            pv.values[loc] = v
            set_[loc] = True
        if complete and not set_.all():
            missing = [n for n, ok in zip(design.names, set_) if not ok]
            raise KeyError(f"parameters not given: {missing[:5]}"
                           f"{' ...' if len(missing) > 5 else ''}")
        return pv


ParamsLike = Union[ParameterVector, np.ndarray, list]


class Model:
    """Compiled posterior for one (config, dataset) pair."""

    def __init__(self, config: ModelConfig, dataset: StrataDataset,
                 design: Optional[Design] = None):
        self.config = config
        self.dataset = dataset
        self.design = design if design is not None else build_design(config, dataset)
        d = self.design
        ds = dataset
        E = len(config.events)
        S = ds.n_strata
        ev = d.event_pos
        self.n_events, self.n_strata = E, S
        self._x_on = np.ascontiguousarray(ds.x_c_on[ev])
        self._x_off = np.ascontiguousarray(ds.x_c_off[ev])
        self._x_e = np.ascontiguousarray(ds.x_e[ev])
        self._data = dict(
            ptr=d.csr_ptr, ccol=d.csr_col, cval=d.csr_val,
            col_q=d.col_q, col_sq=d.col_scale_q,
            n_events=E, n_strata=S,
            rate_row0=np.array([d.row_offset[e] for e in config.events], dtype=np.int64),
            exit_row0=d.row_offset[EXIT], prev_row0=d.row_offset[PREVALENCE],
            x_on=self._x_on, x_off=self._x_off, x_e=self._x_e,
            t_on=np.array(ds.t_on), t_off=np.array(ds.t_off),
            x_o=np.array(ds.x_o), t_o=np.array(ds.t_o), t_d=np.array(ds.t_d),
            n_c=np.array(ds.n_c), pop=np.array(ds.P),
            lf_on=gammaln(self._x_on + 1), lf_off=gammaln(self._x_off + 1),
            lf_e=gammaln(self._x_e + 1), lf_o=gammaln(np.array(ds.x_o) + 1),
            lchoose=gammaln(ds.P + 1) - gammaln(ds.n_c + 1) - gammaln(ds.P - ds.n_c + 1),
            fam=np.array([K.FAMILY_CODE[config.family(m)] for m in config.submodels],
                         dtype=np.int64),
            th_q=np.array([d.family[f"{m}.log_theta"].start if f"{m}.log_theta" in d.family
                           else -1 for m in config.submodels], dtype=np.int64),
            pi_q=np.array([d.family[f"{m}.logit_pi"].start if f"{m}.logit_pi" in d.family
                           else -1 for m in config.submodels], dtype=np.int64),
            bias_q=np.ascontiguousarray(d.bias_q), pm_q=int(d.pmatch_q),
            pc_q0=int(d.prev_c.start),
            prior_kind=np.array(d.index.prior_kind, dtype=np.int64),
            prior_a=np.array(d.index.prior_a, dtype=float),
            prior_b=np.array(d.index.prior_b, dtype=float),
        )
        self._args = tuple(self._data.values())
        self._dim = d.dim
        self._grad = np.zeros(d.dim)
        self._empty = np.zeros(0)
        self.n_points = 3 * E * S + 2 * S

    # -- core evaluations -------------------------------------------------

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def names(self) -> list[str]:
        return self.design.names

    def _q(self, params) -> np.ndarray:
        if type(params) is np.ndarray and params.dtype == np.float64 \
                and params.shape == (self._dim,) and params.flags.c_contiguous:
            return params
        q = params.values if isinstance(params, ParameterVector) else params
        q = np.ascontiguousarray(q, dtype=float)
        if q.shape != (self._dim,):
            raise ValueError(f"parameter vector has shape {q.shape}, expected "
                             f"({self.dim},)")
        return q

    def log_prob(self, params) -> float:
        out = K.evaluate(self._q(params), False, self._grad, self._empty, self._empty,
                         *self._args)
        return out[0] if np.isfinite(out[0]) else -np.inf

    def log_prob_and_grad(self, params):
        grad = np.empty(self.dim)
        out = K.evaluate(self._q(params), True, grad, self._empty, self._empty,
                         *self._args)
        lp = out[0]
        if not math.isfinite(lp) or not np.isfinite(grad).all():
            return -np.inf, np.zeros(self._dim)
        return lp, grad

    def pointwise(self, params):
        """Per-datapoint log-likelihood and expected value."""
        ll = np.empty(self.n_points)
        mu = np.empty(self.n_points)
        out = K.evaluate(self._q(params), False, self._grad, ll, mu, *self._args)
        return ll, mu, out

    def evaluate(self, params):
        """(log posterior, pointwise log-lik) with non-finite terms reported."""
        ll, mu, (lp, loglik, n_floor, n_over) = self.pointwise(params)
        if not np.isfinite(lp):
            bad = np.flatnonzero(~np.isfinite(ll))
            if bad.size:
                raise NonFiniteError(f"non-finite log-likelihood term "
                                     f"{self.point_labels[bad[0]]}")
            raise NonFiniteError("non-finite log prior")
        return lp, ll

    def stats(self, params) -> tuple[int, int]:
        """(strata with n_e < t_d, strata with Prev^c + Prev^e >= 1)."""
        out = K.evaluate(self._q(params), False, self._grad, self._empty,
                         self._empty, *self._args)
        return out[2], out[3]

    # -- datapoint bookkeeping -------------------------------------------

    @cached_property
    def point_submodel(self) -> np.ndarray:
        S = self.n_strata
        labels = []
        for e in self.config.events:
            labels += [f"on:{e}"] * S + [f"off:{e}"] * S + [f"extra:{e}"] * S
        labels += [EXIT] * S + ["cohort"] * S
        return np.array(labels)

    @cached_property
    def point_labels(self) -> list[str]:
        keys = [",".join(self.dataset.labels(k)) for k in self.dataset.keys()]
        S = self.n_strata
        return [f"{sub}[{keys[i % S]}]" for i, sub in enumerate(self.point_submodel)]

    @cached_property
    def point_x(self) -> np.ndarray:
        parts = []
        for e in range(self.n_events):
            parts += [self._x_on[e], self._x_off[e], self._x_e[e]]
        parts += [np.array(self.dataset.x_o), np.array(self.dataset.n_c)]
        return np.concatenate(parts)

    @cached_property
    def point_family(self) -> np.ndarray:
        """Family name per datapoint; ``binomial`` for cohort size."""
        fams = []
        S = self.n_strata
        for e in self.config.events:
            fams += [self.config.family(e)] * 3 * S
        fams += [self.config.family(EXIT)] * S + ["binomial"] * S
        return np.array(fams)

    def point_nuisance(self, draws) -> tuple[np.ndarray, np.ndarray]:
        """(theta, pi) per draw and datapoint; nan where not applicable."""
        draws = np.atleast_2d(draws)
        n = draws.shape[0]
        theta = np.full((n, self.n_points), np.nan)
        pi = np.full((n, self.n_points), np.nan)
        S = self.n_strata
        spans = [(e, slice(3 * i * S, 3 * (i + 1) * S))
                 for i, e in enumerate(self.config.events)]
        spans.append((EXIT, slice(3 * self.n_events * S, (3 * self.n_events + 1) * S)))
        for sub, sl in spans:
            fam = self.config.family(sub)
            if fam in ("nb", "zinb"):
                theta[:, sl] = np.exp(draws[:, self.design.family[f"{sub}.log_theta"].start])[:, None]
            if fam in ("zip", "zinb"):
                z = draws[:, self.design.family[f"{sub}.logit_pi"].start]
                pi[:, sl] = (1.0 / (1.0 + np.exp(-z)))[:, None]
            elif fam in ("poisson", "nb"):
                pi[:, sl] = 0.0
        return theta, pi

    # -- derived quantities ---------------------------------------------

    def latent(self, draws) -> LatentQuantities:
        """Latent quantities for one vector or an array of draws."""
        from .design import linear_predictor
        q = np.asarray(draws, dtype=float)
        d = self.design
        ds = self.dataset
        S = self.n_strata
        prev_c = 1.0 / (1.0 + np.exp(-q[..., d.prev_c.slice]))
        prev_e = 1.0 / (1.0 + np.exp(-linear_predictor(d, q, PREVALENCE)))
        lam_o = np.exp(linear_predictor(d, q, EXIT))
        n_e = prev_e * ds.P
        t_e = ds.t_d + np.maximum(n_e - ds.t_d, 0.0) * rmst(lam_o)
        lam_c = {}
        for e in self.config.events:
            lam = np.exp(linear_predictor(d, q, e))
            lam_c[e] = lam.reshape(lam.shape[:-1] + (2, S))
        return LatentQuantities(prev_c=prev_c, prev_e=prev_e, n_e=n_e,
                                N=(prev_c + prev_e) * ds.P, t_e=t_e,
                                lambda_c=lam_c, lambda_o=lam_o)


_MODEL_CACHE: dict = {}


def _model_for(dataset: StrataDataset, config: ModelConfig) -> Model:
    key = (id(dataset), id(config))
    hit = _MODEL_CACHE.get(key)
    if hit is not None and hit.dataset is dataset and hit.config is config:
        return hit
    if len(_MODEL_CACHE) > 32:
        _MODEL_CACHE.clear()
    model = Model(config, dataset)
    _MODEL_CACHE[key] = model
    return model


def joint_log_posterior(params: ParamsLike, dataset: StrataDataset,
                        config: ModelConfig):
    """Log posterior (unconstrained scale) and per-datapoint log-likelihood."""
    q = params.values if isinstance(params, ParameterVector) else np.asarray(params, float)
    if not np.all(np.isfinite(q)):
        raise NonFiniteError("parameter vector is not finite")
    return _model_for(dataset, config).evaluate(q)


def grad_log_posterior(params: ParamsLike, dataset: StrataDataset,
                       config: ModelConfig) -> np.ndarray:
    model = _model_for(dataset, config)
    q = model._q(params)
    grad = np.empty(model.dim)
    lp = K.evaluate(q, True, grad, model._empty, model._empty, *model._args)[0]
    if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
        model.evaluate(q)  # raises with the offending term
        raise NonFiniteError("non-finite gradient")
    return grad
