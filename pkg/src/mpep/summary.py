"""Posterior summaries of parameters and derived population quantities."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from .convergence import ess_bulk, ess_tail, rhat
from .sampler import PosteriorDraws

DERIVED = ("prev", "prev_e", "N", "yearly")
RHAT_MAX = 1.05
ESS_MIN = 400.0


@dataclass
class SummaryRow:
    name: str
    kind: str
    mean: float
    median: float
    lower: float
    upper: float
    sd: float
    rhat: float
    ess_bulk: float
    ess_tail: float


def summarize_array(name: str, x, kind: str = "parameter",
                    diagnostics: bool = True) -> SummaryRow:
    """Summary of one quantity given draws of shape (chains, iterations)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    flat = x.ravel()
    lo, med, hi = np.quantile(flat, [0.025, 0.5, 0.975])
    if np.ptp(flat) == 0:
        # exact point mass; avoid rounding in the mean
        lo = med = hi = mean = float(flat[0])
    else:
        mean = float(flat.mean())
    if diagnostics and x.shape[0] >= 2:
        r, eb, et = rhat(x), ess_bulk(x), ess_tail(x)
    else:
        r = eb = et = math.nan
    return SummaryRow(name, kind, mean, float(med), float(lo), float(hi),
                      float(flat.std(ddof=1)) if flat.size > 1 else 0.0, r, eb, et)


@dataclass
class SummaryTable:
    rows: list[SummaryRow]

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, name: str) -> SummaryRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    def of_kind(self, kind: str) -> list[SummaryRow]:
        return [r for r in self.rows if r.kind == kind]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        fields = list(SummaryRow.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v)
                        for k, v in asdict(r).items()})
        if path is not None:
            with open(path, "w") as fh:
                fh.write(buf.getvalue())
        return buf.getvalue()

    def to_text(self, kinds: Optional[Iterable[str]] = None) -> str:
        rows = self.rows if kinds is None else [r for r in self.rows if r.kind in set(kinds)]
        width = max([len(r.name) for r in rows] + [4])
        head = (f"{'name':<{width}}  {'mean':>11} {'2.5%':>11} {'97.5%':>11} "
                f"{'rhat':>6} {'ess_bulk':>8} {'ess_tail':>8}")
        lines = [head]
        for r in rows:
            lines.append(f"{r.name:<{width}}  {r.mean:>11.5g} {r.lower:>11.5g} "
                         f"{r.upper:>11.5g} {r.rhat:>6.3f} {r.ess_bulk:>8.0f} "
                         f"{r.ess_tail:>8.0f}")
        return "\n".join(lines)


@dataclass
class GateResult:
    passed: bool
    max_rhat: float
    min_ess_bulk: float
    min_ess_tail: float
    failing: list[str]

    def to_dict(self):
        return asdict(self)


def convergence_gate(draws: PosteriorDraws, rhat_max: float = RHAT_MAX,
                     ess_min: float = ESS_MIN) -> GateResult:
    """Apply R-hat and ESS thresholds to every sampled parameter."""
    failing = []
    rs, bs, ts = [], [], []
    for i, name in enumerate(draws.names):
        x = draws.draws[:, :, i]
        r, b, t = rhat(x), ess_bulk(x), ess_tail(x)
        rs.append(r), bs.append(b), ts.append(t)
        if not (r < rhat_max and b >= ess_min and t >= ess_min):
            failing.append(name)
    return GateResult(not failing, float(max(rs)), float(min(bs)), float(min(ts)),
                      failing)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def constrained_draws(draws: PosteriorDraws, model) -> dict[str, np.ndarray]:
    """Dispersion, zero inflation, linkage and random-effect scales on
    their natural scale, each of shape (chains, iterations)."""
    d = model.design
    out = {}
    for name, blk in d.family.items():
        sub, kind = name.rsplit(".", 1)
        x = draws.draws[:, :, blk.start]
        out[f"{sub}.theta" if kind == "log_theta" else f"{sub}.pi"] = (
            np.exp(x) if kind == "log_theta" else _sigmoid(x))
    for blk in d.index.of_kind("re_log_scale"):
        out[blk.name.replace(".log_scale", ".scale")] = np.exp(draws.draws[:, :, blk.start])
    if d.pmatch_q >= 0:
        out["pmatch"] = _sigmoid(draws.draws[:, :, d.pmatch_q])
    return out


def stratum_labels(dataset) -> list[str]:
    return [",".join(dataset.labels(k)) for k in dataset.keys()]


def yearly(values, dataset) -> np.ndarray:
    """Sum the last (stratum) axis within each year, draw by draw."""
    year = dataset.factor_codes()["year"]
    n_years = dataset.shape[2]
    values = np.asarray(values)
    out = np.zeros(values.shape[:-1] + (n_years,))
    for y in range(n_years):
        out[..., y] = values[..., year == y].sum(axis=-1)
    return out


def derived_draws(draws: PosteriorDraws, model,
                  derived: Iterable[str] = DERIVED) -> dict[str, np.ndarray]:
    """Derived quantities per draw, keyed by display name.

    Stratum-level prevalence, extra prevalence and N; yearly totals of N
    and the implied yearly prevalence are formed draw by draw, so their
    quantiles are not sums of stratum quantiles.
    """
    derived = set(derived)
    unknown = derived - set(DERIVED)
    if unknown:
        raise ValueError(f"unknown derived quantities {sorted(unknown)}")
    lat = model.latent(draws.draws)
    ds = model.dataset
    labels = stratum_labels(ds)
    out = {}
    for key, arr, tag in [("prev", lat.prev, "Prev"), ("prev_e", lat.prev_e, "Prev_e"),
                          ("N", lat.N, "N")]:
        if key in derived:
            for s, lab in enumerate(labels):
                out[f"{tag}[{lab}]"] = arr[..., s]
    if "yearly" in derived:
        N_y = yearly(lat.N, ds)
        ne_y = yearly(lat.n_e, ds)
        P_y = yearly(ds.P, ds)
        for y, lab in enumerate(ds.levels["year"]):
            out[f"N_year[{lab}]"] = N_y[..., y]
            out[f"Prev_year[{lab}]"] = N_y[..., y] / P_y[y]
            out[f"Prev_e_year[{lab}]"] = ne_y[..., y] / P_y[y]
    return out


def summarize(draws: PosteriorDraws, model=None, derived: Iterable[str] = DERIVED,
              parameters: bool = True, diagnostics: bool = True) -> SummaryTable:
    """Mean, median, equal-tailed 95% interval, R-hat and ESS.

    Without ``model`` only the sampled parameters are summarised.
    """
    if draws.draws.size == 0:
        raise ValueError("no draws to summarise")
    rows = []
    if parameters:
        for i, name in enumerate(draws.names):
            rows.append(summarize_array(name, draws.draws[:, :, i], "parameter",
                                        diagnostics))
    if model is not None:
        for name, x in constrained_draws(draws, model).items():
            rows.append(summarize_array(name, x, "constrained", diagnostics))
        for name, x in derived_draws(draws, model, derived).items():
            kind = "yearly" if "_year[" in name else "stratum"
            rows.append(summarize_array(name, x, kind, diagnostics))
    return SummaryTable(rows)


def yearly_series(draws: PosteriorDraws, model, source: str,
                  quantity: str = "Prev_year") -> list[dict]:
    """Plot-ready rows (year, source, estimate, lower, upper)."""
    rows = []
    for name, x in derived_draws(draws, model, ["yearly"]).items():
        if not name.startswith(quantity + "["):
            continue
        r = summarize_array(name, x, diagnostics=False)
        rows.append({"year": name[len(quantity) + 1:-1], "source": source,
                     "quantity": quantity, "estimate": r.mean, "median": r.median,
                     "lower": r.lower, "upper": r.upper})
    return rows
