"""Fit orchestration: build the model, sample, apply the convergence gate."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np

from .config import ModelConfig
from .data import StrataDataset
from .diagnostics import DevianceReport, deviance_report
from .likelihood import Model
from .sampler import PosteriorDraws, SamplerConfig, run_chains
from .summary import GateResult, SummaryTable, convergence_gate, summarize

log = logging.getLogger(__name__)


@dataclass
class Fit:
    config: ModelConfig
    dataset: StrataDataset
    model: Model
    draws: PosteriorDraws
    gate: GateResult
    sampler: SamplerConfig
    seconds: float
    n_floor: int = 0
    n_over: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.gate.passed

    @cached_property
    def deviance(self) -> DevianceReport:
        return deviance_report(self.draws, self.model)

    def summary(self, **kwargs) -> SummaryTable:
        return summarize(self.draws, self.model, **kwargs)

    def warning_counts(self) -> dict:
        return {"divergences": int(self.draws.divergences.sum()),
                "divergence_rate": self.draws.divergence_rate,
                "n_e_below_t_d": self.n_floor,
                "prevalence_sum_at_least_one": self.n_over}


def fit_model(config: ModelConfig, dataset: StrataDataset,
              sampler: Optional[SamplerConfig] = None, **overrides) -> Fit:
    """Sample the posterior of ``config`` on ``dataset``.

    ``overrides`` replace fields of ``sampler`` (e.g. ``seed=3``).
    Floor and prevalence-sum events are counted over stored draws, one
    per (draw, stratum) occurrence.
    """
    sampler = replace(sampler or SamplerConfig(), **overrides)
    model = Model(config, dataset)
    t0 = time.perf_counter()
    draws = run_chains(model, sampler)
    seconds = time.perf_counter() - t0
    n_floor = n_over = 0
    for q in draws.flat():
        a, b = model.stats(np.ascontiguousarray(q))
        n_floor += a
        n_over += b
    gate = convergence_gate(draws)
    warnings = []
    if draws.flagged:
        warnings.append(f"{100 * draws.divergence_rate:.2f}% divergent transitions")
    if n_floor:
        warnings.append(f"extra population fell below extra-death person-time in "
                        f"{n_floor} draw-strata")
    if n_over:
        warnings.append(f"cohort plus extra prevalence reached 1 in {n_over} draw-strata")
    if not gate.passed:
        warnings.append(f"convergence gate failed: max R-hat {gate.max_rhat:.3f}, "
                        f"min bulk ESS {gate.min_ess_bulk:.0f}, "
                        f"min tail ESS {gate.min_ess_tail:.0f}")
    for w in warnings:
        log.warning(w)
    return Fit(config, dataset, model, draws, gate, sampler, seconds, n_floor, n_over,
               warnings)
