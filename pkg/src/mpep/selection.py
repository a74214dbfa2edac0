"""Forward stepwise selection of regression terms by ResDev + pD."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .config import PREVALENCE, ConfigError, ModelConfig, parse_term, term_label
from .data import StrataDataset
from .sampler import SamplerConfig

log = logging.getLogger(__name__)

RETAIN_THRESHOLD = 3.0


@dataclass(frozen=True)
class Candidate:
    regression: str
    term: tuple
    random: bool = False

    @classmethod
    def parse(cls, obj) -> "Candidate":
        """From a mapping ``{regression, term, random}`` or ``"reg:term"``-style
        string such as ``"deaths:year:treatment"``."""
        if isinstance(obj, Candidate):
            return obj
        if isinstance(obj, str):
            reg, _, term = obj.partition(":")
            if not term:
                raise ConfigError(f"candidate {obj!r} must look like 'regression:term'")
            return cls(reg, parse_term(term))
        unknown = set(obj) - {"regression", "term", "random"}
        if unknown:
            raise ConfigError(f"unknown candidate keys {sorted(unknown)}")
        return cls(obj["regression"], parse_term(obj["term"]), bool(obj.get("random", False)))

    @property
    def label(self) -> str:
        kind = "re" if self.random else "fixed"
        return f"{self.regression}:{term_label(self.term)} ({kind})"


@dataclass
class TraceRow:
    candidate: str
    regression: str
    term: str
    random: bool
    resdev: Optional[float]
    pd: Optional[float]
    dic: Optional[float]
    score: Optional[float]
    change: Optional[float]
    converged: bool
    retained: bool
    note: str = ""


@dataclass
class SelectionResult:
    config: ModelConfig
    trace: list[TraceRow]
    base: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"base": self.base, "trace": [asdict(r) for r in self.trace],
                "selected": self.config.to_dict()}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def order_candidates(candidates: Iterable) -> list[Candidate]:
    """Event-rate and exit candidates first, prevalence last; otherwise
    the declared order is kept."""
    cands = [Candidate.parse(c) for c in candidates]
    return ([c for c in cands if c.regression != PREVALENCE]
            + [c for c in cands if c.regression == PREVALENCE])


def _score(fit) -> tuple[float, float, float]:
    dev = fit.deviance
    return dev.resdev, dev.pd, dev.dic


def stepwise_select(base: ModelConfig, candidates: Sequence, dataset: StrataDataset,
                    sampler: Optional[SamplerConfig] = None,
                    threshold: float = RETAIN_THRESHOLD,
                    fit: Optional[Callable] = None) -> SelectionResult:
    """Add candidate terms one at a time, keeping those that improve the fit.

    A term is kept when posterior mean residual deviance plus pD falls by
    at least ``threshold``.  Fits failing the convergence gate are never
    kept and are flagged in the trace.  ``fit`` defaults to
    :func:`mpep.fitting.fit_model`; any callable ``(config, dataset,
    sampler) -> Fit`` works.
    """
    if fit is None:
        from .fitting import fit_model as fit
    sampler = sampler or SamplerConfig()
    cands = order_candidates(candidates)
    for c in cands:
        # admissibility up front, so a bad candidate fails before any fitting
        base.with_term(c.regression, c.term, c.random)

    current = base
    trace: list[TraceRow] = []
    if not cands:
        return SelectionResult(base, trace, {})
    f = fit(current, dataset, sampler)
    resdev, pd, dic = _score(f)
    best = resdev + pd
    base_info = {"resdev": resdev, "pd": pd, "dic": dic, "score": best,
                 "converged": f.converged}
    if not f.converged:
        log.warning("base model failed the convergence gate")

    for c in cands:
        row = dict(candidate=c.label, regression=c.regression, term=term_label(c.term),
                   random=c.random)
        try:
            trial = current.with_term(c.regression, c.term, c.random)
        except ConfigError as exc:
            trace.append(TraceRow(**row, resdev=None, pd=None, dic=None, score=None,
                                  change=None, converged=False, retained=False,
                                  note=f"skipped: {exc}"))
            continue
        f = fit(trial, dataset, sampler)
        resdev, pd, dic = _score(f)
        score = resdev + pd
        change = score - best
        keep = f.converged and change <= -threshold
        note = "" if f.converged else "not converged; term skipped"
        trace.append(TraceRow(**row, resdev=resdev, pd=pd, dic=dic, score=score,
                              change=change, converged=f.converged, retained=keep,
                              note=note))
        if keep:
            current, best = trial, score
    return SelectionResult(current, trace, base_info)
