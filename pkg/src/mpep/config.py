"""Model configuration: regressions, likelihood families, priors, extensions.

Configurations are read from TOML::

    events = ["deaths", "hospitalisations"]

    [model.deaths]
    family = "poisson"
    fixed = ["treatment", "sex", "age", "year", "region"]
    re = [["year", "treatment"]]

    [model.exit]
    fixed = ["sex", "age", "year", "region"]

    [model.prevalence]
    fixed = ["sex", "age", "year", "region"]

Term tokens are factor names (``treatment``, ``sex``, ``age``, ``year``,
``region``) or single age bands (``age2``, ``age3``); interactions are
written ``"sex:age"`` or as a list ``["sex", "age"]``.
"""

from __future__ import annotations

import copy
import hashlib
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import tomli
import tomli_w

FAMILIES = ("poisson", "nb", "zip", "zinb")
FACTOR_TOKENS = ("treatment", "sex", "age", "year", "region")
MAIN_EFFECTS = ("sex", "age", "year", "region")
EXIT = "exit"
PREVALENCE = "prevalence"
_BAND = re.compile(r"^age(\d+)$")


class ConfigError(ValueError):
    pass


Term = tuple[str, ...]


def parse_term(term) -> Term:
    if isinstance(term, str):
        parts = [p.strip() for p in term.split(":")]
    else:
        parts = [str(p).strip() for p in term]
    if not parts or any(not p for p in parts):
        raise ConfigError(f"malformed term {term!r}")
    for p in parts:
        if p not in FACTOR_TOKENS and not _BAND.match(p):
            raise ConfigError(f"term {term!r} references unknown factor {p!r}")
    if len(set(parts)) != len(parts):
        raise ConfigError(f"term {term!r} repeats a factor")
    return tuple(parts)


def base_factor(token: str) -> str:
    return "age" if _BAND.match(token) else token


def term_label(term: Term) -> str:
    return ":".join(term)


@dataclass(frozen=True)
class Regression:
    fixed: tuple[Term, ...]
    re: tuple[Term, ...] = ()
    family: Optional[str] = None

    def with_term(self, term: Term, random: bool) -> "Regression":
        if random:
            return replace(self, re=self.re + (term,))
        return replace(self, fixed=self.fixed + (term,))


@dataclass(frozen=True)
class Priors:
    fixed_sd: float = 10.0
    re_scale_sd: float = 1.0
    log_theta: tuple[float, float] = (0.0, 5.0)
    logit_pi: tuple[float, float] = (-3.0, 2.0)
    logit_prev_c: tuple[float, float] = (0.0, 10.0)
    bias_sd: float = 10.0
    logit_pmatch: Optional[tuple[float, float]] = None


@dataclass(frozen=True)
class BiasSpec:
    """Bias terms on the extra counts of ``event`` for strata matching ``where``.

    ``where`` maps a factor (``sex``, ``age_group``, ``year``, ``region``)
    to the level labels included; an empty mapping flags every stratum.
    """

    event: str
    where: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    shared: bool = False


@dataclass(frozen=True)
class ModelConfig:
    events: tuple[str, ...]
    rates: Mapping[str, Regression]
    exit: Regression
    prevalence: Regression
    priors: Priors = Priors()
    bias: tuple[BiasSpec, ...] = ()
    pmatch: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def submodels(self) -> tuple[str, ...]:
        """Sub-models carrying their own family parameters."""
        return self.events + (EXIT,)

    def family(self, submodel: str) -> str:
        if submodel == EXIT:
            return self.exit.family
        return self.rates[submodel].family

    def regression(self, name: str) -> Regression:
        if name == EXIT:
            return self.exit
        if name == PREVALENCE:
            return self.prevalence
        return self.rates[name]

    @property
    def regression_names(self) -> tuple[str, ...]:
        return self.events + (EXIT, PREVALENCE)

    def validate(self):
        if not self.events:
            raise ConfigError("at least one event type is required")
        if len(set(self.events)) != len(self.events):
            raise ConfigError("duplicate event types")
        if EXIT in self.events or PREVALENCE in self.events:
            raise ConfigError("event types may not be named 'exit' or 'prevalence'")
        if set(self.rates) != set(self.events):
            raise ConfigError(f"rate models {sorted(self.rates)} do not match "
                              f"events {list(self.events)}")
        for name in self.regression_names:
            reg = self.regression(name)
            is_rate = name in self.events
            if name != PREVALENCE and reg.family not in FAMILIES:
                raise ConfigError(f"{name}: family {reg.family!r} not in {FAMILIES}")
            mains = {t[0] for t in reg.fixed if len(t) == 1}
            required = set(MAIN_EFFECTS) | ({"treatment"} if is_rate else set())
            lacking = required - mains
            if lacking:
                raise ConfigError(f"{name}: regression must include all main "
                                  f"effects; missing {sorted(lacking)}")
            for t in reg.fixed + reg.re:
                if not is_rate and "treatment" in t:
                    raise ConfigError(f"{name}: treatment terms are only allowed in "
                                      f"event-rate regressions (got {term_label(t)})")
            for t in reg.re:
                if not ({"year", "region"} & set(t)) or len(t) < 2:
                    raise ConfigError(f"{name}: random-effect block {term_label(t)} "
                                      f"must be an interaction involving year or region")
            terms = reg.fixed + reg.re
            if len(set(terms)) != len(terms):
                raise ConfigError(f"{name}: duplicate term")
        for b in self.bias:
            if b.event not in self.events:
                raise ConfigError(f"bias on unknown event {b.event!r}")
        if self.pmatch and self.priors.logit_pmatch is None:
            raise ConfigError("pmatch requires an informative prior "
                              "(priors.logit_pmatch = [mean, sd])")

    def only_events(self, events: Sequence[str]) -> "ModelConfig":
        """Configuration restricted to a subset of event types."""
        events = tuple(events)
        unknown = set(events) - set(self.events)
        if unknown:
            raise ConfigError(f"unknown events {sorted(unknown)}")
        return replace(self, events=events,
                       rates={e: self.rates[e] for e in events},
                       bias=tuple(b for b in self.bias if b.event in events))

    def with_term(self, regression: str, term, random: bool = False) -> "ModelConfig":
        term = parse_term(term)
        reg = self.regression(regression).with_term(term, random)
        if regression == EXIT:
            return replace(self, exit=reg)
        if regression == PREVALENCE:
            return replace(self, prevalence=reg)
        rates = dict(self.rates)
        rates[regression] = reg
        return replace(self, rates=rates)

    def with_families(self, family: str) -> "ModelConfig":
        rates = {e: replace(r, family=family) for e, r in self.rates.items()}
        return replace(self, rates=rates, exit=replace(self.exit, family=family))

    def with_bias(self, *specs: BiasSpec) -> "ModelConfig":
        return replace(self, bias=self.bias + tuple(specs))

    def to_dict(self) -> dict:
        def reg(r: Regression, family=True):
            d = {"fixed": [term_label(t) for t in r.fixed],
                 "re": [list(t) for t in r.re]}
            if family:
                d = {"family": r.family, **d}
            return d
        p = self.priors
        priors = {"fixed_sd": p.fixed_sd, "re_scale_sd": p.re_scale_sd,
                  "log_theta": list(p.log_theta), "logit_pi": list(p.logit_pi),
                  "logit_prev_c": list(p.logit_prev_c), "bias_sd": p.bias_sd}
        if p.logit_pmatch is not None:
            priors["logit_pmatch"] = list(p.logit_pmatch)
        out = {"events": list(self.events),
               "model": {**{e: reg(self.rates[e]) for e in self.events},
                         EXIT: reg(self.exit),
                         PREVALENCE: reg(self.prevalence, family=False)},
               "priors": priors,
               "extensions": {"pmatch": self.pmatch}}
        if self.bias:
            out["extensions"]["bias"] = [
                {"event": b.event, "where": {k: list(v) for k, v in b.where.items()},
                 "shared": b.shared} for b in self.bias]
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()


def _regression(d: Mapping[str, Any], name: str, default_family) -> Regression:
    unknown = set(d) - {"family", "fixed", "re"}
    if unknown:
        raise ConfigError(f"model.{name}: unknown keys {sorted(unknown)}")
    fixed = tuple(parse_term(t) for t in d.get("fixed", MAIN_EFFECTS))
    re_ = tuple(parse_term(t) for t in d.get("re", ()))
    return Regression(fixed=fixed, re=re_, family=d.get("family", default_family))


def config_from_dict(d: Mapping[str, Any]) -> ModelConfig:
    d = copy.deepcopy(dict(d))
    models = d.get("model", {})
    events = d.get("events")
    if events is None:
        events = [k for k in models if k not in (EXIT, PREVALENCE)]
    events = tuple(events)
    default_family = d.get("family", "poisson")
    rates = {}
    for e in events:
        spec = dict(models.get(e, {}))
        spec.setdefault("fixed", ("treatment",) + MAIN_EFFECTS)
        rates[e] = _regression(spec, e, default_family)
    exit_ = _regression(models.get(EXIT, {}), EXIT, default_family)
    prev_spec = dict(models.get(PREVALENCE, {}))
    prev_spec.pop("family", None)
    prev = _regression(prev_spec, PREVALENCE, None)

    pd = dict(d.get("priors", {}))
    known = set(Priors.__dataclass_fields__)
    if set(pd) - known:
        raise ConfigError(f"priors: unknown keys {sorted(set(pd) - known)}")
    for k in ("log_theta", "logit_pi", "logit_prev_c", "logit_pmatch"):
        if k in pd:
            pd[k] = tuple(float(v) for v in pd[k])
            if len(pd[k]) != 2 or pd[k][1] <= 0:
                raise ConfigError(f"priors.{k} must be [mean, sd>0]")
    priors = Priors(**pd)

    ext = d.get("extensions", {})
    bias = []
    for b in ext.get("bias", []):
        where = {k: tuple(str(v) for v in (vals if isinstance(vals, list) else [vals]))
                 for k, vals in b.get("where", {}).items()}
        bias.append(BiasSpec(event=b["event"], where=where,
                             shared=bool(b.get("shared", False))))
    return ModelConfig(events=events, rates=rates, exit=exit_, prevalence=prev,
                       priors=priors, bias=tuple(bias),
                       pmatch=bool(ext.get("pmatch", False)))


def load_config(path) -> ModelConfig:
    with open(Path(path), "rb") as fh:
        try:
            d = tomli.load(fh)
        except tomli.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
    return config_from_dict(d)


def parse_config(text: str) -> ModelConfig:
    return config_from_dict(tomli.loads(text))


def main_effects_config(events: Sequence[str], family: str = "poisson",
                        **kwargs) -> ModelConfig:
    """All-main-effects configuration for the given event types."""
    rates = {e: Regression(fixed=tuple((t,) for t in ("treatment",) + MAIN_EFFECTS),
                           family=family) for e in events}
    mains = tuple((t,) for t in MAIN_EFFECTS)
    return ModelConfig(events=tuple(events), rates=rates,
                       exit=Regression(fixed=mains, family=family),
                       prevalence=Regression(fixed=mains), **kwargs)
