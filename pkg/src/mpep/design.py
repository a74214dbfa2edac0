"""Design matrices and the flat parameter layout.

Every regression gets dummy-coded fixed effects (baselines absorbed into
the intercept) and zero or more random-effect blocks.  A random-effect
block has one exchangeable level per non-baseline cell of its
interaction, a shared scale, and a non-centred parameterisation: the
level value is ``exp(log_scale) * raw`` with ``raw ~ Normal(0, 1)``.

Rows of an event-rate regression are ``(status, stratum)`` pairs, all
off-treatment rows first; the exit and prevalence regressions have one
row per stratum.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import (EXIT, PREVALENCE, ConfigError, ModelConfig, Term,
                     base_factor, term_label)
from .data import FACTORS, StrataDataset

_FACTOR_FIELD = {"sex": "sex", "age": "age_group", "year": "year", "region": "region"}

# prior kinds understood by the likelihood kernel
PRIOR_NORMAL = 0
PRIOR_HALF_NORMAL_LOG = 1  # half-normal on exp(q), with log-Jacobian


@dataclass(frozen=True)
class Block:
    name: str
    start: int
    size: int
    kind: str
    names: tuple[str, ...]

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


@dataclass
class ParameterIndex:
    """Named partition of the flat unconstrained parameter vector."""

    blocks: list[Block] = field(default_factory=list)
    prior_kind: list[int] = field(default_factory=list)
    prior_a: list[float] = field(default_factory=list)
    prior_b: list[float] = field(default_factory=list)

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def add(self, name, kind, names, prior=(PRIOR_NORMAL, 0.0, 1.0)) -> Block:
        if name in self:
            raise ValueError(f"duplicate parameter block {name!r}")
        block = Block(name, self.size, len(names), kind, tuple(names))
        self.blocks.append(block)
        k, a, b = prior
        self.prior_kind += [k] * block.size
        self.prior_a += [a] * block.size
        self.prior_b += [b] * block.size
        return block

    def __contains__(self, name):
        return any(b.name == name for b in self.blocks)

    def __getitem__(self, name) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [n for b in self.blocks for n in b.names]

    def position(self, name: str) -> int:
        return self.names.index(name)

    def of_kind(self, kind: str) -> list[Block]:
        return [b for b in self.blocks if b.kind == kind]

    def check_partition(self):
        pos = 0
        for b in self.blocks:
            if b.start != pos or b.size != len(b.names):
                raise AssertionError(f"block {b.name} breaks the partition")
            pos += b.size
        if len(set(self.names)) != len(self.names):
            raise AssertionError("duplicate parameter names")


@dataclass(frozen=True)
class REBlock:
    label: str
    Z: np.ndarray
    levels: tuple[str, ...]
    raw: Block
    log_scale: Block


@dataclass(frozen=True)
class RegressionDesign:
    name: str
    X: np.ndarray
    columns: tuple[str, ...]
    beta: Block
    re: tuple[REBlock, ...]

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]


@dataclass
class Design:
    config: ModelConfig
    dataset: StrataDataset
    regressions: dict[str, RegressionDesign]
    index: ParameterIndex
    event_pos: np.ndarray          # dataset row of each configured event
    family: dict[str, Block]       # "<submodel>.log_theta" etc.
    bias_q: np.ndarray             # (n_events, n_strata), -1 where unflagged
    pmatch_q: int
    prev_c: Block
    # CSR over all regressions, for the kernel
    row_offset: dict[str, int] = field(default_factory=dict)
    csr_ptr: Optional[np.ndarray] = None
    csr_col: Optional[np.ndarray] = None
    csr_val: Optional[np.ndarray] = None
    col_q: Optional[np.ndarray] = None
    col_scale_q: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.index.size

    @property
    def names(self) -> list[str]:
        return self.index.names

    @property
    def n_strata(self) -> int:
        return self.dataset.n_strata


def _row_codes(ds: StrataDataset, rate: bool) -> dict[str, np.ndarray]:
    codes = ds.factor_codes()
    out = {f: codes[_FACTOR_FIELD[f]] for f in ("sex", "age", "year", "region")}
    if rate:
        S = ds.n_strata
        out = {f: np.concatenate([v, v]) for f, v in out.items()}
        out["treatment"] = np.repeat([0, 1], S)
    return out


def _token_columns(token: str, codes, ds: StrataDataset):
    if token == "treatment":
        return [("treatment[on]", (codes["treatment"] == 1).astype(float))]
    factor = base_factor(token)
    levels = ds.levels[_FACTOR_FIELD[factor]]
    if token != factor:
        band = int(token[3:])
        if not 2 <= band <= len(levels):
            raise ConfigError(f"age band {token!r} outside 2..{len(levels)}")
        ks = [band - 1]
    else:
        ks = range(1, len(levels))
    return [(f"{factor}[{levels[k]}]", (codes[factor] == k).astype(float)) for k in ks]


def _term_columns(term: Term, codes, ds):
    parts = [_token_columns(t, codes, ds) for t in term]
    cols = []
    for combo in itertools.product(*parts):
        label = ":".join(c[0] for c in combo)
        vec = np.prod([c[1] for c in combo], axis=0)
        cols.append((label, vec))
    return cols


def build_design(config: ModelConfig, dataset: StrataDataset) -> Design:
    """Dummy-code every regression and lay out the parameter vector."""
    for e in config.events:
        if e not in dataset.events:
            raise ConfigError(f"event {e!r} not in dataset events {dataset.events}")
    pri = config.priors
    index = ParameterIndex()
    regs = {}
    for name in config.regression_names:
        reg = config.regression(name)
        codes = _row_codes(dataset, rate=name in config.events)
        n_rows = len(codes["sex"])
        labels, vecs = ["intercept"], [np.ones(n_rows)]
        for term in reg.fixed:
            for label, vec in _term_columns(term, codes, dataset):
                labels.append(label)
                vecs.append(vec)
        X = np.column_stack(vecs)
        rank = np.linalg.matrix_rank(X)
        if rank < X.shape[1]:
            raise ConfigError(f"{name}: fixed-effect design is rank deficient "
                              f"({rank} < {X.shape[1]} columns)")
        beta = index.add(f"{name}.beta", "beta", [f"{name}.{c}" for c in labels],
                         (PRIOR_NORMAL, 0.0, pri.fixed_sd))
        blocks = []
        for term in reg.re:
            cols = _term_columns(term, codes, dataset)
            if not cols:
                raise ConfigError(f"{name}: random-effect block {term_label(term)} "
                                  f"has no levels for this dataset")
            label = term_label(term)
            raw = index.add(f"{name}.re[{label}].raw", "re_raw",
                            [f"{name}.re[{label}].{c[0]}" for c in cols],
                            (PRIOR_NORMAL, 0.0, 1.0))
            ls = index.add(f"{name}.re[{label}].log_scale", "re_log_scale",
                           [f"{name}.re[{label}].log_scale"],
                           (PRIOR_HALF_NORMAL_LOG, 0.0, pri.re_scale_sd))
            blocks.append(REBlock(label, np.column_stack([c[1] for c in cols]),
                                  tuple(c[0] for c in cols), raw, ls))
        regs[name] = RegressionDesign(name, X, tuple(labels), beta, tuple(blocks))

    family = {}
    for sub in config.submodels:
        fam = config.family(sub)
        if fam in ("nb", "zinb"):
            family[f"{sub}.log_theta"] = index.add(
                f"{sub}.log_theta", "log_theta", [f"{sub}.log_theta"],
                (PRIOR_NORMAL, *pri.log_theta))
        if fam in ("zip", "zinb"):
            family[f"{sub}.logit_pi"] = index.add(
                f"{sub}.logit_pi", "logit_pi", [f"{sub}.logit_pi"],
                (PRIOR_NORMAL, *pri.logit_pi))

    S = dataset.n_strata
    E = len(config.events)
    bias_q = np.full((E, S), -1, dtype=np.int64)
    codes = dataset.factor_codes()
    for spec in config.bias:
        e = config.events.index(spec.event)
        mask = np.ones(S, dtype=bool)
        for factor, wanted in spec.where.items():
            fname = _FACTOR_FIELD.get(factor, factor)
            if fname not in FACTORS:
                raise ConfigError(f"bias predicate on unknown factor {factor!r}")
            levels = dataset.levels[fname]
            bad = set(wanted) - set(levels)
            if bad:
                raise ConfigError(f"bias predicate: unknown {fname} levels {sorted(bad)}")
            mask &= np.isin(codes[fname], [levels.index(w) for w in wanted])
        cells = np.flatnonzero(mask & (bias_q[e] < 0))
        if cells.size == 0:
            raise ConfigError(f"bias on {spec.event}: predicate selects no new strata")
        keys = dataset.keys()
        tag = f"bias.{spec.event}"
        n_existing = sum(1 for b in index.blocks if b.name.startswith(tag))
        name = tag if n_existing == 0 else f"{tag}#{n_existing + 1}"
        if spec.shared:
            blk = index.add(name, "bias", [name], (PRIOR_NORMAL, 0.0, pri.bias_sd))
            bias_q[e, cells] = blk.start
        else:
            blk = index.add(name, "bias",
                            [f"{name}[{','.join(dataset.labels(keys[s]))}]" for s in cells],
                            (PRIOR_NORMAL, 0.0, pri.bias_sd))
            bias_q[e, cells] = blk.start + np.arange(cells.size)

    pmatch_q = -1
    if config.pmatch:
        pmatch_q = index.add("logit_pmatch", "logit_pmatch", ["logit_pmatch"],
                             (PRIOR_NORMAL, *pri.logit_pmatch)).start

    keys = dataset.keys()
    prev_c = index.add("logit_prev_c", "logit_prev_c",
                       [f"logit_prev_c[{','.join(dataset.labels(k))}]" for k in keys],
                       (PRIOR_NORMAL, *pri.logit_prev_c))
    index.check_partition()

    design = Design(config=config, dataset=dataset, regressions=regs, index=index,
                    event_pos=np.array([dataset.event_index(e) for e in config.events]),
                    family=family, bias_q=bias_q, pmatch_q=pmatch_q, prev_c=prev_c)
    _compile_csr(design)
    return design


def _compile_csr(design: Design):
    ptr, cols, vals = [0], [], []
    col_q, col_scale_q = [], []
    row = 0
    for name in design.config.regression_names:
        rd = design.regressions[name]
        design.row_offset[name] = row
        col0 = len(col_q)
        col_q += list(range(rd.beta.start, rd.beta.start + rd.beta.size))
        col_scale_q += [-1] * rd.beta.size
        mats = [rd.X]
        for blk in rd.re:
            col_q += list(range(blk.raw.start, blk.raw.start + blk.raw.size))
            col_scale_q += [blk.log_scale.start] * blk.raw.size
            mats.append(blk.Z)
        M = np.hstack(mats)
        for i in range(M.shape[0]):
            nz = np.flatnonzero(M[i])
            cols += list(col0 + nz)
            vals += list(M[i, nz])
            ptr.append(len(cols))
        row += M.shape[0]
    design.csr_ptr = np.array(ptr, dtype=np.int64)
    design.csr_col = np.array(cols, dtype=np.int64)
    design.csr_val = np.array(vals, dtype=float)
    design.col_q = np.array(col_q, dtype=np.int64)
    design.col_scale_q = np.array(col_scale_q, dtype=np.int64)


def linear_predictor(design: Design, params, regression: str) -> np.ndarray:
    """Linear predictor of one regression.

    ``params`` may be a single flat vector or an array of vectors
    (last axis is the parameter axis); the result then has matching
    leading axes.
    """
    q = np.asarray(params, dtype=float)
    if q.shape[-1] != design.dim:
        raise ValueError(f"parameter vector has length {q.shape[-1]}, "
                         f"expected {design.dim}")
    rd = design.regressions[regression]
    eta = q[..., rd.beta.slice] @ rd.X.T
    for blk in rd.re:
        values = np.exp(q[..., blk.log_scale.start])[..., None] * q[..., blk.raw.slice]
        eta = eta + values @ blk.Z.T
    return eta


def rate(design: Design, params, regression: str) -> np.ndarray:
    return np.exp(linear_predictor(design, params, regression))


def prevalence_extra(design: Design, params) -> np.ndarray:
    eta = linear_predictor(design, params, PREVALENCE)
    return 1.0 / (1.0 + np.exp(-eta))


def column_index(design: Design, regression: str, column: str) -> int:
    """Flat position of a fixed-effect coefficient."""
    rd = design.regressions[regression]
    return rd.beta.start + rd.columns.index(column)


__all__ = ["Block", "Design", "ParameterIndex", "RegressionDesign", "REBlock",
           "build_design", "linear_predictor", "rate", "prevalence_extra",
           "column_index", "EXIT", "PREVALENCE"]
