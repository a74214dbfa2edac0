"""Stratified input data: cohort sizes, person-time and event counts.

A dataset is a complete cross-classification sex x age group x year x
region.  Strata are stored in row-major order over the four factors
(region varies fastest), with every per-stratum quantity held as a numpy
array so the likelihood can work on whole columns at once.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

FACTORS = ("sex", "age_group", "year", "region")
BASE_COLUMNS = ("n_c", "P", "t_on", "t_off", "t_o", "x_o", "t_d")
EVENT_PREFIXES = ("x_c_on_", "x_c_off_", "x_e_")
_INT_TOL = 1e-9


class DatasetError(ValueError):
    pass


class StratumKey(NamedTuple):
    """Level indices of one stratum."""

    sex: int
    age_group: int
    year: int
    region: int


@dataclass(frozen=True)
class StratumCounts:
    n_c: int
    P: int
    t_on: float
    t_off: float
    x_c: Mapping[str, tuple[int, int]]  # event -> (on, off)
    x_o: int
    t_o: float
    x_e: Mapping[str, int]
    t_d: float


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StrataDataset:
    """Validated per-stratum inputs.

    ``levels`` maps each factor in ``FACTORS`` to its level labels, the
    first label being the baseline.  Event-indexed arrays have shape
    ``(n_events, n_strata)``.
    """

    levels: Mapping[str, tuple[str, ...]]
    events: tuple[str, ...]
    deaths_event: Optional[str]
    n_c: np.ndarray
    P: np.ndarray
    t_on: np.ndarray
    t_off: np.ndarray
    t_o: np.ndarray
    x_o: np.ndarray
    t_d: np.ndarray
    x_c_on: np.ndarray
    x_c_off: np.ndarray
    x_e: np.ndarray
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("n_c", "P", "t_on", "t_off", "t_o", "x_o", "t_d"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        for name in ("x_c_on", "x_c_off", "x_e"):
            arr = _readonly(np.atleast_2d(getattr(self, name)))
            if arr.shape != (len(self.events), self.n_strata):
                raise DatasetError(f"{name} has shape {arr.shape}, expected "
                                   f"{(len(self.events), self.n_strata)}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "levels",
                           {f: tuple(str(v) for v in self.levels[f]) for f in FACTORS})
        object.__setattr__(self, "events", tuple(self.events))
        if self.deaths_event is not None and self.deaths_event not in self.events:
            raise DatasetError(f"deaths event {self.deaths_event!r} not among "
                               f"event types {self.events}")
        object.__setattr__(self, "_index",
                           {k: i for i, k in enumerate(self.keys())})
        validate(self)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(len(self.levels[f]) for f in FACTORS)

    @property
    def n_strata(self) -> int:
        return int(np.prod(self.shape))

    def keys(self) -> list[StratumKey]:
        return [StratumKey(*idx) for idx in itertools.product(*map(range, self.shape))]

    def factor_codes(self) -> dict[str, np.ndarray]:
        """Level index of every factor for each stratum."""
        grids = np.indices(self.shape).reshape(4, -1)
        return {f: grids[i] for i, f in enumerate(FACTORS)}

    def labels(self, key: StratumKey) -> tuple[str, ...]:
        return tuple(self.levels[f][k] for f, k in zip(FACTORS, key))

    def event_index(self, event: str) -> int:
        try:
            return self.events.index(event)
        except ValueError:
            raise DatasetError(f"unknown event type {event!r}") from None

    def __len__(self):
        return self.n_strata

    def __getitem__(self, key) -> StratumCounts:
        s = self._index[StratumKey(*key)]
        return StratumCounts(
            n_c=int(self.n_c[s]), P=int(self.P[s]),
            t_on=float(self.t_on[s]), t_off=float(self.t_off[s]),
            x_c={e: (int(self.x_c_on[i, s]), int(self.x_c_off[i, s]))
                 for i, e in enumerate(self.events)},
            x_o=int(self.x_o[s]), t_o=float(self.t_o[s]),
            x_e={e: int(self.x_e[i, s]) for i, e in enumerate(self.events)},
            t_d=float(self.t_d[s]))

    def rows(self):
        for key in self.keys():
            yield key, self[key]

    def with_events(self, x_e=None, x_c_on=None, x_c_off=None) -> "StrataDataset":
        """Copy with replaced event-count arrays."""
        return StrataDataset(
            levels=self.levels, events=self.events, deaths_event=self.deaths_event,
            n_c=self.n_c, P=self.P, t_on=self.t_on, t_off=self.t_off, t_o=self.t_o,
            x_o=self.x_o, t_d=self.t_d,
            x_c_on=self.x_c_on if x_c_on is None else x_c_on,
            x_c_off=self.x_c_off if x_c_off is None else x_c_off,
            x_e=self.x_e if x_e is None else x_e)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = list(FACTORS) + list(BASE_COLUMNS)
        for e in self.events:
            header += [p + e for p in EVENT_PREFIXES]
        w.writerow(header)
        for s, key in enumerate(self.keys()):
            row = list(self.labels(key))
            row += [_fmt_int(self.n_c[s]), _fmt_int(self.P[s]), _fmt(self.t_on[s]),
                    _fmt(self.t_off[s]), _fmt(self.t_o[s]), _fmt_int(self.x_o[s]),
                    _fmt(self.t_d[s])]
            for i in range(len(self.events)):
                row += [_fmt_int(self.x_c_on[i, s]), _fmt_int(self.x_c_off[i, s]),
                        _fmt_int(self.x_e[i, s])]
            w.writerow(row)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


def _fmt(v) -> str:
    return repr(float(v))


def _fmt_int(v) -> str:
    return str(int(round(float(v))))


def _where(ds: StrataDataset, s: int) -> str:
    key = ds.keys()[s]
    return f"stratum {dict(zip(FACTORS, ds.labels(key)))}"


def validate(ds: StrataDataset) -> None:
    """Check the per-stratum invariants; raise DatasetError on the first breach."""
    counts = {"n_c": ds.n_c, "P": ds.P, "x_o": ds.x_o}
    for i, e in enumerate(ds.events):
        counts[f"x_c_on_{e}"] = ds.x_c_on[i]
        counts[f"x_c_off_{e}"] = ds.x_c_off[i]
        counts[f"x_e_{e}"] = ds.x_e[i]
    times = {"t_on": ds.t_on, "t_off": ds.t_off, "t_o": ds.t_o, "t_d": ds.t_d}
    for name, arr in {**counts, **times}.items():
        bad = np.flatnonzero(~np.isfinite(arr) | (arr < 0))
        if bad.size:
            raise DatasetError(f"{_where(ds, bad[0])}: {name} = {arr[bad[0]]} "
                               f"is negative or not finite")
    for name, arr in counts.items():
        bad = np.flatnonzero(np.abs(arr - np.round(arr)) > _INT_TOL)
        if bad.size:
            raise DatasetError(f"{_where(ds, bad[0])}: {name} = {arr[bad[0]]} "
                               f"is not an integer count")
    bad = np.flatnonzero(ds.n_c > ds.P)
    if bad.size:
        raise DatasetError(f"{_where(ds, bad[0])}: cohort size n_c exceeds "
                           f"population P")
    slack = 1e-9 * np.maximum(ds.n_c, 1.0)
    bad = np.flatnonzero(ds.t_on + ds.t_off > ds.n_c + slack)
    if bad.size:
        raise DatasetError(f"{_where(ds, bad[0])}: t_on + t_off exceeds n_c "
                           f"(at most one person-year per person)")
    if ds.deaths_event is not None:
        xd = ds.x_e[ds.events.index(ds.deaths_event)]
        bad = np.flatnonzero(ds.t_d > xd + 1e-12)
        if bad.size:
            s = bad[0]
            raise DatasetError(
                f"{_where(ds, s)}: t_d = {ds.t_d[s]} exceeds extra deaths "
                f"x_e_{ds.deaths_event} = {xd[s]:g} (pre-death person-time of "
                f"extra deaths cannot exceed their number)")


def _sort_levels(factor: str, labels: Sequence[str]) -> tuple[str, ...]:
    labels = list(dict.fromkeys(labels))
    try:
        return tuple(sorted(labels, key=lambda v: float(v)))
    except ValueError:
        pass
    if factor == "sex":
        low = [v.lower() for v in labels]
        if "female" in low:
            labels.sort(key=lambda v: v.lower() != "female")
            return tuple(labels)
    return tuple(sorted(labels))


def _parse_number(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetError(f"row {row}: column {column!r} value {text!r} is not "
                           f"a number") from None


def load_dataset(path, deaths_event: Optional[str] = "auto",
                 levels: Optional[Mapping[str, Sequence[str]]] = None) -> StrataDataset:
    """Read and validate a stratified CSV file.

    Parameters
    ----------
    path : path-like
        CSV with columns ``sex,age_group,year,region,n_c,P,t_on,t_off,t_o,x_o,t_d``
        followed by ``x_c_on_E,x_c_off_E,x_e_E`` for each event type ``E``.
    deaths_event : str, None or "auto"
        Event type whose extra counts bound ``t_d``.  ``"auto"`` picks an
        event literally named ``deaths`` when present.
    levels : mapping, optional
        Explicit level order per factor (first is the baseline).  Factors
        not given are ordered numerically when possible, otherwise
        lexicographically, with ``female`` first for sex.
    """
    text = Path(path).read_text(encoding="utf-8")
    return parse_dataset(text, deaths_event=deaths_event, levels=levels)


def parse_dataset(text: str, deaths_event: Optional[str] = "auto",
                  levels: Optional[Mapping[str, Sequence[str]]] = None) -> StrataDataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DatasetError("empty file: header row is mandatory") from None
    missing = [c for c in FACTORS + BASE_COLUMNS if c not in header]
    if missing:
        raise DatasetError(f"header lacks required columns {missing}")
    events = [h[len("x_e_"):] for h in header if h.startswith("x_e_")]
    if not events:
        raise DatasetError("no event columns (x_e_<event>) in header")
    for e in events:
        for p in EVENT_PREFIXES:
            if p + e not in header:
                raise DatasetError(f"event {e!r} lacks column {p + e!r}")
    col = {h: i for i, h in enumerate(header)}

    records = []
    for lineno, raw in enumerate(reader, start=2):
        if not raw or all(not c.strip() for c in raw):
            continue
        if len(raw) != len(header):
            raise DatasetError(f"row {lineno}: expected {len(header)} cells, "
                               f"got {len(raw)}")
        records.append((lineno, [c.strip() for c in raw]))
    if not records:
        raise DatasetError("no data rows")

    lev = {}
    for f in FACTORS:
        seen = [r[col[f]] for _, r in records]
        if levels and f in levels:
            lev[f] = tuple(str(v) for v in levels[f])
            unknown = set(seen) - set(lev[f])
            if unknown:
                raise DatasetError(f"factor {f}: labels {sorted(unknown)} not in "
                                   f"declared levels {lev[f]}")
        else:
            lev[f] = _sort_levels(f, seen)
    shape = tuple(len(lev[f]) for f in FACTORS)
    pos = {f: {v: i for i, v in enumerate(lev[f])} for f in FACTORS}
    strides = np.array([int(np.prod(shape[i + 1:])) for i in range(4)])

    n = int(np.prod(shape))
    E = len(events)
    base = {c: np.full(n, np.nan) for c in BASE_COLUMNS}
    ev = {p: np.full((E, n), np.nan) for p in EVENT_PREFIXES}
    filled = np.zeros(n, dtype=int)
    for lineno, r in records:
        key = tuple(pos[f][r[col[f]]] for f in FACTORS)
        s = int(np.dot(key, strides))
        if filled[s]:
            raise DatasetError(f"row {lineno}: duplicate stratum "
                               f"{dict(zip(FACTORS, (r[col[f]] for f in FACTORS)))} "
                               f"(first given on row {filled[s]})")
        filled[s] = lineno
        for c in BASE_COLUMNS:
            cell = r[col[c]]
            if c == "t_o" and cell == "":
                continue
            if cell == "":
                raise DatasetError(f"row {lineno}: empty cell in column {c!r}")
            base[c][s] = _parse_number(cell, lineno, c)
        if np.isnan(base["t_o"][s]):
            base["t_o"][s] = base["t_off"][s]
        for i, e in enumerate(events):
            for p in EVENT_PREFIXES:
                cell = r[col[p + e]]
                if cell == "":
                    raise DatasetError(f"row {lineno}: empty cell in column {p + e!r}")
                ev[p][i, s] = _parse_number(cell, lineno, p + e)

    absent = np.flatnonzero(filled == 0)
    if absent.size:
        idx = np.unravel_index(absent[0], shape)
        key = {f: lev[f][k] for f, k in zip(FACTORS, idx)}
        raise DatasetError(f"missing stratum {key}: the cross-classification is "
                           f"incomplete ({absent.size} of {n} strata absent)")

    if deaths_event == "auto":
        deaths_event = "deaths" if "deaths" in events else None
    try:
        return StrataDataset(
            levels=lev, events=tuple(events), deaths_event=deaths_event,
            n_c=base["n_c"], P=base["P"], t_on=base["t_on"], t_off=base["t_off"],
            t_o=base["t_o"], x_o=base["x_o"], t_d=base["t_d"],
            x_c_on=ev["x_c_on_"], x_c_off=ev["x_c_off_"], x_e=ev["x_e_"])
    except DatasetError as err:
        # map the stratum back to its file row
        msg = str(err)
        for lineno, r in records:
            label = str({f: r[col[f]] for f in FACTORS})
            if label in msg:
                raise DatasetError(f"row {lineno}: {msg}") from None
        raise


def save_dataset(ds: StrataDataset, path) -> None:
    Path(path).write_text(ds.to_csv(), encoding="utf-8")
