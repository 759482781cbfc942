"""Bounded probabilistic programs over a fixed, topologically ordered set of sites.

A program is a DAG of named random choices. Each site is either categorical
(values are state indices ``0..k-1``) or continuous (real values). Sampling
and density evaluation are vectorised over a batch: a batch of assignments
is an ``(n, N)`` float array in site order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from ._rng import stream
from .errors import ValidationError

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"

MAX_ENUMERATION = 2**20
_ROW_TOL = 1e-9
_LOG_2PI = math.log(2.0 * math.pi)


# -- conditional distributions -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CategoricalTable:
    """One probability row per joint parent configuration.

    Rows are ordered mixed-radix over the site's parents, first parent most
    significant.
    """

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ValidationError("categorical table must be 2-D (rows x states)")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __eq__(self, other):
        return isinstance(other, CategoricalTable) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())


@dataclass(frozen=True)
class GaussianConst:
    mean: float
    std: float


@dataclass(frozen=True)
class GaussianLinear:
    """Gaussian whose mean is a parent's value; std is a constant or another parent."""

    mean_parent: str
    std: float | None = None
    std_parent: str | None = None


@dataclass(frozen=True)
class GammaConst:
    shape: float
    rate: float


@dataclass(frozen=True)
class BranchBernoulliGaussian:
    """``Bernoulli(|x|)`` emitting 0.0/1.0 if ``|x| < threshold``, else ``Gaussian(x, s)``.

    ``x`` is the value of ``source`` and ``s`` the value of ``std_parent``.
    """

    source: str
    std_parent: str
    threshold: float = 1.0


ConditionalDist = Union[
    CategoricalTable, GaussianConst, GaussianLinear, GammaConst, BranchBernoulliGaussian
]


# -- program structure ---------------------------------------------------------------


@dataclass(frozen=True)
class SiteSpec:
    name: str
    kind: str
    parents: tuple[str, ...]
    dist: ConditionalDist
    arity: int | None = None
    proposable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(self.parents))
        if self.kind == CATEGORICAL:
            if self.arity is None or int(self.arity) < 2:
                raise ValidationError(f"site {self.name!r}: categorical arity must be >= 2")
            object.__setattr__(self, "arity", int(self.arity))
            if not isinstance(self.dist, CategoricalTable):
                raise ValidationError(f"site {self.name!r}: categorical site needs a CategoricalTable")
        elif self.kind == CONTINUOUS:
            if self.arity is not None:
                raise ValidationError(f"site {self.name!r}: continuous site has no arity")
            if isinstance(self.dist, CategoricalTable):
                raise ValidationError(f"site {self.name!r}: continuous site cannot use a table")
        else:
            raise ValidationError(f"site {self.name!r}: unknown kind {self.kind!r}")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL


@dataclass(frozen=True)
class ProgramSpec:
    name: str
    sites: tuple[SiteSpec, ...]
    _index: dict = field(init=False, repr=False, compare=False)
    _parent_idx: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if not self.sites:
            raise ValidationError("program has no sites")
        index: dict[str, int] = {}
        parent_idx = []
        for i, site in enumerate(self.sites):
            if site.name in index:
                raise ValidationError(f"duplicate site name {site.name!r}")
            pidx = []
            for p in site.parents:
                if p not in index:
                    raise ValidationError(
                        f"site {site.name!r}: parent {p!r} is not an earlier site"
                    )
                pidx.append(index[p])
            if len(set(pidx)) != len(pidx):
                raise ValidationError(f"site {site.name!r}: repeated parent")
            index[site.name] = i
            parent_idx.append(np.array(pidx, dtype=np.intp))
            self._check_dist(site, [self.sites[j] for j in pidx])
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_parent_idx", tuple(parent_idx))

    @staticmethod
    def _check_dist(site: SiteSpec, parents: list[SiteSpec]):
        d = site.dist
        names = {p.name: p for p in parents}
        if isinstance(d, CategoricalTable):
            if any(not p.is_categorical for p in parents):
                raise ValidationError(f"site {site.name!r}: table parents must be categorical")
            n_rows = math.prod(p.arity for p in parents)
            if d.probs.shape != (n_rows, site.arity):
                raise ValidationError(
                    f"site {site.name!r}: table shape {d.probs.shape}, expected {(n_rows, site.arity)}"
                )
            if np.any(d.probs < 0) or np.any(d.probs > 1):
                raise ValidationError(f"site {site.name!r}: table entries outside [0, 1]")
            if np.any(np.abs(d.probs.sum(axis=1) - 1.0) > _ROW_TOL):
                raise ValidationError(f"site {site.name!r}: table rows must sum to 1")
        elif isinstance(d, GaussianConst):
            if not d.std > 0:
                raise ValidationError(f"site {site.name!r}: Gaussian std must be > 0")
        elif isinstance(d, GammaConst):
            if not (d.shape > 0 and d.rate > 0):
                raise ValidationError(f"site {site.name!r}: Gamma shape and rate must be > 0")
        elif isinstance(d, GaussianLinear):
            if d.mean_parent not in names:
                raise ValidationError(f"site {site.name!r}: mean parent {d.mean_parent!r} not a parent")
            if (d.std is None) == (d.std_parent is None):
                raise ValidationError(f"site {site.name!r}: give exactly one of std / std_parent")
            if d.std is not None and not d.std > 0:
                raise ValidationError(f"site {site.name!r}: Gaussian std must be > 0")
            if d.std_parent is not None and d.std_parent not in names:
                raise ValidationError(f"site {site.name!r}: std parent {d.std_parent!r} not a parent")
        elif isinstance(d, BranchBernoulliGaussian):
            for ref in (d.source, d.std_parent):
                if ref not in names:
                    raise ValidationError(f"site {site.name!r}: {ref!r} not a parent")
            if not d.threshold > 0:
                raise ValidationError(f"site {site.name!r}: threshold must be > 0")
        else:
            raise ValidationError(f"site {site.name!r}: unsupported distribution {type(d).__name__}")
        if any(p.is_categorical for p in parents) and not isinstance(d, CategoricalTable):
            raise ValidationError(f"site {site.name!r}: categorical parents need a table")

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.sites]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ValidationError(f"unknown site {name!r}") from None

    def parent_indices(self, i: int) -> np.ndarray:
        return self._parent_idx[i]

    @property
    def all_categorical(self) -> bool:
        return all(s.is_categorical for s in self.sites)

    def edges(self) -> list[tuple[int, int]]:
        return [(int(p), i) for i in range(self.n_sites) for p in self._parent_idx[i]]


@dataclass(frozen=True)
class Evidence:
    """Observed values keyed by site index."""

    values: Mapping[int, float]

    def __post_init__(self):
        object.__setattr__(self, "values", dict(sorted(self.values.items())))

    @property
    def observed(self) -> frozenset[int]:
        return frozenset(self.values)

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_names(cls, program: ProgramSpec, named: Mapping[str, float]) -> "Evidence":
        ev = cls({program.index(k): v for k, v in named.items()})
        check_evidence(program, ev)
        return ev

    @classmethod
    def from_assignment(cls, assignment, observed) -> "Evidence":
        return cls({int(i): assignment[i].item() for i in observed})

    def to_names(self, program: ProgramSpec) -> dict[str, float]:
        out = {}
        for i, v in self.values.items():
            site = program.sites[i]
            out[site.name] = int(v) if site.is_categorical else float(v)
        return out


def check_evidence(program: ProgramSpec, evidence: Evidence) -> None:
    for i, v in evidence.values.items():
        if not 0 <= i < program.n_sites:
            raise ValidationError(f"evidence site index {i} out of range")
        site = program.sites[i]
        if site.is_categorical:
            if isinstance(v, bool) or float(v) != int(v) or not 0 <= int(v) < site.arity:
                raise ValidationError(
                    f"site {site.name!r}: value {v!r} not a state in [0, {site.arity})"
                )
        elif not math.isfinite(float(v)):
            raise ValidationError(f"site {site.name!r}: value {v!r} is not finite")


# -- sampling and densities ----------------------------------------------------------


def _table_rows(program: ProgramSpec, i: int, values: np.ndarray) -> np.ndarray:
    pidx = program.parent_indices(i)
    rows = np.zeros(values.shape[0], dtype=np.intp)
    for j in pidx:
        rows = rows * program.sites[j].arity + values[:, j].astype(np.intp)
    return rows


def _parent(program: ProgramSpec, values: np.ndarray, name: str) -> np.ndarray:
    return values[:, program.index(name)]


def sample_site(program: ProgramSpec, i: int, values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw site ``i`` for every row of ``values`` given its (already filled) parents."""
    site = program.sites[i]
    d = site.dist
    n = values.shape[0]
    if isinstance(d, CategoricalTable):
        cum = np.cumsum(d.probs, axis=1)[_table_rows(program, i, values)]
        u = rng.random(n)
        return np.minimum((u[:, None] >= cum).sum(axis=1), site.arity - 1).astype(float)
    if isinstance(d, GaussianConst):
        return d.mean + d.std * rng.standard_normal(n)
    if isinstance(d, GammaConst):
        return rng.gamma(d.shape, 1.0 / d.rate, size=n)
    if isinstance(d, GaussianLinear):
        std = d.std if d.std is not None else _parent(program, values, d.std_parent)
        return _parent(program, values, d.mean_parent) + std * rng.standard_normal(n)
    if isinstance(d, BranchBernoulliGaussian):
        x = _parent(program, values, d.source)
        s = _parent(program, values, d.std_parent)
        u = rng.random(n)
        z = rng.standard_normal(n)
        coin = (u < np.abs(x)).astype(float)
        return np.where(np.abs(x) < d.threshold, coin, x + s * z)
    raise ValidationError(f"unsupported distribution {type(d).__name__}")


def _gauss_logpdf(x, mean, std):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -0.5 * ((x - mean) / std) ** 2 - np.log(std) - 0.5 * _LOG_2PI
    return np.where(std > 0, out, -np.inf)


def site_log_prob(program: ProgramSpec, i: int, values: np.ndarray) -> np.ndarray:
    """Log mass (categorical, Bernoulli branch) or density of site ``i`` per row."""
    site = program.sites[i]
    d = site.dist
    x = values[:, i]
    with np.errstate(divide="ignore", invalid="ignore"):
        if isinstance(d, CategoricalTable):
            return np.log(d.probs[_table_rows(program, i, values), x.astype(np.intp)])
        if isinstance(d, GaussianConst):
            return _gauss_logpdf(x, d.mean, np.float64(d.std))
        if isinstance(d, GammaConst):
            out = (
                d.shape * math.log(d.rate)
                - math.lgamma(d.shape)
                + (d.shape - 1.0) * np.log(np.where(x > 0, x, 1.0))
                - d.rate * x
            )
            return np.where(x > 0, out, -np.inf)
        if isinstance(d, GaussianLinear):
            std = d.std if d.std is not None else _parent(program, values, d.std_parent)
            return _gauss_logpdf(x, _parent(program, values, d.mean_parent), np.asarray(std, dtype=float))
        if isinstance(d, BranchBernoulliGaussian):
            src = _parent(program, values, d.source)
            s = _parent(program, values, d.std_parent)
            a = np.abs(src)
            bern = np.where(x == 1.0, np.log(a), np.where(x == 0.0, np.log1p(-a), -np.inf))
            return np.where(a < d.threshold, bern, _gauss_logpdf(x, src, s))
    raise ValidationError(f"unsupported distribution {type(d).__name__}")


def sample_prior(
    program: ProgramSpec,
    n: int,
    rng: np.random.Generator,
    clamp: Evidence | None = None,
) -> np.ndarray:
    """Ancestrally sample ``n`` assignments; clamped sites keep their evidence value."""
    values = np.empty((n, program.n_sites))
    clamped = clamp.values if clamp is not None else {}
    for i in range(program.n_sites):
        if i in clamped:
            values[:, i] = clamped[i]
        else:
            values[:, i] = sample_site(program, i, values, rng)
    return values


def ancestral_sample(program: ProgramSpec, rng: np.random.Generator) -> np.ndarray:
    return sample_prior(program, 1, rng)[0]


def site_log_probs(program: ProgramSpec, values: np.ndarray) -> np.ndarray:
    """``(n, N)`` matrix of per-site log conditionals."""
    values = np.atleast_2d(values)
    out = np.empty(values.shape)
    for i in range(program.n_sites):
        out[:, i] = site_log_prob(program, i, values)
    return out


def log_joint(program: ProgramSpec, assignment, evidence_override: Evidence | None = None) -> float:
    values = np.array(assignment, dtype=float).reshape(1, -1)
    if values.shape[1] != program.n_sites:
        raise ValidationError(f"assignment has {values.shape[1]} values, program has {program.n_sites}")
    if evidence_override is not None:
        for i, v in evidence_override.values.items():
            values[0, i] = v
    return float(site_log_probs(program, values).sum())


def log_joint_batch(program: ProgramSpec, values: np.ndarray) -> np.ndarray:
    return site_log_probs(program, values).sum(axis=1)


# -- exact oracle --------------------------------------------------------------------


def enumerate_posterior(
    program: ProgramSpec, evidence: Evidence, chunk: int = 1 << 16
) -> dict[int, np.ndarray]:
    """Exact ``P(X_i = k | evidence)`` for every unobserved site by brute-force summation."""
    if not program.all_categorical:
        raise ValidationError("enumeration needs an all-categorical program")
    check_evidence(program, evidence)
    hidden = [i for i in range(program.n_sites) if i not in evidence.values]
    if not hidden:
        return {}
    arities = [program.sites[i].arity for i in hidden]
    total = math.prod(arities)
    if total > MAX_ENUMERATION:
        raise ValidationError(f"state space of {total} configurations exceeds {MAX_ENUMERATION}")

    def configs(lo, hi):
        values = np.empty((hi - lo, program.n_sites))
        for i, v in evidence.values.items():
            values[:, i] = v
        cols = np.unravel_index(np.arange(lo, hi), arities)
        for i, col in zip(hidden, cols):
            values[:, i] = col
        return values

    logp = np.concatenate(
        [log_joint_batch(program, configs(lo, min(lo + chunk, total))) for lo in range(0, total, chunk)]
    )
    top = logp.max()
    if not np.isfinite(top):
        raise ValidationError("evidence has zero probability under the program")
    w = np.exp(logp - top)
    w /= w.sum()
    out = {i: np.zeros(program.sites[i].arity) for i in hidden}
    for lo in range(0, total, chunk):
        hi = min(lo + chunk, total)
        values = configs(lo, hi)
        for i in hidden:
            out[i] += np.bincount(values[:, i].astype(np.intp), weights=w[lo:hi], minlength=program.sites[i].arity)
    for i in hidden:
        out[i] /= out[i].sum()
    return out


# -- generators ----------------------------------------------------------------------


def _binary_site(name: str, parents: list[str], rng: np.random.Generator) -> SiteSpec:
    p1 = rng.random(2 ** len(parents))
    return SiteSpec(name, CATEGORICAL, tuple(parents), CategoricalTable(np.stack([1.0 - p1, p1], axis=1)), arity=2)


def make_chain(n: int, seed: int = 0) -> ProgramSpec:
    if n < 2:
        raise ValidationError("chain needs at least 2 nodes")
    rng = stream(seed, "graph", "chain", n)
    sites = [_binary_site(f"X{i}", [f"X{i-1}"] if i else [], rng) for i in range(n)]
    return ProgramSpec(f"Chain{n}", sites)


def make_grid(rows: int, cols: int, seed: int = 0) -> ProgramSpec:
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise ValidationError("grid needs at least 2 nodes")
    rng = stream(seed, "graph", "grid", rows, cols)
    sites = []
    for r in range(rows):
        for c in range(cols):
            parents = []
            if r > 0:
                parents.append(f"X{(r - 1) * cols + c}")
            if c > 0:
                parents.append(f"X{r * cols + c - 1}")
            sites.append(_binary_site(f"X{r * cols + c}", parents, rng))
    return ProgramSpec(f"Grid{rows * cols}", sites)


def make_star(n: int, seed: int = 0) -> ProgramSpec:
    if n < 2:
        raise ValidationError("star needs at least 2 nodes")
    rng = stream(seed, "graph", "star", n)
    sites = [_binary_site(f"X{i}", ["X0"] if i else [], rng) for i in range(n)]
    return ProgramSpec(f"Star{n}", sites)


def builtin_probprog(length: int = 50) -> ProgramSpec:
    """The thresholded Bernoulli/Gaussian random-walk program with inputs ``t0`` and ``v``."""
    sites = [
        SiteSpec("t0", CONTINUOUS, (), GaussianConst(0.0, 3.0)),
        SiteSpec("v", CONTINUOUS, (), GammaConst(3.0, 1.0)),
    ]
    for i in range(1, length + 1):
        prev = f"t{i - 1}"
        sites.append(
            SiteSpec(f"t{i}", CONTINUOUS, (prev, "v"), BranchBernoulliGaussian(prev, "v"), proposable=False)
        )
    return ProgramSpec("probProg", sites)


def make_named_graph(name: str, seed: int = 0) -> ProgramSpec:
    """Build a benchmark graph from names like ``chain16``, ``grid9``, ``grid3x4``, ``star8``."""
    key = name.lower()
    for family in ("chain", "grid", "star"):
        if key.startswith(family):
            arg = key[len(family):]
            break
    else:
        raise ValidationError(f"unknown graph family in {name!r}")
    try:
        dims = [int(t) for t in arg.split("x")]
    except ValueError:
        raise ValidationError(f"bad graph size in {name!r}") from None
    if family == "grid":
        if len(dims) == 2:
            return make_grid(dims[0], dims[1], seed)
        side = math.isqrt(dims[0])
        if len(dims) != 1 or side * side != dims[0]:
            raise ValidationError(f"grid size {arg!r} is not a square; use RxC")
        return make_grid(side, side, seed)
    if len(dims) != 1:
        raise ValidationError(f"bad graph size in {name!r}")
    n = dims[0]
    return make_chain(n, seed) if family == "chain" else make_star(n, seed)


# -- JSON ----------------------------------------------------------------------------


def _dist_to_json(d: ConditionalDist) -> dict:
    if isinstance(d, CategoricalTable):
        return {"type": "categorical_table", "probs": d.probs.tolist()}
    if isinstance(d, GaussianConst):
        return {"type": "gaussian_const", "mean": float(d.mean), "std": float(d.std)}
    if isinstance(d, GaussianLinear):
        out = {"type": "gaussian_linear", "mean_parent": d.mean_parent}
        if d.std is not None:
            out["std"] = float(d.std)
        else:
            out["std_parent"] = d.std_parent
        return out
    if isinstance(d, GammaConst):
        return {"type": "gamma_const", "shape": float(d.shape), "rate": float(d.rate)}
    if isinstance(d, BranchBernoulliGaussian):
        return {
            "type": "branch_bernoulli_gaussian",
            "source": d.source,
            "std_parent": d.std_parent,
            "threshold": float(d.threshold),
        }
    raise ValidationError(f"unsupported distribution {type(d).__name__}")


def _dist_from_json(obj: dict) -> ConditionalDist:
    kind = obj.get("type")
    try:
        if kind == "categorical_table":
            return CategoricalTable(np.array(obj["probs"], dtype=float))
        if kind == "gaussian_const":
            return GaussianConst(float(obj["mean"]), float(obj["std"]))
        if kind == "gaussian_linear":
            std = obj.get("std")
            return GaussianLinear(obj["mean_parent"], None if std is None else float(std), obj.get("std_parent"))
        if kind == "gamma_const":
            return GammaConst(float(obj["shape"]), float(obj["rate"]))
        if kind == "branch_bernoulli_gaussian":
            return BranchBernoulliGaussian(obj["source"], obj["std_parent"], float(obj.get("threshold", 1.0)))
    except KeyError as exc:
        raise ValidationError(f"distribution {kind!r} missing field {exc}") from None
    raise ValidationError(f"unknown distribution type {kind!r}")


def program_to_dict(program: ProgramSpec) -> dict:
    sites = []
    for s in program.sites:
        entry = {"name": s.name, "kind": s.kind}
        if s.is_categorical:
            entry["arity"] = s.arity
        entry["parents"] = list(s.parents)
        entry["dist"] = _dist_to_json(s.dist)
        entry["proposable"] = s.proposable
        sites.append(entry)
    return {"name": program.name, "sites": sites}


def program_from_dict(obj: dict) -> ProgramSpec:
    try:
        sites = [
            SiteSpec(
                name=s["name"],
                kind=s["kind"],
                parents=tuple(s.get("parents", ())),
                dist=_dist_from_json(s["dist"]),
                arity=s.get("arity"),
                proposable=bool(s.get("proposable", True)),
            )
            for s in obj["sites"]
        ]
        return ProgramSpec(obj["name"], sites)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed program JSON: {exc}") from None


def dumps_program(program: ProgramSpec) -> str:
    return json.dumps(program_to_dict(program), indent=1)


def loads_program(text: str) -> ProgramSpec:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"program file is not valid JSON: {exc}") from None
    return program_from_dict(obj)
