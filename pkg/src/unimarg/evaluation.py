"""Test queries, ground truth, correlation metric and the benchmark grid."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from ._rng import derive_seed, stream
from .errors import NumericError, UnimargError, ValidationError
from .inference import MarginalSet, cond_marginals, estimate_posterior
from .masking import EncodingLayout, compute_prior_stats, sample_mask
from .neural import FLEXIBLE, STANDARD, UmModel, build_um
from .program import Evidence, ProgramSpec, enumerate_posterior, make_named_graph, sample_prior
from .training import TrainConfig, train

log = logging.getLogger(__name__)

BENCHMARK_GRAPHS = ("chain4", "chain16", "chain32", "grid9", "grid16", "star4", "star8", "star32")
ENUMERATION_LIMIT = 16  # sites; larger graphs use 1M-sample likelihood weighting
IS_GROUND_TRUTH_SAMPLES = 1_000_000
CSV_COLUMNS = ["graph", "mode", "preset", "seed", "correlation_cat", "correlation_cont", "iters", "batch", "seconds"]


class ZeroVarianceError(NumericError):
    pass


@dataclass
class TestQuery:
    evidence: Evidence
    query_sites: tuple[int, ...]
    truth: MarginalSet | None = None
    truth_method: str | None = None

    __test__ = False  # not a pytest class


def make_test_set(program: ProgramSpec, n_queries: int = 100, rng: np.random.Generator | None = None) -> list[TestQuery]:
    """Prior draws with random masks; masks hiding nothing or everything are redrawn."""
    if n_queries < 1:
        raise ValidationError("need at least one query")
    if program.n_sites < 2:
        raise ValidationError("a query needs one observed and one hidden site")
    rng = rng if rng is not None else np.random.default_rng(0)
    N = program.n_sites
    queries = []
    while len(queries) < n_queries:
        sample = sample_prior(program, 1, rng)[0]
        mask = sample_mask(N, rng)
        if not 0 < len(mask.masked) < N:
            continue
        observed = [i for i in range(N) if i not in mask.masked]
        queries.append(TestQuery(Evidence.from_assignment(sample, observed), tuple(sorted(mask.masked))))
    return queries


def ground_truth(
    program: ProgramSpec,
    query: TestQuery,
    method: str = "enumeration",
    n: int = IS_GROUND_TRUTH_SAMPLES,
    rng: np.random.Generator | None = None,
) -> MarginalSet:
    if method == "enumeration":
        return MarginalSet(program, enumerate_posterior(program, query.evidence))
    if method == "is_prior":
        est, _ = estimate_posterior(program, query.evidence, "prior", n, rng)
        return est
    raise ValidationError(f"unknown ground-truth method {method!r}")


def attach_ground_truth(program: ProgramSpec, queries: list[TestQuery], seed: int = 0, n: int = IS_GROUND_TRUTH_SAMPLES):
    """Fill ``query.truth`` by enumeration for small categorical programs, else by prior IS."""
    method = "enumeration" if program.all_categorical and program.n_sites <= ENUMERATION_LIMIT else "is_prior"
    for q_idx, q in enumerate(queries):
        rng = stream(seed, "truth", program.name, q_idx)
        q.truth = ground_truth(program, q, method, n, rng)
        q.truth_method = method if method == "enumeration" else f"is_prior({n})"
    return queries


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValidationError("pearson needs two equal-length lists of at least 2 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise ZeroVarianceError("zero variance in " + ("predictions" if sxx == 0 else "ground truth"))
    r = float(np.dot(dx, dy) / math.sqrt(sxx * syy))
    return min(1.0, max(-1.0, r))


@dataclass(frozen=True)
class CorrelationScore:
    categorical: float
    continuous: float


def pooled_pairs(program: ProgramSpec, predictions: list[MarginalSet], truths: list[MarginalSet]):
    """Pool (predicted, true) pairs: categorical states k >= 1, and continuous means."""
    cat_p, cat_t, cont_p, cont_t = [], [], [], []
    for pred, truth in zip(predictions, truths):
        for i, tv in truth.values.items():
            pv = pred.values[i]
            if program.sites[i].is_categorical:
                cat_p.extend(np.asarray(pv)[1:])
                cat_t.extend(np.asarray(tv)[1:])
            else:
                cont_p.append(float(pv))
                cont_t.append(float(tv))
    return cat_p, cat_t, cont_p, cont_t


def correlation_score(model: UmModel, test_set: list[TestQuery], truths: list[MarginalSet] | None = None) -> CorrelationScore:
    """Pearson correlation of pooled network marginals against ground truth.

    Returns NaN for a kind of site that never appears among the query sites.
    """
    if truths is None:
        truths = [q.truth for q in test_set]
    if any(t is None for t in truths):
        raise ValidationError("every query needs a ground truth")
    preds = [cond_marginals(model, q.evidence) for q in test_set]
    cat_p, cat_t, cont_p, cont_t = pooled_pairs(model.program, preds, truths)
    cat = pearson(cat_p, cat_t) if cat_p else float("nan")
    cont = pearson(cont_p, cont_t) if cont_p else float("nan")
    return CorrelationScore(cat, cont)


# -- benchmark grid ----------------------------------------------------------------


@dataclass
class BenchmarkRow:
    graph: str
    mode: str
    preset: int
    seed: int
    correlation_cat: float
    correlation_cont: float
    iters: int
    batch: int
    seconds: float
    error: str | None = None


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]

    def to_csv(self, record_time: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([
                r.graph, r.mode, r.preset, r.seed,
                _fmt(r.correlation_cat), _fmt(r.correlation_cont),
                r.iters, r.batch, f"{r.seconds:.3f}" if record_time else "",
            ])
        return buf.getvalue()

    def mean_correlation(self, mode: str, preset: int) -> float:
        vals = [r.correlation_cat for r in self.rows if r.mode == mode and r.preset == preset]
        return float(np.mean(vals)) if vals else float("nan")


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def _cell_seed(seed: int, *tags) -> int:
    return int(derive_seed(seed, *tags).generate_state(1)[0])


def prepare_graph(graph: str, seed: int, n_queries: int = 100, n_prior: int = 100_000, truth_samples: int = IS_GROUND_TRUTH_SAMPLES):
    """Seeded program, prior statistics and a test set with ground truth attached."""
    program = make_named_graph(graph, seed)
    stats = compute_prior_stats(program, n_prior, stream(seed, "stats", graph))
    queries = make_test_set(program, n_queries, stream(seed, "testset", graph))
    attach_ground_truth(program, queries, seed, truth_samples)
    return program, stats, queries


def train_cell(program: ProgramSpec, stats, graph: str, mode: str, preset: int, budget: TrainConfig, seed: int) -> UmModel:
    """Build and train one grid cell.

    Init and data seeds depend on (graph, preset, seed) but not on mode, so the
    two modes start from the same weights and see the same batches.
    """
    layout = EncodingLayout.for_program(program)
    init_seed = _cell_seed(seed, "init", graph, preset)
    model = build_um(program, preset, mode, layout, stats, np.random.default_rng(init_seed), rng_seed=init_seed)
    config = replace(budget, mode=mode, seed=_cell_seed(seed, "train", graph, preset))
    train(model, program, config)
    return model


def _run_cell(args):
    graph, mode, preset, seed, budget, program, stats, queries = args
    start = time.perf_counter()
    row = BenchmarkRow(graph, mode, preset, seed, float("nan"), float("nan"), budget.iterations, budget.batch_size, 0.0)
    try:
        model = train_cell(program, stats, graph, mode, preset, budget, seed)
        score = correlation_score(model, queries)
        row.correlation_cat, row.correlation_cont = score.categorical, score.continuous
    except UnimargError as exc:
        row.error = str(exc)
        log.warning("cell %s/%s/%s/%s failed: %s", graph, mode, preset, seed, exc)
    row.seconds = time.perf_counter() - start
    return row


def _pool_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(a) for a in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _prepare(args):
    return prepare_graph(*args)


def run_benchmark(
    families=BENCHMARK_GRAPHS,
    modes=(STANDARD, FLEXIBLE),
    presets=(1, 2, 3),
    budget: TrainConfig | None = None,
    seeds=(0,),
    workers: int = 1,
    n_queries: int = 100,
    truth_samples: int = IS_GROUND_TRUTH_SAMPLES,
) -> BenchmarkReport:
    """Train and score every (seed, graph, preset, mode) cell; rows come back in that order."""
    budget = budget or TrainConfig()
    graph_keys = [(g, s) for s in seeds for g in families]
    prepared = _pool_map(_prepare, [(g, s, n_queries, 100_000, truth_samples) for g, s in graph_keys], workers)
    cells = []
    for (g, s), (program, stats, queries) in zip(graph_keys, prepared):
        for preset in presets:
            for mode in modes:
                cells.append((g, mode, preset, s, budget, program, stats, queries))
    return BenchmarkReport(_pool_map(_run_cell, cells, workers))
