import numpy as np
import pytest

from unimarg.masking import EncodingLayout, compute_prior_stats
from unimarg.program import (
    CATEGORICAL,
    CONTINUOUS,
    CategoricalTable,
    GaussianConst,
    GaussianLinear,
    ProgramSpec,
    SiteSpec,
)


def chain2_program() -> ProgramSpec:
    return ProgramSpec(
        "Chain2",
        [
            SiteSpec("X0", CATEGORICAL, (), CategoricalTable([[0.7, 0.3]]), arity=2),
            SiteSpec("X1", CATEGORICAL, ("X0",), CategoricalTable([[0.8, 0.2], [0.1, 0.9]]), arity=2),
        ],
    )


def deterministic_chain(n: int = 3) -> ProgramSpec:
    sites = [SiteSpec("X0", CATEGORICAL, (), CategoricalTable([[1.0, 0.0]]), arity=2)]
    for i in range(1, n):
        sites.append(SiteSpec(f"X{i}", CATEGORICAL, (f"X{i-1}",), CategoricalTable([[1.0, 0.0], [1.0, 0.0]]), arity=2))
    return ProgramSpec(f"Det{n}", sites)


def mixed_program() -> ProgramSpec:
    """Three sites covering both loss types: cat(3) -> continuous, plus cat(2)."""
    return ProgramSpec(
        "Mixed3",
        [
            SiteSpec("a", CATEGORICAL, (), CategoricalTable([[0.2, 0.5, 0.3]]), arity=3),
            SiteSpec("z", CONTINUOUS, (), GaussianConst(1.0, 2.0)),
            SiteSpec("w", CONTINUOUS, ("z",), GaussianLinear("z", std=0.5)),
            SiteSpec("b", CATEGORICAL, ("a",), CategoricalTable([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]]), arity=2),
        ],
    )


def single_site(p1: float = 0.3) -> ProgramSpec:
    return ProgramSpec("One", [SiteSpec("X0", CATEGORICAL, (), CategoricalTable([[1 - p1, p1]]), arity=2)])


@pytest.fixture
def chain2():
    return chain2_program()


@pytest.fixture
def chain2_stats(chain2):
    return compute_prior_stats(chain2, 100_000, np.random.default_rng(1))


@pytest.fixture
def chain2_layout(chain2):
    return EncodingLayout.for_program(chain2)


ACCEPTANCE_LINES: list[str] = []


def record_verdict(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
