import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain2_program, deterministic_chain
from unimarg.errors import ValidationError
from unimarg.program import (
    CATEGORICAL,
    CategoricalTable,
    Evidence,
    ProgramSpec,
    SiteSpec,
    ancestral_sample,
    builtin_probprog,
    dumps_program,
    enumerate_posterior,
    loads_program,
    log_joint,
    log_joint_batch,
    make_chain,
    make_grid,
    make_named_graph,
    make_star,
    program_from_dict,
    program_to_dict,
    sample_prior,
)


def test_deterministic_cpt_always_zero():
    program = deterministic_chain(2)
    rng = np.random.default_rng(3)
    for _ in range(50):
        assert ancestral_sample(program, rng).tolist() == [0.0, 0.0]


def test_chain2_marginal_converges(chain2):
    values = sample_prior(chain2, 100_000, np.random.default_rng(0))
    # 0.3 * 0.9 + 0.7 * 0.2
    assert abs(values[:, 1].mean() - 0.41) < 0.01


def test_ancestral_sample_is_seeded(chain2):
    a = sample_prior(chain2, 100, np.random.default_rng(5))
    b = sample_prior(chain2, 100, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_probprog_branch_bernoulli_mean():
    program = builtin_probprog()
    ev = Evidence.from_names(program, {"t0": 0.5})
    values = sample_prior(program, 100_000, np.random.default_rng(1), clamp=ev)
    t1 = values[:, program.index("t1")]
    assert set(np.unique(t1)) <= {0.0, 1.0}
    assert abs(t1.mean() - 0.5) < 0.01


def test_log_joint_chain2(chain2):
    assert log_joint(chain2, [1, 1]) == pytest.approx(math.log(0.27), abs=1e-12)


def test_log_joint_is_pure(chain2):
    assert log_joint(chain2, [0, 1]) == log_joint(chain2, [0, 1])


def test_log_joint_evidence_override(chain2):
    ev = Evidence({1: 1})
    assert log_joint(chain2, [1, 0], ev) == log_joint(chain2, [1, 1])


def test_log_joint_off_support_is_neg_inf():
    program = builtin_probprog()
    values = np.zeros(program.n_sites)
    values[program.index("t0")] = 0.5
    values[program.index("v")] = 1.0
    values[program.index("t1")] = 0.5  # Bernoulli branch only emits 0 or 1
    assert log_joint(program, values) == -math.inf


def test_log_joint_of_samples_is_finite():
    for program in (builtin_probprog(), make_grid(3, 3, 4), chain2_program()):
        values = sample_prior(program, 2000, np.random.default_rng(2))
        assert np.all(np.isfinite(log_joint_batch(program, values)))


@pytest.mark.parametrize(
    "make, n_sites, edges",
    [
        (lambda: make_chain(4, 1), 4, {(0, 1), (1, 2), (2, 3)}),
        (lambda: make_star(8, 1), 8, {(0, i) for i in range(1, 8)}),
    ],
)
def test_generator_edges(make, n_sites, edges):
    program = make()
    assert program.n_sites == n_sites
    assert set(program.edges()) == edges


def test_grid_edges():
    program = make_grid(3, 3, 0)
    edges = set(program.edges())
    assert program.n_sites == 9 and len(edges) == 12
    assert (0, 1) in edges and (0, 3) in edges and (4, 5) in edges and (4, 7) in edges
    assert all(p < c for p, c in edges)


def test_named_graphs():
    assert make_named_graph("Grid16", 0).n_sites == 16
    assert make_named_graph("grid2x3", 0).n_sites == 6
    assert make_named_graph("star32", 0).n_sites == 32
    with pytest.raises(ValidationError):
        make_named_graph("grid10", 0)
    with pytest.raises(ValidationError):
        make_named_graph("tree5", 0)


@pytest.mark.parametrize("make", [lambda: make_chain(1), lambda: make_star(1), lambda: make_grid(1, 1)])
def test_generators_reject_tiny(make):
    with pytest.raises(ValidationError):
        make()


def test_generators_deterministic():
    for name in ("chain16", "grid9", "star8"):
        assert dumps_program(make_named_graph(name, 7)) == dumps_program(make_named_graph(name, 7))
    assert dumps_program(make_chain(4, 1)) != dumps_program(make_chain(4, 2))


def test_builtin_probprog_structure():
    program = builtin_probprog()
    assert program.n_sites == 52
    assert program.names[:3] == ["t0", "v", "t1"] and program.names[-1] == "t50"
    assert program.sites[5].parents == ("t3", "v")
    assert all(not s.proposable for s in program.sites[2:])
    assert all(s.proposable for s in program.sites[:2])


def test_builtin_probprog_input_priors():
    program = builtin_probprog()
    values = sample_prior(program, 100_000, np.random.default_rng(11))
    assert abs(values[:, 0].std() - 3.0) < 0.05
    assert abs(values[:, 1].mean() - 3.0) < 0.05  # Gamma(shape 3, rate 1)


def test_enumerate_chain2(chain2):
    post = enumerate_posterior(chain2, Evidence({1: 1}))
    assert post[0][1] == pytest.approx(0.27 / 0.41, abs=1e-12)
    assert post[0].sum() == pytest.approx(1.0, abs=1e-12)


def test_enumerate_deterministic_chain():
    post = enumerate_posterior(deterministic_chain(4), Evidence({}))
    for i in range(4):
        assert post[i].tolist() == [1.0, 0.0]


def test_enumerate_everything_observed(chain2):
    assert enumerate_posterior(chain2, Evidence({0: 1, 1: 0})) == {}


def test_enumerate_refuses_continuous_and_oversized():
    with pytest.raises(ValidationError):
        enumerate_posterior(builtin_probprog(), Evidence({}))
    with pytest.raises(ValidationError):
        enumerate_posterior(make_chain(21, 0), Evidence({}))


@pytest.mark.parametrize("name", ["chain4", "chain16", "grid9", "grid16", "star8", "star16"])
def test_empirical_marginals_match_enumeration(name):
    program = make_named_graph(name, 3)
    values = sample_prior(program, 200_000, np.random.default_rng(9))
    exact = enumerate_posterior(program, Evidence({}))
    for i in range(program.n_sites):
        empirical = np.bincount(values[:, i].astype(int), minlength=2) / len(values)
        assert np.max(np.abs(empirical - exact[i])) < 0.01


def test_parent_must_precede_child():
    table = CategoricalTable([[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(ValidationError):
        ProgramSpec("bad", [SiteSpec("A", CATEGORICAL, ("B",), table, arity=2),
                            SiteSpec("B", CATEGORICAL, (), CategoricalTable([[0.5, 0.5]]), arity=2)])
    obj = program_to_dict(chain2_program())
    obj["sites"].reverse()
    with pytest.raises(ValidationError):
        program_from_dict(obj)


def test_table_validation():
    with pytest.raises(ValidationError):
        ProgramSpec("bad", [SiteSpec("A", CATEGORICAL, (), CategoricalTable([[0.5, 0.4]]), arity=2)])
    with pytest.raises(ValidationError):
        SiteSpec("A", CATEGORICAL, (), CategoricalTable([[1.0]]), arity=1)
    with pytest.raises(ValidationError):
        ProgramSpec("dup", [SiteSpec("A", CATEGORICAL, (), CategoricalTable([[0.5, 0.5]]), arity=2)] * 2)


def test_evidence_validation(chain2):
    with pytest.raises(ValidationError):
        Evidence.from_names(chain2, {"X0": 2})
    with pytest.raises(ValidationError):
        Evidence.from_names(chain2, {"nope": 1})


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), family=st.sampled_from(["chain5", "grid2x3", "star4"]))
def test_json_round_trip(seed, family):
    program = make_named_graph(family, seed)
    text = dumps_program(program)
    again = loads_program(text)
    assert again == program
    assert dumps_program(again) == text


def test_probprog_json_round_trip():
    program = builtin_probprog()
    assert loads_program(dumps_program(program)) == program
