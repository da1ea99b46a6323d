import numpy as np
import pytest
from scipy import sparse

from core.interior_point import InteriorPointSolver, SolverSettings
from core.nlp_core import (KktSolution, LinearBlock, NlpProblem, RowBuilder, VariableLayout, bound_rows,
                           gradient_check, solve)
from core.utils.errors import ConfigurationError, SolverError


def _no_inequalities(n):
    return sparse.csr_matrix((0, n)), np.zeros(0)


def _equality_qp():
    """min x1 + 1.5 x2 + ½|x|²  s.t.  x1 + x2 = 1."""
    layout = VariableLayout()
    layout.add("x", 2)
    G, g0 = _no_inequalities(2)
    return NlpProblem(layout, np.array([1.0, 1.5]), [LinearBlock("sum", [[1.0, 1.0]], [-1.0])], G, g0,
                      quad_weight=np.ones(2))


def _bounded_lp():
    """min 3 x2  s.t.  x1 + x2 = 1, x ≥ 0."""
    layout = VariableLayout()
    layout.add("x", 2, lower=0.0, init=0.5)
    G, g0 = bound_rows(layout)
    return NlpProblem(layout, np.array([0.0, 3.0]), [LinearBlock("sum", [[1.0, 1.0]], [-1.0])], G, g0,
                      ineq_names={"bounds": slice(0, G.shape[0])})


def _hyperbola():
    """min x0 + x1  s.t.  x0·x1 = 1 inside a box."""
    layout = VariableLayout()
    layout.add("x", 2, lower=0.1, upper=10.0, init=[2.0, 0.5])
    rows = RowBuilder("product", layout.n)
    r = rows.row(const=-1.0)
    rows.bilinear(r, 0, 1, 1.0)
    G, g0 = bound_rows(layout)
    return NlpProblem(layout, np.ones(2), [rows.build()], G, g0)


def test_layout_slices_and_views():
    layout = VariableLayout()
    a = layout.add("a", (2, 3), lower=0.0, upper=1.0, init=2.0)
    b = layout.add("b", 4)
    assert layout.n == 10
    np.testing.assert_array_equal(a, np.arange(6).reshape(2, 3))
    np.testing.assert_array_equal(b, np.arange(6, 10))
    # the initial value is clipped into the box
    np.testing.assert_array_equal(layout.initial[:6], 1.0)
    x = np.arange(10.0)
    np.testing.assert_array_equal(layout.view(x, "a"), [[0, 1, 2], [3, 4, 5]])
    assert layout.describe(7) == "b[1]"
    assert "a" in layout and "c" not in layout


def test_layout_rejects_infeasible_bounds():
    layout = VariableLayout()
    with pytest.raises(ConfigurationError, match="infeasible bound pair"):
        layout.add("x", 3, lower=[0.0, 2.0, 0.0], upper=1.0)


def test_layout_rejects_duplicate_names():
    layout = VariableLayout()
    layout.add("x", 1)
    with pytest.raises(ConfigurationError):
        layout.add("x", 1)


def test_release_fixed_turns_pinned_bounds_into_values():
    layout = VariableLayout()
    layout.add("x", 3, lower=[0.0, 2.0, -1.0], upper=[1.0, 2.0, 1.0])
    idx, vals = layout.release_fixed()
    np.testing.assert_array_equal(idx, [1])
    np.testing.assert_array_equal(vals, [2.0])
    assert np.isinf(layout.lower[1]) and np.isinf(layout.upper[1])
    assert layout.initial[1] == 2.0


def test_release_fixed_leaves_free_variables_alone():
    layout = VariableLayout()
    layout.add("free", 2)
    layout.add("half", 2, lower=[0.0, -np.inf], upper=[np.inf, 5.0])
    idx, vals = layout.release_fixed()
    assert idx.size == 0 and vals.size == 0
    assert np.all(np.isinf(layout.lower[:2])) and np.all(np.isinf(layout.upper[:2]))
    assert layout.lower[2] == 0.0 and layout.upper[3] == 5.0


def test_bound_rows():
    layout = VariableLayout()
    layout.add("x", 2, lower=[0.0, -np.inf], upper=[np.inf, 2.0])
    G, g0 = bound_rows(layout)
    np.testing.assert_array_equal(G.toarray(), [[1.0, 0.0], [0.0, -1.0]])
    np.testing.assert_array_equal(g0, [0.0, 2.0])


def test_too_many_equalities_rejected():
    layout = VariableLayout()
    layout.add("x", 1)
    G, g0 = _no_inequalities(1)
    problem = NlpProblem(layout, np.zeros(1), [LinearBlock("two", [[1.0], [2.0]], [0.0, 0.0])], G, g0)
    with pytest.raises(ConfigurationError):
        problem.check_dimensions()


def test_duplicate_block_names_rejected():
    layout = VariableLayout()
    layout.add("x", 2)
    G, g0 = _no_inequalities(2)
    block = LinearBlock("sum", [[1.0, 1.0]], [0.0])
    with pytest.raises(ConfigurationError):
        NlpProblem(layout, np.zeros(2), [block, block], G, g0)


def test_equality_qp_optimum_and_multiplier():
    problem = _equality_qp()
    result = solve(problem, settings=SolverSettings())
    assert result.converged
    np.testing.assert_allclose(result.x, [0.75, 0.25], atol=1e-8)
    np.testing.assert_allclose(result.multipliers(problem, "sum"), [1.75], atol=1e-6)
    assert result.objective == pytest.approx(0.75 + 0.375 + 0.5 * (0.75 ** 2 + 0.25 ** 2))


def test_bounded_lp_picks_the_cheap_vertex():
    problem = _bounded_lp()
    result = solve(problem, settings=SolverSettings())
    assert result.converged
    np.testing.assert_allclose(result.x, [1.0, 0.0], atol=1e-5)
    # only the bound on x2 is active, its price is the cost gap
    np.testing.assert_allclose(result.ineq_multipliers(problem, "bounds"), [0.0, 3.0], atol=1e-4)
    np.testing.assert_allclose(result.multipliers(problem, "sum"), [0.0], atol=1e-4)
    assert np.all(result.s >= 0)


def test_nonconvex_equality_converges():
    problem = _hyperbola()
    result = solve(problem, settings=SolverSettings())
    assert result.converged
    np.testing.assert_allclose(result.x, [1.0, 1.0], atol=1e-5)
    np.testing.assert_allclose(result.multipliers(problem, "product"), [1.0], atol=1e-4)


def test_warm_start_reuses_the_solution():
    problem = _bounded_lp()
    cold = solve(problem)
    warm = solve(problem, warm_start=cold)
    assert warm.converged
    assert warm.iterations <= cold.iterations
    np.testing.assert_allclose(warm.x, cold.x, atol=1e-5)


def test_warm_start_of_the_wrong_size():
    problem = _equality_qp()
    stale = KktSolution(x=np.zeros(3), lam=np.zeros(1), z=np.zeros(0), s=np.zeros(0), status="converged",
                        iterations=1, objective=0.0, inf_pr=0.0, inf_du=0.0, complementarity=0.0)
    with pytest.raises(SolverError):
        InteriorPointSolver().solve(problem, stale)


def test_iteration_limit_reports_status():
    result = solve(_hyperbola(), settings=SolverSettings(max_iter=1))
    assert not result.converged
    assert result.status == "max_iter"
    assert result.iterations == 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bilinear_derivatives(seed):
    assert gradient_check(_hyperbola(), seed=seed, check_hessian=True) < 1e-6


def test_settings_override_order():
    settings = SolverSettings.resolve({"max_iter": 50, "tol_eq": None})
    assert settings.max_iter == 50
    assert settings.tol_eq == pytest.approx(1e-8)
