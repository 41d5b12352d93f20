import numpy as np
import pytest

from src.diffcore import Tensor, tsum
from src.diffcore_utils import ParamStore, adam_step, grad_check
from src.errors import ContractError, EvaluationError, GraphStateError
from src.policy_utils import check_policy_gradients, toy_config


def broken_square(x):
    """x**2 with a backward pass that is off by a factor of two."""
    return Tensor.from_op(x.data**2, (x,), lambda g: (g * x.data,))


# ----------------------------
# Finite-difference harness
# ----------------------------


def test_grad_check_passes_on_correct_gradients():
    """Test that a correct analytic gradient passes the check."""
    store = ParamStore()
    store.add("w", np.array([0.3, -1.2, 2.0]))
    report = grad_check(lambda s: tsum(s["w"] * s["w"] * s["w"]), store)
    assert report.passed, f"Expected a clean report, got {report.to_dict()}"
    name, worst = report.worst()
    assert name == "w" and worst < 1e-6, f"Worst relative error too large: {worst}"


def test_grad_check_flags_wrong_gradients():
    """Test that a wrong gradient is flagged by name."""
    store = ParamStore()
    store.add("w", np.array([0.5, -1.0]))
    report = grad_check(lambda s: tsum(broken_square(s["w"])), store)
    assert not report.passed, "A backward pass off by 2x must be flagged"
    assert list(report.flagged["w"]) == [0, 1], f"Both entries should be flagged: {report.flagged}"


def test_grad_check_rejects_non_finite_objective():
    """Test that a non-finite objective is refused."""
    store = ParamStore()
    store.add("w", np.array([np.inf]))
    with pytest.raises(EvaluationError):
        grad_check(lambda s: tsum(s["w"]), store)


def test_grad_check_leaves_parameters_unchanged():
    """Test that the check restores every perturbed parameter."""
    store = ParamStore()
    store.add("w", np.array([0.1, 0.2]))
    before = store.snapshot()
    grad_check(lambda s: tsum(s["w"] * s["w"]), store)
    assert np.array_equal(store["w"].data, before["w"]), "grad_check must restore every perturbed entry"


# ----------------------------
# Optimizer
# ----------------------------


def test_adam_first_step_moves_by_learning_rate():
    """Test that the first bias-corrected step moves each entry by the learning rate."""
    store = ParamStore()
    store.add("w", np.array([1.0, -1.0]))
    store["w"].grad = np.array([0.5, -2.0])
    adam_step(store, lr=0.1)
    # bias-corrected first step is lr * sign(g)
    assert np.allclose(store["w"].data, [0.9, -0.9], atol=1e-6), f"Unexpected Adam step {store['w'].data}"
    assert store["w"].grad is None, "adam_step must clear gradients"


def test_adam_requires_every_gradient():
    """Test that Adam refuses a store with missing gradients."""
    store = ParamStore()
    store.add("a", np.zeros(2))
    store.add("b", np.zeros(2))
    store["a"].grad = np.ones(2)
    with pytest.raises(GraphStateError) as excinfo:
        adam_step(store)
    assert "'b'" in str(excinfo.value), f"Error should name the parameter: {excinfo.value}"


def test_adam_with_zero_learning_rate_is_identity():
    """Test that a zero learning rate leaves the parameters alone."""
    store = ParamStore()
    store.add("w", np.array([0.25, 3.0]))
    store["w"].grad = np.array([1.0, 1.0])
    adam_step(store, lr=0.0, weight_decay=1e-3)
    assert np.array_equal(store["w"].data, [0.25, 3.0])


def test_param_store_rejects_duplicates():
    """Test that a parameter name can be registered only once."""
    store = ParamStore()
    store.add("w", np.zeros(1))
    with pytest.raises(ContractError):
        store.add("w", np.zeros(1))


# ----------------------------
# Full policy
# ----------------------------


def test_policy_gradients_match_finite_differences():
    """Test every policy gradient against central differences."""
    report = check_policy_gradients(dim=4, tol=1e-4, seed=0)
    assert report.passed, f"Policy gradient check flagged {report.flagged}"
    assert len(report.max_rel_error) > 20, "Every policy parameter tensor should be checked"


def test_toy_config_requires_even_dimension():
    """Test that odd check dimensions are refused."""
    with pytest.raises(ContractError):
        toy_config(3)
