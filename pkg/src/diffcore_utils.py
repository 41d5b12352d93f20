import logging
from dataclasses import dataclass, field

import numpy as np

from src.diffcore import Tensor, backward, no_grad
from src.errors import ContractError, EvaluationError, GraphStateError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class ParamStore:
    """Named learnable tensors plus their Adam moments. Iterates in lexicographic name order."""

    def __init__(self):
        self._params = {}
        self._state = {}

    def add(self, name, value):
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        self._state[name] = AdamState(m=np.zeros_like(tensor.data), v=np.zeros_like(tensor.data))
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self.names())

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(name, self._params[name]) for name in self.names()]

    def state(self, name):
        return self._state[name]

    def num_values(self):
        return int(sum(p.data.size for p in self._params.values()))

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def fill_missing_grads(self):
        """Give a zero gradient to parameters the last loss did not reach."""
        missing = [name for name, p in self.items() if p.grad is None]
        for name in missing:
            self._params[name].grad = np.zeros_like(self._params[name].data)
        if missing:
            logger.debug(f"Zero-filled gradients for {len(missing)} unreached parameters")
        return missing

    def has_nonfinite(self):
        return any(not np.all(np.isfinite(p.data)) for p in self._params.values())

    def snapshot(self):
        return {name: p.data.copy() for name, p in self.items()}

    def restore(self, snapshot):
        for name, value in snapshot.items():
            if self._params[name].shape != value.shape:
                raise ContractError(f"restore: shape mismatch for {name!r}")
            self._params[name].data = np.array(value, dtype=np.float64)


def init_uniform(shape, fan_in, rng):
    """Uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def adam_step(store, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """Bias-corrected Adam update in place; clears gradients afterwards."""
    for name, p in store.items():
        if p.grad is None:
            raise GraphStateError(f"adam_step: parameter {name!r} has no gradient")
    for name, p in store.items():
        state = store.state(name)
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        state.t += 1
        state.m = beta1 * state.m + (1.0 - beta1) * g
        state.v = beta2 * state.v + (1.0 - beta2) * g * g
        m_hat = state.m / (1.0 - beta1**state.t)
        v_hat = state.v / (1.0 - beta2**state.t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()


@dataclass
class GradCheckReport:
    tol: float
    h: float
    max_rel_error: dict = field(default_factory=dict)
    flagged: dict = field(default_factory=dict)

    @property
    def passed(self):
        return not self.flagged

    def worst(self):
        if not self.max_rel_error:
            return None, 0.0
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def to_dict(self):
        return {
            "tol": self.tol,
            "h": self.h,
            "passed": self.passed,
            "max_rel_error": dict(self.max_rel_error),
            "flagged": {name: list(idx) for name, idx in self.flagged.items()},
        }


def _evaluate(f, store):
    with no_grad():
        value = f(store)
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise EvaluationError(f"grad_check: objective evaluated to {value}")
    return value


def grad_check(f, store, h=1e-5, tol=1e-4, floor=1e-6):
    """
    Compare backward() gradients of the scalar `f(store)` with central finite differences.

    The relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, floor);
    entries above `tol` are flagged by flat index.
    """
    store.zero_grad()
    loss = f(store)
    if not np.isfinite(loss.item()):
        raise EvaluationError(f"grad_check: objective evaluated to {loss.item()}")
    backward(loss)
    store.fill_missing_grads()
    analytic = {name: p.grad.reshape(-1).copy() for name, p in store.items()}
    store.zero_grad()

    report = GradCheckReport(tol=tol, h=h)
    for name, p in store.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = _evaluate(f, store)
            flat[i] = original - h
            f_minus = _evaluate(f, store)
            flat[i] = original
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
        a = analytic[name]
        rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        report.max_rel_error[name] = float(rel.max()) if rel.size else 0.0
        bad = np.flatnonzero(rel > tol)
        if bad.size:
            report.flagged[name] = bad.tolist()
            logger.warning(f"grad_check: {name} has {bad.size} entries above tol {tol}")
    name, err = report.worst()
    logger.info(f"grad_check: worst relative error {err:.3e} in {name}")
    return report
