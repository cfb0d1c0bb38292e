"""One-round update rules: DPSGD, DRSA, BRAVO-SAGA, BRAVO-LSVRG.

All robust methods share the same skeleton: a (possibly variance-reduced)
stochastic gradient plus the subgradient of the total-variation consensus
penalty over every received neighbor message, regular and Byzantine alike.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError

ALGORITHMS = ("dpsgd", "drsa", "bravo-saga", "bravo-lsvrg")
STEP_KINDS = ("constant", "inverse", "inverse_sqrt")


@dataclass(frozen=True)
class StepSchedule:
    """constant: alpha; inverse: alpha/(k+1); inverse_sqrt: alpha/sqrt(k+1)."""

    kind: str = "constant"
    alpha: float = 0.01

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ConfigError(f"unknown step schedule '{self.kind}'")
        if not self.alpha > 0:
            raise ConfigError("step size must be positive")


def step_size(sched: StepSchedule, k: int) -> float:
    if sched.kind == "constant":
        return sched.alpha
    if sched.kind == "inverse":
        return sched.alpha / (k + 1)
    return sched.alpha / np.sqrt(k + 1)


def tv_subgradient(x_w: np.ndarray, received: np.ndarray, lam: float) -> np.ndarray:
    """lam * sum over received messages m of sign(x_w - m), entrywise.

    Every entry is bounded by lam times the number of messages, which is
    what caps the damage any single neighbor can do.
    """
    if received.shape[0] == 0:
        return np.zeros_like(x_w)
    return lam * np.sign(x_w[None, :] - received).sum(axis=0)


def drsa_step(x_w: np.ndarray, batch_grad: np.ndarray, tv: np.ndarray, alpha: float) -> np.ndarray:
    """Stochastic subgradient step on the TV-penalized objective."""
    return x_w - alpha * (batch_grad + tv)


def bravo_step(x_w: np.ndarray, g: np.ndarray, tv: np.ndarray, alpha: float) -> np.ndarray:
    """Same step with a variance-reduced gradient and a constant step size."""
    return x_w - alpha * (g + tv)


def dpsgd_step(
    messages: np.ndarray, weights_row: np.ndarray, batch_grad: np.ndarray, alpha: float
) -> np.ndarray:
    """Metropolis-weighted mixing of all received models, then a gradient step."""
    return weights_row @ messages - alpha * batch_grad


class SagaState:
    """Stochastic gradient table for one agent.

    ``table[j]`` holds the gradient of sample j evaluated at the most
    recent model at which j was drawn (initialized at x0 for every j).
    The running ``table_sum`` is maintained incrementally and re-summed
    exactly every J updates to stop drift.
    """

    def __init__(self, problem, w: int, x0: np.ndarray, track_models: bool = False):
        j = problem.n_samples
        self.table = problem.sample_grads(w, np.arange(j), x0)
        self.table_sum = self.table.sum(axis=0)
        self.n_samples = j
        self._since_refresh = 0
        # side table of the models behind each stored gradient, kept only
        # when Lyapunov tracking needs them
        self.models = np.tile(x0, (j, 1)) if track_models else None

    def corrected_grad(self, fresh: np.ndarray, idx: np.ndarray, x_w: np.ndarray) -> np.ndarray:
        """Variance-reduced gradient from a batch of fresh sample gradients.

        g = mean(fresh) - mean(stored at idx) + table average; the table
        rows at idx are then replaced (last write wins on duplicates).
        """
        j = self.n_samples
        g = fresh.mean(axis=0) - self.table[idx].mean(axis=0) + self.table_sum / j
        for pos, i in enumerate(idx):
            self.table_sum += fresh[pos] - self.table[i]
            self.table[i] = fresh[pos]
            if self.models is not None:
                self.models[i] = x_w
        self._since_refresh += 1
        if self._since_refresh >= j:
            self.table_sum = self.table.sum(axis=0)
            self._since_refresh = 0
        return g


def saga_grad(state: SagaState, problem, w: int, idx: np.ndarray, x_w: np.ndarray) -> np.ndarray:
    fresh = problem.sample_grads(w, idx, x_w)
    return state.corrected_grad(fresh, idx, x_w)


class LsvrgState:
    """Loopless-SVRG reference point and its cached full gradient."""

    def __init__(self, problem, w: int, x0: np.ndarray):
        self.y = x0.copy()
        self.full_grad_y = problem.full_grad(w, x0)


def lsvrg_grad(
    state: LsvrgState,
    problem,
    w: int,
    idx: np.ndarray,
    x_w: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Corrected gradient with the pre-refresh reference point.

    The refresh coin (success probability 1/J) is drawn before the
    gradient is computed, but the gradient always uses the current y;
    only afterwards may y jump to x_w and the full gradient be recached.
    """
    j = problem.n_samples
    refresh = rng.random() < 1.0 / j
    fresh = problem.sample_grads(w, idx, x_w)
    at_y = problem.sample_grads(w, idx, state.y)
    g = fresh.mean(axis=0) - at_y.mean(axis=0) + state.full_grad_y
    if refresh:
        state.y = x_w.copy()
        state.full_grad_y = problem.full_grad(w, x_w)
    return g
