"""Computable theory artifacts.

This module houses the reference solution, the penalty threshold that
makes the TV-penalized optimum coincide with the consensus optimum, the
learning-error bound and Lyapunov function of the linear-convergence
result, the constant-step error bound of the plain subgradient method,
and the executable instance realizing the learning-error lower bound.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackSpec
from .core import (
    ConvergenceError,
    InfeasibilityError,
    InvalidInputError,
    StackedState,
    UnsupportedStateError,
    sq_dist,
)
from .algorithms import LsvrgState, SagaState
from .problems import LeastSquaresProblem
from .topology import IncidenceMatrix, Network, network_from_edges


@dataclass(frozen=True)
class TheoryParams:
    """Per-agent strong-convexity and smoothness constants, aligned with
    the ascending regular-agent order, plus the tuning scalar epsilon."""

    mu: np.ndarray
    lip: np.ndarray
    epsilon: float = 0.0  # 0 selects the default fraction of the admissible range
    delta_sq: np.ndarray | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        lip = np.asarray(self.lip, dtype=np.float64)
        if mu.shape != lip.shape or mu.ndim != 1:
            raise InvalidInputError("mu and lip must be 1-D arrays of equal length")
        if np.any(mu <= 0) or np.any(lip <= 0):
            raise InvalidInputError("mu and lip must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lip", lip)
        cap = self.epsilon_cap
        eps = self.epsilon if self.epsilon > 0 else 0.1 * cap
        if not 0 < eps < cap:
            raise InvalidInputError(f"epsilon must lie in (0, {cap}), got {eps}")
        object.__setattr__(self, "epsilon", float(eps))

    @classmethod
    def least_squares(cls, n_regular: int, epsilon: float = 0.0) -> "TheoryParams":
        """Sample cost 0.5*||x - d||^2 has mu = L = 1 exactly."""
        ones = np.ones(n_regular)
        return cls(ones, ones, epsilon)

    @property
    def epsilon_cap(self) -> float:
        return float(np.min(2.0 * self.mu * self.lip / (self.mu + self.lip)))

    @property
    def eta(self) -> float:
        return float(np.min(self.mu * self.lip / (self.mu + self.lip)) - self.epsilon / 2.0)

    @property
    def big_l(self) -> float:
        return float(np.max(self.lip))


def solve_reference(problem, regular_ids, tol: float = 1e-8, max_iters: int = 10000) -> np.ndarray:
    """Minimizer of the averaged regular local costs (simulator-side oracle).

    Least-squares has the closed form (mean of all regular samples);
    otherwise deterministic full-gradient descent with Armijo backtracking
    runs until the gradient norm drops below ``tol``.
    """
    regular_ids = list(regular_ids)
    if isinstance(problem, LeastSquaresProblem):
        return np.mean([problem.targets[w].mean(axis=0) for w in regular_ids], axis=0)

    def grad(x):
        return np.mean([problem.full_grad(w, x) for w in regular_ids], axis=0)

    def loss(x):
        return float(np.mean([problem.full_loss(w, x) for w in regular_ids]))

    x = np.zeros(problem.p)
    t = 1.0
    f0 = loss(x)
    for _ in range(max_iters):
        g = grad(x)
        sq = float(g @ g)
        if np.sqrt(sq) <= tol:
            return x
        t = min(t * 2.0, 1e8)
        for _ in range(80):
            trial = x - t * g
            f1 = loss(trial)
            if f1 <= f0 - 1e-4 * t * sq:
                break
            t *= 0.5
        else:
            raise ConvergenceError("reference solver: backtracking stalled")
        x, f0 = trial, f1
    raise ConvergenceError(
        f"reference solver: gradient norm above {tol} after {max_iters} iterations"
    )


def lambda0(problem, x_star: np.ndarray, a: IncidenceMatrix) -> float:
    """Penalty threshold sqrt(R)/sigma_min(A) * max_w ||F'_w(x_star)||_inf.

    At or above this value the TV-penalized optimum stacks copies of the
    consensus optimum. Zero iff every regular local gradient vanishes at
    the reference solution.
    """
    from .topology import min_nonzero_singular

    worst = max(float(np.max(np.abs(problem.full_grad(w, x_star)))) for w in a.regular_ids)
    return float(np.sqrt(len(a.regular_ids)) / min_nonzero_singular(a) * worst)


def theory_step_bound(params: TheoryParams, n_samples: int) -> float:
    """Largest constant step size covered by the linear-convergence result."""
    eta = params.eta
    if eta <= 0:
        raise InvalidInputError(f"eta must be positive, got {eta}")
    return eta / (12.0 * params.big_l**2 * n_samples)


def delta_bound(params: TheoryParams, alpha: float, lam: float, net: Network, p: int) -> float:
    """Learning-error bound: the asymptotic term of the descent inequality.

    (alpha/eta) * sum_w (32 lam^2 |R_w|^2 p + 4 lam^2 |B_w|^2 p)
    + (1/(eps*eta)) * sum_w lam^2 |B_w|^2 p, over regular agents w.
    """
    eta = params.eta
    first = 0.0
    second = 0.0
    for w in net.regular_ids:
        r_w = len(net.regular_neighbors[w])
        b_w = len(net.byzantine_neighbors[w])
        first += 32.0 * lam**2 * r_w**2 * p + 4.0 * lam**2 * b_w**2 * p
        second += lam**2 * b_w**2 * p
    return alpha / eta * first + second / (params.epsilon * eta)


def drsa_error_bound(
    params: TheoryParams,
    alpha: float,
    lam: float,
    net: Network,
    p: int,
    delta_sqs,
) -> float:
    """Constant-step plain-subgradient error: the bound above plus the
    stochastic-gradient-noise term (2 alpha / eta) * sum_w delta_w^2."""
    base = delta_bound(params, alpha, lam, net, p)
    return base + 2.0 * alpha / params.eta * float(np.sum(delta_sqs))


def lyapunov(
    x: StackedState,
    x_star: StackedState,
    alg_states: dict,
    alpha: float,
    lip: float,
    n_samples: int,
) -> float:
    """||x - x*||^2 + 8 J alpha^2 L^2 S, with S depending on the method.

    For LSVRG, S sums squared distances of the reference points from the
    per-agent optimum; for SAGA it averages the squared distances of the
    models behind the gradient table, which are only available when the
    state was built with model tracking enabled.
    """
    star = x_star.unstack()
    s = 0.0
    for w, state in alg_states.items():
        if isinstance(state, LsvrgState):
            diff = state.y - star[w]
            s += float(diff @ diff)
        elif isinstance(state, SagaState):
            if state.models is None:
                raise UnsupportedStateError(
                    "SAGA Lyapunov tracking requires the side table of models; "
                    "enable lyapunov tracking at state construction"
                )
            diff = state.models - star[w][None, :]
            s += float(np.sum(diff * diff)) / state.n_samples
        else:
            raise UnsupportedStateError(f"no Lyapunov S term for state {type(state).__name__}")
    return sq_dist(x, x_star) + 8.0 * n_samples * alpha**2 * lip**2 * s


@dataclass(frozen=True)
class LowerBoundInstance:
    """Executable worst case: quadratic costs pulled by the attack so
    that every span-condition method stays at the initial point."""

    problem: LeastSquaresProblem
    network: Network
    attack: AttackSpec
    x_star: StackedState
    lam: float

    @property
    def analytic_error(self) -> float:
        """sum over regular agents of lam^2 |B_w|^2 p."""
        net = self.network
        p = self.problem.p
        return float(
            sum(
                (self.lam * len(net.byzantine_neighbors[w])) ** 2 * p
                for w in net.regular_ids
            )
        )


def build_lowerbound_instance(
    n_regular: int,
    byz_per_agent: int,
    lam: float,
    p: int,
    n_samples: int = 1,
) -> LowerBoundInstance:
    """Regular ring (single edge for R = 2) plus ``byz_per_agent`` private
    Byzantine neighbors per regular agent; local cost 0.5*||x||^2 -
    lam*|B_w|*x.1 with all sample costs identical, optimum lam*|B_w|*1.

    With the all-(-1) attack and zero initialization, the stochastic
    gradient (-lam*|B_w|*1) and the Byzantine sign term (+lam*|B_w|*1)
    cancel exactly, so iterates stay at zero bit-for-bit. The default of
    one sample per agent keeps the table average of the variance-reduced
    methods exact; any power-of-two sample count also works.
    """
    if n_regular < 1 or byz_per_agent < 0 or p < 1 or n_samples < 1:
        raise InfeasibilityError(
            f"infeasible lower-bound instance: R={n_regular}, "
            f"byz_per_agent={byz_per_agent}, p={p}, J={n_samples}"
        )
    if lam < 0:
        raise InvalidInputError("lambda must be nonnegative")
    edges = []
    if n_regular == 2:
        edges.append((0, 1))
    elif n_regular >= 3:
        edges.extend((w, (w + 1) % n_regular) for w in range(n_regular))
    n_total = n_regular * (1 + byz_per_agent)
    byz_ids = []
    next_id = n_regular
    for w in range(n_regular):
        for _ in range(byz_per_agent):
            edges.append((w, next_id))
            byz_ids.append(next_id)
            next_id += 1
    net = network_from_edges(n_total, edges, byz_ids)
    # quadratic cost 0.5||x||^2 - lam|B_w| x.1 == least squares on the
    # constant target lam|B_w|*1, replicated over identical samples
    targets = {
        w: np.tile(lam * byz_per_agent * np.ones(p), (n_samples, 1))
        for w in range(n_total)
    }
    problem = LeastSquaresProblem(targets)
    x_star = StackedState(
        tuple(range(n_regular)),
        np.tile(lam * byz_per_agent * np.ones(p), (n_regular, 1)),
    )
    return LowerBoundInstance(problem, net, AttackSpec(kind="lowerbound"), x_star, lam)
