"""Optimizers backing the attacks: L-BFGS with an early-stop callback and
differential evolution.

Both are deterministic: L-BFGS is pure given the objective, and DE draws all
randomness from a single seeded generator, so identical configs reproduce
identical trajectories bit-for-bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

LBFGS_CONVERGED_BY_CALLBACK = "converged_by_callback"
LBFGS_GRADIENT_SMALL = "gradient_small"
LBFGS_MAX_ITERS = "max_iters"


class OptimError(RuntimeError):
    """Non-finite objective values or invalid optimizer configuration."""


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iterations: int = 100
    gradient_tolerance: float = 1e-9
    armijo_c1: float = 1e-4
    backtrack_shrink: float = 0.5
    max_line_search: int = 20

    def __post_init__(self) -> None:
        if self.memory < 1:
            raise OptimError(f"memory must be >= 1, got {self.memory}")
        if self.gradient_tolerance <= 0:
            raise OptimError("gradient_tolerance must be positive")


@dataclass
class LbfgsResult:
    x: np.ndarray
    loss: float
    status: str
    iterations: int
    evaluations: int


Objective = Callable[[np.ndarray], tuple[float, np.ndarray, bool]]


def lbfgs_minimize(objective: Objective, x0: np.ndarray, config: LbfgsConfig) -> LbfgsResult:
    """Two-loop-recursion L-BFGS with Armijo backtracking.

    `objective(x)` returns (loss, gradient, converged). If `converged` is ever
    reported - including at the initial point or mid line search - iteration
    halts immediately with the triggering x and status
    ``converged_by_callback``; that exit bypasses the Armijo test. Otherwise
    the result carries ``gradient_small`` or ``max_iters``.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    if not np.all(np.isfinite(x)):
        raise OptimError("x0 must be finite")

    evaluations = 0

    def evaluate(point: np.ndarray) -> tuple[float, np.ndarray, bool]:
        nonlocal evaluations
        evaluations += 1
        loss, grad, converged = objective(point)
        grad = np.asarray(grad, dtype=np.float64)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise OptimError(
                f"non-finite objective at evaluation {evaluations}: "
                f"loss={loss!r}, |grad| finite={np.all(np.isfinite(grad))}"
            )
        return float(loss), grad, bool(converged)

    f, g, converged = evaluate(x)
    if converged:
        return LbfgsResult(x, f, LBFGS_CONVERGED_BY_CALLBACK, 0, evaluations)

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []

    for iteration in range(1, config.max_iterations + 1):
        if np.linalg.norm(g) < config.gradient_tolerance:
            return LbfgsResult(x, f, LBFGS_GRADIENT_SMALL, iteration - 1, evaluations)

        d = -_two_loop_direction(g, s_hist, y_hist, rho_hist)
        slope = float(np.dot(g, d))
        if slope >= 0.0:
            # History produced a non-descent direction; restart from steepest descent.
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
            slope = -float(np.dot(g, g))

        # Raw gradient steps need damping; quasi-Newton directions take unit steps.
        step = min(1.0, 1.0 / np.abs(g).sum()) if not s_hist else 1.0
        accepted = False
        for _ in range(config.max_line_search):
            x_new = x + step * d
            f_new, g_new, converged = evaluate(x_new)
            if converged:
                return LbfgsResult(x_new, f_new, LBFGS_CONVERGED_BY_CALLBACK, iteration, evaluations)
            if f_new <= f + config.armijo_c1 * step * slope:
                accepted = True
                break
            step *= config.backtrack_shrink
        if not accepted:
            if s_hist:
                # Stale curvature can poison the direction; drop it and retry.
                s_hist.clear(); y_hist.clear(); rho_hist.clear()
                continue
            return LbfgsResult(x, f, LBFGS_MAX_ITERS, iteration, evaluations)

        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > config.memory:
                s_hist.pop(0); y_hist.pop(0); rho_hist.pop(0)
        else:
            # Non-positive curvature along the step: the stored metric no longer
            # reflects the local landscape, so drop it rather than let the
            # direction go stale.
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
        x, f, g = x_new, f_new, g_new

    if np.linalg.norm(g) < config.gradient_tolerance:
        return LbfgsResult(x, f, LBFGS_GRADIENT_SMALL, config.max_iterations, evaluations)
    return LbfgsResult(x, f, LBFGS_MAX_ITERS, config.max_iterations, evaluations)


def _two_loop_direction(g, s_hist, y_hist, rho_hist) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        gamma = np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
        q *= gamma
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        beta = rho * np.dot(y, q)
        q += (a - beta) * s
    return q


# -- differential evolution ---------------------------------------------------


@dataclass(frozen=True)
class DeConfig:
    population: int = 80
    max_generations: int = 75
    differential_weight: float = 0.5
    crossover_rate: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.population < 4:
            raise OptimError(f"population must be >= 4, got {self.population}")
        if not 0.0 < self.differential_weight <= 2.0:
            raise OptimError("differential_weight must be in (0, 2]")


@dataclass
class DeResult:
    x: np.ndarray
    value: float
    stopped_early: bool
    generations: int
    evaluations: int


def differential_evolution(
    objective: Callable[[np.ndarray], float],
    bounds: np.ndarray,
    config: DeConfig,
    early_stop: Callable[[np.ndarray], bool] | None = None,
) -> DeResult:
    """DE/rand/1/bin minimization over box bounds.

    `bounds` is (D, 2) with lo < hi per gene. Every candidate (including the
    initial population) is checked against `early_stop` right after its
    evaluation; the first satisfying candidate is returned immediately.
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise OptimError(f"bounds must be (D, 2), got {bounds.shape}")
    lo, hi = bounds[:, 0], bounds[:, 1]
    if not np.all(np.isfinite(bounds)) or not np.all(lo < hi):
        raise OptimError("bounds must be finite with lo < hi per gene")

    rng = np.random.default_rng(config.seed)
    n_pop, dim = config.population, bounds.shape[0]
    pop = lo + rng.random((n_pop, dim)) * (hi - lo)

    evaluations = 0

    def score(candidate: np.ndarray) -> float:
        nonlocal evaluations
        evaluations += 1
        return float(objective(candidate))

    values = np.empty(n_pop)
    for i in range(n_pop):
        values[i] = score(pop[i])
        if early_stop is not None and early_stop(pop[i]):
            return DeResult(pop[i].copy(), values[i], True, 0, evaluations)

    best = int(np.argmin(values))
    for generation in range(1, config.max_generations + 1):
        for i in range(n_pop):
            choices = rng.choice(n_pop - 1, size=3, replace=False)
            a, b, c = ((j if j < i else j + 1) for j in choices)
            mutant = pop[a] + config.differential_weight * (pop[b] - pop[c])
            np.clip(mutant, lo, hi, out=mutant)
            cross = rng.random(dim) < config.crossover_rate
            cross[rng.integers(dim)] = True
            trial = np.where(cross, mutant, pop[i])
            trial_value = score(trial)
            if early_stop is not None and early_stop(trial):
                return DeResult(trial.copy(), trial_value, True, generation, evaluations)
            if trial_value <= values[i]:
                pop[i] = trial
                values[i] = trial_value
                if trial_value < values[best]:
                    best = i
        best = int(np.argmin(values))
    return DeResult(pop[best].copy(), float(values[best]), False, config.max_generations, evaluations)
