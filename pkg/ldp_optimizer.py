#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Функции скорости больших уклонений и наиболее вероятные пути дефолта

Независимый однородный случай решается в замкнутом виде. Для неоднородного
портфеля минимизируется Σ wᵢ g^{pᵢ}(φᵢ, φ̄, ψ) + J_X(ψ)/c по дискретным путям.
"""

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, List, Dict, Any, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import xlogy

from config import PoolSpec, FactorSpec, TimeGrid, TypeParams, EPSILON_PRESET
from logging_config import get_logger, fields
from affine_survival import ForcedPaths, survival_curve, exp_moments_batch, DEFAULT_ORDER
from moment_solver import solve_lln
from portfolio import validate_pool
from workers import ordered_map, chunk_ranges, resolve_threads

PENALTY = 1e3
FD_STEP = 1e-6
MINIMA_TOLERANCE = 1e-6
PATH_TOLERANCE = 1e-2
# допустимое нарушение φ_A ≥ φ_B ≥ φ_C на первых шагах сетки
ORDERING_TOLERANCE = 1e-3

logger = get_logger("ldp")


def bernoulli_entropy(ell, p):
    """ℓ ln(ℓ/p) + (1−ℓ) ln((1−ℓ)/(1−p)), 0·ln0 = 0"""
    ell = np.asarray(ell, dtype=float)
    return xlogy(ell, ell / p) + xlogy(1.0 - ell, (1.0 - ell) / (1.0 - p))


@dataclass(frozen=True)
class IndependentRate:
    """Замкнутая форма для независимых одинаковых имён"""
    ell: float
    p: float
    value: float
    grid: TimeGrid
    phi: np.ndarray


def rate_independent(params: TypeParams, T: float, ell: float, n_steps: int = 500,
                     K: int = DEFAULT_ORDER) -> IndependentRate:
    """I(ℓ) и оптимальный путь φ(t) = ℓ μ₀[0,t]/μ₀[0,T]"""
    if not 0.0 < ell < 1.0:
        raise ValueError(f"Loss level must lie in (0, 1): {ell}")
    grid = TimeGrid(T, n_steps)
    curve = survival_curve(params, ForcedPaths.zero(grid), K)
    p = curve.p_T
    if not 0.0 < p < 1.0:
        raise ValueError(f"Degenerate default probability: {p}")
    return IndependentRate(ell=ell, p=p, value=float(bernoulli_entropy(ell, p)), grid=grid,
                           phi=ell * curve.default_cdf / p)


@dataclass(frozen=True)
class RatePath:
    """Дискретные пути φᵢ (G, M+1) по типам и ψ (M+1)"""
    grid: TimeGrid
    phi: np.ndarray
    psi: np.ndarray
    weights: np.ndarray
    ell: float

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        if phi.shape != (len(self.weights), self.grid.n_steps + 1):
            raise ValueError(f"phi must have shape (G, M+1), got {phi.shape}")
        if np.any(phi[:, 0] != 0.0) or self.psi[0] != 0.0:
            raise ValueError("Rate paths must start at 0")
        if np.any(np.diff(phi, axis=1) < 0):
            raise ValueError("Non-monotone phi in rate path")
        object.__setattr__(self, "phi", phi)

    @property
    def aggregate(self) -> np.ndarray:
        """φ̄(t) = Σ wᵢ φᵢ(t)"""
        return self.weights @ self.phi

    @property
    def terminal_gap(self) -> float:
        return abs(float(self.aggregate[-1]) - self.ell)

    @property
    def order_violation(self) -> float:
        """max_t (φ_{i+1}(t) − φ_i(t))⁺ для типов в порядке конфигурации"""
        if self.phi.shape[0] < 2:
            return 0.0
        return max(float(np.diff(self.phi, axis=0).max()), 0.0)

    def is_ordered(self, tol: float = ORDERING_TOLERANCE) -> bool:
        return self.order_violation <= tol


@dataclass
class RateResult:
    """Значение I′(ℓ), экстремаль и диагностика оптимизатора"""
    ell: float
    value: float
    status: str
    converged: bool
    path: RatePath
    entropies: np.ndarray
    factor_cost: float
    c: float
    penalty: float = 0.0
    lln_loss: float = float("nan")
    starts: List[Dict[str, Any]] = field(default_factory=list)
    multiple_minima: bool = False
    evaluations: int = 0

    @property
    def decomposition_gap(self) -> float:
        """|I′ − (Σ wᵢ gᵢ + J/c + штраф)|"""
        total = float(self.path.weights @ self.entropies)
        if self.c > 0 and math.isfinite(self.c):
            total += self.factor_cost / self.c
        return abs(self.value - total - self.penalty)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ell": self.ell,
            "value": self.value,
            "status": self.status,
            "converged": self.converged,
            "entropies": self.entropies.tolist(),
            "factor_cost": self.factor_cost,
            "c": self.c,
            "penalty": self.penalty,
            "lln_loss": self.lln_loss,
            "starts": self.starts,
            "multiple_minima": self.multiple_minima,
            "evaluations": self.evaluations,
        }


def limit_constant(pool: PoolSpec, factor: FactorSpec) -> float:
    """c = lim N ε_N²; для пресета ε_N = 1/√N это 1"""
    if isinstance(factor.epsilon, str) and factor.epsilon == EPSILON_PRESET:
        return 1.0
    return pool.n_names * float(factor.epsilon) ** 2


class RateProblem:
    """Целевая функция по переменным z = (aᵢₖ, ψₖ), Δφᵢₖ = s·aᵢₖ², s: φ̄(T) = ℓ"""

    def __init__(self, pool: PoolSpec, factor: FactorSpec, c: float, grid: TimeGrid, ell: float,
                 K: int = DEFAULT_ORDER, threads: Optional[int] = None):
        problems = validate_pool(pool)
        if problems:
            raise ValueError(f"Invalid pool: {'; '.join(problems)}")
        self.grid = grid
        self.ell = ell
        self.K = K
        self.c = c
        self.threads = threads
        self.weights = pool.weights
        self.params = [g.params for g in pool.groups]
        self.n_groups = len(self.params)
        column = lambda attr: np.array([getattr(p, attr) for p in self.params], dtype=float)
        self._columns = {attr: column(attr) for attr in
                         ("lambda0", "alpha", "lambda_bar", "sigma", "beta_c", "beta_s")}
        self.has_psi = (factor.kind == "ou" and bool(np.any(self._columns["beta_s"]))
                        and c > 0 and math.isfinite(c))
        self.gamma = factor.gamma
        self.vol = factor.vol if factor.vol > 0 else 1.0
        self.n_phi = self.n_groups * grid.n_steps
        self.n_vars = self.n_phi + (grid.n_steps if self.has_psi else 0)
        self.evaluations = 0

    def paths(self, Z: np.ndarray):
        """Приращения d (B, G, M) и ψ (B, M+1)"""
        Z = np.atleast_2d(Z)
        batch = Z.shape[0]
        a = Z[:, :self.n_phi].reshape(batch, self.n_groups, self.grid.n_steps)
        d = a ** 2
        total = np.einsum("g,bgm->b", self.weights, d)
        d = d * (self.ell / np.maximum(total, 1e-300))[:, None, None]
        psi = np.zeros((batch, self.grid.n_steps + 1))
        if self.has_psi:
            psi[:, 1:] = Z[:, self.n_phi:]
        return d, psi

    def evaluate(self, Z: np.ndarray) -> Dict[str, np.ndarray]:
        d, psi = self.paths(Z)
        batch, G, M = d.shape
        dt = self.grid.dt
        phi_rate = np.einsum("g,bgm->bm", self.weights, d) / dt
        psi_rate = np.diff(psi, axis=1) / dt

        rep = lambda v: np.tile(v, batch)
        m = exp_moments_batch(rep(self._columns["lambda0"]), rep(self._columns["alpha"]),
                              rep(self._columns["lambda_bar"]), rep(self._columns["sigma"]),
                              rep(self._columns["beta_c"]), rep(self._columns["beta_s"]),
                              np.repeat(phi_rate, G, axis=0), np.repeat(psi_rate, G, axis=0),
                              dt, self.K)
        S = m[:, :, 0].reshape(batch, G, M + 1)
        q = np.maximum(S[:, :, :-1] - S[:, :, 1:], 1e-300)
        s_T = np.maximum(S[:, :, -1], 1e-300)
        terminal = d.sum(axis=2)
        rest = np.maximum(1.0 - terminal, 0.0)
        entropies = xlogy(d, d / q).sum(axis=2) + xlogy(rest, rest / s_T)
        penalty = PENALTY * (np.maximum(terminal - 1.0, 0.0) ** 2).sum(axis=1)

        factor_cost = np.zeros(batch)
        if self.has_psi:
            mid = 0.5 * (psi[:, 1:] + psi[:, :-1])
            factor_cost = 0.5 * dt * ((psi_rate + self.gamma * mid) ** 2).sum(axis=1) / self.vol ** 2
        values = entropies @ self.weights + penalty
        if self.has_psi:
            values = values + factor_cost / self.c
        return {"values": values, "entropies": entropies, "factor_cost": factor_cost,
                "penalty": penalty, "terminal": terminal}

    def objective(self, z: np.ndarray) -> float:
        self.evaluations += 1
        return float(self.evaluate(z[None])["values"][0])

    def gradient(self, z: np.ndarray) -> np.ndarray:
        """Центральные разности, все 2n точек одной пачкой"""
        n = len(z)
        h = FD_STEP * np.maximum(1.0, np.abs(z))
        shifts = np.diag(h)
        Z = np.concatenate([z + shifts, z - shifts])
        workers = resolve_threads(self.threads)
        blocks = ordered_map(lambda r: self.evaluate(Z[r.start:r.stop])["values"],
                             chunk_ranges(len(Z), workers), workers)
        values = np.concatenate(blocks)
        self.evaluations += len(Z)
        return (values[:n] - values[n:]) / (2.0 * h)

    def encode(self, increments: np.ndarray, psi: Optional[np.ndarray] = None) -> np.ndarray:
        """Начальная точка по приращениям φᵢ (G, M) и ψ"""
        increments = np.maximum(np.asarray(increments, dtype=float), 1e-12)
        z = [np.sqrt(increments).ravel()]
        if self.has_psi:
            z.append(np.zeros(self.grid.n_steps) if psi is None else np.asarray(psi, dtype=float)[1:])
        return np.concatenate(z)

    def to_path(self, z: np.ndarray) -> RatePath:
        d, psi = self.paths(z)
        phi = np.concatenate([np.zeros((self.n_groups, 1)), np.cumsum(d[0], axis=1)], axis=1)
        return RatePath(grid=self.grid, phi=phi, psi=psi[0], weights=self.weights, ell=self.ell)


def _lln_start(pool: PoolSpec, factor: FactorSpec, grid: TimeGrid, K: int):
    trajectory = solve_lln(pool, replace(factor, epsilon=0.0), grid, K)
    return trajectory.terminal_loss, trajectory.type_losses.T


def _starting_points(problem: RateProblem, lln_paths: np.ndarray,
                     warm_start: Optional[RatePath]) -> Dict[str, np.ndarray]:
    grid = problem.grid
    starts = {}
    if warm_start is not None and warm_start.grid == grid:
        starts["warm"] = problem.encode(np.diff(warm_start.phi, axis=1), warm_start.psi)
    starts["lln"] = problem.encode(np.diff(lln_paths, axis=1))
    proportional = []
    for params in problem.params:
        curve = survival_curve(params, ForcedPaths.zero(grid), problem.K)
        proportional.append(np.diff(curve.default_cdf))
    starts["proportional"] = problem.encode(np.array(proportional))
    starts["uniform"] = problem.encode(np.ones((problem.n_groups, grid.n_steps)))
    return starts


def rate_heterogeneous(pool: PoolSpec, factor: FactorSpec, ell: float,
                       grid: Optional[TimeGrid] = None, c: Optional[float] = None,
                       K: int = DEFAULT_ORDER, max_iter: int = 200, gtol: float = 1e-7,
                       warm_start: Optional[RatePath] = None,
                       threads: Optional[int] = None) -> RateResult:
    """I′(ℓ) для неоднородного портфеля: мульти-старт L-BFGS-B"""
    if not 0.0 < ell < 1.0:
        raise ValueError(f"Loss level must lie in (0, 1): {ell}")
    grid = grid or TimeGrid(1.0, 100)
    c = limit_constant(pool, factor) if c is None else c
    start_time = time.time()

    lln_loss, lln_paths = _lln_start(pool, factor, grid, K)
    problem = RateProblem(pool, factor, c, grid, ell, K, threads)
    if ell <= lln_loss:
        path = RatePath(grid=grid, phi=np.maximum.accumulate(lln_paths, axis=1), psi=np.zeros(grid.n_steps + 1),
                        weights=problem.weights, ell=lln_loss)
        logger.info("Loss level at or below the typical loss; rate is zero",
                    extra=fields(ell=ell, lln_loss=lln_loss))
        return RateResult(ell=ell, value=0.0, status="at_or_below_lln", converged=True,
                          path=path, entropies=np.zeros(problem.n_groups), factor_cost=0.0,
                          c=c, lln_loss=lln_loss)

    runs = []
    for name, z0 in _starting_points(problem, lln_paths, warm_start).items():
        res = minimize(problem.objective, z0, jac=problem.gradient, method="L-BFGS-B",
                       options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-13})
        runs.append((name, res))
        logger.debug(f"Start '{name}' finished", extra=fields(value=float(res.fun), nit=int(res.nit),
                                                             success=bool(res.success)))

    name, best = min(runs, key=lambda item: item[1].fun)
    path = problem.to_path(best.x)
    details = problem.evaluate(best.x[None])

    multiple = False
    for other_name, res in runs:
        if other_name == name or not res.success:
            continue
        close_value = abs(res.fun - best.fun) <= MINIMA_TOLERANCE * max(1.0, abs(best.fun))
        distance = float(np.max(np.abs(problem.to_path(res.x).phi - path.phi)))
        if close_value and distance > PATH_TOLERANCE:
            multiple = True

    status = f"{name}: {best.message}"
    result = RateResult(
        ell=ell,
        value=float(details["values"][0]),
        status=status,
        converged=bool(best.success),
        path=path,
        entropies=details["entropies"][0],
        factor_cost=float(details["factor_cost"][0]),
        c=c,
        penalty=float(details["penalty"][0]),
        lln_loss=lln_loss,
        starts=[{"start": n, "value": float(r.fun), "converged": bool(r.success), "iterations": int(r.nit)}
                for n, r in runs],
        multiple_minima=multiple,
        evaluations=problem.evaluations,
    )

    if not result.converged:
        logger.warning("Rate optimizer did not converge",
                       extra=fields(ell=ell, status=status, value=result.value))
    if multiple:
        logger.warning("Several distinct minimizers found", extra=fields(ell=ell))
    logger.info(f"Rate computed in {time.time() - start_time:.2f}s",
                extra=fields(ell=ell, value=result.value, converged=result.converged))
    return result


def rate_curve(pool: PoolSpec, factor: FactorSpec, ells: Sequence[float],
               grid: Optional[TimeGrid] = None, c: Optional[float] = None,
               K: int = DEFAULT_ORDER, max_iter: int = 200, gtol: float = 1e-7,
               threads: Optional[int] = None) -> List[RateResult]:
    """I′ на сетке уровней; каждая точка стартует с предыдущей экстремали"""
    results = []
    warm = None
    for ell in sorted(ells):
        result = rate_heterogeneous(pool, factor, ell, grid, c, K, max_iter, gtol, warm, threads)
        results.append(result)
        if result.status != "at_or_below_lln":
            warm = result.path
    return results
