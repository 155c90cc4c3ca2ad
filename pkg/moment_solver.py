#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Приближение первого порядка (ЗБЧ): система моментов предельной меры выживших

Для каждого типа i решается u_k⁽ⁱ⁾(t) = ∫ λ^k υ⁽ⁱ⁾(t, λ) dλ, k = 0..K, с замыканием
u_{K+1} = u_K. Заражение связывает типы через общий ū₁ = Σᵢ u₁⁽ⁱ⁾.
Предельная доля потерь L_t = 1 − Σᵢ u₀⁽ⁱ⁾(t).
"""

import math
import time
from dataclasses import dataclass, replace
from typing import Optional, List, Union

import numpy as np

from config import PoolSpec, FactorSpec, TimeGrid, SeedSpec
from logging_config import get_logger, fields
from portfolio import (NumericalFailure, FactorPath, validate_pool, simulate_factor_path,
                       simulate_factor_paths, factor_path_from_values)
from workers import ordered_map, chunk_ranges, resolve_threads, RUN_LLN

MAX_REFINEMENT = 64
BRIDGE_ENTROPY = 0x6272696467

logger = get_logger("lln")


@dataclass(frozen=True)
class MomentTrajectory:
    """Траектория моментов u (M+1, G, K+1) и путь фактора, который её породил"""
    grid: TimeGrid
    u: np.ndarray
    weights: np.ndarray
    factor_path: FactorPath
    refinements: int = 0

    @property
    def order(self) -> int:
        return self.u.shape[2] - 1

    @property
    def loss(self) -> np.ndarray:
        """L_t = 1 − Σ u₀⁽ⁱ⁾(t)"""
        return 1.0 - self.u[:, :, 0].sum(axis=1)

    @property
    def terminal_loss(self) -> float:
        return float(self.loss[-1])

    @property
    def type_losses(self) -> np.ndarray:
        """Доля дефолтов внутри каждого типа: 1 − u₀⁽ⁱ⁾/wᵢ, форма (M+1, G)"""
        return 1.0 - self.u[:, :, 0] / self.weights[None, :]


class MomentSystem:
    """Правая часть системы моментов для пачки путей u (P, G, K+1)"""

    def __init__(self, pool: PoolSpec, factor: FactorSpec, order: int):
        if order < 2:
            raise ValueError(f"Truncation order must be >= 2: {order}")
        problems = validate_pool(pool)
        if problems:
            raise ValueError(f"Invalid pool: {'; '.join(problems)}")
        self.factor = factor.resolved_for(pool.n_names)
        self.order = order
        self.weights = pool.weights

        params = [g.params for g in pool.groups]
        column = lambda attr: np.array([getattr(p, attr) for p in params], dtype=float)[:, None]
        self.lambda0 = column("lambda0")
        self.alpha = column("alpha")
        self.lambda_bar = column("lambda_bar")
        self.sigma = column("sigma")
        self.beta_c = column("beta_c")
        # ε·βS везде
        self.eff_beta_s = self.factor.eps * column("beta_s")

        self.k = np.arange(order + 1, dtype=float)[None, :]
        self._diag = -self.alpha * self.k
        self._low = (0.5 * self.sigma ** 2 * self.k * (self.k - 1.0)
                     + self.alpha * self.lambda_bar * self.k)

    @property
    def deterministic(self) -> bool:
        return not self.factor.is_active or not np.any(self.eff_beta_s)

    def initial(self, batch: int) -> np.ndarray:
        """u_k⁽ⁱ⁾(0) = wᵢ λ₀^k (точечная мера в λ₀ для каждой группы)"""
        u0 = self.weights[:, None] * self.lambda0 ** self.k
        return np.broadcast_to(u0, (batch,) + u0.shape).copy()

    def drift(self, u: np.ndarray, x: np.ndarray) -> np.ndarray:
        k = self.k
        u_bar1 = u[:, :, 1].sum(axis=1)[:, None, None]
        b0 = np.asarray(self.factor.drift(x), dtype=float).reshape(-1, 1, 1)
        s0 = np.asarray(self.factor.diffusion(x), dtype=float).reshape(-1, 1, 1)
        diag = (self._diag + self.eff_beta_s * b0 * k
                + 0.5 * self.eff_beta_s ** 2 * s0 ** 2 * k * (k - 1.0))
        low = self._low + self.beta_c * k * u_bar1
        u_next = np.concatenate([u[:, :, 1:], u[:, :, -1:]], axis=2)
        u_prev = np.concatenate([np.zeros(u.shape[:2] + (1,)), u[:, :, :-1]], axis=2)
        return diag * u + low * u_prev - u_next

    def noise_exponent(self, x: np.ndarray) -> np.ndarray:
        """εβS σ₀(X) k, форма (P, G, K+1)"""
        s0 = np.asarray(self.factor.diffusion(x), dtype=float).reshape(-1, 1, 1)
        return self.eff_beta_s * s0 * self.k

    def step(self, u: np.ndarray, x: np.ndarray, dt: float, dv: np.ndarray) -> np.ndarray:
        """Один шаг: RK4 без шума, иначе Эйлер–Маруяма в мультипликативной форме"""
        if self.deterministic:
            k1 = self.drift(u, x)
            k2 = self.drift(u + 0.5 * dt * k1, x)
            k3 = self.drift(u + 0.5 * dt * k2, x)
            k4 = self.drift(u + dt * k3, x)
            return u + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        b = self.noise_exponent(x)
        dv = np.asarray(dv, dtype=float).reshape(-1, 1, 1)
        # точное решение для b·u·dV при замороженном b
        return (u + self.drift(u, x) * dt) * np.exp(b * dv - 0.5 * b ** 2 * dt)


def _bridge_pieces(dv: float, pieces: int, dt: float, rng: np.random.Generator) -> np.ndarray:
    """Разбить приращение dV на pieces частей по броуновскому мосту"""
    z = rng.standard_normal(pieces) * math.sqrt(dt / pieces)
    return z - (z.sum() - dv) / pieces


def _bridge_stream(step: int) -> np.random.Generator:
    """Поток моста для шага внешнего пути, у которого нет своего генератора"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(BRIDGE_ENTROPY, spawn_key=(step,))))


def integrate_moments(system: MomentSystem, grid: TimeGrid, factor_path: FactorPath,
                      streams: Optional[List[np.random.Generator]] = None,
                      log=None):
    """Проинтегрировать пачку путей; возвращает (u (P, M+1, G, K+1), число измельчений)"""
    log = log or logger
    x = np.atleast_2d(factor_path.x)
    dv = np.atleast_2d(factor_path.dv)
    batch = x.shape[0]
    dt = grid.dt
    u = system.initial(batch)
    out = np.empty((batch, grid.n_steps + 1) + u.shape[1:])
    out[:, 0] = u
    refinements = 0

    for j in range(grid.n_steps):
        new = system.step(u, x[:, j], dt, dv[:, j])
        bad = np.flatnonzero(np.any(new < 0, axis=(1, 2)) | ~np.all(np.isfinite(new), axis=(1, 2)))
        for p in bad:
            stream = streams[p] if streams is not None else None
            new[p] = _refine_step(system, u[p], x[p, j], x[p, j + 1], dv[p, j], dt, stream, j, grid, log)
            refinements += 1
        out[:, j + 1] = new
        u = new
    return out, refinements


def _substep_factor(system: MomentSystem, x: float, x_next: float, parts: np.ndarray,
                    dt: float) -> np.ndarray:
    """X в узлах подшагов: Эйлер по частям моста, концы совпадают с заданным путём"""
    frac = np.arange(len(parts) + 1) / len(parts)
    w = np.concatenate([[0.0], np.cumsum(parts)])
    xs = x + float(system.factor.drift(x)) * dt * frac + float(system.factor.diffusion(x)) * w
    return xs + frac * (x_next - xs[-1])


def _refine_step(system: MomentSystem, u: np.ndarray, x: float, x_next: float, dv: float, dt: float,
                 stream: Optional[np.random.Generator], step: int, grid: TimeGrid, log) -> np.ndarray:
    """Переделать шаг с 2, 4, …, 64 подшагами"""
    if not system.deterministic and stream is None:
        stream = _bridge_stream(step)
    pieces = 2
    while True:
        h = dt / pieces
        if system.deterministic:
            parts = np.zeros(pieces)
            xs = np.full(pieces + 1, x)
        else:
            parts = _bridge_pieces(dv, pieces, dt, stream)
            xs = _substep_factor(system, x, x_next, parts, dt)
        v = u[None]
        for i, piece in enumerate(parts):
            v = system.step(v, xs[i:i + 1], h, np.array([piece]))
        if np.all(np.isfinite(v)) and np.all(v >= 0):
            return v[0]
        if pieces >= MAX_REFINEMENT:
            break
        pieces *= 2

    if not np.all(np.isfinite(v)) or np.any(v[0, :, 0] < 0):
        raise NumericalFailure("Negative survival mass after step refinement",
                               step=step, t=round(float(grid.times[step]), 12),
                               substeps=MAX_REFINEMENT, min_u0=float(np.min(v[0, :, 0])))
    log.warning("Clipped negative higher moments",
                extra=fields(step=step, substeps=MAX_REFINEMENT, min_moment=float(v.min())))
    return np.maximum(v[0], 0.0)


def solve_lln(pool: PoolSpec, factor: FactorSpec, grid: TimeGrid, K: int = 12,
              x_path: Union[FactorPath, np.ndarray, None] = None,
              stream: Optional[np.random.Generator] = None) -> MomentTrajectory:
    """Траектория моментов ЗБЧ вдоль одного пути фактора

    Если путь фактора не передан, он моделируется из stream (при ε > 0).
    """
    system = MomentSystem(pool, factor, K)
    factor_spec = system.factor
    if isinstance(x_path, FactorPath):
        factor_path = x_path
    elif x_path is not None:
        factor_path = factor_path_from_values(factor_spec, grid, x_path)
    elif system.deterministic:
        factor_path = simulate_factor_path(factor_spec, grid, None)
    else:
        if stream is None:
            raise ValueError("A random stream or a factor path is required when the factor is active")
        factor_path = simulate_factor_path(factor_spec, grid, stream)

    u, refinements = integrate_moments(system, grid, factor_path,
                                       [stream] if stream is not None else None)
    trajectory = MomentTrajectory(grid=grid, u=u[0], weights=system.weights,
                                  factor_path=factor_path, refinements=refinements)
    logger.debug("LLN path solved", extra=fields(order=K, terminal_loss=trajectory.terminal_loss,
                                                 refinements=refinements))
    return trajectory


@dataclass
class LossDistribution:
    """Выборка предельных потерь L_T (по одной на путь X)"""
    samples: np.ndarray
    refinements: int

    def histogram(self, bins: int = 50):
        return np.histogram(self.samples, bins=bins, range=(0.0, 1.0))

    def summary(self):
        return {"n_paths": len(self.samples), "mean_loss": float(self.samples.mean()),
                "std_loss": float(self.samples.std(ddof=1)) if len(self.samples) > 1 else 0.0,
                "refinements": self.refinements}


def lln_loss_distribution(pool: PoolSpec, factor: FactorSpec, grid: TimeGrid, K: int,
                          n_factor_paths: int, seed: SeedSpec, run: int = RUN_LLN,
                          threads: Optional[int] = None) -> LossDistribution:
    """Условные по X предельные потери: путь j использует поток (run, j)"""
    if n_factor_paths < 1:
        raise ValueError(f"n_factor_paths must be >= 1: {n_factor_paths}")
    start_time = time.time()
    system = MomentSystem(pool, factor, K)
    if system.deterministic:
        logger.warning("Factor inactive: the limiting loss is a point mass",
                       extra=fields(eps=system.factor.eps))
    workers = resolve_threads(threads)

    def work(indices: range):
        streams = [seed.generator(run, j) for j in indices]
        factor_paths = simulate_factor_paths(system.factor, grid, streams)
        u, refinements = integrate_moments(system, grid, factor_paths, streams)
        return 1.0 - u[:, -1, :, 0].sum(axis=1), refinements

    blocks = ordered_map(work, chunk_ranges(n_factor_paths, workers * 4), workers)
    samples = np.concatenate([b[0] for b in blocks])
    result = LossDistribution(samples=samples, refinements=sum(b[1] for b in blocks))
    logger.info(f"LLN distribution completed in {time.time() - start_time:.2f}s",
                extra=fields(**result.summary()))
    return result


def lln_terminal_loss(pool: PoolSpec, factor: FactorSpec, grid: TimeGrid, K: int = 12) -> float:
    """L_T при выключенном шуме фактора"""
    return solve_lln(pool, replace(factor, epsilon=0.0), grid, K).terminal_loss
