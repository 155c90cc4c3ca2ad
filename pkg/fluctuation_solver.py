#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Приближение второго порядка: флуктуационные моменты ξ_k = ⟨λ^k, Ξ̄_t⟩

L^N_t ≈ L_t − ξ₀(t)/√N, где ξ решает линейную систему, управляемую моментами ЗБЧ,
тем же приращением dV фактора и условно гауссовским мартингалом.
Только однородный портфель.
"""

import math
import time
import threading
from dataclasses import dataclass
from typing import Optional, Dict, Any, Tuple

import numpy as np

from config import PoolSpec, FactorSpec, TimeGrid, SeedSpec
from logging_config import get_logger, fields
from moment_solver import MomentSystem, MomentTrajectory, integrate_moments
from portfolio import FactorPath, NumericalFailure, simulate_factor_paths
from workers import ordered_map, chunk_ranges, resolve_threads, RUN_CLT

PSD_TOLERANCE = 1e-10

logger = get_logger("clt")


@dataclass(frozen=True)
class FluctuationTrajectory:
    """ξ_k(t), k = 0..K_f, на сетке вместе с решением ЗБЧ"""
    grid: TimeGrid
    xi: np.ndarray  # (M+1, K_f+1)
    lln: MomentTrajectory
    psd_projections: int = 0

    def second_order_loss(self, n_names: int) -> np.ndarray:
        """L_t − ξ₀(t)/√N"""
        return self.lln.loss - self.xi[:, 0] / math.sqrt(n_names)


@dataclass
class SecondOrderSamples:
    """Терминальные выборки: ЗБЧ, поправка второго порядка и сами ξ₀(T)"""
    lln: np.ndarray
    second_order: np.ndarray
    xi0: np.ndarray
    n_names: int
    psd_projections: int = 0

    def summary(self) -> Dict[str, Any]:
        n = len(self.xi0)
        return {
            "n_paths": n,
            "n_names": self.n_names,
            "mean_lln": float(self.lln.mean()),
            "mean_second_order": float(self.second_order.mean()),
            "mean_xi0": float(self.xi0.mean()),
            "stderr_xi0": float(self.xi0.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan"),
            "var_xi0": float(self.xi0.var(ddof=1)) if n > 1 else float("nan"),
            "psd_projections": self.psd_projections,
        }


class FluctuationSystem:
    """Коэффициенты системы ξ и матрица скоростей ковариации мартингала"""

    def __init__(self, pool: PoolSpec, factor: FactorSpec, fluct_order: int, order: int):
        if not pool.is_homogeneous:
            raise ValueError("Fluctuation limit supports homogeneous pools only")
        if fluct_order < 1:
            raise ValueError(f"Fluctuation order must be >= 1: {fluct_order}")
        if order < 2 * fluct_order + 1:
            raise ValueError(f"Moment order {order} too small for fluctuation order {fluct_order}: "
                             f"need K >= {2 * fluct_order + 1}")
        self.moments = MomentSystem(pool, factor, order)
        self.factor = self.moments.factor
        self.fluct_order = fluct_order
        p = pool.groups[0].params
        self.params = p
        self.eff_beta_s = self.factor.eps * p.beta_s

        k = np.arange(fluct_order + 1)
        self.k = k.astype(float)
        self._km1 = np.maximum(k - 1, 0)
        kf = self.k
        self._low = 0.5 * p.sigma ** 2 * kf * (kf - 1.0) + p.alpha * p.lambda_bar * kf
        self._diag = -p.alpha * kf

        kk, jj = np.meshgrid(k, k, indexing="ij")
        self._kj = (kk * jj).astype(float)
        self._kk = kk.astype(float)
        self._jj = jj.astype(float)
        self._idx_sum_m1 = np.maximum(kk + jj - 1, 0)
        self._idx_sum_p1 = kk + jj + 1
        self._idx_k_m1 = np.maximum(kk - 1, 0)
        self._idx_j_m1 = np.maximum(jj - 1, 0)
        self._idx_k_p1 = kk + 1
        self._idx_j_p1 = jj + 1

    def covariance_rates(self, u: np.ndarray) -> np.ndarray:
        """C_kj по моментам u (..., K+1); результат (..., K_f+1, K_f+1)"""
        p = self.params
        u1 = u[..., 1][..., None, None]
        C = (p.sigma ** 2 * self._kj * u[..., self._idx_sum_m1]
             + u[..., self._idx_sum_p1]
             + p.beta_c ** 2 * self._kj * u[..., self._idx_k_m1] * u[..., self._idx_j_m1] * u1
             - p.beta_c * (self._kk * u[..., self._idx_k_m1] * u[..., self._idx_j_p1]
                           + self._jj * u[..., self._idx_j_m1] * u[..., self._idx_k_p1]))
        return 0.5 * (C + np.swapaxes(C, -1, -2))

    def covariance_roots(self, C: np.ndarray) -> Tuple[np.ndarray, int]:
        """Корни B·Bᵀ = C⁺ для всех матриц сразу; C⁺ - проекция на PSD"""
        w, V = np.linalg.eigh(C)
        scale = np.maximum(np.abs(w).max(axis=-1, keepdims=True), 1e-300)
        projected = int(np.count_nonzero(w.min(axis=-1) < -PSD_TOLERANCE * scale[..., 0]))
        w = np.maximum(w, 0.0)
        return V * np.sqrt(w)[..., None, :], projected

    def drift(self, xi: np.ndarray, u: np.ndarray, x: np.ndarray) -> np.ndarray:
        p = self.params
        k = self.k
        xi_prev = np.concatenate([np.zeros((xi.shape[0], 1)), xi[:, :-1]], axis=1)
        xi_next = np.concatenate([xi[:, 1:], xi[:, -1:]], axis=1)
        u1 = u[:, 1:2]
        u_km1 = u[:, self._km1] * (k > 0)
        b0 = np.asarray(self.factor.drift(x), dtype=float).reshape(-1, 1)
        s0 = np.asarray(self.factor.diffusion(x), dtype=float).reshape(-1, 1)
        es = self.eff_beta_s
        return ((self._low + p.beta_c * k * u1) * xi_prev
                + self._diag * xi - xi_next
                + es * b0 * k * xi
                + 0.5 * es ** 2 * s0 ** 2 * k * (k - 1.0) * xi
                + p.beta_c * k * u_km1 * xi[:, 1:2])

    def integrate(self, grid: TimeGrid, u: np.ndarray, factor_path: FactorPath,
                  normals: np.ndarray) -> Tuple[np.ndarray, int]:
        """Эйлер для пачки: u (P, M+1, K+1), normals (P, M, K_f+1)"""
        x = np.atleast_2d(factor_path.x)
        dv = np.atleast_2d(factor_path.dv)
        batch = u.shape[0]
        dt = grid.dt
        sqrt_dt = math.sqrt(dt)

        roots, projected = self.covariance_roots(self.covariance_rates(u[:, :-1]))
        dm = np.einsum("pmij,pmj->pmi", roots, normals) * sqrt_dt

        xi = np.zeros((batch, self.fluct_order + 1))
        out = np.empty((batch, grid.n_steps + 1, self.fluct_order + 1))
        out[:, 0] = xi
        for j in range(grid.n_steps):
            s0 = np.asarray(self.factor.diffusion(x[:, j]), dtype=float).reshape(-1, 1)
            noise = self.eff_beta_s * s0 * self.k * xi * dv[:, j:j + 1]
            xi = xi + self.drift(xi, u[:, j], x[:, j]) * dt + noise + dm[:, j]
            out[:, j + 1] = xi
        if not np.all(np.isfinite(out)):
            raise NumericalFailure("Non-finite fluctuation moments", order=self.fluct_order)
        return out, projected


def _warn_projections(projected: int, n_steps: int):
    if projected:
        logger.warning("Covariance rate not PSD after truncation; projected",
                       extra=fields(projected=projected, steps=n_steps))


def solve_fluctuations(pool: PoolSpec, factor: FactorSpec, grid: TimeGrid, K_f: int,
                       lln: MomentTrajectory, stream: np.random.Generator) -> FluctuationTrajectory:
    """Флуктуационные моменты вдоль пути ЗБЧ lln (тот же dV), мартингал из stream"""
    if lln.grid != grid:
        raise ValueError("LLN trajectory must be solved on the same grid")
    system = FluctuationSystem(pool, factor, K_f, lln.order)
    u = lln.u[None, :, 0, :]
    normals = stream.standard_normal((1, grid.n_steps, K_f + 1))
    xi, projected = system.integrate(grid, u, lln.factor_path, normals)
    _warn_projections(projected, grid.n_steps)
    return FluctuationTrajectory(grid=grid, xi=xi[0], lln=lln, psd_projections=projected)


def second_order_loss_samples(pool: PoolSpec, factor: FactorSpec, grid: TimeGrid, K_f: int,
                              n_names: Optional[int], n_paths: int, seed: SeedSpec,
                              K: Optional[int] = None, run: int = RUN_CLT,
                              threads: Optional[int] = None) -> SecondOrderSamples:
    """Совместное моделирование (X, ЗБЧ, ξ) по путям; путь j использует поток (run, j)"""
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1: {n_paths}")
    n_names = n_names or pool.n_names
    order = K if K is not None else max(12, 2 * K_f + 1)
    start_time = time.time()
    # ε_N разрешается по N, для которого строится поправка
    system = FluctuationSystem(pool.with_names(n_names), factor, K_f, order)
    workers = resolve_threads(threads)
    projections = [0]
    lock = threading.Lock()

    def work(indices: range):
        streams = [seed.generator(run, j) for j in indices]
        factor_paths = simulate_factor_paths(system.factor, grid, streams)
        normals = np.stack([s.standard_normal((grid.n_steps, K_f + 1)) for s in streams])
        u, _ = integrate_moments(system.moments, grid, factor_paths, streams)
        u = u[:, :, 0, :]
        xi, projected = system.integrate(grid, u, factor_paths, normals)
        with lock:
            projections[0] += projected
        lln_terminal = 1.0 - u[:, -1, 0]
        return lln_terminal, xi[:, -1, 0]

    blocks = ordered_map(work, chunk_ranges(n_paths, workers * 4), workers)
    lln = np.concatenate([b[0] for b in blocks])
    xi0 = np.concatenate([b[1] for b in blocks])
    _warn_projections(projections[0], grid.n_steps * n_paths)
    result = SecondOrderSamples(lln=lln, second_order=lln - xi0 / math.sqrt(n_names), xi0=xi0,
                                n_names=n_names, psd_projections=projections[0])
    logger.info(f"Second-order samples completed in {time.time() - start_time:.2f}s",
                extra=fields(**result.summary()))
    return result
