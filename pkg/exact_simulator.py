#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Точное (полное) моделирование N-именного портфеля методом Монте-Карло
"""

import math
import time
import threading
from dataclasses import dataclass
from typing import Optional, Dict, Any, List, Tuple

import numpy as np

from config import PoolSpec, FactorSpec, TimeGrid, SeedSpec
from logging_config import get_logger, fields
from portfolio import (NumericalFailure, PoolArrays, pool_arrays, simulate_factor_path,
                       validate_pool)
from workers import process_map, chunk_ranges, resolve_threads, RUN_SIMULATE

ASSIGNMENT_RULES = ("intensity", "largest_ratio")
DEFAULT_ASSIGNMENT = "intensity"
_TINY_RATE = 1e-300


@dataclass(frozen=True)
class SystemState:
    """Снимок системы в момент t"""
    t: float
    lambdas: np.ndarray
    alive: np.ndarray
    compensators: np.ndarray
    thresholds: np.ndarray
    x: float


@dataclass(frozen=True)
class LossPath:
    """Траектория доли потерь L^N на сетке"""
    grid: TimeGrid
    losses: np.ndarray
    default_times: Tuple[Tuple[float, int], ...]
    n_names: int
    states: Optional[Tuple[SystemState, ...]] = None
    log_weight: float = 0.0

    @property
    def terminal_loss(self) -> float:
        return float(self.losses[-1])

    @property
    def default_counts(self) -> np.ndarray:
        return np.rint(self.losses * self.n_names).astype(np.int64)


@dataclass(frozen=True)
class TwistSpec:
    """Дополнительный поток дефолтов интенсивности βN до target_defaults-го дефолта"""
    beta: float
    target_defaults: int
    assignment: str = DEFAULT_ASSIGNMENT

    def __post_init__(self):
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"Twist beta must be finite and >= 0: {self.beta}")
        if self.assignment not in ASSIGNMENT_RULES:
            raise ValueError(f"Unsupported assignment rule: {self.assignment}")


@dataclass
class EnsembleResult:
    """Ансамбль путей: счётчики дефолтов на сетке и веса"""
    grid: TimeGrid
    n_names: int
    counts: np.ndarray          # (n_paths, M+1) число дефолтов
    log_weights: np.ndarray     # (n_paths,) нули без твиста

    @property
    def n_paths(self) -> int:
        return self.counts.shape[0]

    @property
    def losses(self) -> np.ndarray:
        return self.counts / self.n_names

    @property
    def terminal(self) -> np.ndarray:
        return self.counts[:, -1] / self.n_names

    def samples_at(self, t: float) -> np.ndarray:
        """L^N_t по ближайшему узлу сетки"""
        k = int(round(t / self.grid.dt))
        if not 0 <= k <= self.grid.n_steps:
            raise ValueError(f"Time {t} outside the grid [0, {self.grid.horizon}]")
        return self.counts[:, k] / self.n_names

    def histogram(self, t: Optional[float] = None) -> np.ndarray:
        """Частоты значений {0, 1/N, …, 1}"""
        k = self.grid.n_steps if t is None else int(round(t / self.grid.dt))
        return np.bincount(self.counts[:, k], minlength=self.n_names + 1)

    def summary(self) -> Dict[str, Any]:
        terminal = self.terminal
        stderr = float(terminal.std(ddof=1) / math.sqrt(self.n_paths)) if self.n_paths > 1 else float("nan")
        return {"n_paths": self.n_paths, "n_names": self.n_names,
                "mean_loss": float(terminal.mean()), "stderr": stderr}


class ExactSimulator:
    """Эйлер с полным усечением, пороги-экспоненты и каскад заражения внутри шага"""

    def __init__(self, pool: PoolSpec, factor: FactorSpec, grid: TimeGrid, logger=None,
                 announce: bool = True):
        problems = validate_pool(pool)
        if problems:
            raise ValueError(f"Invalid pool: {'; '.join(problems)}")
        self.pool = pool
        self.factor = factor.resolved_for(pool.n_names)
        self.grid = grid
        self.logger = logger or get_logger("exact_sim")
        self._arrays: PoolArrays = pool_arrays(pool)
        self._stats_lock = threading.Lock()
        self._stats = {
            "total_paths": 0,
            "total_defaults": 0,
            "failed_paths": 0,
            "total_processing_time": 0.0,
        }

        a = self._arrays
        dt = grid.dt
        # коэффициенты шага по именам, в исходном порядке
        self._coef = {
            "keep": 1.0 - a.alpha * dt,
            "push": a.alpha * a.lambda_bar * dt,
            "vol": a.sigma * math.sqrt(dt),
            "tilt": a.beta_s * self.factor.eps,
            "jump": a.beta_c / a.size,
        }
        self._contagion = bool(np.any(a.beta_c != 0.0))
        self._negative_jumps = bool(np.any(a.beta_c < 0.0))

        if announce:
            alpha_dt = float(a.alpha.max()) * dt
            if alpha_dt >= 1.0:
                self.logger.warning("Time step too coarse for mean reversion",
                                    extra=fields(alpha_dt=alpha_dt, dt=dt))
            self.logger.debug(f"Exact simulator ready: N={pool.n_names}, M={grid.n_steps}, "
                              f"eps={self.factor.eps:.4g}")

    def simulate_path(self, rng: np.random.Generator, keep_states: bool = False,
                      twist: Optional[TwistSpec] = None) -> LossPath:
        """Один путь системы"""
        start_time = time.time()
        try:
            path = self._run_path(rng, keep_states, twist)
        except NumericalFailure as e:
            with self._stats_lock:
                self._stats["failed_paths"] += 1
            self.logger.error(f"Path aborted: {e}", extra=fields(**e.diagnostics))
            raise
        with self._stats_lock:
            self._stats["total_paths"] += 1
            self._stats["total_defaults"] += len(path.default_times)
            self._stats["total_processing_time"] += time.time() - start_time
        return path

    def _run_path(self, rng: np.random.Generator, keep_states: bool,
                  twist: Optional[TwistSpec]) -> LossPath:
        n = self._arrays.size
        grid = self.grid
        dt = grid.dt
        times = grid.times

        factor_path = simulate_factor_path(self.factor, grid,
                                           rng if self.factor.kind != "none" else None)
        x = factor_path.x
        thresholds = rng.standard_exponential(n)

        # живые имена занимают префикс [:m]; выбывшее имя меняется местами с последним живым
        ids = np.arange(n)
        lam = self._arrays.lambda0.copy()
        resid = thresholds.copy()           # порог минус компенсатор
        thr = thresholds.copy()
        keep, push, vol, tilt, jump = (self._coef[k].copy()
                                       for k in ("keep", "push", "vol", "tilt", "jump"))
        columns = (ids, lam, resid, thr, keep, push, vol, tilt, jump)
        m = n

        lam_out = lam.copy()                # λ и компенсатор выбывших на момент дефолта
        comp_out = np.zeros(n)
        counts = np.zeros(grid.n_steps + 1, dtype=np.int64)
        defaults: List[Tuple[float, int]] = []

        beta = twist.beta if twist is not None else 0.0
        twist_on = beta > 0 and twist.target_defaults > 0
        extra_rate = beta * n * dt
        extra_left = rng.standard_exponential() if twist_on else math.inf
        log_weight = 0.0

        def snapshot(t: float, xk: float) -> SystemState:
            live = ids[:m]
            lambdas, comps = lam_out.copy(), comp_out.copy()
            lambdas[live] = lam[:m]
            comps[live] = thr[:m] - resid[:m]
            alive = np.zeros(n, dtype=bool)
            alive[live] = True
            return SystemState(t, lambdas, alive, comps, thresholds, xk)

        states = [snapshot(0.0, x[0])] if keep_states else []

        for k in range(grid.n_steps):
            if m > 0:
                la = lam[:m]
                noise = vol[:m] * np.sqrt(la) * rng.standard_normal(m)
                la *= keep[:m] + tilt[:m] * (x[k + 1] - x[k])
                la += push[:m]
                la += noise
                np.maximum(la, 0.0, out=la)
                if not math.isfinite(float(la.sum())):
                    raise NumericalFailure("Non-finite intensity", step=k, t=float(times[k]))
                rates = np.maximum(la * dt, _TINY_RATE)

            # события внутри шага в долях шага s ∈ [0, 1]
            s = 0.0
            while m > 0:
                frac = resid[:m] / rates
                j = int(np.argmin(frac))
                s_name = s + max(float(frac[j]), 0.0)
                s_extra = s + extra_left / extra_rate if twist_on else math.inf
                s_event = min(s_name, s_extra)
                if s_event > 1.0:
                    break

                elapsed = s_event - s
                if elapsed > 0.0:
                    resid[:m] -= rates * elapsed
                if twist_on:
                    extra_left -= extra_rate * elapsed
                    log_weight += extra_rate * elapsed
                s = s_event

                if s_extra < s_name:
                    j = self._assign_extra(rng, lam[:m], resid[:m], thr[:m], twist)
                    extra_left = rng.standard_exponential()
                else:
                    resid[j] = 0.0

                if twist_on:
                    pool_intensity = float(lam[:m].sum())
                    if pool_intensity <= 0:
                        raise NumericalFailure("Twist undefined: zero pool intensity with survivors",
                                               step=k, defaults=len(defaults))
                    log_weight -= math.log1p(beta * n / pool_intensity)

                name = int(ids[j])
                lam_out[name] = lam[j]
                comp_out[name] = thr[j] - resid[j]
                defaults.append((float(times[k] + s * dt), name))
                m -= 1
                for col in columns:
                    col[j] = col[m]
                if twist_on and len(defaults) >= twist.target_defaults:
                    twist_on = False
                if m == 0:
                    break

                # скачок βC/N у всех выживших
                if self._contagion:
                    la = lam[:m]
                    la += jump[:m]
                    if self._negative_jumps:
                        np.maximum(la, 0.0, out=la)
                    rates = np.maximum(la * dt, _TINY_RATE)
                else:
                    rates[j] = rates[m]
                    rates = rates[:m]

            if m > 0:
                resid[:m] -= rates * (1.0 - s)
            if twist_on:
                extra_left -= extra_rate * (1.0 - s)
                log_weight += extra_rate * (1.0 - s)
            counts[k + 1] = len(defaults)

            if keep_states:
                states.append(snapshot(float(times[k + 1]), x[k + 1]))

        return LossPath(grid=grid, losses=counts / n, default_times=tuple(defaults), n_names=n,
                        states=tuple(states) if keep_states else None, log_weight=log_weight)

    @staticmethod
    def _assign_extra(rng, lam, resid, thr, twist: TwistSpec) -> int:
        """Кому из живых (позиция в префиксе) достаётся дефолт дополнительного потока"""
        if twist.assignment == "intensity":
            total = float(lam.sum())
            if total <= 0:
                raise NumericalFailure("Twist undefined: zero pool intensity with survivors")
            return int(rng.choice(len(lam), p=lam / total))
        # largest_ratio: наибольшая доля израсходованного порога
        return int(np.argmin(resid / thr))

    def _merge_stats(self, stats: Dict[str, Any]):
        with self._stats_lock:
            for key in self._stats:
                self._stats[key] += stats[key]

    def simulate_ensemble(self, n_paths: int, seed: SeedSpec, run: int = RUN_SIMULATE,
                          twist: Optional[TwistSpec] = None,
                          threads: Optional[int] = None) -> EnsembleResult:
        """n_paths независимых путей в процессах; путь j использует поток (run, j)"""
        if n_paths < 1:
            raise ValueError(f"n_paths must be >= 1: {n_paths}")
        start_time = time.time()
        workers = resolve_threads(threads)

        jobs = [_BlockJob(self.pool, self.factor, self.grid, seed, run, twist, indices)
                for indices in chunk_ranges(n_paths, workers * 4)]
        blocks = process_map(_simulate_block, jobs, workers)
        for _, _, stats in blocks:
            self._merge_stats(stats)
        counts = np.concatenate([c for c, _, _ in blocks])
        log_weights = np.concatenate([w for _, w, _ in blocks])
        ensemble = EnsembleResult(grid=self.grid, n_names=self.pool.n_names,
                                  counts=counts, log_weights=log_weights)

        self.logger.info(f"Ensemble completed: {n_paths} paths in {time.time() - start_time:.2f}s",
                         extra=fields(workers=workers, **ensemble.summary()))
        return ensemble

    def get_stats(self) -> Dict[str, Any]:
        """Получить статистику использования"""
        with self._stats_lock:
            stats = self._stats.copy()
        if stats["total_paths"] > 0:
            stats["avg_processing_time"] = stats["total_processing_time"] / stats["total_paths"]
            stats["avg_defaults"] = stats["total_defaults"] / stats["total_paths"]
        else:
            stats["avg_processing_time"] = 0.0
            stats["avg_defaults"] = 0.0
        return stats


@dataclass(frozen=True)
class _BlockJob:
    pool: PoolSpec
    factor: FactorSpec
    grid: TimeGrid
    seed: SeedSpec
    run: int
    twist: Optional[TwistSpec]
    indices: range


def _simulate_block(job: _BlockJob):
    """Блок путей в рабочем процессе: счётчики, лог-веса и статистика"""
    simulator = ExactSimulator(job.pool, job.factor, job.grid, announce=False)
    counts = np.empty((len(job.indices), job.grid.n_steps + 1), dtype=np.int64)
    log_weights = np.empty(len(job.indices))
    for row, j in enumerate(job.indices):
        path = simulator.simulate_path(job.seed.generator(job.run, j), twist=job.twist)
        counts[row] = path.default_counts
        log_weights[row] = path.log_weight
    return counts, log_weights, {k: v for k, v in simulator.get_stats().items() if not k.startswith("avg_")}


def simulate_path(pool: PoolSpec, factor: FactorSpec, grid: TimeGrid,
                  stream: np.random.Generator, keep_states: bool = False) -> LossPath:
    """Один путь L^N (с траекторией состояний по запросу)"""
    return ExactSimulator(pool, factor, grid).simulate_path(stream, keep_states=keep_states)


def simulate_ensemble(pool: PoolSpec, factor: FactorSpec, grid: TimeGrid, n_paths: int,
                      seed: SeedSpec, threads: Optional[int] = None) -> EnsembleResult:
    """Эмпирическое распределение L^N на сетке по n_paths путям"""
    return ExactSimulator(pool, factor, grid).simulate_ensemble(n_paths, seed, threads=threads)
