#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Оценки редких событий P{L^N_T ≥ ℓ} методом выборки по значимости

Независимые имена: экспоненциальный сдвиг p → p_θ. Зависимый портфель:
дополнительный поток дефолтов интенсивности βN до ⌈ℓN⌉-го дефолта.
"""

import math
import time
import threading
from dataclasses import dataclass, field
from typing import Optional, List, Dict, Any, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import binom

from config import PoolSpec, FactorSpec, TimeGrid, SeedSpec, TypeParams, RunConfig
from logging_config import get_logger, fields
from affine_survival import default_probability
from exact_simulator import ExactSimulator, TwistSpec, DEFAULT_ASSIGNMENT
from ldp_optimizer import bernoulli_entropy
from portfolio import group_counts
from workers import (RUN_IS_INDEPENDENT, RUN_IS_HETEROGENEOUS, RUN_IS_DEPENDENT,
                     RUN_BETA_PILOT, RUN_BETA_PILOT_STRIDE)

BOUNDARY_SLACK = 1e-9

logger = get_logger("importance")


def threshold_count(ell: float, n_names: int) -> int:
    """Наименьшее k с k/N ≥ ℓ"""
    return int(math.ceil(ell * n_names - BOUNDARY_SLACK))


def _check_unit(name: str, value: float):
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1): {value}")


def tilted_probability(p, theta):
    """p_θ = p e^θ / (1 + p(e^θ − 1))"""
    return p * np.exp(theta) / (1.0 + p * np.expm1(theta))


def log_mgf(p, theta):
    """Λ̄(θ) = ln(p(e^θ − 1) + 1)"""
    return np.log1p(p * np.expm1(theta))


def theta_star(p: float, ell: float) -> float:
    """Оптимальный сдвиг: p_θ* = ℓ при ℓ > p, иначе 0"""
    _check_unit("p", p)
    _check_unit("ell", ell)
    if ell <= p:
        return 0.0
    return math.log(ell * (1.0 - p) / (p * (1.0 - ell)))


def binomial_tail(n_names: int, p: float, ell: float) -> float:
    """Точное P{Bin(N, p) ≥ ⌈ℓN⌉}"""
    return float(binom.sf(threshold_count(ell, n_names) - 1, n_names, p))


def poisson_binomial_tail(probs: Sequence[float], ell: float) -> float:
    """Точный хвост суммы независимых Бернулли (свёртка динамическим программированием)"""
    probs = np.asarray(probs, dtype=float)
    dist = np.zeros(len(probs) + 1)
    dist[0] = 1.0
    for p in probs:
        dist[1:] = dist[1:] * (1.0 - p) + dist[:-1] * p
        dist[0] *= 1.0 - p
    return float(dist[threshold_count(ell, len(probs)):].sum())


def bernoulli_weight(defaults: np.ndarray, p: float, theta: float) -> float:
    """Π (p/p_θ)^{Ξₙ} ((1−p)/(1−p_θ))^{1−Ξₙ} по индикаторам дефолта"""
    p_theta = tilted_probability(p, theta)
    defaults = np.asarray(defaults, dtype=float)
    return float(np.prod((p / p_theta) ** defaults * ((1.0 - p) / (1.0 - p_theta)) ** (1.0 - defaults)))


@dataclass(frozen=True)
class TwistIndependent:
    """Сдвиг θ для независимых имён с вероятностью дефолта p"""
    p: float
    theta: float

    @property
    def p_theta(self) -> float:
        return float(tilted_probability(self.p, self.theta))

    @property
    def log_mgf(self) -> float:
        return float(log_mgf(self.p, self.theta))


@dataclass
class ISEstimate:
    """Оценка, её дисперсия и второй момент Q̂"""
    estimate: float
    variance: float
    relative_error: float
    n_samples: int
    second_moment: float
    decay: float
    n_names: int
    second_moment_stderr: float = 0.0
    tilt: Dict[str, float] = field(default_factory=dict)

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / self.n_samples)

    @classmethod
    def from_values(cls, values: np.ndarray, n_names: int, **tilt) -> "ISEstimate":
        """values = 1{L ≥ ℓ}·вес для каждого пути"""
        values = np.asarray(values, dtype=float)
        n = len(values)
        if n == 0:
            raise ValueError("No samples")
        estimate = float(values.mean())
        variance = float(values.var(ddof=1)) if n > 1 else 0.0
        relative = math.sqrt(variance) / (estimate * math.sqrt(n)) if estimate > 0 else float("inf")
        second = float(np.mean(values ** 2))
        second_stderr = float(np.std(values ** 2, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        decay = -math.log(second) / n_names if second > 0 else float("inf")
        return cls(estimate=estimate, variance=variance, relative_error=relative, n_samples=n,
                   second_moment=second, decay=decay, n_names=n_names,
                   second_moment_stderr=second_stderr, tilt=tilt)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "variance": self.variance,
            "relative_error": self.relative_error,
            "n_samples": self.n_samples,
            "Q_hat": self.second_moment,
            "Q_hat_stderr": self.second_moment_stderr,
            "decay": self.decay,
            "n_names": self.n_names,
            **self.tilt,
        }


def estimate_bernoulli_tail(p: float, ell: float, n_names: int, n_samples: int,
                            rng: np.random.Generator, theta: Optional[float] = None) -> ISEstimate:
    """N L_T ∼ Bin(N, p_θ), вес e^{N(−θL + Λ̄(θ))}"""
    if n_samples < 1:
        raise ValueError(f"Number of samples must be >= 1: {n_samples}")
    theta = theta_star(p, ell) if theta is None else theta
    twist = TwistIndependent(p, theta)
    k = rng.binomial(n_names, twist.p_theta, size=n_samples)
    weights = np.exp(-theta * k + n_names * twist.log_mgf)
    values = np.where(k >= threshold_count(ell, n_names), weights, 0.0)
    return ISEstimate.from_values(values, n_names, theta=theta, p=p, p_theta=twist.p_theta)


def _require_independent(pool: PoolSpec):
    for g in pool.groups:
        if g.params.beta_c != 0.0 or g.params.beta_s != 0.0:
            raise ValueError("Independent estimators require beta_c = beta_s = 0")


def estimate_independent(params: TypeParams, T: float, ell: float, n_names: int, n_samples: int,
                         seed: SeedSpec, run: int = RUN_IS_INDEPENDENT, path: int = 0,
                         theta: Optional[float] = None, n_steps: int = 500) -> ISEstimate:
    """Однородный независимый портфель: p из кривой выживаемости"""
    _require_independent(PoolSpec.homogeneous(params, n_names))
    p = default_probability(params, T, n_steps)
    return estimate_bernoulli_tail(p, ell, n_names, n_samples, seed.generator(run, path), theta)


def optimality_check(params: TypeParams, T: float, ell: float, n_list: Sequence[int],
                     n_samples: int, seed: SeedSpec, n_steps: int = 500) -> List[Dict[str, float]]:
    """−(1/N) ln Q̂ при θ* против 2 I(ℓ)"""
    p = default_probability(params, T, n_steps)
    target = 2.0 * float(bernoulli_entropy(ell, p)) if ell > p else 0.0
    rows = []
    for n in n_list:
        est = estimate_bernoulli_tail(p, ell, n, n_samples, seed.generator(RUN_IS_INDEPENDENT, n))
        rows.append({"n_names": n, "decay": est.decay, "target": target,
                     "relative_gap": (target - est.decay) / target if target > 0 else 0.0})
        logger.debug("Optimality row", extra=fields(**rows[-1]))
    return rows


def common_tilt(probs: np.ndarray, counts: np.ndarray, ell: float) -> float:
    """θ, при котором Σ nᵢ p_{i,θ} = Nℓ"""
    if not 0.0 < ell < 1.0:
        raise ValueError(f"No tilt root for ell = {ell}")
    n_total = counts.sum()
    mean_p = float(counts @ probs) / n_total
    if ell <= mean_p:
        return 0.0
    if np.all(probs == probs[0]):
        return theta_star(float(probs[0]), ell)
    excess = lambda theta: float(counts @ tilted_probability(probs, theta)) / n_total - ell
    upper = 1.0
    while excess(upper) < 0:
        upper *= 2.0
        if upper > 1e4:
            raise ValueError(f"No tilt root for ell = {ell}")
    return brentq(excess, 0.0, upper, xtol=1e-14, rtol=1e-14)


def estimate_grouped_bernoulli_tail(probs: Sequence[float], counts: Sequence[int], ell: float,
                                    n_samples: int, rng: np.random.Generator) -> ISEstimate:
    """Группы по nᵢ имён с вероятностями pᵢ: биномы под p_{i,θ}, вес Π по группам"""
    if n_samples < 1:
        raise ValueError(f"Number of samples must be >= 1: {n_samples}")
    probs = np.asarray(probs, dtype=float)
    counts = np.asarray(counts, dtype=np.int64)
    n_names = int(counts.sum())
    theta = common_tilt(probs, counts, ell)
    if np.all(probs == probs[0]):
        return estimate_bernoulli_tail(float(probs[0]), ell, n_names, n_samples, rng, theta)

    tilted = tilted_probability(probs, theta)
    k = np.zeros(n_samples, dtype=np.int64)
    for n_g, p_g in zip(counts, tilted):
        k += rng.binomial(n_g, p_g, size=n_samples)
    log_norm = float(counts @ log_mgf(probs, theta))
    weights = np.exp(-theta * k + log_norm)
    values = np.where(k >= threshold_count(ell, n_names), weights, 0.0)
    return ISEstimate.from_values(values, n_names, theta=theta,
                                  tilted_mean=float(counts @ tilted) / n_names)


def estimate_heterogeneous_independent(pool: PoolSpec, T: float, ell: float, n_names: int,
                                       n_samples: int, seed: SeedSpec,
                                       run: int = RUN_IS_HETEROGENEOUS, path: int = 0,
                                       n_steps: int = 500) -> ISEstimate:
    """Независимые неодинаковые имена с общим сдвигом θ"""
    _require_independent(pool)
    counts = group_counts(pool.with_names(n_names))
    probs = [default_probability(g.params, T, n_steps) for g in pool.groups]
    return estimate_grouped_bernoulli_tail(probs, counts, ell, n_samples, seed.generator(run, path))


def estimate_dependent(pool: PoolSpec, factor: FactorSpec, grid: TimeGrid, ell: float,
                       n_names: int, beta: float, n_samples: int, seed: SeedSpec,
                       run: int = RUN_IS_DEPENDENT, assignment: str = DEFAULT_ASSIGNMENT,
                       threads: Optional[int] = None) -> ISEstimate:
    """Полное моделирование под Q_β; β = 0 даёт обычный Монте-Карло"""
    if n_samples < 1:
        raise ValueError(f"Number of samples must be >= 1: {n_samples}")
    _check_unit("ell", ell)
    if beta > 0 and assignment == "largest_ratio":
        logger.warning("largest_ratio assignment does not give the likelihood ratio of the "
                       "twisted law; the estimate is biased", extra=fields(beta=beta, ell=ell))
    target = threshold_count(ell, n_names)
    twist = TwistSpec(beta=beta, target_defaults=target, assignment=assignment) if beta > 0 else None
    simulator = ExactSimulator(pool.with_names(n_names), factor, grid, logger=logger)
    ensemble = simulator.simulate_ensemble(n_samples, seed, run=run, twist=twist, threads=threads)
    hits = ensemble.counts[:, -1] >= target
    values = np.where(hits, np.exp(ensemble.log_weights), 0.0)
    return ISEstimate.from_values(values, n_names, beta=beta)


@dataclass
class BetaSelection:
    """Результат пилотного перебора β"""
    beta: float
    table: List[Dict[str, float]]


def select_beta(pool: PoolSpec, factor: FactorSpec, grid: TimeGrid, ell: float, n_names: int,
                betas: Sequence[float], n_pilot: int, seed: SeedSpec,
                assignment: str = DEFAULT_ASSIGNMENT, threads: Optional[int] = None) -> BetaSelection:
    """argmin эмпирического Q̂ по сетке β; запуск i использует свой run"""
    if not betas:
        raise ValueError("Beta grid must not be empty")
    table = []
    for i, beta in enumerate(betas):
        run = RUN_BETA_PILOT * RUN_BETA_PILOT_STRIDE + i
        est = estimate_dependent(pool, factor, grid, ell, n_names, beta, n_pilot, seed, run,
                                 assignment, threads)
        table.append({"beta": float(beta), "Q_hat": est.second_moment, "Q_hat_stderr": est.second_moment_stderr,
                      "estimate": est.estimate,
                      "stderr": est.stderr, "relative_error": est.relative_error})
    best = min(table, key=lambda row: (row["Q_hat"], row["beta"]))
    logger.info("Beta selected", extra=fields(beta=best["beta"], Q_hat=best["Q_hat"]))
    return BetaSelection(beta=best["beta"], table=table)


class ImportanceSampler:
    """Сервис оценок хвоста для конфигурации запуска"""

    def __init__(self, config: RunConfig, logger=None):
        self.config = config
        self.logger = logger or get_logger("importance")
        self._stats_lock = threading.Lock()
        self._stats = {
            "total_estimates": 0,
            "total_samples": 0,
            "total_processing_time": 0.0,
        }

    def _record(self, estimate: ISEstimate, start_time: float, kind: str) -> ISEstimate:
        elapsed = time.time() - start_time
        with self._stats_lock:
            self._stats["total_estimates"] += 1
            self._stats["total_samples"] += estimate.n_samples
            self._stats["total_processing_time"] += elapsed
        self.logger.info(f"{kind} estimate completed in {elapsed:.2f}s", extra=fields(**estimate.to_dict()))
        return estimate

    def independent(self, ell: float, n_samples: int, theta: Optional[float] = None) -> ISEstimate:
        start_time = time.time()
        cfg = self.config
        if cfg.pool.is_homogeneous:
            est = estimate_independent(cfg.pool.groups[0].params, cfg.grid.horizon, ell,
                                       cfg.pool.n_names, n_samples, cfg.seed, theta=theta,
                                       n_steps=cfg.grid.n_steps)
        else:
            est = estimate_heterogeneous_independent(cfg.pool, cfg.grid.horizon, ell, cfg.pool.n_names,
                                                     n_samples, cfg.seed, n_steps=cfg.grid.n_steps)
        return self._record(est, start_time, "Independent")

    def dependent(self, ell: float, beta: float, n_samples: int,
                  assignment: str = DEFAULT_ASSIGNMENT) -> ISEstimate:
        start_time = time.time()
        cfg = self.config
        est = estimate_dependent(cfg.pool, cfg.factor, cfg.grid, ell, cfg.pool.n_names, beta,
                                 n_samples, cfg.seed, assignment=assignment, threads=cfg.solver.threads)
        return self._record(est, start_time, "Dependent")

    def select_beta(self, ell: float, betas: Sequence[float], n_pilot: int,
                    assignment: str = DEFAULT_ASSIGNMENT) -> BetaSelection:
        cfg = self.config
        return select_beta(cfg.pool, cfg.factor, cfg.grid, ell, cfg.pool.n_names, betas, n_pilot,
                           cfg.seed, assignment, cfg.solver.threads)

    def get_stats(self) -> Dict[str, Any]:
        """Получить статистику использования"""
        with self._stats_lock:
            stats = self._stats.copy()
        if stats["total_estimates"] > 0:
            stats["avg_processing_time"] = stats["total_processing_time"] / stats["total_estimates"]
        else:
            stats["avg_processing_time"] = 0.0
        return stats
