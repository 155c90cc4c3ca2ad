#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Модель портфеля: валидация, разложение по именам и путь фактора
"""

import math
import functools
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from config import PoolSpec, TypeParams, FactorSpec, TimeGrid
from logging_config import get_logger, fields

WEIGHT_TOLERANCE = 1e-12

logger = get_logger("portfolio")


class NumericalFailure(RuntimeError):
    """Численный сбой (NaN, отрицательная масса, неопределённый твист)"""

    def __init__(self, message: str, **diagnostics):
        self.message = message
        self.diagnostics = diagnostics
        details = ", ".join(f"{k}={v}" for k, v in sorted(diagnostics.items()))
        super().__init__(f"{message} ({details})" if details else message)

    def __reduce__(self):
        # диагностика переживает передачу из рабочего процесса
        return functools.partial(NumericalFailure, self.message, **self.diagnostics), ()


@dataclass(frozen=True)
class PoolArrays:
    """Развёрнутый портфель: по одному значению на имя"""
    lambda0: np.ndarray
    alpha: np.ndarray
    lambda_bar: np.ndarray
    sigma: np.ndarray
    beta_c: np.ndarray
    beta_s: np.ndarray
    group: np.ndarray

    @property
    def size(self) -> int:
        return len(self.lambda0)


@dataclass(frozen=True)
class FactorPath:
    """Путь X на сетке и порождающие его приращения dV"""
    x: np.ndarray
    dv: np.ndarray


def validate_pool(spec: PoolSpec) -> List[str]:
    """Все нарушения инвариантов портфеля; пустой список = портфель корректен"""
    problems = []
    if not isinstance(spec.n_names, int) or spec.n_names < 1:
        problems.append(f"n_names: must be a positive integer, got {spec.n_names!r}")
    if not spec.groups:
        problems.append("groups: at least one group required")

    total = 0.0
    for i, group in enumerate(spec.groups):
        prefix = f"groups[{i}]"
        if not isinstance(group.params, TypeParams):
            problems.append(f"{prefix}.params: expected TypeParams")
            continue
        problems.extend(group.params.violations(f"{prefix}.params"))
        w = group.weight
        if not isinstance(w, (int, float)) or not math.isfinite(w) or not 0.0 < w <= 1.0:
            problems.append(f"{prefix}.weight: must lie in (0, 1], got {w!r}")
        else:
            total += w
        if isinstance(group.params.beta_c, (int, float)) and group.params.beta_c < 0:
            logger.warning("Negative contagion sensitivity",
                           extra=fields(group=i, beta_c=group.params.beta_c))

    if spec.groups and abs(total - 1.0) > WEIGHT_TOLERANCE:
        problems.append(f"weights sum to {total:.12g}")
    return problems


def _largest_group(spec: PoolSpec) -> int:
    # наибольший вес, при равенстве - наименьший индекс
    weights = spec.weights
    return int(np.flatnonzero(weights == weights.max())[0])


def group_counts(spec: PoolSpec) -> List[int]:
    """Число имён в каждой группе: ceil(w·N − ½), остаток в крупнейшую группу"""
    counts = [int(math.ceil(g.weight * spec.n_names - 0.5)) for g in spec.groups]
    counts[_largest_group(spec)] += spec.n_names - sum(counts)
    if min(counts) < 0:
        raise ValueError(f"Name allocation failed for weights {spec.weights.tolist()}")
    return counts


def _require_valid(spec: PoolSpec):
    problems = validate_pool(spec)
    if problems:
        raise ValueError(f"Invalid pool: {'; '.join(problems)}")


def expand_pool(spec: PoolSpec) -> Tuple[TypeParams, ...]:
    """Вектор из N типов: сначала по группам, затем по индексу"""
    _require_valid(spec)
    names = []
    for group, count in zip(spec.groups, group_counts(spec)):
        names.extend([group.params] * count)
    return tuple(names)


def pool_arrays(spec: PoolSpec) -> PoolArrays:
    """Развёрнутый портфель в виде векторов NumPy"""
    names = expand_pool(spec)
    group = np.repeat(np.arange(len(spec.groups)), group_counts(spec))
    column = lambda attr: np.array([getattr(p, attr) for p in names], dtype=float)
    return PoolArrays(
        lambda0=column("lambda0"),
        alpha=column("alpha"),
        lambda_bar=column("lambda_bar"),
        sigma=column("sigma"),
        beta_c=column("beta_c"),
        beta_s=column("beta_s"),
        group=group,
    )


def simulate_factor_path(factor: FactorSpec, grid: TimeGrid,
                         rng: Optional[np.random.Generator]) -> FactorPath:
    """Эйлеровский путь X; без фактора X ≡ x₀ и случайные числа не тратятся"""
    x = np.empty(grid.n_steps + 1)
    x[0] = factor.x0
    if factor.kind == "none" or rng is None:
        x[:] = factor.x0
        return FactorPath(x=x, dv=np.zeros(grid.n_steps))

    dt = grid.dt
    dv = rng.standard_normal(grid.n_steps) * math.sqrt(dt)
    for k in range(grid.n_steps):
        x[k + 1] = x[k] + factor.drift(x[k]) * dt + factor.diffusion(x[k]) * dv[k]
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("Non-finite factor path", kind=factor.kind)
    return FactorPath(x=x, dv=dv)


def simulate_factor_paths(factor: FactorSpec, grid: TimeGrid,
                          streams: List[np.random.Generator]) -> FactorPath:
    """Пачка путей X (P, M+1); поток j даёт тот же путь, что и simulate_factor_path"""
    n_paths = len(streams)
    x = np.empty((n_paths, grid.n_steps + 1))
    x[:, 0] = factor.x0
    if factor.kind == "none":
        x[:] = factor.x0
        return FactorPath(x=x, dv=np.zeros((n_paths, grid.n_steps)))

    dt = grid.dt
    dv = np.stack([rng.standard_normal(grid.n_steps) for rng in streams]) * math.sqrt(dt)
    for k in range(grid.n_steps):
        x[:, k + 1] = x[:, k] + factor.drift(x[:, k]) * dt + factor.diffusion(x[:, k]) * dv[:, k]
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("Non-finite factor path", kind=factor.kind)
    return FactorPath(x=x, dv=dv)


def factor_path_from_values(factor: FactorSpec, grid: TimeGrid, x: np.ndarray) -> FactorPath:
    """Восстановить dV по внешнему пути X (требует σ₀ > 0 на пути)"""
    x = np.asarray(x, dtype=float)
    if x.shape != (grid.n_steps + 1,):
        raise ValueError(f"Factor path must have {grid.n_steps + 1} points, got {x.shape}")
    vol = factor.diffusion(x[:-1])
    if np.any(np.asarray(vol) <= 0):
        raise ValueError("Cannot recover dV where the factor diffusion vanishes")
    dv = (np.diff(x) - factor.drift(x[:-1]) * grid.dt) / vol
    return FactorPath(x=x, dv=dv)
