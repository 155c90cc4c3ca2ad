#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Пулы потоков и процессов для независимых путей Монте-Карло

Векторные решатели (numpy отпускает GIL) идут в потоках, пошаговое моделирование
имён с питоновским циклом событий идёт в процессах. Порядок результатов в обоих
случаях совпадает с порядком входа
"""

import os
from concurrent.futures import ThreadPoolExecutor, ProcessPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")

DEFAULT_MAX_THREADS = 8

# Идентификаторы запусков для вывода потоков SeedSpec.generator(run, path)
RUN_SINGLE = 0
RUN_SIMULATE = 1
RUN_LLN = 2
RUN_CLT = 3
RUN_IS_INDEPENDENT = 4
RUN_IS_HETEROGENEOUS = 5
RUN_IS_DEPENDENT = 6
RUN_BETA_PILOT = 7
RUN_BETA_PILOT_STRIDE = 1000


def resolve_threads(cap: Optional[int] = None) -> int:
    """Число рабочих (потоков или процессов): явный cap, затем RISK_THREADS, затем CPU"""
    if cap is None and os.environ.get("RISK_THREADS"):
        cap = int(os.environ["RISK_THREADS"])
    cpu = os.cpu_count() or 1
    if cap is None:
        return max(1, min(DEFAULT_MAX_THREADS, cpu))
    return max(1, int(cap))


def ordered_map(func: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """map с сохранением порядка входа; результат не зависит от планирования"""
    items = list(items)
    workers = min(resolve_threads(threads), max(1, len(items)))
    if workers == 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="credrisk") as pool:
        return list(pool.map(func, items))


def process_map(func: Callable[[T], R], items: Iterable[T], processes: Optional[int] = None) -> List[R]:
    """То же, что ordered_map, но в отдельных процессах; func и элементы должны сериализоваться pickle"""
    items = list(items)
    workers = min(resolve_threads(processes), max(1, len(items)))
    if workers == 1:
        return [func(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def chunk_ranges(total: int, chunks: int) -> List[range]:
    """Разбить [0, total) на последовательные диапазоны"""
    chunks = max(1, min(chunks, total)) if total > 0 else 1
    size, rest = divmod(total, chunks)
    ranges, start = [], 0
    for i in range(chunks):
        stop = start + size + (1 if i < rest else 0)
        ranges.append(range(start, stop))
        start = stop
    return ranges
