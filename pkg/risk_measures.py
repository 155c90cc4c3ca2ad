#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Меры риска по выборкам потерь: VaR, ES и расстояние Колмогорова–Смирнова
"""

from dataclasses import dataclass, asdict
from typing import List, Sequence, Dict, Any

import numpy as np
from scipy.stats import ks_2samp

from logging_config import get_logger, fields

MIN_SAMPLES = 100

logger = get_logger("risk_measures")


@dataclass(frozen=True)
class RiskRow:
    level: float
    var: float
    es: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def compute_var_es(samples: Sequence[float], levels: Sequence[float]) -> List[RiskRow]:
    """VaR - эмпирический квантиль (линейная интерполяция), ES - среднее по выборкам ≥ VaR"""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("Empty sample set")
    if samples.size < MIN_SAMPLES:
        logger.warning("Too few samples for tail measures", extra=fields(n_samples=int(samples.size)))
    rows = []
    for level in levels:
        if not 0.0 < level < 1.0:
            raise ValueError(f"Confidence level must lie in (0, 1): {level}")
        var = float(np.quantile(samples, level, method="linear"))
        tail = samples[samples >= var]
        rows.append(RiskRow(level=float(level), var=var, es=float(tail.mean())))
    return rows


def ks_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Двухвыборочная статистика Колмогорова–Смирнова"""
    return float(ks_2samp(np.asarray(a, dtype=float), np.asarray(b, dtype=float)).statistic)
