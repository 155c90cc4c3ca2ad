#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Выживаемость и плотность дефолта для интенсивности с детерминированным форсингом (φ, ψ)

m_k(t) = E[λ_t^k exp(−∫₀^t λ_s ds)] удовлетворяет замкнутой усечением системе ОДУ
    dm_k/dt = (−αk + βS ψ̇ k) m_k + (αλ̄k + βC φ̇ k + ½σ²k(k−1)) m_{k−1} − m_{k+1},
m_{K+1} = m_K. Тогда m_0 = S (выживаемость), m_1 = f (плотность).
"""

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid

from config import TypeParams, TimeGrid
from logging_config import get_logger, fields

DEFAULT_ORDER = 12

logger = get_logger("affine_survival")


@dataclass(frozen=True)
class ForcedPaths:
    """Кусочно-линейные пути φ (неубывающий) и ψ на сетке"""
    grid: TimeGrid
    phi: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        psi = np.asarray(self.psi, dtype=float)
        expected = (self.grid.n_steps + 1,)
        if phi.shape != expected or psi.shape != expected:
            raise ValueError(f"Forcing paths must have shape {expected}")
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(psi))):
            raise ValueError("Forcing paths must be finite")
        if phi[0] != 0.0 or psi[0] != 0.0:
            raise ValueError("Forcing paths must start at 0")
        if np.any(np.diff(phi) < 0):
            raise ValueError("Non-monotone phi: increments must be >= 0")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "psi", psi)

    @property
    def phi_rate(self) -> np.ndarray:
        return np.diff(self.phi) / self.grid.dt

    @property
    def psi_rate(self) -> np.ndarray:
        return np.diff(self.psi) / self.grid.dt

    @classmethod
    def zero(cls, grid: TimeGrid) -> "ForcedPaths":
        return cls(grid, np.zeros(grid.n_steps + 1), np.zeros(grid.n_steps + 1))

    @classmethod
    def linear(cls, grid: TimeGrid, phi_rate: float = 0.0, psi_rate: float = 0.0) -> "ForcedPaths":
        t = grid.times
        return cls(grid, phi_rate * t, psi_rate * t)


@dataclass(frozen=True)
class MomentCurves:
    """Траектории m_k(t), k = 0..K"""
    grid: TimeGrid
    m: np.ndarray  # (M+1, K+1)

    @property
    def order(self) -> int:
        return self.m.shape[1] - 1


@dataclass(frozen=True)
class SurvivalCurve:
    """S(t), f(t) и дефектная мера μ^p_{φ,ψ}"""
    grid: TimeGrid
    S: np.ndarray
    f: np.ndarray
    identity_gap: float

    @property
    def p_T(self) -> float:
        return float(1.0 - self.S[-1])

    @property
    def mass_at_star(self) -> float:
        """μ{⋆} = S(T): дефолт вне [0, T]"""
        return float(self.S[-1])

    @property
    def default_cdf(self) -> np.ndarray:
        """μ[0, t] на сетке"""
        return 1.0 - self.S


def exp_moments_batch(lambda0, alpha, lambda_bar, sigma, beta_c, beta_s,
                      phi_rate: np.ndarray, psi_rate: np.ndarray, dt: float,
                      order: int = DEFAULT_ORDER) -> np.ndarray:
    """RK4 для B независимых систем сразу; возвращает (B, M+1, K+1)"""
    if order < 2:
        raise ValueError(f"Truncation order must be >= 2: {order}")
    phi_rate = np.atleast_2d(np.asarray(phi_rate, dtype=float))
    psi_rate = np.atleast_2d(np.asarray(psi_rate, dtype=float))
    batch, n_steps = phi_rate.shape
    col = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (batch,))[:, None]
    lambda0, alpha, lambda_bar = col(lambda0), col(alpha), col(lambda_bar)
    sigma, beta_c, beta_s = col(sigma), col(beta_c), col(beta_s)

    k = np.arange(order + 1, dtype=float)[None, :]
    diag_base = -alpha * k
    diag_psi = beta_s * k
    low_base = alpha * lambda_bar * k + 0.5 * sigma ** 2 * k * (k - 1.0)
    low_phi = beta_c * k

    def deriv(m, pr, sr):
        m_next = np.concatenate([m[:, 1:], m[:, -1:]], axis=1)
        m_prev = np.concatenate([np.zeros((batch, 1)), m[:, :-1]], axis=1)
        return (diag_base + diag_psi * sr) * m + (low_base + low_phi * pr) * m_prev - m_next

    out = np.empty((batch, n_steps + 1, order + 1))
    m = lambda0 ** k
    out[:, 0] = m
    for j in range(n_steps):
        pr = phi_rate[:, j:j + 1]
        sr = psi_rate[:, j:j + 1]
        k1 = deriv(m, pr, sr)
        k2 = deriv(m + 0.5 * dt * k1, pr, sr)
        k3 = deriv(m + 0.5 * dt * k2, pr, sr)
        k4 = deriv(m + dt * k3, pr, sr)
        m = m + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[:, j + 1] = m
    return out


def exp_moments(params: TypeParams, forcing: ForcedPaths, K: int = DEFAULT_ORDER) -> MomentCurves:
    """Траектории экспоненциальных моментов для одного типа"""
    m = exp_moments_batch(params.lambda0, params.alpha, params.lambda_bar, params.sigma,
                          params.beta_c, params.beta_s, forcing.phi_rate, forcing.psi_rate,
                          forcing.grid.dt, K)[0]
    if not np.all(np.isfinite(m)):
        logger.warning("Non-finite exponential moments", extra=fields(order=K))
    return MomentCurves(grid=forcing.grid, m=m)


def survival_curve(params: TypeParams, forcing: ForcedPaths, K: int = DEFAULT_ORDER) -> SurvivalCurve:
    """Кривая выживаемости, плотность и проверка тождества ∫f = 1 − S"""
    curves = exp_moments(params, forcing, K)
    S = curves.m[:, 0]
    f = curves.m[:, 1]
    integral = cumulative_trapezoid(f, forcing.grid.times, initial=0.0)
    gap = float(np.max(np.abs(S - (1.0 - integral))))
    return SurvivalCurve(grid=forcing.grid, S=S, f=f, identity_gap=gap)


def default_probability(params: TypeParams, horizon: float, n_steps: int = 500,
                        K: int = DEFAULT_ORDER) -> float:
    """p = μ₀[0, T] без форсинга"""
    grid = TimeGrid(horizon, n_steps)
    return survival_curve(params, ForcedPaths.zero(grid), K).p_T


def cir_closed_form_survival(params: TypeParams, t) -> np.ndarray:
    """E[exp(−∫λ)] = exp(A(t) − B(t)λ₀) для CIR без форсинга (решение Риккати)"""
    t = np.asarray(t, dtype=float)
    a, lb, s, l0 = params.alpha, params.lambda_bar, params.sigma, params.lambda0
    if s == 0.0:
        # детерминированная интенсивность λ(t) = λ̄ + (λ₀ − λ̄)e^{−αt}
        if a == 0.0:
            return np.exp(-l0 * t)
        return np.exp(-lb * t - (l0 - lb) * (1.0 - np.exp(-a * t)) / a)
    g = math.sqrt(a * a + 2.0 * s * s)
    e = np.exp(g * t)
    denom = (g + a) * (e - 1.0) + 2.0 * g
    B = 2.0 * (e - 1.0) / denom
    A = (2.0 * a * lb / s ** 2) * np.log(2.0 * g * np.exp((a + g) * t / 2.0) / denom)
    return np.exp(A - B * l0)


def find_truncation_order(params: TypeParams, forcing: ForcedPaths, tol: float = 1e-8,
                          K_min: int = 2, K_max: int = 40) -> Tuple[int, List[float]]:
    """Наименьший K, при котором |m₀(T; K) − m₀(T; K−1)| < tol"""
    history = []
    previous = None
    for K in range(K_min, K_max + 1):
        value = float(exp_moments(params, forcing, K).m[-1, 0])
        history.append(value)
        if previous is not None and abs(value - previous) < tol:
            return K, history
        previous = value
    logger.warning("Truncation order not converged",
                   extra=fields(tol=tol, K_max=K_max, last=history[-1]))
    return K_max, history
