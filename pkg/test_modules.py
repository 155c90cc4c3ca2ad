#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Тестирование основных модулей движка кредитного риска

Функции test_* собираются pytest; python test_modules.py печатает сводный отчёт.
"""

import os
import sys
import json
import math
import logging
import tempfile
import traceback
from pathlib import Path

import numpy as np


def _constant_params(p: float = 0.3):
    """Постоянная интенсивность с вероятностью дефолта p к T = 1"""
    from config import TypeParams
    lam = -math.log(1.0 - p)
    return TypeParams(lambda0=lam, alpha=1.0, lambda_bar=lam, sigma=0.0)


def test_config():
    """Тест модуля конфигурации"""
    print("🔧 Тестирование модуля конфигурации...")
    from config import RunConfig, ConfigError, reference_config

    config = reference_config()
    restored = RunConfig.from_dict(config.to_dict())
    assert restored.config_hash() == config.config_hash()
    print("  ✓ Канонический словарь и хеш воспроизводятся")

    assert abs(config.with_names(400).resolved_factor.eps - 0.05) < 1e-15
    assert isinstance(config.factor.epsilon, str)
    print("  ✓ Пресет ε_N = 1/√N разрешается по N")

    data = config.to_dict()
    data["pool"]["groups"][0]["params"]["foo"] = 1.0
    try:
        RunConfig.from_dict(data)
        raise AssertionError("unknown key accepted")
    except ConfigError as e:
        assert e.path == "pool.groups[0].params.foo"
    print("  ✓ Неизвестный ключ отклонён с путём до поля")

    with tempfile.TemporaryDirectory() as tmp:
        broken = Path(tmp) / "broken.json"
        broken.write_text('{\n  "pool": {\n    "n_names": 10,\n  }\n}\n', encoding="utf-8")
        try:
            RunConfig.from_file(str(broken))
            raise AssertionError("invalid JSON accepted")
        except ConfigError as e:
            assert e.line == 4
        print("  ✓ Синтаксическая ошибка JSON с номером строки")

        saved = Path(tmp) / "run.yaml"
        config.save_to_file(str(saved))
        assert RunConfig.from_file(str(saved)).config_hash() == config.config_hash()
        print("  ✓ YAML сохраняется и читается")

    previous = os.environ.get("RISK_THREADS")
    os.environ["RISK_THREADS"] = "3"
    try:
        assert reference_config().apply_env().solver.threads == 3
        from_env = RunConfig.from_env()
        assert from_env.solver.threads == 3
        assert from_env.config_hash() == config.config_hash()
    finally:
        if previous is None:
            os.environ.pop("RISK_THREADS")
        else:
            os.environ["RISK_THREADS"] = previous
    print("  ✓ Переменные окружения применяются")


def test_logging():
    """Тест модуля логирования"""
    print("📝 Тестирование модуля логирования...")
    from logging_config import StructuredFormatter, TextFormatter, get_logger, fields, RunContextFilter

    record = logging.LogRecord("CREDRISK.test", logging.INFO, __file__, 1, "Ensemble completed",
                               None, None)
    record.extra_fields = fields(n_paths=10, mean_loss=0.25)["extra_fields"]
    entry = json.loads(StructuredFormatter().format(record))
    assert entry["message"] == "Ensemble completed"
    assert entry["n_paths"] == 10
    assert "mean_loss=0.25" in TextFormatter().format(record)
    context = RunContextFilter()
    context.context.update(subcommand="simulate", seed=7)
    assert context.filter(record)
    entry = json.loads(StructuredFormatter().format(record))
    assert entry["subcommand"] == "simulate" and entry["component"] == "test"
    assert get_logger("lln").name == "CREDRISK.lln"
    print("  ✓ JSON и текстовый форматтеры выводят поля")


def test_workers():
    """Тест пула потоков и потоков случайных чисел"""
    print("🧵 Тестирование пула потоков...")
    from config import SeedSpec
    from workers import ordered_map, process_map, chunk_ranges

    ranges = chunk_ranges(10, 3)
    assert [len(r) for r in ranges] == [4, 3, 3]
    assert ranges[-1].stop == 10
    assert ordered_map(lambda r: sum(r), ranges, threads=3) == [sum(r) for r in ranges]
    assert process_map(sum, ranges, processes=2) == [sum(r) for r in ranges]
    print("  ✓ Порядок результатов не зависит от планирования")

    seed = SeedSpec(42)
    a = seed.generator(1, 2).standard_normal(5)
    assert np.array_equal(a, seed.generator(1, 2).standard_normal(5))
    assert not np.array_equal(a, seed.generator(2, 1).standard_normal(5))
    print("  ✓ Поток (run, path) воспроизводим и уникален")


def test_portfolio():
    """Тест валидации и разложения портфеля"""
    print("📦 Тестирование модели портфеля...")
    from config import PoolSpec, PoolGroup, TypeParams, reference_pool
    from portfolio import validate_pool, group_counts, expand_pool, pool_arrays, NumericalFailure

    pool = reference_pool()
    assert validate_pool(pool) == []
    single = PoolSpec.homogeneous(TypeParams(0.0, 1.0, 0.0, 0.0), 5)
    assert validate_pool(single) == []
    assert len(set(expand_pool(single))) == 1 and len(expand_pool(single)) == 5

    params = TypeParams(0.2, 0.5, 2.0, 0.5)
    doubled = PoolSpec(groups=(PoolGroup(params, 0.6), PoolGroup(params, 0.6)), n_names=10)
    assert validate_pool(doubled) == ["weights sum to 1.2"]
    negative = PoolSpec.homogeneous(TypeParams(-0.1, 1.0, 0.0, 0.0), 5)
    assert any("lambda0" in p for p in validate_pool(negative))
    print("  ✓ Нарушения инвариантов перечислены")

    assert group_counts(pool) == [33, 67, 100]
    halves = PoolSpec(groups=(PoolGroup(params, 0.5), PoolGroup(TypeParams(0.2, 0.5, 2.0, 0.5, 1.0), 0.5)),
                      n_names=3)
    assert group_counts(halves) == [2, 1]
    names = expand_pool(pool)
    assert len(names) == 200
    assert names[0].beta_c == 10.0 and names[33].beta_c == 3.0 and names[100].beta_c == 1.0
    assert expand_pool(pool) == names
    arrays = pool_arrays(pool)
    assert arrays.size == 200 and np.count_nonzero(arrays.group == 2) == 100
    print("  ✓ Распределение имён по группам: 33/67/100 и (2, 1)")

    import pickle
    failure = pickle.loads(pickle.dumps(NumericalFailure("Non-finite intensity", step=3, t=0.25)))
    assert failure.diagnostics == {"step": 3, "t": 0.25}
    assert str(failure) == "Non-finite intensity (step=3, t=0.25)"
    print("  ✓ NumericalFailure сохраняет диагностику при сериализации")


def test_exact_simulator():
    """Тест точного моделирования портфеля"""
    print("🎲 Тестирование точного моделирования...")
    from config import PoolSpec, FactorSpec, TimeGrid, SeedSpec, TypeParams, clt_scenario_config
    from exact_simulator import ExactSimulator, TwistSpec, simulate_path, simulate_ensemble
    from affine_survival import default_probability
    from workers import RUN_SIMULATE
    from scipy.stats import binom, chisquare

    # постоянная интенсивность: экспоненциальные часы
    params = TypeParams(lambda0=2.0, alpha=1.0, lambda_bar=2.0, sigma=0.0)
    ensemble = simulate_ensemble(PoolSpec.homogeneous(params, 1), FactorSpec(), TimeGrid(1.0, 20),
                                 4000, SeedSpec(11))
    summary = ensemble.summary()
    target = 1.0 - math.exp(-2.0)
    assert abs(summary["mean_loss"] - target) < 4.0 * summary["stderr"]
    print(f"  ✓ P(τ ≤ 1) = {summary['mean_loss']:.4f} ≈ {target:.4f}")

    # независимые имена: N·L_T ∼ Bin(N, p)
    params = _constant_params(0.3)
    independent = PoolSpec.homogeneous(params, 10)
    p = default_probability(params, 1.0)
    ensemble = simulate_ensemble(independent, FactorSpec(), TimeGrid(1.0, 50), 4000, SeedSpec(12))
    observed = np.bincount(ensemble.counts[:, -1], minlength=11).astype(float)
    expected = 4000 * binom.pmf(np.arange(11), 10, p)
    observed = np.append(observed[:6], observed[6:].sum())
    expected = np.append(expected[:6], 4000 - expected[:6].sum())
    gof = chisquare(observed, expected)
    assert gof.pvalue > 1e-3
    print(f"  ✓ χ² против Bin(10, {p:.3f}): p-value = {gof.pvalue:.3f}")

    simulator = ExactSimulator(independent, FactorSpec(), TimeGrid(1.0, 20), announce=False)
    seed = SeedSpec(13)
    flags = np.zeros((3000, 2))
    for j in range(len(flags)):
        names = {name for _, name in simulator.simulate_path(seed.generator(RUN_SIMULATE, j)).default_times}
        flags[j] = (0 in names, 1 in names)
    product = (flags[:, 0] - flags[:, 0].mean()) * (flags[:, 1] - flags[:, 1].mean())
    assert abs(product.mean()) < 4.0 * product.std(ddof=1) / math.sqrt(len(product))
    print(f"  ✓ Ковариация индикаторов без заражения: {product.mean():+.4f}")

    assert TwistSpec(beta=1.0, target_defaults=5).assignment == "intensity"

    config = clt_scenario_config(n_names=50)
    grid = TimeGrid(0.5, 50)
    path = simulate_path(config.pool, config.factor, grid, SeedSpec(3).generator(1, 0),
                         keep_states=True)
    steps = np.diff(path.default_counts)
    assert np.all(steps >= 0)
    assert len(path.default_times) == path.default_counts[-1]
    assert all(np.all(s.lambdas >= 0) for s in path.states)
    assert len(path.states) == grid.n_steps + 1
    times = [t for t, _ in path.default_times]
    assert times == sorted(times)
    print("  ✓ Потери неубывают, интенсивности неотрицательны")

    simulator = ExactSimulator(config.pool, config.factor, grid)
    serial = simulator.simulate_ensemble(16, SeedSpec(5), threads=1)
    parallel = simulator.simulate_ensemble(16, SeedSpec(5), threads=4)
    assert np.array_equal(serial.counts, parallel.counts)
    assert simulator.get_stats()["total_paths"] == 32
    print("  ✓ Параллельный ансамбль совпадает с последовательным")

    assert np.array_equal(serial.samples_at(grid.horizon), serial.terminal)
    assert np.all(serial.samples_at(0.0) == 0.0)
    assert np.array_equal(serial.samples_at(0.25), serial.losses[:, 25])
    try:
        serial.samples_at(0.75)
        raise AssertionError("time outside the grid accepted")
    except ValueError:
        pass
    print("  ✓ Срез L^N_t по узлу сетки")

    # слабая сходимость: половинный шаг не сдвигает среднее сверх ошибки Монте-Карло
    coarse = simulate_ensemble(config.pool, config.factor, grid, 3000, SeedSpec(14)).summary()
    fine = simulate_ensemble(config.pool, config.factor, grid.refined(), 3000, SeedSpec(14)).summary()
    joint = math.hypot(coarse["stderr"], fine["stderr"])
    assert abs(coarse["mean_loss"] - fine["mean_loss"]) < 4.0 * joint
    print(f"  ✓ dt/2: {coarse['mean_loss']:.4f} → {fine['mean_loss']:.4f} (± {joint:.4f})")

    try:
        simulator.simulate_ensemble(0, SeedSpec(5))
        raise AssertionError("n_paths = 0 accepted")
    except ValueError:
        pass
    print("  ✓ n_paths = 0 отклонён")


def test_affine_survival():
    """Тест кривых выживаемости"""
    print("📉 Тестирование кривых выживаемости...")
    from config import TimeGrid, TypeParams, beta_cone_config, reference_pool
    from affine_survival import (ForcedPaths, exp_moments, survival_curve, cir_closed_form_survival,
                                 find_truncation_order)

    grid = TimeGrid(1.0, 500)
    t = grid.times
    constant = TypeParams(lambda0=0.5, alpha=1.0, lambda_bar=0.5, sigma=0.0)
    m = exp_moments(constant, ForcedPaths.zero(grid), 12).m
    assert np.max(np.abs(m[:, 0] - np.exp(-0.5 * t))) < 1e-8
    assert np.max(np.abs(m[:, 1] - 0.5 * np.exp(-0.5 * t))) < 1e-8
    print("  ✓ Постоянная интенсивность: m₀ = e^{−λt}, m₁ = λe^{−λt}")

    cone = beta_cone_config().pool.groups[0].params
    curve = survival_curve(cone, ForcedPaths.zero(grid), 12)
    closed = cir_closed_form_survival(cone, t)
    assert abs(curve.S[-1] - closed[-1]) < 1e-4
    assert curve.identity_gap < 1e-4
    assert curve.S[0] == 1.0 and np.all(np.diff(curve.S) <= 1e-12) and np.all(curve.f >= 0)
    assert abs(curve.mass_at_star + curve.p_T - 1.0) < 1e-15
    print(f"  ✓ CIR в замкнутой форме: S(1) = {closed[-1]:.6f}")

    type_a, type_c = (g.params for g in reference_pool().groups[::2])
    assert 0.0 < survival_curve(type_a, ForcedPaths.zero(grid)).p_T < 1.0
    forced = survival_curve(type_c, ForcedPaths.linear(grid, phi_rate=0.5))
    assert forced.S[-1] < survival_curve(type_c, ForcedPaths.zero(grid)).S[-1]
    print("  ✓ Форсинг φ уменьшает выживаемость")

    s12 = exp_moments(type_c, ForcedPaths.zero(grid), 12).m[-1, 0]
    s20 = exp_moments(type_c, ForcedPaths.zero(grid), 20).m[-1, 0]
    assert abs(s12 - s20) < 1e-5
    order, history = find_truncation_order(type_c, ForcedPaths.zero(grid))
    assert 2 < order <= 40 and len(history) == order - 1
    print(f"  ✓ Сходимость по усечению: K = {order}")

    for bad in (lambda: exp_moments(type_c, ForcedPaths.zero(grid), 1),
                lambda: ForcedPaths(grid, -0.1 * t, np.zeros_like(t))):
        try:
            bad()
            raise AssertionError("invalid input accepted")
        except ValueError:
            pass
    print("  ✓ K < 2 и немонотонный φ отклонены")


def test_lln_moments():
    """Тест приближения первого порядка"""
    print("📈 Тестирование приближения ЗБЧ...")
    from config import FactorSpec, TimeGrid, SeedSpec, beta_cone_config, clt_scenario_config, \
        reference_config
    from affine_survival import cir_closed_form_survival
    from moment_solver import (MomentSystem, solve_lln, lln_terminal_loss, lln_loss_distribution,
                               _bridge_pieces, _substep_factor)

    cone = beta_cone_config(beta_c=0.0, beta_s=0.0).pool
    trajectory = solve_lln(cone, FactorSpec(), TimeGrid(1.0, 500), 12)
    expected = 1.0 - float(cir_closed_form_survival(cone.groups[0].params, 1.0))
    assert abs(trajectory.terminal_loss - expected) < 1e-4
    assert np.all(np.diff(trajectory.loss) >= -1e-12)
    print(f"  ✓ Независимый случай: L_T = {trajectory.terminal_loss:.6f}")

    config = reference_config()
    params = config.pool.groups[0].params
    independent = lln_terminal_loss(config.pool.with_contagion(None), config.factor, config.grid)
    contagion = lln_terminal_loss(config.pool, config.factor, config.grid)
    assert abs(independent - (1.0 - float(cir_closed_form_survival(params, 1.0)))) < 1e-3
    assert independent < contagion and abs(contagion - 0.696) < 0.01
    print(f"  ✓ Типичные потери: {independent:.3f} без заражения, {contagion:.3f} с заражением")

    short = reference_config(n_steps=200)
    k12 = lln_terminal_loss(short.pool, short.factor, short.grid, 12)
    k16 = lln_terminal_loss(short.pool, short.factor, short.grid, 16)
    assert abs(k12 - k16) < 1e-5
    print(f"  ✓ Усечение K = 12 против K = 16: |Δ| = {abs(k12 - k16):.2e}")

    scenario = clt_scenario_config()
    grid = TimeGrid(0.5, 50)
    first = lln_loss_distribution(scenario.pool, scenario.factor, grid, 8, 12, SeedSpec(9), threads=1)
    second = lln_loss_distribution(scenario.pool, scenario.factor, grid, 8, 12, SeedSpec(9), threads=3)
    assert np.array_equal(first.samples, second.samples)
    assert np.all((first.samples >= 0) & (first.samples <= 1))
    print("  ✓ Распределение по путям X воспроизводимо")

    system = MomentSystem(scenario.pool, scenario.factor, 12)
    parts = _bridge_pieces(0.07, 8, grid.dt, np.random.default_rng(4))
    assert abs(parts.sum() - 0.07) < 1e-12 and np.std(parts) > 0
    xs = _substep_factor(system, 1.0, 1.05, parts, grid.dt)
    assert xs[0] == 1.0 and abs(xs[-1] - 1.05) < 1e-12 and len(xs) == 9
    print("  ✓ Подшаги идут по мосту и попадают в узлы пути X")

    trajectory = solve_lln(scenario.pool, scenario.factor, grid, 12, stream=SeedSpec(9).generator(2, 0))
    given = [solve_lln(scenario.pool, scenario.factor, grid, 12, x_path=trajectory.factor_path.x)
             for _ in range(2)]
    assert np.array_equal(given[0].u, given[1].u)
    assert np.allclose(given[0].factor_path.x, trajectory.factor_path.x)
    if trajectory.refinements == 0:
        assert abs(given[0].terminal_loss - trajectory.terminal_loss) < 1e-10
    print("  ✓ Заданный путь X даёт воспроизводимое решение")


def test_clt_fluctuations():
    """Тест флуктуационной поправки"""
    print("〰️ Тестирование поправки второго порядка...")
    from config import PoolSpec, FactorSpec, TimeGrid, SeedSpec, TypeParams, reference_pool
    from fluctuation_solver import FluctuationSystem, second_order_loss_samples, solve_fluctuations
    from moment_solver import solve_lln

    # λ ≡ 1 без фактора и заражения: ξ₀(T) ∼ N(0, p(1 − p))
    pool = PoolSpec.homogeneous(TypeParams(lambda0=1.0, alpha=0.0, lambda_bar=0.0, sigma=0.0), 100)
    grid = TimeGrid(1.0, 100)
    samples = second_order_loss_samples(pool, FactorSpec(), grid, 1, 100, 4000, SeedSpec(17), K=4)
    p = 1.0 - math.exp(-1.0)
    summary = samples.summary()
    assert abs(summary["var_xi0"] - p * (1.0 - p)) < 0.02
    assert abs(summary["mean_xi0"]) < 4.0 * summary["stderr_xi0"]
    assert abs(summary["mean_lln"] - p) < 1e-6
    print(f"  ✓ Var ξ₀(T) = {summary['var_xi0']:.4f} ≈ p(1 − p) = {p * (1 - p):.4f}")

    system = FluctuationSystem(PoolSpec.homogeneous(TypeParams(0.2, 4.0, 0.2, 0.9, 1.0, 1.0), 10),
                               FactorSpec(), 2, 6)
    u = np.random.default_rng(0).uniform(0.1, 1.0, size=(3, 7))
    C = system.covariance_rates(u)
    assert np.allclose(C[:, 0, 0], u[:, 1])
    assert np.allclose(C, np.swapaxes(C, -1, -2))
    print("  ✓ Скорость ковариации при k = j = 0 равна u₁")

    lln = solve_lln(pool, FactorSpec(), grid, 4)
    trajectory = solve_fluctuations(pool, FactorSpec(), grid, 1, lln, SeedSpec(1).generator(3, 0))
    assert trajectory.xi.shape == (101, 2) and np.all(trajectory.xi[0] == 0.0)
    assert trajectory.second_order_loss(100).shape == (101,)

    for bad in (lambda: FluctuationSystem(reference_pool(), FactorSpec(), 1, 12),
                lambda: FluctuationSystem(pool, FactorSpec(), 4, 6)):
        try:
            bad()
            raise AssertionError("invalid fluctuation system accepted")
        except ValueError:
            pass
    print("  ✓ Неоднородный портфель и малый K отклонены")


def test_limit_accuracy():
    """Тест точности предельных приближений против точного моделирования"""
    print("🔬 Тестирование сходимости к пределам...")
    from config import TimeGrid, SeedSpec, beta_cone_config, clt_scenario_config, reference_config
    from exact_simulator import ExactSimulator, simulate_ensemble
    from fluctuation_solver import second_order_loss_samples
    from moment_solver import lln_terminal_loss, lln_loss_distribution
    from risk_measures import ks_distance
    from workers import RUN_SIMULATE

    table = reference_config(n_names=400, n_steps=100)
    summary = simulate_ensemble(table.pool, table.factor, table.grid, 200, SeedSpec(41)).summary()
    typical = lln_terminal_loss(table.pool, table.factor, table.grid)
    assert abs(summary["mean_loss"] - typical) < 0.02
    print(f"  ✓ Трёхтиповой портфель, N = 400: {summary['mean_loss']:.4f} против L_T = {typical:.4f}")

    # общий run: путь j точной модели и предела видит тот же путь X
    cone = beta_cone_config()
    grid = TimeGrid(1.0, 250)
    limit = lln_loss_distribution(cone.pool, cone.factor, grid, 12, 400, SeedSpec(42), run=RUN_SIMULATE)
    distances = []
    for n_names in (100, 400, 1600):
        simulator = ExactSimulator(cone.pool.with_names(n_names), cone.factor, grid)
        ensemble = simulator.simulate_ensemble(400, SeedSpec(42), run=RUN_SIMULATE)
        distances.append(ks_distance(ensemble.terminal, limit.samples))
    assert distances[0] > distances[1] > distances[2]
    print("  ✓ KS до предела ЗБЧ убывает: " + ", ".join(f"{d:.3f}" for d in distances))

    scenario = clt_scenario_config()
    grid = TimeGrid(0.5, 100)
    samples = second_order_loss_samples(scenario.pool, scenario.factor, grid, 4, 200, 3000, SeedSpec(43),
                                        run=RUN_SIMULATE)
    simulator = ExactSimulator(scenario.pool, scenario.factor, grid)
    exact = simulator.simulate_ensemble(3000, SeedSpec(43), run=RUN_SIMULATE).terminal
    second, first = ks_distance(samples.second_order, exact), ks_distance(samples.lln, exact)
    assert second < first
    print(f"  ✓ KS второго порядка {second:.3f} < KS ЗБЧ {first:.3f}")

    scaled = math.sqrt(200) * (exact - samples.lln)
    ratio = float(scaled.var(ddof=1)) / samples.summary()["var_xi0"]
    assert abs(ratio - 1.0) < 0.15
    print(f"  ✓ Var √N(L^N − L) / Var ξ₀ = {ratio:.3f}")


def test_ldp_optimizer():
    """Тест функций скорости"""
    print("🎯 Тестирование функций скорости...")
    from config import PoolSpec, FactorSpec, TimeGrid, reference_config
    from ldp_optimizer import (bernoulli_entropy, rate_independent, rate_heterogeneous, rate_curve,
                               RateProblem, limit_constant, ORDERING_TOLERANCE)

    exact = 0.5 * math.log(5.0 / 3.0) + 0.5 * math.log(5.0 / 7.0)
    assert abs(float(bernoulli_entropy(0.5, 0.3)) - exact) < 1e-15
    assert abs(exact - 0.087176) < 1e-6
    params = _constant_params(0.3)
    rate = rate_independent(params, 1.0, 0.5)
    assert abs(rate.value - exact) < 1e-6
    assert abs(rate.phi[-1] - 0.5) < 1e-12
    assert rate_independent(params, 1.0, 0.3).value < 1e-8
    print(f"  ✓ I(0.5) = {rate.value:.6f} при p = 0.3")

    pool = PoolSpec.homogeneous(params, 100)
    grid = TimeGrid(1.0, 20)
    result = rate_heterogeneous(pool, FactorSpec(), 0.5, grid, max_iter=100, threads=1)
    assert abs(result.value - exact) < 1e-4
    assert result.path.terminal_gap < 1e-9
    assert result.decomposition_gap < 1e-9
    closed = rate_independent(params, 1.0, 0.5, n_steps=grid.n_steps)
    assert np.max(np.abs(result.path.phi[0] - closed.phi)) < 1e-2
    print(f"  ✓ Оптимизатор совпадает с замкнутой формой: {result.value:.6f}")

    below = rate_heterogeneous(pool, FactorSpec(), 0.2, grid, threads=1)
    assert below.value == 0.0 and below.status == "at_or_below_lln"
    print("  ✓ Ниже типичных потерь скорость равна нулю")

    curve = rate_curve(pool, FactorSpec(), [0.5, 0.2], grid, max_iter=100, threads=1)
    assert [r.ell for r in curve] == [0.2, 0.5]
    assert curve[0].value == 0.0 and abs(curve[1].value - exact) < 1e-4
    print("  ✓ Кривая скорости упорядочена по уровням")

    table = reference_config()
    problem = RateProblem(table.pool, table.factor, limit_constant(table.pool, table.factor), grid, 0.81,
                          threads=4)
    z = problem.encode(np.ones((problem.n_groups, grid.n_steps)))
    parallel = problem.gradient(z)
    problem.objective(z)
    assert problem.evaluations == 2 * problem.n_vars + 1
    serial = RateProblem(table.pool, table.factor, problem.c, grid, 0.81, threads=1).gradient(z)
    assert np.allclose(parallel, serial, rtol=1e-10, atol=1e-12)
    print(f"  ✓ Счётчик вычислений при 4 потоках: {problem.evaluations}")

    extremal = rate_heterogeneous(table.pool, table.factor, 0.81, grid, threads=1)
    phi, psi = extremal.path.phi, extremal.path.psi
    assert extremal.path.order_violation < ORDERING_TOLERANCE and extremal.path.is_ordered()
    assert phi[0, -1] > phi[1, -1] > phi[2, -1]
    half = grid.n_steps // 2
    assert psi[half] - psi[0] > psi[-1] - psi[half] > 0
    print(f"  ✓ φ_A ≥ φ_B ≥ φ_C с допуском {ORDERING_TOLERANCE:g}: "
          f"нарушение {extremal.path.order_violation:.1e}, I′ = {extremal.value:.5f}")


def test_importance_sampling():
    """Тест выборки по значимости"""
    print("⚖️ Тестирование выборки по значимости...")
    from config import PoolSpec, FactorSpec, TimeGrid, SeedSpec, RunConfig
    from exact_simulator import simulate_ensemble
    from importance_sampling import (theta_star, tilted_probability, log_mgf, binomial_tail,
                                     poisson_binomial_tail, estimate_independent,
                                     estimate_grouped_bernoulli_tail, estimate_dependent,
                                     select_beta, ImportanceSampler, threshold_count,
                                     optimality_check, bernoulli_weight)
    from ldp_optimizer import bernoulli_entropy
    from workers import RUN_SIMULATE

    theta = theta_star(0.3, 0.5)
    assert abs(theta - math.log(7.0 / 3.0)) < 1e-14
    assert abs(tilted_probability(0.3, theta) - 0.5) < 1e-14
    assert abs(theta * 0.5 - log_mgf(0.3, theta) - float(bernoulli_entropy(0.5, 0.3))) < 1e-12
    assert theta_star(0.3, 0.2) == 0.0
    assert threshold_count(0.5, 10) == 5 and threshold_count(0.51, 10) == 6
    print("  ✓ θ* = ln(7/3), p_θ* = ℓ")

    rng = np.random.default_rng(3)
    for _ in range(20):
        p, ell = sorted(rng.uniform(0.05, 0.95, size=2))
        theta = theta_star(p, ell)
        assert abs(theta * ell - log_mgf(p, theta) - float(bernoulli_entropy(ell, p))) < 1e-12
        defaults = rng.random(25) < tilted_probability(p, theta)
        loss = defaults.mean()
        closed = math.exp(25 * (-theta * loss + log_mgf(p, theta)))
        assert abs(bernoulli_weight(defaults, p, theta) / closed - 1.0) < 1e-12
    print("  ✓ Вес по именам равен e^{N(−θL + Λ̄)}")

    exact = binomial_tail(10, 0.3, 0.5)
    assert abs(exact - 0.150268) < 1e-6
    assert abs(poisson_binomial_tail([0.3] * 10, 0.5) - exact) < 1e-12
    params = _constant_params(0.3)
    estimate = estimate_independent(params, 1.0, 0.5, 10, 20000, SeedSpec(21))
    assert abs(estimate.estimate - exact) < 4.0 * estimate.stderr
    print(f"  ✓ Независимый случай: {estimate.estimate:.5f} ± {estimate.stderr:.5f}")

    probs, counts = [0.2, 0.4], [5, 5]
    grouped_exact = poisson_binomial_tail(np.repeat(probs, counts), 0.6)
    grouped = estimate_grouped_bernoulli_tail(probs, counts, 0.6, 20000, SeedSpec(22).generator(5, 0))
    assert abs(grouped.estimate - grouped_exact) < 4.0 * grouped.stderr
    print(f"  ✓ Неоднородный случай: {grouped.estimate:.5f} vs {grouped_exact:.5f}")

    pool = PoolSpec.homogeneous(params, 10)
    grid = TimeGrid(1.0, 20)
    plain = estimate_dependent(pool, FactorSpec(), grid, 0.5, 10, 0.0, 300, SeedSpec(23), run=RUN_SIMULATE)
    ensemble = simulate_ensemble(pool, FactorSpec(), grid, 300, SeedSpec(23))
    assert plain.estimate == float(np.mean(ensemble.counts[:, -1] >= 5))
    print("  ✓ β = 0 воспроизводит обычный Монте-Карло")

    # аргументы по умолчанию: твист с назначением по интенсивностям
    twisted = estimate_dependent(pool, FactorSpec(), grid, 0.5, 10, 1.0, 3000, SeedSpec(24))
    assert abs(twisted.estimate - exact) < 4.0 * twisted.stderr
    print(f"  ✓ Зависимый оценщик при β = 1: {twisted.estimate:.5f} ± {twisted.stderr:.5f}")

    selection = select_beta(pool, FactorSpec(), grid, 0.5, 10, [0.0, 1.0], 200, SeedSpec(25))
    assert selection.beta in (0.0, 1.0) and len(selection.table) == 2

    rows = optimality_check(_constant_params(0.3), 1.0, 0.5, [25, 50, 100, 200, 400], 4000, SeedSpec(31))
    assert abs(rows[0]["target"] - 2.0 * float(bernoulli_entropy(0.5, 0.3))) < 1e-3
    gaps = [abs(row["relative_gap"]) for row in rows]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.15
    # −(1/N) ln Q̂ подходит к 2I сверху: поправка ln N / (2N) положительна
    assert all(row["decay"] > row["target"] for row in rows)
    print(f"  ✓ Затухание второго момента: {rows[0]['decay']:.4f} → {rows[-1]['decay']:.4f} "
          f"против {rows[-1]['target']:.4f}")

    sampler = ImportanceSampler(RunConfig(pool=pool, grid=grid, seed=SeedSpec(26)))
    sampler.independent(0.5, 1000)
    assert sampler.get_stats()["total_estimates"] == 1
    print("  ✓ Пилотный выбор β и статистика сервиса")


def test_risk_measures():
    """Тест мер риска"""
    print("📏 Тестирование VaR и ES...")
    from risk_measures import compute_var_es, ks_distance

    samples = np.arange(1, 101) / 100.0
    row = compute_var_es(samples, [0.95])[0]
    assert abs(row.var - 0.95) <= 0.01
    assert row.es >= row.var
    assert compute_var_es(np.full(200, 0.3), [0.99])[0].var == 0.3
    coin = compute_var_es(np.tile([0.0, 1.0], 100), [0.95])[0]
    assert coin.var == 1.0 and coin.es == 1.0
    assert ks_distance(samples, samples) == 0.0
    for bad in (lambda: compute_var_es([], [0.95]), lambda: compute_var_es(samples, [1.0])):
        try:
            bad()
            raise AssertionError("invalid input accepted")
        except ValueError:
            pass
    print(f"  ✓ VaR(0.95) = {row.var:.4f}, ES = {row.es:.4f}")


def test_report_writer():
    """Тест записи артефактов"""
    print("💾 Тестирование записи отчётов...")
    from report_writer import ReportWriter, RunManifest, read_csv, MANIFEST_NAME

    with tempfile.TemporaryDirectory() as tmp:
        manifest = RunManifest(config_hash="abc", subcommand="simulate", parameters={"paths": 2}, seed=1)
        writer = ReportWriter(tmp, manifest, gnuplot=True)
        path = writer.table("loss.csv", ["t", "loss"], [(0.0, 0.0), (0.5, 0.125)])
        assert b"\r\n" in path.read_bytes()
        header, rows = read_csv(path)
        assert header == ["t", "loss"] and rows[1] == [0.5, 0.125]
        writer.report("simulate.json", {"b": 1, "a": np.float64(0.5)})
        writer.finish(0.1)
        report = json.loads((Path(tmp) / "simulate.json").read_text(encoding="utf-8"))
        assert list(report) == sorted(report) and report["manifest"]["config_hash"] == "abc"
        saved = json.loads((Path(tmp) / MANIFEST_NAME).read_text(encoding="utf-8"))
        assert saved["outputs"] == ["loss.csv", "loss.gp", "simulate.json"]
    print("  ✓ CSV, JSON, gnuplot и манифест записаны")


def _run_cli(argv):
    from risk_app import run
    previous = os.environ.get("RISK_LOG_PATH")
    with tempfile.TemporaryDirectory() as logs:
        os.environ["RISK_LOG_PATH"] = str(Path(logs) / "credit_risk.log")
        try:
            return run(argv)
        finally:
            if previous is None:
                os.environ.pop("RISK_LOG_PATH", None)
            else:
                os.environ["RISK_LOG_PATH"] = previous


def test_risk_app():
    """Тест командной строки"""
    print("🖥️ Тестирование командной строки...")
    from config import reference_config
    from report_writer import read_csv

    assert _run_cli(["bogus"]) == 2
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config_path = tmp / "table1.json"
        reference_config(n_steps=50).save_to_file(str(config_path))

        assert _run_cli(["survival", "--config", str(config_path), "--out", str(tmp / "survival")]) == 0
        assert (tmp / "survival" / "survival.csv").exists()
        assert (tmp / "survival" / "run_manifest.json").exists()
        print("  ✓ survival завершается с кодом 0")

        common = ["simulate", "--config", str(config_path), "--names", "20", "--paths", "20"]
        assert _run_cli(common + ["--out", str(tmp / "a"), "--threads", "1"]) == 0
        assert _run_cli(common + ["--out", str(tmp / "b"), "--threads", "3"]) == 0
        for name in ("simulate.json", "terminal_samples.csv", "terminal_histogram.csv"):
            assert (tmp / "a" / name).read_bytes() == (tmp / "b" / name).read_bytes()
        print("  ✓ Повторный запуск даёт идентичные файлы")

        assert _run_cli(common + ["--out", str(tmp / "at"), "--at", "0.5", "1.0"]) == 0
        header, rows = read_csv(tmp / "at" / "loss_at.csv")
        assert header == ["t", "path", "loss"] and len(rows) == 40
        terminal = read_csv(tmp / "a" / "terminal_samples.csv")[1]
        assert [r[2] for r in rows[20:]] == [r[1] for r in terminal]
        print("  ✓ --at пишет срезы L^N_t")

        data = json.loads(config_path.read_text(encoding="utf-8"))
        data["extra"] = 1
        bad_path = tmp / "bad.json"
        bad_path.write_text(json.dumps(data), encoding="utf-8")
        assert _run_cli(["survival", "--config", str(bad_path), "--out", str(tmp / "bad")]) == 2

        data.pop("extra")
        data["pool"]["groups"][0]["weight"] = 0.9
        bad_path.write_text(json.dumps(data), encoding="utf-8")
        assert _run_cli(["survival", "--config", str(bad_path), "--out", str(tmp / "bad")]) == 2
    print("  ✓ Ошибки конфигурации дают код 2")


def main():
    """Основная функция тестирования"""
    print("🚀 Запуск тестирования модулей движка кредитного риска")
    print("=" * 50)

    tests = [
        test_config,
        test_logging,
        test_workers,
        test_portfolio,
        test_exact_simulator,
        test_affine_survival,
        test_lln_moments,
        test_clt_fluctuations,
        test_limit_accuracy,
        test_ldp_optimizer,
        test_importance_sampling,
        test_risk_measures,
        test_report_writer,
        test_risk_app,
    ]

    results = []

    for test in tests:
        try:
            test()
            results.append(True)
            print()  # Пустая строка между тестами
        except Exception as e:
            print(f"  ✗ Ошибка: {e}")
            traceback.print_exc()
            results.append(False)
            print()

    # Итоговый отчет
    print("=" * 50)
    print("📊 ИТОГОВЫЙ ОТЧЕТ")
    print("=" * 50)

    passed = sum(results)
    total = len(results)

    print(f"✅ Успешно: {passed}/{total}")
    print(f"❌ Ошибок: {total - passed}/{total}")

    if passed == total:
        print("🎉 Все модули работают корректно!")
        return 0
    else:
        print("⚠️ Некоторые модули имеют проблемы")
        return 1


if __name__ == "__main__":
    try:
        exit_code = main()
        sys.exit(exit_code)
    except KeyboardInterrupt:
        print("\n⏹️ Тестирование прервано пользователем")
        sys.exit(1)
    except Exception as e:
        print(f"\n💥 Критическая ошибка: {e}")
        traceback.print_exc()
        sys.exit(1)
