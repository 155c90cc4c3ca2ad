#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Конфигурация движка кредитного риска: доменные типы и настройки запуска
"""

import os
import json
import math
import hashlib
from dataclasses import dataclass, field, fields, asdict, replace
from typing import Optional, Dict, Any, List, Tuple, Union
from pathlib import Path

import numpy as np
import yaml


class ConfigError(ValueError):
    """Ошибка конфигурации с путём до поля"""

    def __init__(self, message: str, path: str = "", line: Optional[int] = None,
                 column: Optional[int] = None):
        self.path = path
        self.line = line
        self.column = column
        location = f" at {path}" if path else ""
        if line is not None:
            location += f" (line {line}, column {column})"
        super().__init__(f"{message}{location}")


@dataclass(frozen=True)
class TypeParams:
    """Параметры типа p = (λ₀, α, λ̄, σ, βC, βS)"""
    lambda0: float
    alpha: float
    lambda_bar: float
    sigma: float
    beta_c: float = 0.0
    beta_s: float = 0.0

    def violations(self, prefix: str = "params") -> List[str]:
        """Список нарушений инвариантов (пустой, если тип корректен)"""
        problems = []
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                problems.append(f"{prefix}.{f.name}: must be finite, got {value!r}")
        for name in ("lambda0", "alpha", "lambda_bar", "sigma"):
            value = getattr(self, name)
            if isinstance(value, (int, float)) and math.isfinite(value) and value < 0:
                problems.append(f"{prefix}.{name}: must be >= 0, got {value}")
        return problems


@dataclass(frozen=True)
class PoolGroup:
    """Группа однородных имён с весом w_i"""
    params: TypeParams
    weight: float
    label: str = ""


@dataclass(frozen=True)
class PoolSpec:
    """Портфель: конечная смесь типов и число имён N"""
    groups: Tuple[PoolGroup, ...]
    n_names: int

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))

    @property
    def weights(self) -> np.ndarray:
        return np.array([g.weight for g in self.groups], dtype=float)

    @property
    def is_homogeneous(self) -> bool:
        return len(self.groups) == 1

    def with_names(self, n_names: int) -> "PoolSpec":
        return replace(self, n_names=n_names)

    def with_contagion(self, beta_c: Optional[List[float]]) -> "PoolSpec":
        """Копия портфеля с заменёнными βC (None = обнулить)"""
        groups = []
        for i, g in enumerate(self.groups):
            value = 0.0 if beta_c is None else beta_c[i]
            groups.append(replace(g, params=replace(g.params, beta_c=value)))
        return replace(self, groups=tuple(groups))

    @classmethod
    def homogeneous(cls, params: TypeParams, n_names: int) -> "PoolSpec":
        return cls(groups=(PoolGroup(params=params, weight=1.0),), n_names=n_names)


FACTOR_KINDS = ("ou", "cir", "none")
EPSILON_PRESET = "inverse_sqrt_n"


@dataclass(frozen=True)
class FactorSpec:
    """Систематический фактор X: dX = b₀(X)dt + σ₀(X)dV, масштаб ε"""
    kind: str = "none"
    x0: float = 0.0
    epsilon: Union[float, str] = 0.0
    gamma: float = 0.0   # OU: скорость возврата
    vol: float = 0.0     # OU/CIR: волатильность
    mean: float = 0.0    # OU: уровень
    speed: float = 0.0   # CIR
    level: float = 0.0   # CIR

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ConfigError(f"Unsupported factor kind: {self.kind}", "factor.kind")
        if isinstance(self.epsilon, str):
            if self.epsilon != EPSILON_PRESET:
                raise ConfigError(f"Unsupported epsilon preset: {self.epsilon}", "factor.epsilon")
        elif not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise ConfigError(f"Epsilon must be finite and >= 0: {self.epsilon}", "factor.epsilon")
        if self.kind == "none" and self.epsilon != 0.0:
            # без фактора ε не имеет смысла
            object.__setattr__(self, "epsilon", 0.0)

    def resolved_for(self, n_names: int) -> "FactorSpec":
        """Подставить ε_N = 1/√N, если задан пресет"""
        if isinstance(self.epsilon, str):
            return replace(self, epsilon=1.0 / math.sqrt(n_names))
        return self

    @property
    def eps(self) -> float:
        if isinstance(self.epsilon, str):
            raise ConfigError("Epsilon preset not resolved; call resolved_for(N)", "factor.epsilon")
        return float(self.epsilon)

    def drift(self, x):
        """b₀(x)"""
        if self.kind == "ou":
            return -self.gamma * (x - self.mean)
        if self.kind == "cir":
            return self.speed * (self.level - x)
        return 0.0 * x

    def diffusion(self, x):
        """σ₀(x)"""
        if self.kind == "ou":
            return self.vol + 0.0 * x
        if self.kind == "cir":
            return self.vol * np.sqrt(np.maximum(x, 0.0))
        return 0.0 * x

    @property
    def is_active(self) -> bool:
        return self.kind != "none" and not isinstance(self.epsilon, str) and self.epsilon > 0


@dataclass(frozen=True)
class TimeGrid:
    """Равномерная сетка 0 = t₀ < … < t_M = T"""
    horizon: float = 1.0
    n_steps: int = 500

    def __post_init__(self):
        if not math.isfinite(self.horizon) or self.horizon <= 0:
            raise ConfigError(f"Horizon must be positive: {self.horizon}", "grid.horizon")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer: {self.n_steps}", "grid.n_steps")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor)


@dataclass(frozen=True)
class SeedSpec:
    """Мастер-сид; поток пути j запуска r выводится из (seed, r, j)"""
    master_seed: int = 20130601

    def __post_init__(self):
        if int(self.master_seed) != self.master_seed or not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError(f"master_seed must be a 64-bit integer: {self.master_seed}",
                              "seed.master_seed")

    def generator(self, run: int, path: int) -> np.random.Generator:
        """Счётчиковый генератор Philox для пути path запуска run"""
        sequence = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(run), int(path)))
        return np.random.Generator(np.random.Philox(sequence))


@dataclass
class SolverConfig:
    """Численные настройки"""
    moments: int = 12
    fluct_moments: int = 4
    threads: Optional[int] = None
    ldp_steps: int = 100
    max_iter: int = 200
    gtol: float = 1e-7

    def __post_init__(self):
        if self.moments < 2:
            raise ConfigError(f"moments must be >= 2: {self.moments}", "solver.moments")
        if self.fluct_moments < 1:
            raise ConfigError(f"fluct_moments must be >= 1: {self.fluct_moments}",
                              "solver.fluct_moments")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be positive: {self.threads}", "solver.threads")
        if self.ldp_steps < 2:
            raise ConfigError(f"ldp_steps must be >= 2: {self.ldp_steps}", "solver.ldp_steps")


@dataclass
class LoggingConfig:
    """Конфигурация логирования"""
    level: str = "INFO"
    path: str = "credit_risk.log"
    max_size_mb: int = 10
    backup_count: int = 3
    format: str = "json"  # json или text

    def __post_init__(self):
        if self.level not in ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]:
            raise ConfigError(f"Unsupported log level: {self.level}", "logging.level")
        if self.format not in ["json", "text"]:
            raise ConfigError(f"Unsupported log format: {self.format}", "logging.format")


_TOP_KEYS = {"pool", "factor", "grid", "seed", "solver", "logging"}
_POOL_KEYS = {"n_names", "groups"}
_GROUP_KEYS = {"weight", "params", "label"}


def _check_keys(data: Any, allowed: set, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"Expected an object, got {type(data).__name__}", path)
    unknown = sorted(set(data) - allowed)
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError(f"Unknown key '{unknown[0]}'", f"{prefix}{unknown[0]}")


def _build(cls, data: Dict[str, Any], path: str):
    allowed = {f.name for f in fields(cls)}
    _check_keys(data, allowed, path)
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), path)


@dataclass
class RunConfig:
    """Полная конфигурация запуска"""
    pool: PoolSpec
    factor: FactorSpec = field(default_factory=FactorSpec)
    grid: TimeGrid = field(default_factory=TimeGrid)
    seed: SeedSpec = field(default_factory=SeedSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @property
    def resolved_factor(self) -> FactorSpec:
        """Фактор с ε, разрешённым по N портфеля"""
        return self.factor.resolved_for(self.pool.n_names)

    def with_names(self, n_names: int) -> 'RunConfig':
        """Та же конфигурация для другого N (пресет ε пересчитывается потребителями)"""
        return replace(self, pool=self.pool.with_names(n_names))

    def with_seed(self, master_seed: int) -> 'RunConfig':
        return replace(self, seed=SeedSpec(master_seed))

    @classmethod
    def from_file(cls, file_path: str) -> 'RunConfig':
        """Загрузить конфигурацию из файла"""
        file_path = Path(file_path)

        if not file_path.exists():
            raise ConfigError(f"Config file not found: {file_path}")

        with open(file_path, 'r', encoding='utf-8') as f:
            text = f.read()
        suffix = file_path.suffix.lower()
        if suffix in ('.yaml', '.yml'):
            try:
                data = yaml.safe_load(text)
            except yaml.YAMLError as e:
                mark = getattr(e, 'problem_mark', None)
                raise ConfigError(f"Invalid YAML: {e}",
                                  line=mark.line + 1 if mark else None,
                                  column=mark.column + 1 if mark else None)
        elif suffix == '.json':
            try:
                data = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Invalid JSON: {e.msg}", line=e.lineno, column=e.colno)
        else:
            raise ConfigError(f"Unsupported config file format: {file_path.suffix}")

        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """Создать конфигурацию из словаря; неизвестные ключи запрещены"""
        _check_keys(data, _TOP_KEYS, "")
        if "pool" not in data:
            raise ConfigError("Missing required key", "pool")

        pool_data = data["pool"]
        _check_keys(pool_data, _POOL_KEYS, "pool")
        groups = []
        for i, g in enumerate(pool_data.get("groups", [])):
            path = f"pool.groups[{i}]"
            _check_keys(g, _GROUP_KEYS, path)
            if "params" not in g or "weight" not in g:
                raise ConfigError("Group needs 'params' and 'weight'", path)
            params = _build(TypeParams, g["params"], f"{path}.params")
            groups.append(PoolGroup(params=params, weight=float(g["weight"]),
                                    label=str(g.get("label", ""))))
        n_names = pool_data.get("n_names")
        if not isinstance(n_names, int) or isinstance(n_names, bool):
            raise ConfigError(f"n_names must be an integer, got {n_names!r}", "pool.n_names")
        pool = PoolSpec(groups=tuple(groups), n_names=n_names)

        return cls(
            pool=pool,
            factor=_build(FactorSpec, data.get("factor", {}), "factor"),
            grid=_build(TimeGrid, data.get("grid", {}), "grid"),
            seed=_build(SeedSpec, data.get("seed", {}), "seed"),
            solver=_build(SolverConfig, data.get("solver", {}), "solver"),
            logging=_build(LoggingConfig, data.get("logging", {}), "logging"),
        )

    def apply_env(self) -> 'RunConfig':
        """Наложить переменные окружения"""
        if os.environ.get("RISK_THREADS"):
            try:
                self.solver.threads = int(os.environ["RISK_THREADS"])
            except ValueError:
                raise ConfigError(f"RISK_THREADS must be an integer: {os.environ['RISK_THREADS']}")
            self.solver.__post_init__()
        if os.environ.get("RISK_LOG_LEVEL"):
            self.logging.level = os.environ["RISK_LOG_LEVEL"].upper()
        if os.environ.get("RISK_LOG_PATH"):
            self.logging.path = os.environ["RISK_LOG_PATH"]
        self.logging.__post_init__()
        return self

    @classmethod
    def from_env(cls) -> 'RunConfig':
        """Трёхтиповой сценарий по умолчанию с переменными окружения"""
        return reference_config().apply_env()

    def to_dict(self) -> Dict[str, Any]:
        """Канонический словарь разрешённой конфигурации"""
        return {
            "pool": {
                "n_names": self.pool.n_names,
                "groups": [
                    {"label": g.label, "weight": g.weight, "params": asdict(g.params)}
                    for g in self.pool.groups
                ],
            },
            "factor": asdict(self.factor),
            "grid": asdict(self.grid),
            "seed": asdict(self.seed),
            "solver": asdict(self.solver),
            "logging": asdict(self.logging),
        }

    def config_hash(self) -> str:
        """SHA-256 канонического JSON (без logging и числа потоков)"""
        data = self.to_dict()
        data.pop("logging")
        data["solver"].pop("threads")
        payload = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def save_to_file(self, file_path: str):
        """Сохранить конфигурацию в файл"""
        file_path = Path(file_path)
        data = self.to_dict()

        with open(file_path, 'w', encoding='utf-8') as f:
            if file_path.suffix.lower() in ('.yaml', '.yml'):
                yaml.safe_dump(data, f, default_flow_style=False, allow_unicode=True)
            elif file_path.suffix.lower() == '.json':
                json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
            else:
                raise ConfigError(f"Unsupported config file format: {file_path.suffix}")


# Готовые сценарии

def reference_pool(n_names: int = 200, contagion: bool = True) -> PoolSpec:
    """Тестовый портфель из трёх типов A/B/C"""
    groups = []
    for label, weight, beta_c in (("A", 1.0 / 6.0, 10.0), ("B", 1.0 / 3.0, 3.0), ("C", 0.5, 1.0)):
        params = TypeParams(lambda0=0.2, alpha=0.5, lambda_bar=2.0, sigma=0.5,
                            beta_c=beta_c if contagion else 0.0, beta_s=1.0)
        groups.append(PoolGroup(params=params, weight=weight, label=label))
    return PoolSpec(groups=tuple(groups), n_names=n_names)


def reference_config(contagion: bool = True, n_names: int = 200, n_steps: int = 500) -> RunConfig:
    """Трёхтиповой сценарий: OU фактор γ=1, ε_N = 1/√N, T = 1"""
    factor = FactorSpec(kind="ou", gamma=1.0, vol=1.0, mean=0.0, x0=0.0, epsilon=EPSILON_PRESET)
    return RunConfig(pool=reference_pool(n_names, contagion), factor=factor,
                     grid=TimeGrid(1.0, n_steps))


def beta_cone_config(n_names: int = 400, beta_s: float = 8.0, beta_c: float = 4.0) -> RunConfig:
    """Параметры (σ,α,λ̄,λ₀) = (.9,4,.2,.2), t = 1"""
    params = TypeParams(lambda0=0.2, alpha=4.0, lambda_bar=0.2, sigma=0.9,
                        beta_c=beta_c, beta_s=beta_s)
    factor = FactorSpec(kind="ou", gamma=2.0, vol=1.0, mean=1.0, x0=1.0, epsilon=1.0)
    return RunConfig(pool=PoolSpec.homogeneous(params, n_names), factor=factor,
                     grid=TimeGrid(1.0, 500))


def clt_scenario_config(n_names: int = 200, horizon: float = 0.5) -> RunConfig:
    """Параметры (σ,α,λ̄,λ₀,βC,βS) = (.9,4,.2,.2,1,1), OU(2, 1, 1, 1)"""
    params = TypeParams(lambda0=0.2, alpha=4.0, lambda_bar=0.2, sigma=0.9, beta_c=1.0, beta_s=1.0)
    factor = FactorSpec(kind="ou", gamma=2.0, vol=1.0, mean=1.0, x0=1.0, epsilon=1.0)
    return RunConfig(pool=PoolSpec.homogeneous(params, n_names), factor=factor,
                     grid=TimeGrid(horizon, 250))
