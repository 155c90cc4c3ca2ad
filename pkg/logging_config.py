#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Логирование движка: иерархия CREDRISK.<компонент>, JSON или текст, ротация файла.

Каждая запись запуска несёт контекст (команда, хеш конфигурации, сид), который
RunContextFilter добавляет ко всем логгерам сразу. Числовые сводки передаются
через extra=fields(...), массивы numpy сериализуются как списки.
"""

import logging
import logging.handlers
import json
import sys
import time
from pathlib import Path
from typing import Any, Dict

import numpy as np

from config import LoggingConfig

ROOT_LOGGER = "CREDRISK"
EXTRA_KEY = "extra_fields"


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return str(value)


def _record_fields(record: logging.LogRecord) -> Dict[str, Any]:
    merged = dict(getattr(record, "run_context", None) or {})
    merged.update(getattr(record, EXTRA_KEY, None) or {})
    return merged


class RunContextFilter(logging.Filter):
    """Подмешивает контекст запуска в каждую запись"""

    def __init__(self):
        super().__init__()
        self.context: Dict[str, Any] = {}

    def filter(self, record: logging.LogRecord) -> bool:
        record.run_context = self.context
        return True


class StructuredFormatter(logging.Formatter):
    """Одна JSON-строка на запись"""

    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(record.created)),
            "level": record.levelname,
            "component": record.name[len(ROOT_LOGGER) + 1:] or ROOT_LOGGER,
            "message": record.getMessage(),
            "where": f"{record.module}.{record.funcName}:{record.lineno}",
        }
        entry.update(_record_fields(record))
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry, ensure_ascii=False, default=_json_default)


class TextFormatter(logging.Formatter):
    """Человекочитаемый вывод, поля в конце строки"""

    def __init__(self):
        super().__init__(fmt="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
                         datefmt="%H:%M:%S")

    def format(self, record: logging.LogRecord) -> str:
        text = super().format(record)
        extra = getattr(record, EXTRA_KEY, None)
        if extra:
            pairs = " ".join(f"{k}={_short(v)}" for k, v in sorted(extra.items()))
            text = f"{text} | {pairs}"
        return text


def _short(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    if isinstance(value, np.ndarray):
        return f"array{value.shape}"
    return str(value)


class RiskLogger:
    """Обработчики корневого логгера на время одного запуска"""

    def __init__(self, config: LoggingConfig):
        self.config = config
        self.logger = logging.getLogger(ROOT_LOGGER)
        self.context_filter = RunContextFilter()
        self._configure()

    def _configure(self):
        self.logger.setLevel(getattr(logging, self.config.level.upper()))
        self.close()

        handlers = [logging.StreamHandler(sys.stderr)]
        if self.config.path:
            log_path = Path(self.config.path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            handlers.append(logging.handlers.RotatingFileHandler(
                filename=log_path,
                maxBytes=self.config.max_size_mb * 1024 * 1024,
                backupCount=self.config.backup_count,
                encoding="utf-8",
            ))

        formatter = StructuredFormatter() if self.config.format == "json" else TextFormatter()
        for handler in handlers:
            handler.setFormatter(formatter)
            handler.addFilter(self.context_filter)
            self.logger.addHandler(handler)

        # записи компонентов не уходят в корневой логгер Python
        self.logger.propagate = False

    def bind(self, **context):
        """Задать контекст запуска (subcommand, config_hash, seed)"""
        self.context_filter.context.update(context)

    def close(self):
        for handler in list(self.logger.handlers):
            handler.close()
            self.logger.removeHandler(handler)


def get_logger(name: str = "main") -> logging.Logger:
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def fields(**kwargs) -> Dict[str, Any]:
    """Структурированные поля для extra="""
    return {EXTRA_KEY: kwargs}


def setup_logging(config: LoggingConfig, **context) -> RiskLogger:
    risk_logger = RiskLogger(config)
    if context:
        risk_logger.bind(**context)
    return risk_logger
