#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Запись артефактов запуска: CSV (RFC 4180), JSON-отчёты, манифест и скрипт gnuplot
"""

import os
import csv
import json
import tempfile
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from logging_config import get_logger

TOOL_VERSION = "1.0.0"
MANIFEST_NAME = "run_manifest.json"

logger = get_logger("report")


@dataclass
class RunManifest:
    """Что и с какими параметрами было посчитано"""
    config_hash: str
    subcommand: str
    parameters: Dict[str, Any]
    seed: int
    tool_version: str = TOOL_VERSION
    wall_time: Optional[float] = None
    outputs: List[str] = field(default_factory=list)

    def deterministic_dict(self) -> Dict[str, Any]:
        """Поля, одинаковые у повторных запусков (без времени и списка файлов)"""
        data = asdict(self)
        data.pop("wall_time")
        data.pop("outputs")
        return data


def _to_builtin(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _atomic_write(path: Path, text: str, newline: Optional[str] = None):
    """Запись во временный файл рядом и переименование"""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline=newline) as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows) -> Path:
    """CSV с CRLF и кавычками по необходимости"""
    path = Path(path)
    lines = []

    class _Sink:
        def write(self, text):
            lines.append(text)

    writer = csv.writer(_Sink(), lineterminator="\r\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([_format_cell(v) for v in row])
    _atomic_write(path, "".join(lines), newline="")
    return path


def read_csv(path) -> Tuple[List[str], List[List[Any]]]:
    """Обратное чтение: числа превращаются в float, остальное остаётся строками"""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = []
        for raw in reader:
            row = []
            for cell in raw:
                try:
                    row.append(float(cell))
                except ValueError:
                    row.append(cell)
            rows.append(row)
    return header, rows


def write_json(path, data: Dict[str, Any]) -> Path:
    """JSON, UTF-8, ключи отсортированы"""
    path = Path(path)
    text = json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False, default=_to_builtin)
    _atomic_write(path, text + "\n")
    return path


def gnuplot_script(data_file: str, columns: Sequence[str], title: str,
                   xlabel: Optional[str] = None, style: str = "lines") -> str:
    """Скрипт gnuplot: первый столбец по оси x, остальные - кривые"""
    xlabel = xlabel or columns[0]
    plots = [f"'{data_file}' using 1:{i + 1} with {style} title '{name}'"
             for i, name in enumerate(columns) if i > 0]
    return "\n".join([
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title '{title}'",
        f"set xlabel '{xlabel}'",
        "set terminal pngcairo size 900,600",
        f"set output '{Path(data_file).stem}.png'",
        "plot " + ", \\\n     ".join(plots),
        "",
    ])


class ReportWriter:
    """Все файлы одного запуска в каталоге out_dir плюс манифест рядом"""

    def __init__(self, out_dir, manifest: RunManifest, gnuplot: bool = False):
        self.out_dir = Path(out_dir)
        self.manifest = manifest
        self.gnuplot = gnuplot
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _register(self, path: Path):
        self.manifest.outputs.append(path.name)
        logger.debug(f"Wrote {path}")

    def table(self, name: str, header: Sequence[str], rows, title: Optional[str] = None,
            style: str = "lines") -> Path:
        path = write_csv(self.out_dir / name, header, rows)
        self._register(path)
        if self.gnuplot:
            script = self.out_dir / f"{path.stem}.gp"
            _atomic_write(script, gnuplot_script(path.name, header, title or path.stem, style=style))
            self._register(script)
        return path

    def report(self, name: str, data: Dict[str, Any]) -> Path:
        payload = dict(data)
        payload["manifest"] = self.manifest.deterministic_dict()
        path = write_json(self.out_dir / name, payload)
        self._register(path)
        return path

    def finish(self, wall_time: float) -> Path:
        """Записать манифест с временем выполнения"""
        self.manifest.wall_time = wall_time
        return write_json(self.out_dir / MANIFEST_NAME, asdict(self.manifest))
