#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Основное приложение: командная строка движка кредитного риска
"""

import sys
import time
import argparse
import traceback
from typing import Optional, Dict, Any, List, Sequence

import numpy as np

from config import RunConfig, ConfigError, TimeGrid
from logging_config import setup_logging, get_logger, fields
from portfolio import NumericalFailure, group_counts, validate_pool
from affine_survival import (ForcedPaths, survival_curve, cir_closed_form_survival,
                             find_truncation_order, default_probability)
from exact_simulator import ExactSimulator, ASSIGNMENT_RULES, DEFAULT_ASSIGNMENT
from moment_solver import solve_lln, lln_loss_distribution, lln_terminal_loss
from fluctuation_solver import second_order_loss_samples
from ldp_optimizer import rate_curve, rate_heterogeneous, RateResult
from importance_sampling import ImportanceSampler, binomial_tail, poisson_binomial_tail
from risk_measures import compute_var_es, ks_distance
from report_writer import ReportWriter, RunManifest
from workers import RUN_SIMULATE, RUN_LLN, RUN_SINGLE

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

SUBCOMMANDS = ("simulate", "survival", "lln", "clt", "ldp", "is", "var", "reproduce-table1")
QUANTILE_NOTE = ("VaR is the empirical quantile with linear interpolation between order "
                 "statistics; ES is the mean of samples at or above VaR.")
# аргументы, не влияющие на содержимое результатов
_AMBIENT_ARGS = {"out", "log_level", "gnuplot", "threads", "config", "command"}


def _labels(config: RunConfig) -> List[str]:
    return [g.label or f"G{i}" for i, g in enumerate(config.pool.groups)]


class RiskApp:
    """Одна команда: расчёт и запись артефактов"""

    def __init__(self, config: RunConfig, args: argparse.Namespace, logger=None):
        self.config = config
        self.args = args
        self.logger = logger or get_logger("main")
        self.threads = config.solver.threads

        parameters = {k: v for k, v in sorted(vars(args).items()) if k not in _AMBIENT_ARGS}
        manifest = RunManifest(config_hash=config.config_hash(), subcommand=args.command,
                               parameters={"args": parameters, "config": self._config_dict()},
                               seed=config.seed.master_seed)
        self.writer = ReportWriter(args.out or f"results/{args.command}", manifest,
                                   gnuplot=args.gnuplot)

    def _config_dict(self) -> Dict[str, Any]:
        data = self.config.to_dict()
        data.pop("logging")
        data["solver"].pop("threads")
        return data

    def execute(self) -> Dict[str, Any]:
        """Выполнить команду; возвращает JSON-отчёт"""
        start_time = time.time()
        handler = getattr(self, "_cmd_" + self.args.command.replace("-", "_"))
        self.logger.info(f"Running '{self.args.command}'",
                         extra=fields(config_hash=self.writer.manifest.config_hash))
        report = handler()
        wall_time = time.time() - start_time
        self.writer.finish(wall_time)
        self.logger.info(f"'{self.args.command}' completed in {wall_time:.2f}s",
                         extra=fields(outputs=len(self.writer.manifest.outputs)))
        return report

    # ---- simulate --------------------------------------------------------

    def _exact_terminal(self, n_paths: int):
        simulator = ExactSimulator(self.config.pool, self.config.factor, self.config.grid,
                                   logger=get_logger("exact_sim"))
        ensemble = simulator.simulate_ensemble(n_paths, self.config.seed, RUN_SIMULATE,
                                               threads=self.threads)
        self.logger.debug("Simulator stats", extra=fields(**simulator.get_stats()))
        return ensemble

    def _cmd_simulate(self) -> Dict[str, Any]:
        ensemble = self._exact_terminal(self.args.paths)
        n = ensemble.n_names
        self.writer.table("loss_mean.csv", ["t", "mean_loss"],
                          zip(self.config.grid.times, ensemble.losses.mean(axis=0)))
        self.writer.table("terminal_histogram.csv", ["loss", "count"],
                          [(k / n, int(c)) for k, c in enumerate(ensemble.histogram())], style="boxes")
        self.writer.table("terminal_samples.csv", ["path", "loss"], enumerate(ensemble.terminal),
                          style="points")
        if self.args.emit == "full":
            times = self.config.grid.times
            self.writer.table("loss_paths.csv", ["path", "t", "loss"],
                              ((j, t, L) for j, row in enumerate(ensemble.losses) for t, L in zip(times, row)),
                              style="lines")
        if self.args.at:
            rows = []
            for t in sorted(self.args.at):
                rows.extend((t, j, L) for j, L in enumerate(ensemble.samples_at(t)))
            self.writer.table("loss_at.csv", ["t", "path", "loss"], rows, style="points")
        report = {"summary": ensemble.summary()}
        self.writer.report("simulate.json", report)
        return report

    # ---- survival --------------------------------------------------------

    def _cmd_survival(self) -> Dict[str, Any]:
        grid = self.config.grid
        K = self.config.solver.moments
        forcing = ForcedPaths.zero(grid)
        header, columns, groups = ["t"], [grid.times], {}
        for label, group in zip(_labels(self.config), self.config.pool.groups):
            curve = survival_curve(group.params, forcing, K)
            closed = cir_closed_form_survival(group.params, grid.times)
            order, _ = find_truncation_order(group.params, forcing, K_max=max(K, 24))
            header += [f"S_{label}", f"f_{label}"]
            columns += [curve.S, curve.f]
            groups[label] = {"p_T": curve.p_T, "mass_at_star": curve.mass_at_star,
                             "identity_gap": curve.identity_gap,
                             "closed_form_gap": float(np.max(np.abs(curve.S - closed))),
                             "truncation_order": order}
        self.writer.table("survival.csv", header, zip(*columns))
        report = {"groups": groups, "moments": K}
        self.writer.report("survival.json", report)
        return report

    # ---- lln -------------------------------------------------------------

    def _cmd_lln(self) -> Dict[str, Any]:
        cfg = self.config
        K = cfg.solver.moments
        trajectory = solve_lln(cfg.pool, cfg.factor, cfg.grid, K,
                               stream=cfg.seed.generator(RUN_SINGLE, 0))
        labels = _labels(cfg)
        self.writer.table("lln_path.csv", ["t", "loss"] + [f"loss_{l}" for l in labels],
                          (np.concatenate([[t], [L], row]) for t, L, row in
                           zip(cfg.grid.times, trajectory.loss, trajectory.type_losses)))
        report: Dict[str, Any] = {"terminal_loss": trajectory.terminal_loss,
                                  "refinements": trajectory.refinements}
        if self.args.paths > 0:
            dist = lln_loss_distribution(cfg.pool, cfg.factor, cfg.grid, K, self.args.paths,
                                         cfg.seed, RUN_LLN, self.threads)
            self.writer.table("lln_samples.csv", ["path", "loss"], enumerate(dist.samples),
                              style="points")
            counts, edges = dist.histogram()
            self.writer.table("lln_histogram.csv", ["loss", "count"],
                              zip(0.5 * (edges[1:] + edges[:-1]), counts), style="boxes")
            report["distribution"] = dist.summary()
            report["quantiles"] = {str(q): float(np.quantile(dist.samples, q))
                                   for q in (0.05, 0.5, 0.95, 0.99)}
        self.writer.report("lln.json", report)
        return report

    # ---- clt -------------------------------------------------------------

    def _second_order(self, n_paths: int):
        cfg = self.config
        return second_order_loss_samples(cfg.pool, cfg.factor, cfg.grid, cfg.solver.fluct_moments,
                                         cfg.pool.n_names, n_paths, cfg.seed,
                                         K=cfg.solver.moments, threads=self.threads)

    def _cmd_clt(self) -> Dict[str, Any]:
        samples = self._second_order(self.args.paths)
        self.writer.table("clt_samples.csv", ["path", "lln", "second_order", "xi0"],
                          ((j, a, b, c) for j, (a, b, c) in
                           enumerate(zip(samples.lln, samples.second_order, samples.xi0))),
                          style="points")
        levels = self.args.level or [0.95, 0.99]
        report = {
            "summary": samples.summary(),
            "lln": [r.to_dict() for r in compute_var_es(samples.lln, levels)],
            "second_order": [r.to_dict() for r in compute_var_es(samples.second_order, levels)],
        }
        self.writer.report("clt.json", report)
        return report

    # ---- ldp -------------------------------------------------------------

    def _ldp_grid(self) -> TimeGrid:
        return TimeGrid(self.config.grid.horizon, self.config.solver.ldp_steps)

    def _write_extremal(self, name: str, result: RateResult, labels: Sequence[str]):
        path = result.path
        rows = (np.concatenate([[t], phi, [bar, psi]]) for t, phi, bar, psi in
                zip(path.grid.times, path.phi.T, path.aggregate, path.psi))
        self.writer.table(name, ["t"] + [f"phi_{l}" for l in labels] + ["phi_bar", "psi"], rows)

    def _rates(self, pool, ells) -> List[RateResult]:
        solver = self.config.solver
        return rate_curve(pool, self.config.factor, ells, self._ldp_grid(), K=solver.moments,
                          max_iter=solver.max_iter, gtol=solver.gtol, threads=self.threads)

    def _cmd_ldp(self) -> Dict[str, Any]:
        ells = self.args.ell or [0.81]
        results = self._rates(self.config.pool, ells)
        self.writer.table("rate_curve.csv", ["ell", "rate"], [(r.ell, r.value) for r in results],
                          style="linespoints")
        labels = _labels(self.config)
        for r in results:
            self._write_extremal(f"extremal_{r.ell:.4f}.csv", r, labels)
        report = {"results": [r.to_dict() for r in results]}
        self.writer.report("ldp.json", report)
        return report

    # ---- is --------------------------------------------------------------

    def _independent_pool(self) -> bool:
        return all(g.params.beta_c == 0.0 and g.params.beta_s == 0.0 for g in self.config.pool.groups)

    def _exact_tail(self, ell: float) -> float:
        cfg = self.config
        probs = [default_probability(g.params, cfg.grid.horizon, cfg.grid.n_steps)
                 for g in cfg.pool.groups]
        if cfg.pool.is_homogeneous:
            return binomial_tail(cfg.pool.n_names, probs[0], ell)
        expanded = np.repeat(probs, group_counts(cfg.pool))
        return poisson_binomial_tail(expanded, ell)

    def _cmd_is(self) -> Dict[str, Any]:
        sampler = ImportanceSampler(self.config, logger=get_logger("importance"))
        ell = self.args.ell[0] if self.args.ell else 0.5
        mode = self.args.mode
        if mode == "auto":
            mode = "independent" if self._independent_pool() else "dependent"

        report: Dict[str, Any] = {"ell": ell, "mode": mode}
        if mode == "independent":
            estimate = sampler.independent(ell, self.args.samples)
            report["exact"] = self._exact_tail(ell)
        else:
            beta = self.args.beta
            if self.args.beta_grid:
                selection = sampler.select_beta(ell, self.args.beta_grid, self.args.pilot,
                                                self.args.assignment)
                beta = selection.beta
                report["beta_selection"] = selection.table
                self.writer.table("beta_pilot.csv", ["beta", "Q_hat", "Q_hat_stderr"],
                                  [(r["beta"], r["Q_hat"], r["Q_hat_stderr"]) for r in selection.table],
                                  style="linespoints")
            estimate = sampler.dependent(ell, beta, self.args.samples, self.args.assignment)
            report["assignment"] = self.args.assignment
        report["estimate"] = estimate.to_dict()
        self.writer.report("is.json", report)
        return report

    # ---- var -------------------------------------------------------------

    def _cmd_var(self) -> Dict[str, Any]:
        cfg = self.config
        levels = self.args.level or [0.95, 0.99]
        samples = {"exact": self._exact_terminal(self.args.paths).terminal}
        samples["lln"] = lln_loss_distribution(cfg.pool, cfg.factor, cfg.grid, cfg.solver.moments,
                                               self.args.paths, cfg.seed, RUN_LLN,
                                               self.threads).samples
        if cfg.pool.is_homogeneous:
            samples["clt"] = self._second_order(self.args.paths).second_order
        else:
            self.logger.warning("Second-order approximation needs a homogeneous pool; skipped")

        tables = {name: compute_var_es(values, levels) for name, values in samples.items()}
        header = ["level"]
        for name in tables:
            header += [f"var_{name}", f"es_{name}"]
        rows = []
        for i, level in enumerate(levels):
            row = [level]
            for name in tables:
                row += [tables[name][i].var, tables[name][i].es]
            rows.append(row)
        self.writer.table("var_es.csv", header, rows, style="linespoints")

        report = {
            "levels": list(levels),
            "measures": {name: [r.to_dict() for r in rows_] for name, rows_ in tables.items()},
            "ks_to_exact": {name: ks_distance(values, samples["exact"])
                            for name, values in samples.items() if name != "exact"},
            "quantile_convention": QUANTILE_NOTE,
        }
        self.writer.report("var.json", report)
        return report

    # ---- reproduce-table1 ------------------------------------------------

    def _cmd_reproduce_table1(self) -> Dict[str, Any]:
        cfg = self.config
        pools = {"contagion": cfg.pool, "independent": cfg.pool.with_contagion(None)}
        K = cfg.solver.moments
        typical = {name: lln_terminal_loss(pool, cfg.factor, cfg.grid, K) for name, pool in pools.items()}

        ell = self.args.ell[0] if self.args.ell else 0.81
        solver = cfg.solver
        extremal = rate_heterogeneous(cfg.pool, cfg.factor, ell, self._ldp_grid(), K=K,
                                      max_iter=solver.max_iter, gtol=solver.gtol, threads=self.threads)
        labels = _labels(cfg)
        self._write_extremal(f"extremal_{ell:.4f}.csv", extremal, labels)

        psi = extremal.path.psi
        half = len(psi) // 2

        ells = np.round(np.linspace(self.args.curve_min, self.args.curve_max, self.args.curve_points), 6)
        curves = {name: self._rates(pool, ells) for name, pool in pools.items()}
        self.writer.table("rate_curves.csv", ["ell"] + [f"rate_{n}" for n in curves],
                          [[e] + [curves[n][i].value for n in curves] for i, e in enumerate(ells)],
                          style="linespoints")

        report = {
            "typical_loss": typical,
            "extremal": extremal.to_dict(),
            "extremals_ordered": extremal.path.is_ordered(),
            "extremal_order_violation": extremal.path.order_violation,
            "psi_increment_first_half": float(psi[half] - psi[0]),
            "psi_increment_second_half": float(psi[-1] - psi[half]),
            "rate_curves": {n: [(r.ell, r.value) for r in rs] for n, rs in curves.items()},
        }
        self.writer.report("table1.json", report)
        return report


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON/YAML run configuration (default: three-type reference pool)")
    common.add_argument("--out", help="output directory (default: results/<command>)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    common.add_argument("--gnuplot", action="store_true", help="also emit gnuplot scripts")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--threads", type=int, help="worker thread cap")
    common.add_argument("--names", type=int, help="override the number of names N")

    parser = argparse.ArgumentParser(prog="risk_app", description="Default clustering risk engine",
                                     epilog=QUANTILE_NOTE)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="exact Monte Carlo of the pool")
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--emit", choices=["terminal", "full"], default="terminal",
                   help="full also writes every loss path on the grid")
    p.add_argument("--at", type=float, nargs="+", help="also write loss samples at these times")

    sub.add_parser("survival", parents=[common], help="survival curves and default densities")

    p = sub.add_parser("lln", parents=[common], help="law of large numbers approximation")
    p.add_argument("--paths", type=int, default=0, help="number of factor paths for the distribution")

    p = sub.add_parser("clt", parents=[common], help="second-order (fluctuation) approximation",
                       epilog=QUANTILE_NOTE)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--level", type=float, action="append")

    p = sub.add_parser("ldp", parents=[common], help="rate function and extremal paths")
    p.add_argument("--ell", type=float, action="append")

    p = sub.add_parser("is", parents=[common], help="importance sampling of the loss tail")
    p.add_argument("--ell", type=float, action="append")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--mode", choices=["auto", "independent", "dependent"], default="auto")
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--beta-grid", type=float, nargs="+")
    p.add_argument("--pilot", type=int, default=1000)
    p.add_argument("--assignment", choices=list(ASSIGNMENT_RULES), default=DEFAULT_ASSIGNMENT)

    p = sub.add_parser("var", parents=[common], help="VaR/ES: exact vs LLN vs CLT",
                       epilog=QUANTILE_NOTE)
    p.add_argument("--level", type=float, action="append")
    p.add_argument("--paths", type=int, default=2000)

    p = sub.add_parser("reproduce-table1", parents=[common], help="typical losses, extremals, rate curves")
    p.add_argument("--ell", type=float, action="append")
    p.add_argument("--curve-min", type=float, default=0.45)
    p.add_argument("--curve-max", type=float, default=0.95)
    p.add_argument("--curve-points", type=int, default=6)
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """Файл конфигурации, затем окружение, затем флаги командной строки"""
    config = RunConfig.from_file(args.config).apply_env() if args.config else RunConfig.from_env()
    if args.names is not None:
        config = config.with_names(args.names)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.threads is not None:
        config.solver.threads = args.threads
        config.solver.__post_init__()
    if args.log_level:
        config.logging.level = args.log_level
    problems = validate_pool(config.pool)
    if problems:
        raise ConfigError(f"Invalid pool: {'; '.join(problems)}", "pool")
    return config


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Точка входа; возвращает код завершения 0/2/3"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    try:
        config = load_config(args)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    risk_logger = setup_logging(config.logging, subcommand=args.command,
                                config_hash=config.config_hash()[:12], seed=config.seed.master_seed)
    logger = get_logger("main")
    try:
        RiskApp(config, args, logger).execute()
        return EXIT_OK
    except NumericalFailure as e:
        logger.error(f"Numerical failure: {e}", extra=fields(**e.diagnostics))
        return EXIT_NUMERICAL
    except ValueError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.critical(f"Fatal error: {e}")
        logger.critical(traceback.format_exc())
        raise
    finally:
        risk_logger.close()


def main():
    """Главная функция"""
    sys.exit(run())


if __name__ == "__main__":
    main()
