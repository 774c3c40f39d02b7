"""Batch commands: ingest, train, backtest, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (training divergence).
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import backtest, config as config_mod, market_data, metrics
from .env import TradingEnv, read_equity_csv, read_trades_csv
from .errors import ConfigError, DataError, NumericalError
from .features import StateScales
from .nn import checkpoint
from .ppo import Agent, make_optimizer, train, write_train_log

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
CONFIG_ECHO = "config.txt"
PANEL_META_SUFFIX = ".meta"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="random seed (required for train and backtest)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="clstm-ppo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("ingest", parents=[common], help="build the indicator panel from raw CSVs")
    sub.add_parser("train", parents=[common], help="train one agent on the initial training range")
    bt = sub.add_parser("backtest", parents=[common], help="rolling retrain-and-trade backtest")
    bt.add_argument("--random-agent", action="store_true", help="uniform random actions, no training")
    rp = sub.add_parser("report", parents=[common], help="metrics table and plot data for a report")
    rp.add_argument("report_dir", help="directory written by backtest")
    return parser


def resolve_config(args: argparse.Namespace) -> config_mod.RunConfig:
    cfg = config_mod.RunConfig()
    if args.config:
        cfg = config_mod.load(args.config, cfg)
    pairs = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append(tuple(item.split("=", 1)))
    cfg = config_mod.apply(cfg, pairs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if getattr(args, "random_agent", False):
        cfg = replace(cfg, random_agent=True)
    return cfg


def _out_dir(cfg: config_mod.RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.write(cfg, out / CONFIG_ECHO)
    return out


def _require_seed(cfg: config_mod.RunConfig, command: str):
    if cfg.seed is None:
        raise ConfigError(f"{command} needs an explicit --seed")


def write_panel(panel: market_data.Panel, path: Path) -> None:
    market_data.write_panel_csv(panel, path)
    lines = [
        f"turbulence_valid_from = {panel.turbulence_valid_from}",
        f"warmup_cutoff = {panel.warmup_cutoff.isoformat() if panel.warmup_cutoff else ''}",
    ]
    Path(str(path) + PANEL_META_SUFFIX).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_panel(path: str | Path) -> market_data.Panel:
    path = Path(path)
    meta_path = Path(str(path) + PANEL_META_SUFFIX)
    valid_from = 0
    cutoff = None
    if meta_path.exists():
        for line in meta_path.read_text(encoding="utf-8").splitlines():
            key, _, value = (s.strip() for s in line.partition("="))
            if key == "turbulence_valid_from":
                valid_from = int(value)
            elif key == "warmup_cutoff" and value:
                cutoff = dt.date.fromisoformat(value)
    else:
        logger.warning("%s missing; treating every turbulence value as valid", meta_path)
    panel = market_data.read_panel_csv(path, valid_from)
    return replace(panel, warmup_cutoff=cutoff or panel.warmup_cutoff)


def _trading_panel(cfg: config_mod.RunConfig) -> market_data.Panel:
    panel = load_panel(cfg.panel)
    idx = [i for i, d in enumerate(panel.dates) if cfg.start <= d <= cfg.end]
    if not idx:
        raise DataError(f"panel has no dates between {cfg.start} and {cfg.end}")
    return panel.slice_dates(idx[0], idx[-1] + 1)


def cmd_ingest(cfg: config_mod.RunConfig) -> int:
    if not cfg.data:
        raise ConfigError("ingest needs data = <csv files or directories>")
    series = market_data.load_paths(cfg.data)
    if cfg.tickers:
        by_name = {s.ticker: s for s in series}
        missing = [t for t in cfg.tickers if t not in by_name]
        if missing:
            raise DataError(f"requested tickers not found in inputs: {', '.join(missing)}")
        series = [by_name[t] for t in cfg.tickers]
    panel = market_data.compute_indicators(market_data.align_panel(series), cfg.indicator_params())
    out = _out_dir(cfg)
    write_panel(panel, out / "panel.csv")
    print(f"tickers ({panel.n_tickers}): {', '.join(panel.tickers)}")
    print(f"dates: {panel.dates[0]} .. {panel.dates[-1]} ({panel.n_dates} trading days)")
    print(f"warm-up cutoff: {panel.warmup_cutoff}")
    print(f"turbulence valid from: {panel.dates[min(panel.turbulence_valid_from, panel.n_dates - 1)]}")
    if panel.dropped:
        for ticker, reason in panel.dropped:
            print(f"dropped {ticker}: {reason}")
    else:
        print("dropped: none")
    print(f"panel written to {out / 'panel.csv'}")
    return EXIT_OK


def cmd_train(cfg: config_mod.RunConfig) -> int:
    _require_seed(cfg, "train")
    panel = _trading_panel(cfg)
    in_sample = [d for d in panel.dates if d <= cfg.first_train_end]
    if len(in_sample) < 2:
        raise DataError(f"fewer than two panel dates on/before {cfg.first_train_end}")
    train_end = in_sample[-1]
    env_cfg = cfg.env_config(panel.n_tickers)
    if cfg.use_turbulence:
        env_cfg = replace(env_cfg, turbulence_threshold=backtest.window_threshold(
            panel, panel.dates[0], train_end))
    env = TradingEnv(panel, env_cfg, (panel.dates[0], train_end))
    hyper = cfg.hyperparams()
    scales = StateScales.from_panel(panel, env_cfg.initial_capital, env_cfg.h_max)
    agent = Agent.create(panel.n_tickers, scales, cfg.window, cfg.extractor_hidden,
                         cfg.features_dim, cfg.policy_hidden, seed=cfg.seed)
    out = _out_dir(cfg)
    log = []
    status = EXIT_OK
    try:
        train(env, agent, hyper, cfg.train_steps, seed=cfg.seed,
              optimizer=make_optimizer(agent.model, hyper), on_update=log.append)
    except NumericalError as exc:
        # the failed update restored the parameters it started from
        print(f"training diverged after {len(log)} updates: {exc}", file=sys.stderr)
        print("keeping the last good checkpoint", file=sys.stderr)
        status = EXIT_NUMERICAL
    arrays = dict(agent.state_dict())
    arrays["meta.trained_through"] = np.array([float(train_end.toordinal())])
    arrays["meta.updates"] = np.array([float(len(log))])
    checkpoint.save(arrays, out / "checkpoint.ckpt")
    write_train_log(log, out / "train_log.csv")
    print(f"{len(log)} updates on {panel.dates[0]} .. {train_end}; checkpoint in {out}")
    return status


def write_plot_csv(equity, path: Path, panel: market_data.Panel | None = None) -> None:
    """Cumulative return per date, plus the equal-weight buy-and-hold index when a panel is given."""
    values = np.array([p.portfolio_value for p in equity])
    cum = values / values[0] - 1.0
    bh = None
    if panel is not None:
        dates, index = backtest.buy_and_hold_index(panel, equity[0].date, equity[-1].date)
        if list(dates) == [p.date for p in equity]:
            bh = index - 1.0
        else:
            logger.warning("panel calendar does not match the equity curve; omitting buy-and-hold")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "cumulative_return"] + ([] if bh is None else ["buy_and_hold"]))
        for k, p in enumerate(equity):
            row = [p.date.isoformat(), repr(float(cum[k]))]
            if bh is not None:
                row.append(repr(float(bh[k])))
            w.writerow(row)


def cmd_backtest(cfg: config_mod.RunConfig) -> int:
    _require_seed(cfg, "backtest")
    panel = _trading_panel(cfg)
    schedule = backtest.make_schedule(panel.dates, cfg.first_train_end, cfg.stride_months)
    out = _out_dir(cfg)
    report = backtest.run_backtest(
        panel, schedule, cfg.env_config(panel.n_tickers), cfg.hyperparams(), cfg.seed,
        cfg.agent_spec(), use_turbulence=cfg.use_turbulence, random_agent=cfg.random_agent,
        risk_free=cfg.risk_free, out_dir=out)
    if report.equity:
        write_plot_csv(report.equity, out / "equity_plot.csv", panel)
    if report.metrics is not None:
        print(report.metrics.format())
    print(f"{len(report.windows)} of {len(schedule)} windows traded; report in {out}")
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_report(report_dir: str | Path, cfg: config_mod.RunConfig | None = None) -> int:
    root = Path(report_dir)
    equity_path, trades_path = root / "equity.csv", root / "trades.csv"
    for p in (equity_path, trades_path):
        if not p.exists():
            raise DataError(f"{p}: missing report file")
    if cfg is None:
        echo = root / CONFIG_ECHO
        cfg = config_mod.load(echo) if echo.exists() else config_mod.RunConfig()
    equity = read_equity_csv(equity_path)
    if not equity:
        raise DataError(f"{equity_path}: empty equity curve")
    trades = read_trades_csv(trades_path)
    report = metrics.evaluate([p.portfolio_value for p in equity], trades, cfg.risk_free)
    stored_path = root / "metrics.csv"
    if stored_path.exists():
        stored = metrics.read_metrics_csv(stored_path)
        if stored != report:
            logger.warning("metrics.csv differs from metrics recomputed from equity.csv/trades.csv")
    panel = None
    if Path(cfg.panel).exists():
        panel = load_panel(cfg.panel)
    write_plot_csv(equity, root / "equity_plot.csv", panel)
    print(report.format())
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cfg = resolve_config(args) if (args.config or args.set) else None
            return cmd_report(args.report_dir, cfg)
        cfg = resolve_config(args)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_backtest(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # invalid configuration values rejected by the dataclass validators
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
