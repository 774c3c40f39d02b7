import datetime as dt

import numpy as np
import pytest

from clstm_ppo import cli, config as config_mod
from clstm_ppo.env import EquityPoint, write_equity_csv, write_trades_csv
from clstm_ppo.errors import ConfigError, NumericalError
from clstm_ppo.features import StateScales
from clstm_ppo.market_data import BarSeries, write_ohlcv
from clstm_ppo.metrics import read_metrics_csv
from clstm_ppo.nn import checkpoint
from clstm_ppo.ppo import Agent, UpdateStats
from clstm_ppo.synthetic import business_days, random_market

START = dt.date(2015, 1, 1)


def _write_market(path, n_tickers=2, n_days=330, seed=0, gap_ticker=None):
    series = random_market(n_tickers, n_days, seed=seed, start=START)
    if gap_ticker is not None:
        s = series[gap_ticker]
        series[gap_ticker] = BarSeries(s.ticker, s.bars[:150] + s.bars[151:])
    write_ohlcv(series, path)
    return series


def _config(tmp_path, **extra):
    lines = {
        "panel": str(tmp_path / "ingest" / "panel.csv"),
        "start": "2015-01-01",
        "first_train_end": "2015-12-31",
        "end": "2016-03-31",
        "initial_capital": "100000",
        "turbulence_lookback": "30",
        "window": "4",
        "extractor_hidden": "6",
        "features_dim": "6",
        "policy_hidden": "8",
        "train_steps": "64",
        "n_steps": "32",
        "batch_size": "16",
        "n_epochs": "2",
    }
    lines.update({k: str(v) for k, v in extra.items()})
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\n" + "".join(f"{k} = {v}\n" for k, v in lines.items()))
    return path


@pytest.fixture
def ingested(tmp_path, capsys):
    raw = tmp_path / "raw.csv"
    _write_market(raw)
    cfg = _config(tmp_path, data=str(raw))
    assert cli.main(["ingest", "--config", str(cfg), "--out", str(tmp_path / "ingest")]) == 0
    capsys.readouterr()
    return tmp_path, cfg


def test_defaults_are_reference_configuration():
    c = config_mod.RunConfig()
    assert (c.window, c.policy_hidden, c.extractor_hidden, c.features_dim) == (30, 512, 128, 128)
    assert (c.gamma, c.n_steps, c.vf_coef, c.ent_coef, c.clip_range, c.max_grad_norm, c.learning_rate) == \
        (0.99, 128, 0.5, 0.01, 0.2, 0.5, 3e-4)
    assert (c.initial_capital, c.h_max, c.cost_rate, c.reward_scale) == (1e6, 100, 0.001, 1e-4)
    assert c.turbulence_policy == "liquidate" and c.seed is None


def test_config_round_trip_and_unknown_keys():
    c = config_mod.parse_text("window = 10\ntickers = AAA, BBB\nuse_turbulence = no\nseed = 4\n")
    assert c.window == 10 and c.tickers == ("AAA", "BBB") and c.use_turbulence is False and c.seed == 4
    assert config_mod.parse_text(config_mod.dump(c)) == c
    assert config_mod.parse_text(config_mod.dump(config_mod.RunConfig())) == config_mod.RunConfig()
    with pytest.raises(ConfigError, match="windw"):
        config_mod.parse_text("windw = 10\n")
    with pytest.raises(ConfigError):
        config_mod.parse_text("window = ten\n")
    with pytest.raises(ConfigError):
        config_mod.parse_text("[section]\nwindow = 3\n")


def test_usage_errors_exit_one(tmp_path, capsys):
    assert cli.main(["ingest"]) == 1  # no data configured
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_key = 1\n")
    assert cli.main(["train", "--config", str(cfg), "--seed", "1"]) == 1
    assert "not_a_key" in capsys.readouterr().err


def test_seed_required(ingested, capsys):
    tmp_path, cfg = ingested
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 1
    assert cli.main(["backtest", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 1
    assert "--seed" in capsys.readouterr().err


def test_ingest_summary_and_bit_identical_rerun(ingested, capsys):
    tmp_path, cfg = ingested
    first = (tmp_path / "ingest" / "panel.csv").read_bytes()
    assert cli.main(["ingest", "--config", str(cfg), "--out", str(tmp_path / "ingest")]) == 0
    out = capsys.readouterr().out
    assert "tickers (2): T00, T01" in out
    assert "dropped: none" in out
    assert "warm-up cutoff:" in out
    assert (tmp_path / "ingest" / "panel.csv").read_bytes() == first
    assert (tmp_path / "ingest" / "config.txt").exists()


def test_ingest_reports_dropped_ticker(tmp_path, capsys):
    raw = tmp_path / "raw.csv"
    _write_market(raw, n_tickers=3, gap_ticker=1)
    cfg = _config(tmp_path, data=str(raw))
    assert cli.main(["ingest", "--config", str(cfg), "--out", str(tmp_path / "ingest")]) == 0
    out = capsys.readouterr().out
    assert "tickers (2): T00, T02" in out
    assert "dropped T01" in out


def test_ingest_schema_error_exit_two(tmp_path, capsys):
    raw = tmp_path / "raw.csv"
    _write_market(raw)
    lines = raw.read_text().splitlines()
    lines[5] = lines[5].replace(",", ";", 1)
    raw.write_text("\n".join(lines) + "\n")
    cfg = _config(tmp_path, data=str(raw))
    assert cli.main(["ingest", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert f"{raw}:6" in capsys.readouterr().err


def test_train_zero_steps_is_initialization(ingested):
    tmp_path, cfg = ingested
    out = tmp_path / "t0"
    assert cli.main(["train", "--config", str(cfg), "--seed", "5", "--out", str(out),
                     "--set", "train_steps=0"]) == 0
    saved = checkpoint.load(out / "checkpoint.ckpt")
    agent = Agent.create(2, StateScales.identity(2), 4, 6, 6, 8, seed=5)
    for k, v in agent.state_dict().items():
        assert np.array_equal(saved[k], v)


def test_train_same_seed_identical(ingested):
    tmp_path, cfg = ingested
    blobs = []
    for k in range(2):
        out = tmp_path / f"t{k}"
        assert cli.main(["train", "--config", str(cfg), "--seed", "9", "--out", str(out)]) == 0
        blobs.append((out / "checkpoint.ckpt").read_bytes())
    assert blobs[0] == blobs[1]


def test_train_smoke_run_log(ingested):
    tmp_path, cfg = ingested
    out = tmp_path / "smoke"
    assert cli.main(["train", "--config", str(cfg), "--seed", "1", "--out", str(out),
                     "--set", "train_steps=5000", "--set", "n_steps=128", "--set", "batch_size=32"]) == 0
    rows = (out / "train_log.csv").read_text().splitlines()
    indices = [int(r.split(",")[0]) for r in rows[1:]]
    assert indices == list(range(5000 // 128))


def test_train_divergence_keeps_last_good(ingested, monkeypatch, capsys):
    tmp_path, cfg = ingested

    def diverging(env, agent, hyper, total_steps, seed, optimizer=None, on_update=None):
        on_update(UpdateStats(0, 0.1, 0.2, 1.0, 0.0, 0.3))
        raise NumericalError("loss is nan")

    monkeypatch.setattr(cli, "train", diverging)
    out = tmp_path / "div"
    assert cli.main(["train", "--config", str(cfg), "--seed", "1", "--out", str(out)]) == 3
    assert (out / "checkpoint.ckpt").exists()
    assert "diverged after 1 updates" in capsys.readouterr().err


def test_backtest_artifacts_determinism_and_report(ingested, capsys):
    tmp_path, cfg = ingested
    outs = [tmp_path / "bt0", tmp_path / "bt1"]
    for out in outs:
        assert cli.main(["backtest", "--config", str(cfg), "--seed", "2", "--out", str(out),
                         "--set", "stride_months=12"]) == 0
    capsys.readouterr()
    for name in ("equity.csv", "trades.csv", "metrics.csv", "train_log_0.csv", "equity_plot.csv", "config.txt"):
        assert (outs[0] / name).exists(), name
    assert (outs[0] / "checkpoints" / "window_0.ckpt").exists()
    assert (outs[0] / "equity.csv").read_bytes() == (outs[1] / "equity.csv").read_bytes()
    plot_header = (outs[0] / "equity_plot.csv").read_text().splitlines()[0]
    assert plot_header == "date,cumulative_return,buy_and_hold"

    stored = read_metrics_csv(outs[0] / "metrics.csv")
    assert cli.main(["report", str(outs[0])]) == 0
    printed = capsys.readouterr().out
    assert f"CR    {100 * stored.cr:.2f}%" in printed


def test_backtest_random_agent(ingested, capsys):
    tmp_path, cfg = ingested
    out = tmp_path / "rnd"
    assert cli.main(["backtest", "--config", str(cfg), "--seed", "2", "--out", str(out), "--random-agent"]) == 0
    assert "random_agent = true" in (out / "config.txt").read_text()
    assert not (out / "checkpoints" / "window_0.ckpt").exists()


def _report_dir(path, values):
    path.mkdir()
    dates = business_days(dt.date(2020, 1, 1), len(values))
    write_equity_csv([EquityPoint(d, v, v, 0.0, False) for d, v in zip(dates, values)], path / "equity.csv")
    write_trades_csv([], path / "trades.csv")
    return path


def test_report_flat_curve(tmp_path, capsys):
    root = _report_dir(tmp_path / "flat", [1e6] * 10)
    assert cli.main(["report", str(root)]) == 0
    out = capsys.readouterr().out
    assert "CR    0.00%" in out and "SR    NA" in out and "APPT  NA" in out
    lines = (root / "equity_plot.csv").read_text().splitlines()
    assert lines[0] == "date,cumulative_return" and lines[-1].endswith(",0.0")


def test_report_reference_curve(tmp_path, capsys):
    values = np.linspace(1.0, 1.9081, 40) * 1e6
    root = _report_dir(tmp_path / "ref", values.tolist())
    assert cli.main(["report", str(root)]) == 0
    assert "CR    90.81%" in capsys.readouterr().out


def test_report_missing_files(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.main(["report", str(tmp_path / "empty")]) == 2
