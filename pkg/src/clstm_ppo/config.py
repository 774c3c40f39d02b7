"""Run configuration: a flat ``key = value`` file plus command-line overrides.

Every key has a default so an empty file reproduces the reference setup
(30-state window, 512-unit policy LSTM, the standard PPO constants).
Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import configparser
import datetime as dt
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable

from .backtest import AgentSpec
from .env import EnvConfig
from .errors import ConfigError
from .market_data import IndicatorParams
from .ppo import Hyperparams

_SECTION = "run"


@dataclass(frozen=True)
class RunConfig:
    # data
    data: tuple[str, ...] = ()
    tickers: tuple[str, ...] = ()
    panel: str = "panel.csv"
    # calendar
    start: dt.date = dt.date(2009, 1, 1)
    first_train_end: dt.date = dt.date(2016, 1, 1)
    end: dt.date = dt.date(2020, 5, 8)
    stride_months: int = 3
    # environment
    initial_capital: float = 1_000_000.0
    h_max: int = 100
    cost_rate: float = 0.001
    reward_scale: float = 1e-4
    use_turbulence: bool = True
    turbulence_policy: str = "liquidate"
    turbulence_lookback: int = 252
    # networks
    window: int = 30
    extractor_hidden: int = 128
    features_dim: int = 128
    policy_hidden: int = 512
    # ppo
    train_steps: int = 30_000
    gamma: float = 0.99
    n_steps: int = 128
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    clip_range: float = 0.2
    max_grad_norm: float = 0.5
    learning_rate: float = 3e-4
    n_epochs: int = 10
    batch_size: int = 32
    # evaluation
    risk_free: float = 0.0
    random_agent: bool = False
    # run
    seed: int | None = None
    out: str = "out"

    def env_config(self, n_stocks: int) -> EnvConfig:
        return EnvConfig(
            initial_capital=self.initial_capital, h_max=self.h_max, cost_rate=self.cost_rate,
            reward_scale=self.reward_scale, turbulence_policy=self.turbulence_policy,
            n_stocks=n_stocks,
        )

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            gamma=self.gamma, n_steps=self.n_steps, vf_coef=self.vf_coef, ent_coef=self.ent_coef,
            clip_range=self.clip_range, max_grad_norm=self.max_grad_norm,
            learning_rate=self.learning_rate, n_epochs=self.n_epochs, batch_size=self.batch_size,
        )

    def agent_spec(self) -> AgentSpec:
        return AgentSpec(self.window, self.extractor_hidden, self.features_dim,
                         self.policy_hidden, self.train_steps)

    def indicator_params(self) -> IndicatorParams:
        return IndicatorParams(turbulence_lookback=self.turbulence_lookback)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _kind(name: str) -> type:
    default = getattr(_DEFAULTS, name)
    if name == "seed":
        return int
    return type(default)


def _parse_value(name: str, text: str) -> Any:
    kind = _kind(name)
    text = text.strip()
    if name == "seed" and text == "":
        return None
    try:
        if kind is tuple:
            return tuple(s.strip() for s in text.split(",") if s.strip())
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is dt.date:
            return dt.date.fromisoformat(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from None


def _format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dt.date):
        return value.isoformat()
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def apply(config: RunConfig, pairs: Iterable[tuple[str, str]]) -> RunConfig:
    updates = {}
    for key, text in pairs:
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, text)
    return replace(config, **updates)


def parse_text(text: str, base: RunConfig = _DEFAULTS) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if parser.sections() != [_SECTION]:
        raise ConfigError("config files are flat key = value lists without sections")
    return apply(base, parser.items(_SECTION))


def load(path: str | Path, base: RunConfig = _DEFAULTS) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    return parse_text(path.read_text(encoding="utf-8"), base)


def dump(config: RunConfig) -> str:
    """Full echo of every key, readable back by :func:`parse_text`."""
    return "".join(f"{name} = {_format_value(getattr(config, name))}\n" for name in _FIELDS)


def write(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump(config), encoding="utf-8")
