"""PPO with an LSTM policy on top of the LSTM feature extractor."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .env import TradingEnv
from .errors import ContractError, NumericalError
from .features import LSTMFeatureExtractor, StateScales, normalize_state, warm_pad
from .nn import distributions
from .nn.layers import LSTM, Linear, Module, Parameter
from .nn.optim import Adam, clip_grad_norm

logger = logging.getLogger(__name__)

MAX_LOG_RATIO = 20.0


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.99
    n_steps: int = 128
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    clip_range: float = 0.2
    max_grad_norm: float = 0.5
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_epochs: int = 10
    batch_size: int = 32
    normalize_advantage: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not self.clip_range > 0:
            raise ValueError("clip_range must be positive")
        if self.n_steps < 1 or self.batch_size < 1 or self.n_epochs < 0:
            raise ValueError("n_steps, batch_size must be >= 1 and n_epochs >= 0")


class PolicyOutput(NamedTuple):
    mean: np.ndarray      # (B, N)
    log_std: np.ndarray   # (N,)
    value: np.ndarray     # (B,)
    h: np.ndarray         # (B, HS) recurrent state after this step
    c: np.ndarray


class LSTMPolicy(Module):
    """One LSTM step over the features, then actor and critic heads."""

    def __init__(self, features_dim: int, n_actions: int, hidden_size: int = 512,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.features_dim = features_dim
        self.n_actions = n_actions
        self.lstm = LSTM(features_dim, hidden_size, rng)
        self.actor = Linear(hidden_size, n_actions, rng, gain=0.01)
        self.critic = Linear(hidden_size, 1, rng, gain=1.0)
        self.log_std = Parameter(np.zeros(n_actions))

    @property
    def hidden_size(self) -> int:
        return self.lstm.hidden_size

    def forward(self, features: np.ndarray, h: np.ndarray, c: np.ndarray) -> PolicyOutput:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.features_dim:
            raise ValueError(f"features must be (B, {self.features_dim}), got {features.shape}")
        _, h1, c1 = self.lstm.forward(features[:, None, :], h, c)
        mean = self.actor.forward(h1)
        value = self.critic.forward(h1)[:, 0]
        out = PolicyOutput(mean, self.log_std.value.copy(), value, h1, c1)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(value))
                and np.all(np.isfinite(out.log_std))):
            raise NumericalError("policy produced non-finite outputs")
        return out

    def backward(self, dmean: np.ndarray, dvalue: np.ndarray, dlog_std: np.ndarray) -> np.ndarray:
        dh = self.actor.backward(dmean) + self.critic.backward(dvalue[:, None])
        self.log_std.grad += dlog_std
        dxs, _, _ = self.lstm.backward(dh_last=dh)
        return dxs[:, 0, :]


class ActorCritic(Module):
    """Feature extractor cascaded into the recurrent policy."""

    def __init__(self, state_dim: int, n_actions: int, window: int = 30,
                 extractor_hidden: int = 128, features_dim: int = 128,
                 policy_hidden: int = 512, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.window = window
        self.extractor = LSTMFeatureExtractor(state_dim, extractor_hidden, features_dim, rng)
        self.policy = LSTMPolicy(features_dim, n_actions, policy_hidden, rng)

    @property
    def state_dim(self) -> int:
        return self.extractor.state_dim

    def initial_state(self, batch: int = 1) -> tuple[np.ndarray, np.ndarray]:
        return self.policy.lstm.zero_state(batch)

    def forward(self, windows: np.ndarray, h: np.ndarray, c: np.ndarray) -> PolicyOutput:
        return self.policy.forward(self.extractor.forward(windows), h, c)

    def backward(self, dmean: np.ndarray, dvalue: np.ndarray, dlog_std: np.ndarray):
        self.extractor.backward(self.policy.backward(dmean, dvalue, dlog_std))


def policy_forward(model: ActorCritic, window: np.ndarray, h: np.ndarray, c: np.ndarray) -> PolicyOutput:
    """Single-window convenience wrapper; ``h``/``c`` are (1, HS)."""
    return model.forward(np.asarray(window)[None], h, c)


def sample_action(mean: np.ndarray, log_std: np.ndarray, rng: np.random.Generator | None,
                  deterministic: bool = False) -> tuple[np.ndarray, float, np.ndarray]:
    """Draw an action for one state.

    Returns ``(action, log_prob, raw)``: ``raw`` is the Gaussian draw (the
    mean when deterministic), ``log_prob`` is evaluated at ``raw`` and
    ``action`` is ``raw`` clamped into [-1, 1].
    """
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    log_std = np.asarray(log_std, dtype=np.float64).reshape(-1)
    if deterministic:
        raw = mean.copy()
    else:
        raw = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    lp = float(distributions.log_prob(raw, mean, log_std))
    return np.clip(raw, -1.0, 1.0), lp, raw


def ratio(log_prob_new, log_prob_old):
    """exp(new - old), with the exponent capped at ``MAX_LOG_RATIO``."""
    diff = np.asarray(log_prob_new, dtype=np.float64) - np.asarray(log_prob_old, dtype=np.float64)
    r = np.exp(np.minimum(diff, MAX_LOG_RATIO))
    return float(r) if r.ndim == 0 else r


def clipped_objective(r, adv, eps: float):
    """min(r * A, clip(r, 1 - eps, 1 + eps) * A), elementwise."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    r = np.asarray(r, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    out = np.minimum(r * adv, np.clip(r, 1.0 - eps, 1.0 + eps) * adv)
    return float(out) if out.ndim == 0 else out


def advantage(reward, value, next_value, done, gamma: float):
    """One-step advantage R + gamma * v_next * (1 - d) - v."""
    reward, value, next_value = (np.asarray(x, dtype=np.float64) for x in (reward, value, next_value))
    not_done = 1.0 - np.asarray(done, dtype=np.float64)
    out = reward + gamma * next_value * not_done - value
    return float(out) if out.ndim == 0 else out


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        return adv - adv.mean()
    std = adv.std()
    if std == 0.0:
        return adv - adv.mean()
    return (adv - adv.mean()) / std


@dataclass
class Transition:
    """One stored step.

    The state window is kept instead of the extracted feature vector because
    the extractor is trained jointly and features are recomputed at update
    time; ``features`` holds the rollout-time extraction for inspection.
    """

    window: np.ndarray
    h: np.ndarray
    c: np.ndarray
    action: np.ndarray  # pre-clamp Gaussian draw
    log_prob: float
    reward: float
    value: float
    done: bool
    next_value: float
    features: np.ndarray | None = None


class Batch(NamedTuple):
    windows: np.ndarray
    h: np.ndarray
    c: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    next_values: np.ndarray

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(*(a[idx] for a in self))


class RolloutBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: list[Transition] = []

    def __len__(self) -> int:
        return len(self.items)

    @property
    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def add(self, transition: Transition):
        if self.full:
            raise ContractError("rollout buffer is full; run an update first")
        if not np.isfinite(transition.log_prob):
            raise NumericalError("transition log-prob is not finite")
        self.items.append(transition)

    def clear(self):
        self.items = []

    def batch(self) -> Batch:
        it = self.items
        return Batch(
            np.stack([t.window for t in it]),
            np.stack([t.h for t in it]),
            np.stack([t.c for t in it]),
            np.stack([t.action for t in it]),
            np.array([t.log_prob for t in it]),
            np.array([t.reward for t in it]),
            np.array([t.value for t in it]),
            np.array([t.done for t in it], dtype=np.float64),
            np.array([t.next_value for t in it]),
        )


class LossStats(NamedTuple):
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    ratio_overflows: int


def ppo_loss(model: ActorCritic, batch: Batch, adv: np.ndarray, targets: np.ndarray,
             hyper: Hyperparams, backward: bool = True) -> LossStats:
    """Total loss -E[clipped] + vf * E[(target - v)^2] - ent * H.

    With ``backward`` the gradient is accumulated into the model's
    parameters (callers zero them first).
    """
    n = len(adv)
    out = model.forward(batch.windows, batch.h, batch.c)
    lp = distributions.log_prob(batch.actions, out.mean, out.log_std)
    log_diff = lp - batch.log_probs
    r = ratio(lp, batch.log_probs)
    r = np.atleast_1d(r)
    unclipped = r * adv
    clipped = np.clip(r, 1.0 - hyper.clip_range, 1.0 + hyper.clip_range) * adv
    surrogate = np.minimum(unclipped, clipped)
    policy_loss = -float(surrogate.mean())
    value_err = out.value - targets
    value_loss = float(np.mean(value_err ** 2))
    ent = distributions.entropy(out.log_std)
    loss = policy_loss + hyper.vf_coef * value_loss - hyper.ent_coef * ent
    overflows = int(np.count_nonzero(log_diff > MAX_LOG_RATIO))
    clip_fraction = float(np.mean(np.abs(r - 1.0) > hyper.clip_range))

    if backward and np.isfinite(loss):
        uses_unclipped = (unclipped <= clipped) & (log_diff <= MAX_LOG_RATIO)
        dlp = np.where(uses_unclipped, -unclipped / n, 0.0)
        dlp_dmean, dlp_dlogstd = distributions.log_prob_grads(batch.actions, out.mean, out.log_std)
        dmean = dlp[:, None] * dlp_dmean
        dlog_std = (dlp[:, None] * dlp_dlogstd).sum(axis=0) - hyper.ent_coef
        dvalue = hyper.vf_coef * 2.0 * value_err / n
        model.backward(dmean, dvalue, dlog_std)
    return LossStats(loss, policy_loss, value_loss, ent, clip_fraction, overflows)


@dataclass(frozen=True)
class UpdateStats:
    update_index: int
    policy_loss: float
    value_loss: float
    entropy: float
    mean_reward: float
    grad_norm: float
    clip_fraction: float = 0.0
    ratio_overflows: int = 0


def make_optimizer(model: ActorCritic, hyper: Hyperparams) -> Adam:
    return Adam(list(model.named_parameters()), lr=hyper.learning_rate,
                beta1=hyper.beta1, beta2=hyper.beta2, eps=hyper.adam_eps)


def update(model: ActorCritic, buffer: RolloutBuffer, hyper: Hyperparams, optimizer: Adam,
           rng: np.random.Generator, update_index: int = 0) -> UpdateStats:
    """Run the epochs of clipped-surrogate updates over a full buffer, then clear it.

    On a non-finite loss or gradient the parameters are restored to their
    values on entry and :class:`NumericalError` is raised.
    """
    if not buffer.full:
        raise ContractError(f"update needs {buffer.capacity} transitions, have {len(buffer)}")
    batch = buffer.batch()
    for name in ("rewards", "values", "next_values"):
        bad = np.flatnonzero(~np.isfinite(getattr(batch, name)))
        if bad.size:
            raise NumericalError(f"update {update_index}: non-finite {name} at transitions {bad.tolist()}")
    n = len(batch.rewards)
    targets = batch.rewards + hyper.gamma * batch.next_values * (1.0 - batch.dones)
    adv = advantage(batch.rewards, batch.values, batch.next_values, batch.dones, hyper.gamma)
    adv = np.atleast_1d(adv)
    if hyper.normalize_advantage:
        adv = normalize_advantages(adv)
    snapshot = model.state_dict()
    params = model.parameters()
    stats: list[LossStats] = []
    norms: list[float] = []
    try:
        for epoch in range(hyper.n_epochs):
            order = rng.permutation(n)
            for start in range(0, n, hyper.batch_size):
                idx = order[start:start + hyper.batch_size]
                model.zero_grad()
                s = ppo_loss(model, batch.take(idx), adv[idx], targets[idx], hyper)
                if not np.isfinite(s.loss):
                    raise NumericalError(
                        f"non-finite loss at update {update_index}, epoch {epoch}: "
                        f"policy={s.policy_loss} value={s.value_loss} entropy={s.entropy} "
                        f"ratio_overflows={s.ratio_overflows}")
                norms.append(clip_grad_norm(params, hyper.max_grad_norm))
                optimizer.step()
                stats.append(s)
    except NumericalError:
        model.load_state_dict(snapshot)
        raise
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.value)):
            model.load_state_dict(snapshot)
            raise NumericalError(f"parameter {name} became non-finite at update {update_index}")
    buffer.clear()
    if not stats:
        return UpdateStats(update_index, 0.0, 0.0, 0.0, float(batch.rewards.mean()), 0.0)
    return UpdateStats(
        update_index=update_index,
        policy_loss=float(np.mean([s.policy_loss for s in stats])),
        value_loss=float(np.mean([s.value_loss for s in stats])),
        entropy=float(np.mean([s.entropy for s in stats])),
        mean_reward=float(batch.rewards.mean()),
        grad_norm=float(np.mean(norms)),
        clip_fraction=float(np.mean([s.clip_fraction for s in stats])),
        ratio_overflows=int(sum(s.ratio_overflows for s in stats)),
    )


class Agent:
    """Model + state normalization + window bookkeeping for one market."""

    def __init__(self, model: ActorCritic, scales: StateScales):
        self.model = model
        self.scales = scales

    @classmethod
    def create(cls, n_stocks: int, scales: StateScales, window: int = 30,
               extractor_hidden: int = 128, features_dim: int = 128,
               policy_hidden: int = 512, seed: int = 0) -> "Agent":
        model = ActorCritic(1 + 6 * n_stocks, n_stocks, window, extractor_hidden,
                            features_dim, policy_hidden, seed)
        return cls(model, scales)

    @property
    def window(self) -> int:
        return self.model.window

    def observe(self, state_vector: np.ndarray) -> np.ndarray:
        return normalize_state(state_vector, self.scales)

    def forward(self, history: Sequence[np.ndarray], h: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, PolicyOutput]:
        window = warm_pad(history, self.window)
        return window, policy_forward(self.model, window, h, c)

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.model.state_dict()

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.model.load_state_dict({k: v for k, v in state.items() if not k.startswith("meta.")})


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    log: list[UpdateStats] = field(default_factory=list)
    episode_rewards: list[float] = field(default_factory=list)
    steps: int = 0


def train(env: TradingEnv, agent: Agent, hyper: Hyperparams, total_steps: int, seed: int,
          optimizer: Adam | None = None,
          on_update: Callable[[UpdateStats], None] | None = None) -> TrainResult:
    """Collect rollouts on ``env`` and update every ``hyper.n_steps`` steps.

    Episodes restart at the start of the env's range. A trailing partial
    rollout (fewer than ``n_steps`` transitions) is discarded.
    """
    result = TrainResult(state=agent.state_dict())
    if total_steps <= 0:
        return result
    rng = np.random.default_rng(seed)
    optimizer = optimizer or make_optimizer(agent.model, hyper)
    buffer = RolloutBuffer(hyper.n_steps)

    history = [agent.observe(env.reset().as_vector())]
    h, c = agent.model.initial_state()
    window, out = agent.forward(history, h, c)
    episode_reward = 0.0
    for step in range(total_steps):
        if out is None:
            window, out = agent.forward(history, h, c)
        action, lp, raw = sample_action(out.mean[0], out.log_std, rng)
        res = env.step(action)
        history.append(agent.observe(res.next_state.as_vector()))
        del history[:-agent.window]
        if res.done:
            next_window, next_out, next_value = None, None, 0.0
        else:
            next_window, next_out = agent.forward(history, out.h, out.c)
            next_value = float(next_out.value[0])
        buffer.add(Transition(window, h[0], c[0], raw, lp, res.reward, float(out.value[0]),
                              res.done, next_value))
        episode_reward += res.reward
        if res.done:
            result.episode_rewards.append(episode_reward)
            episode_reward = 0.0
            history = [agent.observe(env.reset().as_vector())]
            h, c = agent.model.initial_state()
        else:
            h, c = out.h, out.c
        window, out = next_window, next_out
        if buffer.full:
            stats = update(agent.model, buffer, hyper, optimizer, rng, len(result.log))
            result.log.append(stats)
            if on_update is not None:
                on_update(stats)
            out = None
    result.steps = total_steps
    result.state = agent.state_dict()
    return result


TRAIN_LOG_HEADER = ("update_index", "policy_loss", "value_loss", "entropy", "mean_reward", "grad_norm")


def write_train_log(log: Sequence[UpdateStats], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_LOG_HEADER)
        for s in log:
            w.writerow([s.update_index] + [repr(float(getattr(s, k))) for k in TRAIN_LOG_HEADER[1:]])
