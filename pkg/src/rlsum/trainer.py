"""Deep Q-learning for the summarisation agent.

Experience replay, epsilon-greedy exploration, a periodically synced target
network and double-Q targets: the online network picks the next action, the
target network prices it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .env import KEEP, EnvConfig, RewardEngine, Transition, run_episode
from .qnet import QNetwork, ActionValues, init_qnet, q_batch_backward, q_batch_forward, q_forward
from .rewards import RewardConfig
from .rng import child_rng

log = logging.getLogger(__name__)


class ReplayMemory:
    """Fixed-capacity ring buffer; the oldest transition is overwritten first."""

    def __init__(self, capacity: int = 6000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list = []
        self.inserted = 0

    def push(self, item) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self.inserted % self.capacity] = item
        self.inserted += 1

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def contents(self) -> list:
        """Stored items, oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        cut = self.inserted % self.capacity
        return self._items[cut:] + self._items[:cut]


def sample_minibatch(memory: ReplayMemory, n: int, rng: np.random.Generator) -> list:
    if len(memory) == 0:
        raise ValueError("cannot sample from an empty replay memory")
    if len(memory) < n:
        idx = rng.integers(0, len(memory), size=n)
    else:
        idx = rng.choice(len(memory), size=n, replace=False)
    return [memory[int(i)] for i in idx]


@dataclass(frozen=True)
class EpsilonSchedule:
    """Exponential decay from ``start`` clamped at ``floor``."""

    start: float = 1.0
    floor: float = 0.1
    decay: float = 0.999

    @classmethod
    def reaching_floor_at(cls, steps: int, start: float = 1.0, floor: float = 0.1) -> "EpsilonSchedule":
        steps = max(1, int(steps))
        return cls(start, floor, (floor / start) ** (1.0 / steps))

    def value(self, step: int) -> float:
        return max(self.floor, self.start * self.decay ** step)


def select_action(q: ActionValues, epsilon: float, rng: np.random.Generator) -> int:
    return epsilon_greedy(lambda: q, epsilon, rng)


def epsilon_greedy(get_q, epsilon: float, rng: np.random.Generator) -> int:
    """Random action with probability ``epsilon``; ``get_q`` is only called when acting greedily."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(0, 2))
    return get_q().greedy


@dataclass
class TrainerConfig:
    episodes: int = 300
    minibatch: int = 200
    capacity: int = 6000
    gamma: float = 0.99
    sync_period: int = 500
    lr: float = 1e-4
    clip_norm: float = 5.0
    update_every: int = 1
    eps_start: float = 1.0
    eps_floor: float = 0.1
    eps_floor_fraction: float = 0.6
    min_keep_fraction: float = 0.15
    embed_size: int = 256
    hidden_size: int = 256
    head_size: int = 256
    seed: int = 0
    rewards: RewardConfig = field(default_factory=RewardConfig)

    def validate(self):
        positive = ("minibatch", "capacity", "sync_period", "update_every", "embed_size", "hidden_size", "head_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")
        if not 0.0 < self.eps_floor_fraction <= 1.0:
            raise ValueError("eps_floor_fraction must lie in (0, 1]")
        if not 0.0 <= self.eps_floor <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_floor <= eps_start <= 1")
        EnvConfig(self.min_keep_fraction, self.gamma)

    @property
    def env(self) -> EnvConfig:
        return EnvConfig(self.min_keep_fraction, self.gamma)


class _Batch:
    """Padded sequences for a minibatch with shared rows for repeated retained sets."""

    def __init__(self, features: dict):
        self.features = features
        self.seqs: list[np.ndarray] = []
        self._index: dict = {}

    def add(self, state) -> tuple[int, int]:
        key = state.key
        if key not in self._index:
            self._index[key] = len(self.seqs)
            self.seqs.append(self.features[state.video_id][state.retained])
        return self._index[key], state.position


def double_q_targets(batch: list[Transition], online: QNetwork, target: QNetwork, gamma: float,
                     features: dict) -> np.ndarray:
    """Bootstrapped regression targets; terminal transitions get their reward only."""
    out = np.array([tr.reward for tr in batch], dtype=np.float64)
    live = [i for i, tr in enumerate(batch) if not tr.done]
    if not live or gamma == 0.0:
        return out
    seqs = _Batch(features)
    reads = [seqs.add(batch[i].next_state) for i in live]
    q_online, _ = q_batch_forward(online, seqs.seqs, reads)
    q_target, _ = q_batch_forward(target, seqs.seqs, reads)
    best = np.where(q_online[:, KEEP] >= q_online[:, 1 - KEEP], KEEP, 1 - KEEP)
    out[live] += gamma * q_target[np.arange(len(live)), best]
    return out


def double_q_target(transition: Transition, online: QNetwork, target: QNetwork, gamma: float,
                    features: np.ndarray) -> float:
    if transition.done:
        return transition.reward
    nxt = transition.next_state
    chosen = q_forward(online, nxt, features).greedy
    priced = q_forward(target, nxt, features)
    return transition.reward + gamma * (priced.q_keep if chosen == KEEP else priced.q_discard)


def q_regression_step(online: QNetwork, batch: list[Transition], targets: np.ndarray, features: dict):
    """Huber loss of ``Q(s, a)`` against ``targets``; fills gradients and returns the mean loss."""
    seqs = _Batch(features)
    reads = [seqs.add(tr.state) for tr in batch]
    q, cache = q_batch_forward(online, seqs.seqs, reads)
    actions = np.array([tr.action for tr in batch])
    rows = np.arange(len(batch))
    loss, dpred = nn.huber_loss(q[rows, actions], targets)
    dq = np.zeros_like(q)
    dq[rows, actions] = dpred / len(batch)
    online.params.zero_grad()
    q_batch_backward(online, dq, cache)
    return float(loss.mean())


class DQSNTrainer:
    """Holds the online/target networks, replay memory and optimiser state."""

    def __init__(self, videos, classifier, config: TrainerConfig, qnet: QNetwork | None = None):
        config.validate()
        self.config = config
        self.videos = list(videos)
        if not self.videos:
            raise ValueError("no training videos")
        if config.rewards.needs_classifier:
            if classifier is None:
                raise ValueError(f"rewards {config.rewards.flags!r} need a frozen classifier")
            if not classifier.frozen:
                raise ValueError("classifier must be frozen before training the agent")
            if any(v.label is None for v in self.videos):
                raise ValueError("classifier-based rewards need labelled videos")
        self.features = {v.id: v.features for v in self.videos}
        dim = self.videos[0].dim
        self.online = qnet or init_qnet(dim, config.embed_size, config.hidden_size, config.head_size, config.seed)
        self.target = self.online.clone()
        self.memory = ReplayMemory(config.capacity)
        self.adam = nn.AdamState(lr=config.lr)
        self.engine = RewardEngine(config.rewards, classifier)
        self.explore_rng = child_rng(config.seed, "dqsn/explore")
        self.replay_rng = child_rng(config.seed, "dqsn/replay")
        self.schedule = self._plan_episodes()
        planned = sum(v.n_frames for v in self.schedule)
        self.epsilon = EpsilonSchedule.reaching_floor_at(
            config.eps_floor_fraction * planned, config.eps_start, config.eps_floor)
        self.decisions = 0
        self.updates = 0
        self.history: list[dict] = []

    def _plan_episodes(self):
        """Video per episode: seeded passes over the data, reshuffled each pass."""
        rng = child_rng(self.config.seed, "dqsn/schedule")
        order = []
        while len(order) < self.config.episodes:
            order.extend(rng.permutation(len(self.videos)).tolist())
        return [self.videos[i] for i in order[:self.config.episodes]]

    def update(self) -> float:
        cfg = self.config
        batch = sample_minibatch(self.memory, cfg.minibatch, self.replay_rng)
        targets = double_q_targets(batch, self.online, self.target, cfg.gamma, self.features)
        loss = q_regression_step(self.online, batch, targets, self.features)
        nn.clip_gradients(self.online.params, cfg.clip_norm)
        nn.adam_step(self.online.params, self.adam)
        self.updates += 1
        if self.updates % cfg.sync_period == 0:
            self.sync_target()
        return loss

    def sync_target(self):
        self.target.params.load_from(self.online.params)

    def run_episode(self, video, episode: int) -> dict:
        cfg = self.config
        losses = []

        def policy(state):
            eps = self.epsilon.value(self.decisions)
            return epsilon_greedy(lambda: q_forward(self.online, state, video.features), eps, self.explore_rng)

        def on_step(tr):
            self.memory.push(tr)
            self.decisions += 1
            if len(self.memory) >= cfg.minibatch and self.decisions % cfg.update_every == 0:
                losses.append(self.update())

        result = run_episode(video, policy, self.engine, cfg.env, on_step=on_step)
        record = {
            "episode": episode,
            "video_id": video.id,
            "return": result.episode_return,
            "terminal_reward_breakdown": result.terminal.as_dict(),
            "recognised": result.recognised,
            "epsilon": self.epsilon.value(self.decisions),
            "mean_minibatch_loss": float(np.mean(losses)) if losses else None,
            "steps": len(result.transitions),
            "kept": int(result.final_state.n_retained),
        }
        self.history.append(record)
        return record

    def train(self, on_episode=None) -> QNetwork:
        for episode, video in enumerate(self.schedule):
            record = self.run_episode(video, episode)
            if on_episode is not None:
                on_episode(record, self)
            if episode % 25 == 0:
                log.info("episode %d return %.3f eps %.3f", episode, record["return"], record["epsilon"])
        return self.online


def train_dqsn(videos, classifier, config: TrainerConfig, on_episode=None):
    """Train a Q-network on ``videos``; returns ``(qnet, per-episode log)``."""
    trainer = DQSNTrainer(videos, classifier, config)
    qnet = trainer.train(on_episode)
    return qnet, trainer.history


def decile_means(values, fraction: float = 0.1) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    k = max(1, int(math.floor(len(values) * fraction)))
    return float(values[:k].mean()), float(values[-k:].mean())
