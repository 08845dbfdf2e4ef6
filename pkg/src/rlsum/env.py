"""The keep/discard summarisation episode.

A state is the set of frames still retained plus the frame currently under
decision. Frames are decided in their original order; a discard removes the
attended frame, a keep leaves the retained set alone. The episode ends after
the last frame or when the retained set has shrunk to the keep floor, in
which case every undecided frame stays in the summary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierModel, predict_label, rank_of_true, classify
from .rewards import INTERMEDIATE, TERMINAL, RewardBreakdown, RewardConfig, assemble_reward, reward_dr
from .rewards import reward_global, reward_local

KEEP = 1
DISCARD = 0


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    min_keep_fraction: float = 0.15
    gamma: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.min_keep_fraction <= 1.0:
            raise ValueError("min_keep_fraction must lie in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def keep_floor(self, n_frames: int) -> int:
        # the epsilon absorbs products like 0.15 * 20 = 3.0000000000000004
        return max(1, math.ceil(self.min_keep_fraction * n_frames - 1e-9))


@dataclass(frozen=True)
class EpisodeState:
    """Retained frames are stored as a packed bitset to keep replay entries small."""

    video_id: str
    n_frames: int
    packed: bytes
    attention: int
    t: int
    done: bool = False

    @property
    def mask(self) -> np.ndarray:
        bits = np.unpackbits(np.frombuffer(self.packed, dtype=np.uint8), count=self.n_frames)
        return bits.astype(bool)

    @property
    def retained(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def n_retained(self) -> int:
        return int(self.mask.sum())

    @property
    def position(self) -> int:
        """Index of the attended frame within the retained order."""
        if self.done:
            raise StateError("a finished episode has no attended frame")
        mask = self.mask
        if not mask[self.attention]:
            raise StateError(f"attended frame {self.attention} is not retained")
        return int(mask[:self.attention].sum())

    @property
    def key(self) -> tuple[str, bytes]:
        return self.video_id, self.packed


def pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool)).tobytes()


def reset(video) -> EpisodeState:
    n = video.n_frames
    if n < 1:
        raise StateError("cannot start an episode on an empty video")
    return EpisodeState(video.id, n, pack_mask(np.ones(n, dtype=bool)), attention=0, t=1)


def step(state: EpisodeState, action: int, config: EnvConfig = EnvConfig()):
    """Apply ``action`` to the attended frame; returns ``(next_state, done)``.

    A discard that would take the retained set below the keep floor is
    applied as a keep.
    """
    if state.done:
        raise StateError("step called on a finished episode")
    if action not in (KEEP, DISCARD):
        raise ValueError(f"action must be 0 or 1, got {action!r}")
    mask = state.mask
    floor = config.keep_floor(state.n_frames)
    if action == DISCARD and mask.sum() > floor:
        mask[state.attention] = False
    t = state.t + 1
    done = t > state.n_frames or int(mask.sum()) <= floor
    attention = -1 if done else state.attention + 1
    return EpisodeState(state.video_id, state.n_frames, pack_mask(mask), attention, t, done), done


@dataclass(frozen=True)
class Transition:
    state: EpisodeState
    action: int
    reward: float
    next_state: EpisodeState
    done: bool

    @property
    def video_id(self) -> str:
        return self.state.video_id


class RewardEngine:
    """Computes per-step rewards for one video, caching the current true-class rank."""

    def __init__(self, config: RewardConfig, classifier: ClassifierModel | None = None):
        if config.needs_classifier and classifier is None:
            raise ValueError(f"rewards {config.flags!r} need a classifier")
        self.config = config
        self.classifier = classifier
        self.video = None
        self._rank = None

    def start(self, video):
        if self.config.needs_classifier and video.label is None:
            raise ValueError(f"video {video.id!r} has no label")
        self.video = video
        self._rank = None

    def _rank_of(self, retained) -> int:
        probs = classify(self.classifier, self.video.features, retained)
        return rank_of_true(probs, self.video.label)

    def __call__(self, state: EpisodeState, action: int, next_state: EpisodeState):
        """Returns ``(breakdown, rank_before, rank_after, recognised)``."""
        cfg = self.config
        rank_before = rank_after = None
        recognised = None
        if next_state.done:
            g = u = None
            if self.classifier is not None and self.video.label is not None:
                yhat = predict_label(self.classifier, self.video.features, next_state.retained)
                recognised = yhat == self.video.label
                if cfg.use_global:
                    g = reward_global(yhat, self.video.label, cfg)
            if cfg.use_unsup:
                u = reward_dr(self.video.features, next_state.retained)
            return assemble_reward(TERMINAL, cfg, r_global=g, r_unsup=u), None, None, recognised
        loc = None
        if cfg.use_local:
            if action == DISCARD:
                if self._rank is None:
                    self._rank = self._rank_of(state.retained)
                rank_before = self._rank
                rank_after = self._rank = self._rank_of(next_state.retained)
            loc = reward_local(action, rank_before, rank_after, cfg.eta, cfg.keep_bonus)
        return assemble_reward(INTERMEDIATE, cfg, r_local=loc), rank_before, rank_after, recognised


@dataclass
class EpisodeResult:
    transitions: list[Transition]
    records: list[dict]
    episode_return: float
    terminal: RewardBreakdown
    recognised: bool | None
    final_state: EpisodeState = field(repr=False, default=None)


def discounted_return(rewards, gamma: float) -> float:
    total, scale = 0.0, 1.0
    for r in rewards:
        total += scale * r
        scale *= gamma
    return total


def run_episode(video, policy, rewards: RewardEngine, config: EnvConfig = EnvConfig(),
                on_step=None) -> EpisodeResult:
    """Roll out ``policy`` (state -> action) on ``video`` from the initial state.

    ``on_step`` is called with every transition as soon as it exists.
    """
    rewards.start(video)
    state = reset(video)
    transitions, records = [], []
    terminal, recognised = RewardBreakdown(), None
    while not state.done:
        action = policy(state)
        nxt, done = step(state, action, config)
        applied = DISCARD if nxt.n_retained < state.n_retained else KEEP
        breakdown, rb, ra, rec = rewards(state, applied, nxt)
        tr = Transition(state, applied, breakdown.total, nxt, done)
        transitions.append(tr)
        records.append({
            "video_id": video.id, "t": state.t, "attention": state.attention, "action": applied,
            "reward": breakdown.as_dict(), "rank_before": rb, "rank_after": ra,
        })
        if done:
            terminal, recognised = breakdown, rec
        if on_step is not None:
            on_step(tr)
        state = nxt
    ret = discounted_return([tr.reward for tr in transitions], config.gamma)
    return EpisodeResult(transitions, records, ret, terminal, recognised, state)


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
