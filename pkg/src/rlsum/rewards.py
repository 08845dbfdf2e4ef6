"""Reward terms for the keep/discard episode.

The global recognisability and diversity-representativeness terms are paid
once, at the terminal step. The local rank-change term is paid at every
intermediate step and is zero for a keep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INTERMEDIATE = "intermediate"
TERMINAL = "terminal"


@dataclass(frozen=True)
class RewardConfig:
    eta: float = 0.15
    use_global: bool = True
    use_local: bool = True
    use_unsup: bool = True
    keep_bonus: float = 0.05
    penalty: float = -5.0
    reward: float = 1.0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    @classmethod
    def from_flags(cls, flags: str, **kwargs) -> "RewardConfig":
        """Parse a comma-separated subset of ``g``, ``l``, ``u``."""
        parts = {p.strip() for p in flags.split(",") if p.strip()}
        unknown = parts - {"g", "l", "u"}
        if unknown:
            raise ValueError(f"unknown reward flag(s): {sorted(unknown)}")
        return cls(use_global="g" in parts, use_local="l" in parts, use_unsup="u" in parts, **kwargs)

    @property
    def flags(self) -> str:
        return ",".join(f for f, on in (("g", self.use_global), ("l", self.use_local),
                                         ("u", self.use_unsup)) if on)

    @property
    def needs_classifier(self) -> bool:
        return self.use_global or self.use_local


@dataclass(frozen=True)
class RewardBreakdown:
    r_global: float = 0.0
    r_local: float = 0.0
    r_unsup: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return {"global": self.r_global, "local": self.r_local, "unsup": self.r_unsup, "total": self.total}


def reward_global(yhat: int, y: int, config: RewardConfig = RewardConfig()) -> float:
    return config.reward if yhat == y else config.penalty


def reward_local(action: int, xi_before: int, xi_after: int, eta: float = 0.15,
                 keep_bonus: float = 0.05) -> float:
    """Discard bonus plus tanh of the true-class rank improvement; 0 for a keep."""
    if action == 1:
        return 0.0
    return keep_bonus + math.tanh((xi_before - xi_after) / eta)


def reward_dr(features: np.ndarray, kept) -> float:
    """Diversity plus representativeness of the kept frames.

    ``features`` rows are expected to be unit-normalised, so cosine
    dissimilarity is ``1 - dot``; a zero row is dissimilar (1) to everything.
    """
    kept = np.asarray(sorted(set(int(k) for k in kept)), dtype=np.int64)
    if kept.size == 0:
        raise ValueError("diversity-representativeness reward needs a non-empty kept set")
    x = np.asarray(features, dtype=np.float64)
    sel = x[kept]
    n = len(kept)
    if n == 1:
        diversity = 0.0
    else:
        dissim = 1.0 - sel @ sel.T
        diversity = (dissim.sum() - np.trace(dissim)) / (n * (n - 1))
    # explicit differences: the norm expansion loses precision at distance ~0
    diff = x[:, None, :] - sel[None, :, :]
    nearest = np.sqrt(np.sum(diff * diff, axis=2)).min(axis=1)
    return float(diversity + math.exp(-nearest.mean()))


def assemble_reward(step_kind: str, config: RewardConfig, *, r_local: float | None = None,
                    r_global: float | None = None, r_unsup: float | None = None) -> RewardBreakdown:
    """Combine the enabled components valid for this kind of step (unit weights)."""
    if step_kind == INTERMEDIATE:
        if r_global is not None or r_unsup is not None:
            raise ValueError("terminal reward components supplied at an intermediate step")
        loc = r_local if (config.use_local and r_local is not None) else 0.0
        return RewardBreakdown(r_local=loc, total=loc)
    if step_kind == TERMINAL:
        g = r_global if (config.use_global and r_global is not None) else 0.0
        u = r_unsup if (config.use_unsup and r_unsup is not None) else 0.0
        return RewardBreakdown(r_global=g, r_unsup=u, total=g + u)
    raise ValueError(f"unknown step kind {step_kind!r}")
