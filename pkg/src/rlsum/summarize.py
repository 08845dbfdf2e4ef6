"""Summary generation and F-score evaluation.

Frames are scored by a greedy pass of the trained agent, shot scores are
frame-score means, and shots are picked under a duration budget by an exact
0/1 knapsack. Evaluation compares the selected frames with each human
summary of a video.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import EnvConfig, reset, step
from .qnet import QNetwork, q_values_all

DEFAULT_BUDGET = 0.15
TIE_TOL = 1e-12


class EvaluationError(ValueError):
    pass


@dataclass
class Summary:
    video_id: str
    frame_scores: list[float]
    selected_shots: list[int]
    selected_frames: list[int]
    budget_fraction: float

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "Summary":
        return cls(doc["video_id"], [float(s) for s in doc["frame_scores"]],
                   [int(i) for i in doc["selected_shots"]], [int(i) for i in doc["selected_frames"]],
                   float(doc["budget_fraction"]))


def keep_probability(q_discard, q_keep):
    """Softmax over the two actions, probability of keeping."""
    # 1 / (1 + exp(qd - qk)) written through tanh to stay finite
    return 0.5 * (1.0 + np.tanh(0.5 * (np.asarray(q_keep) - np.asarray(q_discard))))


def score_frames(qnet: QNetwork, video, config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Per-frame keep probabilities from a greedy episode.

    Each decided frame gets the score seen at its decision. Frames left
    undecided when the keep floor ends the episode are scored from the final
    retained set.
    """
    feats = video.features
    scores = np.full(video.n_frames, np.nan)
    state = reset(video)
    while not state.done:
        q, _, _ = q_values_all(qnet, feats, state.retained)
        qd, qk = q[state.position]
        scores[state.attention] = keep_probability(qd, qk)
        state, _ = step(state, 1 if qk >= qd else 0, config)
    pending = np.flatnonzero(np.isnan(scores))
    if pending.size:
        retained = state.retained
        q, _, _ = q_values_all(qnet, feats, retained)
        pos = np.searchsorted(retained, pending)
        scores[pending] = keep_probability(q[pos, 0], q[pos, 1])
    return scores


def shot_scores(frame_scores, shots) -> np.ndarray:
    frame_scores = np.asarray(frame_scores, dtype=np.float64)
    out = np.empty(len(shots))
    for i, (start, end) in enumerate(shots):
        if end <= start:
            raise ValueError(f"shot {i} [{start}, {end}) is empty")
        out[i] = frame_scores[start:end].mean()
    return out


def budget_frames(budget_fraction: float, n_frames: int) -> int:
    if not 0.0 < budget_fraction <= 1.0:
        raise ValueError("budget fraction must lie in (0, 1]")
    return int(math.floor(budget_fraction * n_frames + 1e-9))


def knapsack(values, weights, capacity: int) -> list[int]:
    """Exact 0/1 knapsack by dynamic programming over integer weights.

    Among optimal sets (values equal within ``TIE_TOL``) the one including the
    earliest possible items is returned.
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.int64)
    n = len(values)
    if capacity < 0:
        return []
    # best[i, w]: optimum over items i.. with capacity w
    best = np.zeros((n + 1, capacity + 1))
    for i in range(n - 1, -1, -1):
        best[i] = best[i + 1]
        wi = weights[i]
        if wi <= capacity:
            cand = best[i + 1, :capacity + 1 - wi] + values[i]
            best[i, wi:] = np.maximum(best[i + 1, wi:], cand)
    chosen, w = [], capacity
    for i in range(n):
        wi = weights[i]
        if wi <= w and values[i] + best[i + 1, w - wi] >= best[i + 1, w] - TIE_TOL:
            chosen.append(i)
            w -= wi
    return chosen


def select_shots(scores, lengths, budget_fraction: float, n_frames: int | None = None,
                 greedy: bool = False) -> list[int]:
    """Shots maximising ``sum(score * length)`` within ``floor(budget * T)`` frames.

    ``greedy`` instead takes shots by decreasing score while they fit.
    """
    scores = np.asarray(scores, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.int64)
    n_frames = int(lengths.sum()) if n_frames is None else n_frames
    cap = budget_frames(budget_fraction, n_frames)
    if greedy:
        chosen, used = [], 0
        for i in np.argsort(-scores, kind="stable"):
            if used + lengths[i] <= cap:
                chosen.append(int(i))
                used += int(lengths[i])
        return sorted(chosen)
    return knapsack(scores * lengths, lengths, cap)


def shots_to_frames(shots, selected) -> list[int]:
    frames = []
    for i in sorted(selected):
        start, end = shots[i]
        frames.extend(range(start, end))
    return frames


def summarize_scores(video, frame_scores, budget_fraction: float = DEFAULT_BUDGET,
                     greedy: bool = False) -> Summary:
    frame_scores = np.asarray(frame_scores, dtype=np.float64)
    shots = video.shots
    lengths = [end - start for start, end in shots]
    chosen = select_shots(shot_scores(frame_scores, shots), lengths, budget_fraction, video.n_frames, greedy)
    return Summary(video.id, frame_scores.tolist(), chosen, shots_to_frames(shots, chosen), budget_fraction)


def summarize(qnet: QNetwork, video, budget_fraction: float = DEFAULT_BUDGET, greedy: bool = False,
              config: EnvConfig = EnvConfig()) -> Summary:
    return summarize_scores(video, score_frames(qnet, video, config), budget_fraction, greedy)


def random_summary(video, budget_fraction: float, rng: np.random.Generator) -> Summary:
    """Baseline: uniform random frame scores pushed through the same shot selection."""
    return summarize_scores(video, rng.random(video.n_frames), budget_fraction)


def f_score(machine, human) -> float:
    machine, human = set(int(i) for i in machine), set(int(i) for i in human)
    overlap = len(machine & human)
    if overlap == 0:
        return 0.0
    p = overlap / len(machine)
    r = overlap / len(human)
    return 2 * p * r / (p + r)


def video_f_score(machine, human_summaries) -> float:
    """Mean F-score of one machine summary against each human summary."""
    if not human_summaries:
        raise EvaluationError("video has no human summaries")
    return float(np.mean([f_score(machine, h) for h in human_summaries]))


@dataclass
class EvalReport:
    per_video: dict[str, float]
    per_fold: list[float]
    overall: float
    budget_fraction: float
    fold_of: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = ["fold  videos  mean F (%)"]
        for i, score in enumerate(self.per_fold):
            n = sum(1 for f in self.fold_of.values() if f == i)
            lines.append(f"{i:>4}  {n:>6}  {100 * score:>10.1f}")
        lines.append(f"{'all':>4}  {len(self.per_video):>6}  {100 * self.overall:>10.1f}")
        return "\n".join(lines)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)


def _fold_assignment(videos, folds) -> dict[str, int]:
    fold_of = {}
    for i, fold in enumerate(folds):
        for vid in fold.test:
            fold_of[vid] = i
    missing = [v.id for v in videos if v.id not in fold_of]
    if missing:
        raise EvaluationError(f"videos not in any test fold: {', '.join(missing)}")
    return fold_of


def evaluate_summaries(videos, machine: dict, folds=None, budget_fraction: float = DEFAULT_BUDGET) -> EvalReport:
    """F-scores of given machine frame sets (``video id -> frames``).

    Without ``folds`` every video counts as a single fold.
    """
    videos = list(videos)
    lacking = [v.id for v in videos if not v.human_summaries]
    if lacking:
        raise EvaluationError(f"videos without human summaries: {', '.join(lacking)}")
    absent = [v.id for v in videos if v.id not in machine]
    if absent:
        raise EvaluationError(f"no machine summary for: {', '.join(absent)}")
    if folds is None:
        fold_of = {v.id: 0 for v in videos}
        n_folds = 1
    else:
        fold_of = _fold_assignment(videos, folds)
        n_folds = len(folds)
    per_video = {v.id: video_f_score(machine[v.id], v.human_summaries) for v in videos}
    per_fold = []
    for i in range(n_folds):
        scores = [per_video[v.id] for v in videos if fold_of[v.id] == i]
        per_fold.append(float(np.mean(scores)) if scores else 0.0)
    populated = [s for i, s in enumerate(per_fold) if any(f == i for f in fold_of.values())]
    overall = float(np.mean(populated)) if populated else 0.0
    return EvalReport(per_video, per_fold, overall, budget_fraction, {v.id: fold_of[v.id] for v in videos})


def evaluate(videos, qnets, folds=None, budget_fraction: float = DEFAULT_BUDGET, greedy: bool = False,
             config: EnvConfig = EnvConfig()) -> tuple[EvalReport, dict[str, Summary]]:
    """Summarise every video with the model of the fold holding it out, then score.

    ``qnets`` is a list aligned with ``folds``, or a single network when
    ``folds`` is None.
    """
    videos = list(videos)
    if folds is None:
        models = {v.id: qnets for v in videos}
    else:
        if len(qnets) != len(folds):
            raise EvaluationError(f"{len(qnets)} models for {len(folds)} folds")
        fold_of = _fold_assignment(videos, folds)
        models = {v.id: qnets[fold_of[v.id]] for v in videos}
    summaries = {v.id: summarize(models[v.id], v, budget_fraction, greedy, config) for v in videos}
    report = evaluate_summaries(videos, {k: s.selected_frames for k, s in summaries.items()}, folds, budget_fraction)
    return report, summaries
