import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlsum import classifier as cl
from rlsum.dataset import VideoRecord
from rlsum.env import (DISCARD, KEEP, EnvConfig, RewardEngine, StateError, discounted_return, reset,
                       run_episode, step, write_jsonl)
from rlsum.rewards import RewardConfig, reward_dr


def _video(t=5, d=3, label=None, seed=0):
    x = np.random.default_rng(seed).normal(size=(t, d))
    return VideoRecord("v", x / np.linalg.norm(x, axis=1, keepdims=True), label=label)


class TestReset:
    def test_initial(self):
        s = reset(_video(5))
        assert s.retained.tolist() == [0, 1, 2, 3, 4]
        assert s.attention == 0 and s.t == 1 and not s.done

    def test_twice(self):
        v = _video()
        assert reset(v) == reset(v)

    def test_single_frame(self):
        s, done = step(reset(_video(1)), KEEP)
        assert done and s.retained.tolist() == [0]

    def test_empty(self):
        with pytest.raises(StateError):
            reset(VideoRecord("e", np.zeros((0, 3))))


class TestStep:
    def test_keep_all(self):
        s = reset(_video(3))
        for i in range(3):
            s, done = step(s, KEEP)
            assert done == (i == 2)
        assert s.retained.tolist() == [0, 1, 2]

    def test_floor_stops_discards(self):
        cfg = EnvConfig(min_keep_fraction=1 / 3)
        assert cfg.keep_floor(3) == 1
        s, done = step(reset(_video(3)), DISCARD, cfg)
        assert not done and s.retained.tolist() == [1, 2] and s.attention == 1
        s, done = step(s, DISCARD, cfg)
        assert done and s.retained.tolist() == [2]

    def test_undecided_frames_kept(self):
        cfg = EnvConfig(min_keep_fraction=0.5)
        s = reset(_video(6))
        while not s.done:
            s, _ = step(s, DISCARD, cfg)
        assert s.retained.tolist() == [3, 4, 5]

    def test_keep_does_not_change_retained(self):
        s = reset(_video(4))
        s2, _ = step(s, KEEP)
        assert s2.packed == s.packed and s2.attention == 1 and s2.t == 2

    def test_step_after_done(self):
        s, _ = step(reset(_video(1)), KEEP)
        with pytest.raises(StateError):
            step(s, KEEP)

    def test_bad_action(self):
        with pytest.raises(ValueError):
            step(reset(_video(2)), 2)

    def test_floor_rounding(self):
        assert EnvConfig(0.15).keep_floor(20) == 3
        assert EnvConfig(0.15).keep_floor(60) == 9
        assert EnvConfig(0.15).keep_floor(3) == 1

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=30), st.floats(0.05, 1.0))
    def test_invariants(self, actions, frac):
        t = len(actions)
        cfg = EnvConfig(min_keep_fraction=frac)
        s = reset(_video(t, seed=t))
        attended, sets = [], [set(s.retained.tolist())]
        for a in actions:
            if s.done:
                break
            attended.append(s.attention)
            assert s.attention in s.retained
            s, _ = step(s, a, cfg)
            now = set(s.retained.tolist())
            assert now <= sets[-1]
            sets.append(now)
        assert s.done
        assert len(attended) <= t and attended == sorted(set(attended))
        assert len(s.retained) >= cfg.keep_floor(t)
        if len(attended) == t:
            assert attended == list(range(t))


class _Fixed:
    def __init__(self, actions):
        self.actions = list(actions)

    def __call__(self, state):
        return self.actions[state.t - 1]


@pytest.fixture(scope="module")
def frozen_classifier():
    cfg = cl.ClassifierConfig(embed_size=3, hidden_size=3, epochs=0, seed=0)
    model = cl.init_classifier(3, 3, cfg)
    model.freeze()
    return model


class TestEpisode:
    def test_always_keep(self, frozen_classifier):
        v = _video(6, label=1)
        engine = RewardEngine(RewardConfig(), frozen_classifier)
        res = run_episode(v, lambda s: KEEP, engine)
        assert [tr.action for tr in res.transitions] == [KEEP] * 6
        assert all(tr.reward == 0.0 for tr in res.transitions[:-1])
        yhat = cl.predict_label(frozen_classifier, v.features)
        expected = (1.0 if yhat == 1 else -5.0) + reward_dr(v.features, range(6))
        assert res.transitions[-1].reward == pytest.approx(expected, abs=1e-12)
        assert res.final_state.retained.tolist() == list(range(6))

    def test_discard_records_ranks(self, frozen_classifier):
        v = _video(6, label=2)
        engine = RewardEngine(RewardConfig(), frozen_classifier)
        res = run_episode(v, _Fixed([DISCARD, KEEP, DISCARD, KEEP, KEEP, KEEP]), engine)
        first = res.records[0]
        assert first["rank_before"] is not None and first["rank_after"] is not None
        assert res.records[1]["rank_before"] is None
        for rec in res.records:
            assert {"video_id", "t", "attention", "action", "reward", "rank_before", "rank_after"} <= set(rec)

    def test_gamma_zero(self, frozen_classifier):
        v = _video(5, label=0)
        engine = RewardEngine(RewardConfig(), frozen_classifier)
        res = run_episode(v, _Fixed([DISCARD] * 5), engine, EnvConfig(gamma=0.0))
        assert res.episode_return == res.transitions[0].reward

    def test_replay_reproduces_states(self, frozen_classifier):
        v = _video(8, label=0, seed=3)
        engine = RewardEngine(RewardConfig(), frozen_classifier)
        policy = _Fixed([0, 1, 0, 0, 1, 0, 1, 1])
        res = run_episode(v, policy, engine)
        s = reset(v)
        for tr in res.transitions:
            assert tr.state == s
            s, _ = step(s, tr.action)
            assert tr.next_state == s

    def test_deterministic(self, frozen_classifier):
        v = _video(8, label=1, seed=4)
        policy = _Fixed([0, 1, 0, 0, 1, 0, 1, 1])
        a = run_episode(v, policy, RewardEngine(RewardConfig(), frozen_classifier))
        b = run_episode(v, policy, RewardEngine(RewardConfig(), frozen_classifier))
        assert a.transitions == b.transitions and a.records == b.records

    def test_unsupervised_only_needs_no_classifier(self):
        v = _video(4)
        res = run_episode(v, lambda s: KEEP, RewardEngine(RewardConfig.from_flags("u")))
        assert res.recognised is None
        assert res.transitions[-1].reward == pytest.approx(reward_dr(v.features, range(4)))

    def test_classifier_required(self):
        with pytest.raises(ValueError):
            RewardEngine(RewardConfig.from_flags("g"))

    def test_jsonl(self, tmp_path, frozen_classifier):
        res = run_episode(_video(3, label=0), lambda s: DISCARD, RewardEngine(RewardConfig(), frozen_classifier))
        write_jsonl(res.records, tmp_path / "ep.jsonl")
        lines = (tmp_path / "ep.jsonl").read_text().splitlines()
        assert len(lines) == len(res.records)
        assert json.loads(lines[0])["video_id"] == "v"


def test_discounted_return():
    assert discounted_return([1.0, 2.0, 4.0], 0.5) == 1.0 + 1.0 + 1.0
