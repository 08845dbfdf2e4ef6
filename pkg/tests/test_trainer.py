import numpy as np
import pytest
from scipy import stats

from rlsum import trainer as tr
from rlsum.dataset import VideoRecord, generate_synthetic
from rlsum.env import DISCARD, KEEP, EpisodeState, Transition, pack_mask, reset, step
from rlsum.qnet import ActionValues, init_qnet, q_forward
from rlsum.rewards import RewardConfig
from rlsum.rng import child_rng


def random_transition(rng, video, done=None, reward=None):
    """A transition from a random mid-episode state of ``video``; frames from the attended one on are undecided."""
    t = video.n_frames
    attention = int(rng.integers(0, t - 1))
    mask = np.concatenate([rng.random(attention) < 0.7, np.ones(t - attention, dtype=bool)])
    state = EpisodeState(video.id, t, pack_mask(mask), attention, 1)
    action = int(rng.integers(0, 2))
    nxt, finished = step(state, action, tr.EnvConfig(min_keep_fraction=0.01))
    if done is not None:
        finished = done
        nxt = EpisodeState(nxt.video_id, t, nxt.packed, nxt.attention, nxt.t, finished)
    r = float(rng.normal()) if reward is None else reward
    return Transition(state, action, r, nxt, finished)


def _values(q_discard, q_keep):
    mean = 0.5 * (q_discard + q_keep)
    return ActionValues(q_discard=q_discard, q_keep=q_keep, v=mean, a_discard=q_discard - mean, a_keep=q_keep - mean)


class TestReplay:
    def test_fifo_eviction(self):
        mem = tr.ReplayMemory(5)
        for i in range(8):
            mem.push(i)
        assert len(mem) == 5
        assert mem.contents() == [3, 4, 5, 6, 7]
        assert not {0, 1, 2} & set(mem.contents())

    def test_capacity_positive(self):
        with pytest.raises(ValueError):
            tr.ReplayMemory(0)

    def test_single_item_with_replacement(self):
        mem = tr.ReplayMemory(10)
        mem.push("x")
        assert tr.sample_minibatch(mem, 3, np.random.default_rng(0)) == ["x", "x", "x"]

    def test_without_replacement_when_large(self):
        mem = tr.ReplayMemory(50)
        for i in range(50):
            mem.push(i)
        batch = tr.sample_minibatch(mem, 50, np.random.default_rng(1))
        assert sorted(batch) == list(range(50))

    def test_empty(self):
        with pytest.raises(ValueError):
            tr.sample_minibatch(tr.ReplayMemory(3), 1, np.random.default_rng(0))

    def test_deterministic(self):
        mem = tr.ReplayMemory(100)
        for i in range(100):
            mem.push(i)
        a = tr.sample_minibatch(mem, 20, np.random.default_rng(4))
        b = tr.sample_minibatch(mem, 20, np.random.default_rng(4))
        assert a == b

    def test_uniform_chi_square(self):
        mem = tr.ReplayMemory(100)
        for i in range(100):
            mem.push(i)
        rng = np.random.default_rng(5)
        counts = np.zeros(100)
        for _ in range(100_000):
            counts[tr.sample_minibatch(mem, 1, rng)[0]] += 1
        assert stats.chisquare(counts).pvalue > 0.01


class TestEpsilon:
    def test_schedule(self):
        sched = tr.EpsilonSchedule.reaching_floor_at(1000)
        values = [sched.value(s) for s in range(0, 3000, 7)]
        assert sched.value(0) == 1.0
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert sched.value(1000) == pytest.approx(0.1)
        assert sched.value(10 ** 6) == 0.1

    def test_greedy(self):
        q = _values(1.0, 0.0)
        rng = np.random.default_rng(0)
        assert all(tr.select_action(q, 0.0, rng) == DISCARD for _ in range(100))

    def test_tie_keeps(self):
        assert tr.select_action(_values(0.3, 0.3), 0.0, np.random.default_rng(0)) == KEEP

    def test_uniform_when_one(self):
        rng = np.random.default_rng(7)
        q = _values(1.0, 0.0)
        keeps = np.mean([tr.select_action(q, 1.0, rng) for _ in range(10_000)])
        assert abs(keeps - 0.5) <= 0.02

    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            tr.select_action(_values(0.0, 0.0), 1.5, np.random.default_rng(0))


@pytest.fixture(scope="module")
def nets_and_video():
    video = VideoRecord("v", np.random.default_rng(0).normal(size=(7, 4)))
    online = init_qnet(4, 5, 4, seed=1)
    target = init_qnet(4, 5, 4, seed=2)
    return online, target, video


class _StubNet:
    """Returns fixed action values regardless of the state."""

    def __init__(self, q_discard, q_keep):
        self.values = _values(q_discard, q_keep)


class TestDoubleQ:
    def test_worked_example(self, monkeypatch, nets_and_video):
        _, _, video = nets_and_video
        online, target = _StubNet(0.2, 0.5), _StubNet(-1.0, 0.3)
        monkeypatch.setattr(tr, "q_forward", lambda net, state, features: net.values)
        t = random_transition(np.random.default_rng(0), video, done=False, reward=1.0)
        assert tr.double_q_target(t, online, target, 0.99, video.features) == pytest.approx(1.297, abs=1e-12)

    def test_terminal(self, nets_and_video):
        online, target, video = nets_and_video
        t = random_transition(np.random.default_rng(1), video, done=True, reward=-5.0)
        assert tr.double_q_target(t, online, target, 0.99, video.features) == -5.0
        assert tr.double_q_targets([t], online, target, 0.99, {"v": video.features})[0] == -5.0

    def test_gamma_zero(self, nets_and_video):
        online, target, video = nets_and_video
        rng = np.random.default_rng(2)
        batch = [random_transition(rng, video, done=False) for _ in range(10)]
        out = tr.double_q_targets(batch, online, target, 0.0, {"v": video.features})
        assert out.tolist() == [t.reward for t in batch]

    def test_batched_matches_single(self, nets_and_video):
        online, target, video = nets_and_video
        rng = np.random.default_rng(3)
        batch = [random_transition(rng, video) for _ in range(30)]
        batched = tr.double_q_targets(batch, online, target, 0.99, {"v": video.features})
        single = [tr.double_q_target(t, online, target, 0.99, video.features) for t in batch]
        assert np.allclose(batched, single, atol=1e-12, rtol=0)

    def test_online_equals_target_is_max_form(self, nets_and_video):
        online, _, video = nets_and_video
        rng = np.random.default_rng(4)
        for _ in range(100):
            t = random_transition(rng, video, done=False)
            q = q_forward(online, t.next_state, video.features)
            expected = t.reward + 0.99 * max(q.q_discard, q.q_keep)
            assert abs(tr.double_q_target(t, online, online, 0.99, video.features) - expected) <= 1e-12


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(2, 3, 12, 4, 0.4, 0.2, seed=3, shot_length=4).normalised()


def _config(**kw):
    base = dict(episodes=6, minibatch=8, capacity=64, sync_period=3, embed_size=4, hidden_size=4, head_size=4,
                seed=11, rewards=RewardConfig.from_flags("u"))
    base.update(kw)
    return tr.TrainerConfig(**base)


class TestTraining:
    def test_zero_episodes(self, small_data):
        trainer = tr.DQSNTrainer(small_data.videos, None, _config(episodes=0))
        before = trainer.online.params.copy()
        qnet = trainer.train()
        assert qnet.params.equals(before) and trainer.history == []

    def test_config_errors(self, small_data):
        with pytest.raises(ValueError):
            tr.DQSNTrainer(small_data.videos, None, _config(minibatch=0))
        with pytest.raises(ValueError):
            tr.DQSNTrainer(small_data.videos, None, _config(rewards=RewardConfig.from_flags("g,u")))
        with pytest.raises(ValueError):
            tr.DQSNTrainer([], None, _config())

    def test_log_records(self, small_data):
        qnet, history = tr.train_dqsn(small_data.videos, None, _config())
        assert len(history) == 6
        for rec in history:
            assert {"episode", "return", "terminal_reward_breakdown", "recognised", "epsilon",
                    "mean_minibatch_loss"} <= set(rec)

    def test_deterministic(self, small_data):
        a, log_a = tr.train_dqsn(small_data.videos, None, _config())
        b, log_b = tr.train_dqsn(small_data.videos, None, _config())
        assert a.params.equals(b.params) and log_a == log_b

    def test_target_sync(self, small_data):
        trainer = tr.DQSNTrainer(small_data.videos, None, _config())
        video = small_data.videos[0]
        snapshots = []
        while trainer.updates < 7:
            trainer.memory.push(random_transition(child_rng(trainer.updates, "t"), video))
            if len(trainer.memory) >= trainer.config.minibatch:
                before = trainer.target.params.copy()
                trainer.update()
                synced = trainer.updates % 3 == 0
                if synced:
                    assert trainer.target.params.equals(trainer.online.params)
                else:
                    assert trainer.target.params.equals(before)
                snapshots.append(synced)
        assert snapshots.count(True) == 2

    def test_epsilon_reaches_floor(self, small_data):
        trainer = tr.DQSNTrainer(small_data.videos, None, _config(episodes=10))
        planned = sum(v.n_frames for v in trainer.schedule)
        assert trainer.epsilon.value(int(np.ceil(0.6 * planned))) == pytest.approx(0.1, abs=1e-9)

    def test_no_reward_losses_decay(self, small_data):
        cfg = _config(episodes=40, rewards=RewardConfig.from_flags(""), lr=1e-3, sync_period=20)
        _, history = tr.train_dqsn(small_data.videos, None, cfg)
        losses = [r["mean_minibatch_loss"] for r in history if r["mean_minibatch_loss"] is not None]
        assert all(r["return"] == 0.0 for r in history)
        assert np.mean(losses[-5:]) < 0.1 * np.mean(losses[:5])


def test_decile_means():
    assert tr.decile_means(list(range(20))) == (0.5, 18.5)
