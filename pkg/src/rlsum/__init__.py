"""Weakly supervised video summarisation with a deep Q-learning frame selector.

A frozen sequence classifier judges how recognisable a partial summary is;
a dueling double deep Q-network learns to keep or discard frames one at a
time so that the kept set stays recognisable.
"""

from .classifier import ClassifierConfig, ClassifierModel, classify, predict_label, rank_of_true, train_classifier
from .dataset import DatasetManifest, VideoRecord, generate_synthetic, load_manifest, make_folds, save_manifest
from .env import EnvConfig, EpisodeState, RewardEngine, reset, run_episode, step
from .qnet import QNetwork, dueling_combine, init_qnet, q_forward, q_forward_all
from .rewards import RewardConfig, reward_dr, reward_global, reward_local
from .summarize import EvalReport, Summary, evaluate, evaluate_summaries, f_score, select_shots
from .trainer import DQSNTrainer, TrainerConfig, train_dqsn

__version__ = "0.1.0"
