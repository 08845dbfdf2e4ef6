"""Sequence classifier used to judge (partial) summaries.

Embedding dense + PReLU, a bidirectional GRU, mean pooling over time and a
softmax output layer. It is trained once with label-smoothed cross-entropy,
then frozen and only queried.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .checkpoint import read_meta, read_params
from .rng import child_rng


@dataclass
class ClassifierConfig:
    omega: float = 0.1
    lr: float = 1e-3
    epochs: int = 30
    embed_size: int = 256
    hidden_size: int = 256
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.omega < 1.0:
            raise ValueError("omega must lie in [0, 1)")
        if self.lr <= 0 or self.epochs < 0 or self.embed_size < 1 or self.hidden_size < 1:
            raise ValueError("invalid classifier configuration")


@dataclass
class ClassifierModel:
    params: nn.ParameterSet
    n_classes: int
    feature_dim: int
    embed_size: int
    hidden_size: int
    omega: float = 0.1
    seed: int = 0
    category_names: list[str] = field(default_factory=list)

    @property
    def frozen(self) -> bool:
        return self.params.frozen

    def freeze(self):
        self.params.frozen = True

    def meta(self) -> dict:
        return {
            "kind": "classifier",
            "C": self.n_classes,
            "feature_dim": self.feature_dim,
            "embedding_size": self.embed_size,
            "hidden_size": self.hidden_size,
            "omega": self.omega,
            "seed": self.seed,
            "category_names": list(self.category_names),
        }


def init_classifier(n_classes: int, feature_dim: int, config: ClassifierConfig,
                    category_names=None, zero_output: bool = False) -> ClassifierModel:
    rng = child_rng(config.seed, "classifier/init")
    params = nn.ParameterSet()
    nn.init_encoder(params, feature_dim, config.embed_size, config.hidden_size, rng)
    nn.init_dense(params, "out", 2 * config.hidden_size, n_classes, rng, zero=zero_output)
    return ClassifierModel(params, n_classes, feature_dim, config.embed_size, config.hidden_size,
                           config.omega, config.seed, list(category_names or []))


def _forward(model: ClassifierModel, seq: np.ndarray):
    enc, enc_cache = nn.encoder_forward(model.params, seq[None], np.array([len(seq)]))
    pooled = enc[0].mean(axis=0, keepdims=True)
    logits = nn.dense_forward(pooled, model.params, "out")
    return nn.softmax(logits)[0], (enc_cache, pooled, len(seq))


def _backward(model: ClassifierModel, dlogits: np.ndarray, cache):
    enc_cache, pooled, length = cache
    dpooled = nn.dense_backward(dlogits.reshape(1, -1), pooled, model.params, "out")
    denc = np.repeat(dpooled / length, length, axis=0)[None]
    nn.encoder_backward(model.params, denc, enc_cache)


def _select(features: np.ndarray, subset) -> np.ndarray:
    if subset is None:
        seq = features
    else:
        idx = np.asarray(subset, dtype=np.int64)
        if idx.size and np.any(np.diff(idx) <= 0):
            raise ValueError("frame subset must be sorted ascending without repeats")
        seq = features[idx]
    if len(seq) == 0:
        raise nn.EmptyInputError("cannot classify an empty frame subset")
    return seq


def classify(model: ClassifierModel, features: np.ndarray, subset=None) -> np.ndarray:
    """Class probabilities for the retained frames ``subset`` (all frames if None)."""
    if features.shape[1] != model.feature_dim:
        raise nn.DimensionError(f"feature dim {features.shape[1]} != model {model.feature_dim}")
    probs, _ = _forward(model, _select(features, subset))
    return probs


def predict_label(model: ClassifierModel, features: np.ndarray, subset=None) -> int:
    return int(np.argmax(classify(model, features, subset)))


def rank_of_true(probs: np.ndarray, y: int) -> int:
    """1-based rank of class ``y``; ties go to the lower class index."""
    probs = np.asarray(probs)
    if not 0 <= y < len(probs):
        raise ValueError(f"class {y} out of range for {len(probs)} classes")
    p = probs[y]
    higher = np.sum(probs > p) + np.sum(probs[:y] == p)
    return int(higher) + 1


def train_classifier(videos, n_classes: int, config: ClassifierConfig, model: ClassifierModel | None = None,
                     category_names=None):
    """Fit on labelled ``videos`` (one video per update); returns ``(frozen model, log)``."""
    if model is not None and model.frozen:
        raise nn.FrozenError("classifier is frozen")
    videos = list(videos)
    counts = np.bincount([v.label for v in videos], minlength=n_classes)
    if len(counts) > n_classes:
        raise ValueError("label outside the category range")
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"no training video for categories {missing}")
    if model is None:
        model = init_classifier(n_classes, videos[0].dim, config, category_names)
    adam = nn.AdamState(lr=config.lr)
    rng = child_rng(config.seed, "classifier/shuffle")
    history = []
    for epoch in range(config.epochs):
        total, correct = 0.0, 0
        for i in rng.permutation(len(videos)):
            v = videos[i]
            model.params.zero_grad()
            probs, cache = _forward(model, v.features)
            loss, dlogits = nn.smoothed_cross_entropy(probs, v.label, n_classes, config.omega)
            _backward(model, dlogits, cache)
            nn.clip_gradients(model.params, config.clip_norm)
            nn.adam_step(model.params, adam)
            total += loss
            correct += int(np.argmax(probs) == v.label)
        history.append({"epoch": epoch, "loss": total / len(videos), "train_accuracy": correct / len(videos)})
    model.params.zero_grad()
    model.freeze()
    return model, history


def accuracy(model: ClassifierModel, videos, subsets=None) -> float:
    videos = list(videos)
    if not videos:
        return float("nan")
    hits = 0
    for k, v in enumerate(videos):
        subset = None if subsets is None else subsets[k]
        hits += int(predict_label(model, v.features, subset) == v.label)
    return hits / len(videos)


def load_classifier(directory) -> ClassifierModel:
    meta = read_meta(directory)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{directory}: not a classifier checkpoint")
    model = ClassifierModel(read_params(directory), meta["C"], meta["feature_dim"], meta["embedding_size"],
                            meta["hidden_size"], meta["omega"], meta["seed"], meta["category_names"])
    model.freeze()
    return model
