"""Dueling Q-network over the retained subsequence.

The retained frames are embedded and run through a bidirectional GRU; the
encoder row at the attended frame feeds a value stream and an advantage
stream, each a dense + PReLU layer followed by a linear output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .checkpoint import read_meta, read_params
from .rng import child_rng

DISCARD, KEEP = 0, 1


@dataclass
class QNetwork:
    params: nn.ParameterSet
    feature_dim: int
    embed_size: int
    hidden_size: int
    head_size: int
    seed: int = 0

    def meta(self) -> dict:
        return {
            "kind": "qnet",
            "feature_dim": self.feature_dim,
            "embedding_size": self.embed_size,
            "hidden_size": self.hidden_size,
            "head_size": self.head_size,
            "seed": self.seed,
        }

    def clone(self) -> "QNetwork":
        return QNetwork(self.params.copy(), self.feature_dim, self.embed_size, self.hidden_size,
                        self.head_size, self.seed)


@dataclass(frozen=True)
class ActionValues:
    q_discard: float
    q_keep: float
    v: float
    a_discard: float
    a_keep: float

    @property
    def greedy(self) -> int:
        return KEEP if self.q_keep >= self.q_discard else DISCARD


def init_qnet(feature_dim: int, embed_size: int = 256, hidden_size: int = 256, head_size: int | None = None,
              seed: int = 0, zero_heads: bool = False) -> QNetwork:
    head_size = head_size or hidden_size
    rng = child_rng(seed, "qnet/init")
    params = nn.ParameterSet()
    nn.init_encoder(params, feature_dim, embed_size, hidden_size, rng)
    for stream, width in (("value", 1), ("adv", 2)):
        nn.init_dense(params, f"{stream}.hidden", 2 * hidden_size, head_size, rng)
        nn.init_prelu(params, f"{stream}.hidden", head_size)
        nn.init_dense(params, f"{stream}.out", head_size, width, rng, zero=zero_heads)
    return QNetwork(params, feature_dim, embed_size, hidden_size, head_size, seed)


def dueling_combine(v, a_discard, a_keep):
    """Value plus mean-centred advantages; returns ``(q_discard, q_keep)``."""
    mean = 0.5 * (a_discard + a_keep)
    return v + (a_discard - mean), v + (a_keep - mean)


def _heads_forward(params: nn.ParameterSet, rows: np.ndarray):
    hv, pre_v = nn.dense_prelu_forward(rows, params, "value.hidden")
    v = nn.dense_forward(hv, params, "value.out")[:, 0]
    ha, pre_a = nn.dense_prelu_forward(rows, params, "adv.hidden")
    adv = nn.dense_forward(ha, params, "adv.out")
    q0, q1 = dueling_combine(v, adv[:, 0], adv[:, 1])
    return np.stack([q0, q1], axis=1), v, adv, (rows, hv, pre_v, ha, pre_a)


def _heads_backward(params: nn.ParameterSet, dq: np.ndarray, cache) -> np.ndarray:
    rows, hv, pre_v, ha, pre_a = cache
    dv = dq.sum(axis=1, keepdims=True)
    centred = dq - dq.mean(axis=1, keepdims=True)
    dhv = nn.dense_backward(dv, hv, params, "value.out")
    drows = nn.dense_prelu_backward(dhv, rows, pre_v, params, "value.hidden")
    dha = nn.dense_backward(centred, ha, params, "adv.out")
    return drows + nn.dense_prelu_backward(dha, rows, pre_a, params, "adv.hidden")


def _sequence(net: QNetwork, features: np.ndarray, retained) -> np.ndarray:
    if features.shape[1] != net.feature_dim:
        raise nn.DimensionError(f"feature dim {features.shape[1]} != network {net.feature_dim}")
    retained = np.asarray(retained, dtype=np.int64)
    if retained.size == 0:
        raise nn.EmptyInputError("retained set is empty")
    return features[retained]


def q_values_all(net: QNetwork, features: np.ndarray, retained):
    """Q, V and advantages at every retained position: ``(q (n,2), v (n,), adv (n,2))``."""
    seq = _sequence(net, features, retained)
    enc, _ = nn.encoder_forward(net.params, seq[None], np.array([len(seq)]))
    q, v, adv, _ = _heads_forward(net.params, enc[0])
    return q, v, adv


def q_forward_all(net: QNetwork, state, features: np.ndarray) -> list[ActionValues]:
    q, v, adv = q_values_all(net, features, state.retained)
    return [ActionValues(q[i, 0], q[i, 1], v[i], adv[i, 0], adv[i, 1]) for i in range(len(q))]


def q_forward(net: QNetwork, state, features: np.ndarray) -> ActionValues:
    """Action values for the attended frame of ``state``."""
    pos = state.position
    q, v, adv = q_values_all(net, features, state.retained)
    return ActionValues(q[pos, 0], q[pos, 1], v[pos], adv[pos, 0], adv[pos, 1])


def q_batch_forward(net: QNetwork, seqs: list[np.ndarray], readouts: list[tuple[int, int]]):
    """Q values read at ``(sequence, position)`` pairs over a padded batch.

    Returns ``(q (n, 2), cache)`` for :func:`q_batch_backward`.
    """
    x, lengths = nn.pad_sequences(seqs)
    enc, enc_cache = nn.encoder_forward(net.params, x, lengths)
    seq_idx = np.array([r[0] for r in readouts], dtype=np.int64)
    pos = np.array([r[1] for r in readouts], dtype=np.int64)
    if np.any(pos >= lengths[seq_idx]):
        raise nn.DimensionError("readout position beyond sequence length")
    q, _, _, head_cache = _heads_forward(net.params, enc[seq_idx, pos])
    return q, (enc.shape, enc_cache, seq_idx, pos, head_cache)


def q_batch_backward(net: QNetwork, dq: np.ndarray, cache) -> None:
    shape, enc_cache, seq_idx, pos, head_cache = cache
    drows = _heads_backward(net.params, dq, head_cache)
    denc = np.zeros(shape)
    np.add.at(denc, (seq_idx, pos), drows)
    nn.encoder_backward(net.params, denc, enc_cache)


def load_qnet(directory) -> QNetwork:
    meta = read_meta(directory)
    if meta.get("kind") != "qnet":
        raise ValueError(f"{directory}: not a Q-network checkpoint")
    return QNetwork(read_params(directory), meta["feature_dim"], meta["embedding_size"], meta["hidden_size"],
                    meta["head_size"], meta["seed"])
