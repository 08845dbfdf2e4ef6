"""Small differentiable building blocks with hand-written backward passes.

Everything is float64 and row-major. Layers are plain functions over a
:class:`ParameterSet`; parameters are addressed by ``"<prefix>.<name>"`` so
several layers can live in one set. Forward functions return whatever the
matching backward function needs as an explicit cache, which keeps forwards
on a shared parameter set free of side effects.

Batched sequences use a padded ``(B, L, F)`` layout with a ``(B, L)`` mask.
Valid steps of every sequence come first; padding is always trailing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DimensionError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class FrozenError(RuntimeError):
    pass


class ParameterSet:
    """Named float64 matrices with same-shape gradient buffers."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen = False

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"{name}: parameters are 2-D matrices, got shape {value.shape}")
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, value in self.values.items():
            out.add(name, value)
        return out

    def load_from(self, other: "ParameterSet"):
        """Overwrite values in place with those of ``other`` (same names and shapes)."""
        if self.frozen:
            raise FrozenError("parameter set is frozen")
        if list(other.values) != list(self.values):
            raise KeyError("parameter names differ")
        for name, value in other.values.items():
            if value.shape != self.values[name].shape:
                raise DimensionError(f"{name}: shape {value.shape} != {self.values[name].shape}")
            self.values[name][...] = value

    def n_scalars(self) -> int:
        return sum(v.size for v in self.values.values())

    def equals(self, other: "ParameterSet") -> bool:
        if list(self.values) != list(other.values):
            return False
        return all(np.array_equal(v, other.values[k]) for k, v in self.values.items())


# ---------------------------------------------------------------------------
# serialization

_PARAM_MAGIC = b"RLSN"
_PARAM_VERSION = 1


def save_parameters(params: ParameterSet, path) -> None:
    chunks = [_PARAM_MAGIC, struct.pack("<II", _PARAM_VERSION, len(params))]
    for name, value in params.values.items():
        raw = name.encode("utf-8")
        rows, cols = value.shape
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<QQ", rows, cols))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_parameters(path) -> ParameterSet:
    data = Path(path).read_bytes()
    if data[:4] != _PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _PARAM_VERSION:
        raise ValueError(f"{path}: unsupported parameter format version {version}")
    offset = 12
    params = ParameterSet()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + n].decode("utf-8")
        offset += n
        rows, cols = struct.unpack_from("<QQ", data, offset)
        offset += 16
        nbytes = rows * cols * 8
        value = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
        offset += nbytes
        params.add(name, value.reshape(rows, cols))
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return params


# ---------------------------------------------------------------------------
# initialisation

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_dense(params: ParameterSet, prefix: str, n_in: int, n_out: int, rng, zero=False):
    w = np.zeros((n_in, n_out)) if zero else glorot_uniform(rng, n_in, n_out)
    params.add(f"{prefix}.W", w)
    params.add(f"{prefix}.b", np.zeros((1, n_out)))


def init_prelu(params: ParameterSet, prefix: str, channels: int, slope: float = 0.25):
    params.add(f"{prefix}.slope", np.full((1, channels), slope))


def init_gru(params: ParameterSet, prefix: str, n_in: int, hidden: int, rng):
    """Gate blocks are stored side by side as ``[update | reset | candidate]``."""
    w = np.concatenate([glorot_uniform(rng, n_in, hidden) for _ in range(3)], axis=1)
    u = np.concatenate([glorot_uniform(rng, hidden, hidden) for _ in range(3)], axis=1)
    params.add(f"{prefix}.W", w)
    params.add(f"{prefix}.U", u)
    params.add(f"{prefix}.b", np.zeros((1, 3 * hidden)))


# ---------------------------------------------------------------------------
# dense / prelu

def dense_forward(x: np.ndarray, params: ParameterSet, prefix: str) -> np.ndarray:
    w = params[f"{prefix}.W"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"{prefix}: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w + params[f"{prefix}.b"]


def dense_backward(dout: np.ndarray, x: np.ndarray, params: ParameterSet, prefix: str) -> np.ndarray:
    w = params[f"{prefix}.W"]
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    params.grads[f"{prefix}.W"] += x2.T @ d2
    params.grads[f"{prefix}.b"] += d2.sum(axis=0, keepdims=True)
    return dout @ w.T


def prelu(x: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    slopes = np.asarray(slopes, dtype=np.float64).reshape(-1)
    if slopes.shape[0] != x.shape[-1]:
        raise DimensionError(f"{slopes.shape[0]} slopes for {x.shape[-1]} channels")
    return np.where(x > 0, x, slopes * x)


def prelu_backward(dout: np.ndarray, x: np.ndarray, slopes: np.ndarray):
    """Returns ``(dx, dslopes)`` with ``dslopes`` shaped ``(1, channels)``."""
    slopes = np.asarray(slopes, dtype=np.float64).reshape(-1)
    pos = x > 0
    dx = np.where(pos, dout, slopes * dout)
    ds = np.where(pos, 0.0, x * dout).reshape(-1, x.shape[-1]).sum(axis=0, keepdims=True)
    return dx, ds


def dense_prelu_forward(x, params, prefix):
    pre = dense_forward(x, params, prefix)
    return prelu(pre, params[f"{prefix}.slope"]), pre


def dense_prelu_backward(dout, x, pre, params, prefix):
    dpre, ds = prelu_backward(dout, pre, params[f"{prefix}.slope"])
    params.grads[f"{prefix}.slope"] += ds
    return dense_backward(dpre, x, params, prefix)


# ---------------------------------------------------------------------------
# gated recurrent unit

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _length_order(lengths: np.ndarray, length: int):
    """Rows sorted by decreasing length and the active-row count at each step."""
    lengths = np.asarray(lengths, dtype=np.int64)
    order = np.argsort(-lengths, kind="stable")
    active = (lengths[:, None] > np.arange(length)[None, :]).sum(axis=0)
    return order, active


def gru_sequence_forward(x: np.ndarray, lengths, params: ParameterSet, prefix: str,
                         h0: np.ndarray | None = None, reverse: bool = False):
    """Run a GRU over a padded batch ``x`` of shape ``(B, L, F)``.

    Row ``b`` is valid for its first ``lengths[b]`` steps. With ``reverse``
    each row is read from its last valid step back to step 0. Returns
    ``(outputs, cache)``; outputs are ``(B, L, H)`` and zero at padded steps.
    """
    w, u, b = params[f"{prefix}.W"], params[f"{prefix}.U"], params[f"{prefix}.b"]
    bsz, length, width = x.shape
    if width != w.shape[0]:
        raise DimensionError(f"{prefix}: input width {width} != {w.shape[0]}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (bsz,) or np.any(lengths < 0) or np.any(lengths > length):
        raise DimensionError(f"{prefix}: lengths do not fit a batch of shape {x.shape}")
    hid = u.shape[0]
    u_gates, u_cand = u[:, :2 * hid], u[:, 2 * hid:]
    order, active = _length_order(lengths, length)
    # time-major, rows sorted so the valid rows at every step form a prefix
    xs = np.ascontiguousarray(x[order].transpose(1, 0, 2))
    gx = (xs.reshape(length * bsz, width) @ w + b).reshape(length, bsz, 3 * hid)
    h = np.zeros((bsz, hid)) if h0 is None else np.array(h0, dtype=np.float64).reshape(bsz, hid)[order]
    if h.shape[1] != hid:
        raise DimensionError(f"{prefix}: hidden width {h.shape[1]} != {hid}")

    prev = np.zeros((length, bsz, hid))
    zr_all = np.zeros((length, bsz, 2 * hid))
    cands = np.zeros((length, bsz, hid))
    out = np.zeros((length, bsz, hid))
    steps = range(length - 1, -1, -1) if reverse else range(length)
    for t in steps:
        n = active[t]
        if n == 0:
            continue
        hp = h[:n]
        g = gx[t, :n]
        zr = sigmoid(g[:, :2 * hid] + hp @ u_gates)
        cand = np.tanh(g[:, 2 * hid:] + (zr[:, hid:] * hp) @ u_cand)
        h_new = hp + zr[:, :hid] * (cand - hp)
        prev[t, :n] = hp
        zr_all[t, :n] = zr
        cands[t, :n] = cand
        out[t, :n] = h_new
        h[:n] = h_new
    inverse = np.argsort(order)
    cache = (xs, order, active, reverse, prev, zr_all, cands)
    return out.transpose(1, 0, 2)[inverse], cache


def gru_sequence_backward(dout: np.ndarray, cache, params: ParameterSet, prefix: str):
    """Backward of :func:`gru_sequence_forward`; returns ``(dx, dh0)``."""
    xs, order, active, reverse, prev, zr_all, cands = cache
    w, u = params[f"{prefix}.W"], params[f"{prefix}.U"]
    length, bsz, width = xs.shape
    hid = u.shape[0]
    u_gates_t, u_cand_t = u[:, :2 * hid].T, u[:, 2 * hid:].T
    douts = dout[order].transpose(1, 0, 2)
    dgx = np.zeros((length, bsz, 3 * hid))
    dh = np.zeros((bsz, hid))
    steps = range(length) if reverse else range(length - 1, -1, -1)
    for t in steps:
        n = active[t]
        if n == 0:
            continue
        dh_t = dh[:n] + douts[t, :n]
        hp, cand = prev[t, :n], cands[t, :n]
        z, r = zr_all[t, :n, :hid], zr_all[t, :n, hid:]
        dcand_pre = dh_t * z * (1.0 - cand * cand)
        dz_pre = dh_t * (cand - hp) * z * (1.0 - z)
        drh = dcand_pre @ u_cand_t
        dr_pre = drh * hp * r * (1.0 - r)
        dgx[t, :n, :hid] = dz_pre
        dgx[t, :n, hid:2 * hid] = dr_pre
        dgx[t, :n, 2 * hid:] = dcand_pre
        dh[:n] = dh_t * (1.0 - z) + drh * r + dgx[t, :n, :2 * hid] @ u_gates_t
    d2 = dgx.reshape(length * bsz, 3 * hid)
    hp2 = prev.reshape(length * bsz, hid)
    rh2 = (zr_all[:, :, hid:] * prev).reshape(length * bsz, hid)
    du = np.empty_like(u)
    du[:, :2 * hid] = hp2.T @ d2[:, :2 * hid]
    du[:, 2 * hid:] = rh2.T @ d2[:, 2 * hid:]
    params.grads[f"{prefix}.W"] += xs.reshape(length * bsz, width).T @ d2
    params.grads[f"{prefix}.U"] += du
    params.grads[f"{prefix}.b"] += d2.sum(axis=0, keepdims=True)
    inverse = np.argsort(order)
    dx = (d2 @ w.T).reshape(length, bsz, width).transpose(1, 0, 2)[inverse]
    return dx, dh[inverse]


def gru_cell(x: np.ndarray, h: np.ndarray, params: ParameterSet, prefix: str) -> np.ndarray:
    """One GRU step for a single input vector and hidden vector."""
    x = np.asarray(x, dtype=np.float64).reshape(1, 1, -1)
    out, _ = gru_sequence_forward(x, np.ones(1, dtype=np.int64), params, prefix,
                                  h0=np.asarray(h, dtype=np.float64).reshape(1, -1))
    return out[0, 0]


def bigru_forward(x: np.ndarray, lengths, params: ParameterSet, prefix: str):
    """Bidirectional GRU; output row ``t`` is ``[forward_t | backward_t]``."""
    lengths = np.asarray(lengths)
    if x.shape[1] == 0 or np.any(lengths < 1):
        raise EmptyInputError("bidirectional encoder needs at least one step per sequence")
    fwd, cache_f = gru_sequence_forward(x, lengths, params, f"{prefix}.fw")
    bwd, cache_b = gru_sequence_forward(x, lengths, params, f"{prefix}.bw", reverse=True)
    return np.concatenate([fwd, bwd], axis=2), (cache_f, cache_b)


def bigru_backward(dout: np.ndarray, cache, params: ParameterSet, prefix: str) -> np.ndarray:
    cache_f, cache_b = cache
    hid = dout.shape[2] // 2
    dx_f, _ = gru_sequence_backward(dout[:, :, :hid], cache_f, params, f"{prefix}.fw")
    dx_b, _ = gru_sequence_backward(dout[:, :, hid:], cache_b, params, f"{prefix}.bw")
    return dx_f + dx_b


def bigru_encode(seq: np.ndarray, params: ParameterSet, prefix: str) -> np.ndarray:
    """Encode a single ``(T, F)`` sequence; returns ``(T, 2H)``."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise EmptyInputError("empty sequence")
    out, _ = bigru_forward(seq[None], np.array([seq.shape[0]]), params, prefix)
    return out[0]


# ---------------------------------------------------------------------------
# shared frame encoder: dense + PReLU embedding followed by the Bi-GRU

def init_encoder(params: ParameterSet, feature_dim: int, embed: int, hidden: int, rng):
    init_dense(params, "embed", feature_dim, embed, rng)
    init_prelu(params, "embed", embed)
    init_gru(params, "rnn.fw", embed, hidden, rng)
    init_gru(params, "rnn.bw", embed, hidden, rng)


def encoder_forward(params: ParameterSet, x: np.ndarray, lengths):
    emb, pre = dense_prelu_forward(x, params, "embed")
    enc, rnn_cache = bigru_forward(emb, lengths, params, "rnn")
    return enc, (x, emb, pre, rnn_cache)


def encoder_backward(params: ParameterSet, denc: np.ndarray, cache) -> np.ndarray:
    x, emb, pre, rnn_cache = cache
    demb = bigru_backward(denc, rnn_cache, params, "rnn")
    return dense_prelu_backward(demb, x, pre, params, "embed")


def pad_sequences(seqs: list[np.ndarray]):
    """Stack variable-length ``(T_i, F)`` arrays into ``(B, L, F)`` plus lengths."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if len(seqs) == 0 or lengths.min() < 1:
        raise EmptyInputError("cannot pad an empty sequence")
    out = np.zeros((len(seqs), int(lengths.max()), seqs[0].shape[1]))
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


# ---------------------------------------------------------------------------
# losses

def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


LOG_FLOOR = 1e-12


def smoothed_targets(true_class: int, n_classes: int, omega: float) -> np.ndarray:
    if not 0.0 <= omega < 1.0:
        raise ValueError(f"omega must lie in [0, 1), got {omega}")
    q = np.full(n_classes, omega / n_classes)
    q[true_class] += 1.0 - omega
    return q


def smoothed_cross_entropy(probs: np.ndarray, true_class: int, n_classes: int, omega: float):
    """Label-smoothed cross-entropy of a softmax output.

    Returns ``(loss, dlogits)``, the gradient taken w.r.t. the logits that
    produced ``probs``.
    """
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if probs.shape[0] != n_classes:
        raise DimensionError(f"{probs.shape[0]} probabilities for {n_classes} classes")
    q = smoothed_targets(true_class, n_classes, omega)
    loss = -float(np.sum(q * np.log(np.maximum(probs, LOG_FLOOR))))
    return loss, probs - q


def huber_loss(prediction, target):
    """Elementwise Huber loss with unit threshold; returns ``(loss, dprediction)``."""
    e = np.asarray(prediction, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(e)
    loss = np.where(a <= 1.0, 0.5 * e * e, a - 0.5)
    return loss, np.clip(e, -1.0, 1.0)


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterSet, state: AdamState) -> None:
    if params.frozen:
        raise FrozenError("cannot update a frozen parameter set")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, value in params.values.items():
        g = params.grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def gradient_norm(params: ParameterSet) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in params.grads.values())))


def clip_gradients(params: ParameterSet, max_norm: float) -> float:
    """Rescale all gradients to global L2 norm ``max_norm`` if above it; returns the factor."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = gradient_norm(params)
    # relative slack keeps a second application a no-op despite rounding
    if norm <= max_norm * (1.0 + 1e-12):
        return 1.0
    factor = max_norm / norm
    for g in params.grads.values():
        g *= factor
    return factor
