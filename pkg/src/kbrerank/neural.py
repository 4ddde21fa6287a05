"""Trainable reranker scorer with exact analytic gradients.

Architecture: word embeddings feed a forward and a backward LSTM whose final
states are concatenated with five feature-bin embeddings; a ReLU hidden layer
and an output vector produce the deep score s, which is linearly interpolated
with the fixed negative-log n-gram feature to give the candidate score u.

Everything is float64 numpy with hand-written backprop; the gradient of the
contrastive loss with respect to every tensor is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .artifacts import load_artifact, save_artifact
from .features import COOC_BINS, FREQ_BINS, NPMI_BINS, FeatureBundle

_BIN_LIMITS = (
    ("co", COOC_BINS),
    ("artist", FREQ_BINS),
    ("song", FREQ_BINS),
    ("cross", NPMI_BINS),
    ("intra", NPMI_BINS),
)


@dataclass(frozen=True)
class RerankerDims:
    vocab_size: int
    word_dim: int = 200
    lstm_dim: int = 500
    hidden_dim: int = 256
    co_dim: int = 10
    freq_dim: int = 50
    cross_dim: int = 50
    intra_dim: int = 50

    @property
    def phi_dim(self) -> int:
        return (
            2 * self.lstm_dim
            + self.co_dim
            + 2 * self.freq_dim
            + self.cross_dim
            + self.intra_dim
        )


# fixed creation order keeps seeded initialization reproducible
def _tensor_shapes(d: RerankerDims):
    gate_rows = 4 * d.lstm_dim
    return (
        ("emb", (d.vocab_size, d.word_dim)),
        ("fwd_w", (gate_rows, d.word_dim + d.lstm_dim)),
        ("fwd_b", (gate_rows,)),
        ("bwd_w", (gate_rows, d.word_dim + d.lstm_dim)),
        ("bwd_b", (gate_rows,)),
        ("co_emb", (COOC_BINS, d.co_dim)),
        ("artist_emb", (FREQ_BINS, d.freq_dim)),
        ("song_emb", (FREQ_BINS, d.freq_dim)),
        ("cross_emb", (NPMI_BINS, d.cross_dim)),
        ("intra_emb", (NPMI_BINS, d.intra_dim)),
        ("hidden_w", (d.phi_dim, d.hidden_dim)),
        ("out_w", (d.hidden_dim,)),
        ("alpha", (2,)),
    )


class RerankerParams:
    """All trainable tensors plus the dimension record they obey."""

    def __init__(self, dims: RerankerDims, tensors: dict):
        self.dims = dims
        self.tensors = tensors

    @classmethod
    def initialize(cls, dims: RerankerDims, seed: int = 0, init_scale: float = 0.08):
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _tensor_shapes(dims):
            tensors[name] = rng.uniform(-init_scale, init_scale, size=shape)
        h = dims.lstm_dim
        for name in ("fwd_b", "bwd_b"):
            tensors[name][h : 2 * h] = 1.0  # forget gate opens at start
        tensors["alpha"] = np.array([0.5, 0.5])
        return cls(dims, tensors)

    def copy(self) -> "RerankerParams":
        return RerankerParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def param_norm_sq(self) -> float:
        return float(sum(np.sum(v * v) for v in self.tensors.values()))

    def save(self, path, vocab_hash: str) -> None:
        save_artifact(
            path,
            "reranker-params",
            {"dims": asdict(self.dims), "tensors": self.tensors, "vocab_hash": vocab_hash},
        )

    @classmethod
    def load(cls, path):
        payload = load_artifact(path, "reranker-params")
        params = cls(RerankerDims(**payload["dims"]), payload["tensors"])
        return params, payload["vocab_hash"]


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_step(w, b, h_prev, c_prev, x_emb):
    """One LSTM cell update. Gate order in the fused kernel: i, f, o, g."""
    hid = b.shape[0] // 4
    if w.shape != (4 * hid, x_emb.shape[-1] + hid) or h_prev.shape[-1] != hid or c_prev.shape[-1] != hid:
        raise ValueError("shape mismatch between LSTM weights and inputs")
    z = w @ np.concatenate([x_emb, h_prev]) + b
    i = _sigmoid(z[:hid])
    f = _sigmoid(z[hid : 2 * hid])
    o = _sigmoid(z[2 * hid : 3 * hid])
    g = np.tanh(z[3 * hid :])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def _lstm_forward(w, b, emb_seq):
    """Batched sweep over (B, l, E); returns the final hidden state and the
    per-step activations the backward pass needs."""
    bsz, length, _ = emb_seq.shape
    hid = b.shape[0] // 4
    h = np.zeros((bsz, hid))
    c = np.zeros((bsz, hid))
    steps = []
    for t in range(length):
        inp = np.concatenate([emb_seq[:, t, :], h], axis=1)
        z = inp @ w.T + b
        i = _sigmoid(z[:, :hid])
        f = _sigmoid(z[:, hid : 2 * hid])
        o = _sigmoid(z[:, 2 * hid : 3 * hid])
        g = np.tanh(z[:, 3 * hid :])
        c_prev = c
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        steps.append((inp, i, f, o, g, c_prev, tanh_c))
    return h, steps


def _lstm_backward(w, steps, dh, step_ids, d_w, d_b, d_emb):
    """Backward through time from the gradient at the final hidden state.

    ``step_ids[:, t]`` are the embedding rows consumed at step t, already in
    the direction's own order.
    """
    e_dim = d_emb.shape[1]
    dc = np.zeros_like(dh)
    for t in range(len(steps) - 1, -1, -1):
        inp, i, f, o, g, c_prev, tanh_c = steps[t]
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                do * o * (1.0 - o),
                dg * (1.0 - g * g),
            ],
            axis=1,
        )
        d_w += dz.T @ inp
        d_b += dz.sum(axis=0)
        dinp = dz @ w
        np.add.at(d_emb, step_ids[:, t], dinp[:, :e_dim])
        dh = dinp[:, e_dim:]
        dc = dc * f


def stack_bundles(bundles) -> tuple[dict, np.ndarray]:
    """Column-ize feature bundles for a batch of candidates."""
    bins = {
        "co": np.array([b.cooccurrence_bin for b in bundles], dtype=np.intp),
        "artist": np.array([b.artist_freq_bin for b in bundles], dtype=np.intp),
        "song": np.array([b.song_freq_bin for b in bundles], dtype=np.intp),
        "cross": np.array([b.cross_npmi_bin for b in bundles], dtype=np.intp),
        "intra": np.array([b.intra_npmi_bin for b in bundles], dtype=np.intp),
    }
    feats = np.array([b.ngram_negative_logprob for b in bundles], dtype=float)
    return bins, feats


@dataclass
class ScoreCache:
    ids: np.ndarray
    rev_ids: np.ndarray
    steps_f: list
    steps_b: list
    bins: dict
    ngram_feats: np.ndarray
    phi: np.ndarray
    dropout_mask: np.ndarray | None
    pre_act: np.ndarray
    relu: np.ndarray
    s: np.ndarray


@dataclass(frozen=True)
class SentenceScore:
    s: float
    u: float
    cache: ScoreCache


def score_batch(
    params: RerankerParams,
    ids: np.ndarray,
    bins: dict,
    ngram_feats: np.ndarray,
    dropout_p: float = 0.0,
    train_mode: bool = False,
    seed: int = 0,
):
    """Score a batch of equal-length candidates; returns (u, cache)."""
    t = params.tensors
    d = params.dims
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 2:
        raise ValueError("ids must be a (batch, length) array")
    if np.any(ids < 0) or np.any(ids >= d.vocab_size):
        raise ValueError("word id out of range")
    for key, limit in _BIN_LIMITS:
        if np.any(bins[key] < 0) or np.any(bins[key] >= limit):
            raise ValueError(f"feature bin out of range for {key}")

    h_f, steps_f = _lstm_forward(t["fwd_w"], t["fwd_b"], t["emb"][ids])
    rev_ids = ids[:, ::-1]
    h_b, steps_b = _lstm_forward(t["bwd_w"], t["bwd_b"], t["emb"][rev_ids])
    phi = np.concatenate(
        [
            h_f,
            h_b,
            t["co_emb"][bins["co"]],
            t["artist_emb"][bins["artist"]],
            t["song_emb"][bins["song"]],
            t["cross_emb"][bins["cross"]],
            t["intra_emb"][bins["intra"]],
        ],
        axis=1,
    )
    if train_mode and dropout_p > 0.0:
        # inverted dropout: kept units are rescaled now, inference is identity
        rng = np.random.default_rng(seed)
        mask = (rng.random(phi.shape) >= dropout_p) / (1.0 - dropout_p)
        phi = phi * mask
    else:
        mask = None
    pre_act = phi @ t["hidden_w"]
    relu = np.maximum(pre_act, 0.0)
    s = relu @ t["out_w"]
    u = t["alpha"][0] * s + t["alpha"][1] * np.asarray(ngram_feats, dtype=float)
    cache = ScoreCache(
        ids=ids,
        rev_ids=rev_ids,
        steps_f=steps_f,
        steps_b=steps_b,
        bins=bins,
        ngram_feats=np.asarray(ngram_feats, dtype=float),
        phi=phi,
        dropout_mask=mask,
        pre_act=pre_act,
        relu=relu,
        s=s,
    )
    return u, cache


def backprop_batch(params: RerankerParams, cache: ScoreCache, du: np.ndarray, out: dict | None = None) -> dict:
    """Gradients of sum(du * u) w.r.t. every tensor, accumulated into ``out``."""
    t = params.tensors
    d = params.dims
    grads = out if out is not None else params.zero_grads()

    du = np.asarray(du, dtype=float)
    grads["alpha"][0] += float(du @ cache.s)
    grads["alpha"][1] += float(du @ cache.ngram_feats)
    ds = du * t["alpha"][0]

    grads["out_w"] += cache.relu.T @ ds
    dr = np.outer(ds, t["out_w"])
    da = dr * (cache.pre_act > 0.0)
    grads["hidden_w"] += cache.phi.T @ da
    dphi = da @ t["hidden_w"].T
    if cache.dropout_mask is not None:
        dphi = dphi * cache.dropout_mask

    hid = d.lstm_dim
    dh_f = dphi[:, :hid]
    dh_b = dphi[:, hid : 2 * hid]
    offset = 2 * hid
    for name, key, width in (
        ("co_emb", "co", d.co_dim),
        ("artist_emb", "artist", d.freq_dim),
        ("song_emb", "song", d.freq_dim),
        ("cross_emb", "cross", d.cross_dim),
        ("intra_emb", "intra", d.intra_dim),
    ):
        np.add.at(grads[name], cache.bins[key], dphi[:, offset : offset + width])
        offset += width

    _lstm_backward(t["fwd_w"], cache.steps_f, dh_f.copy(), cache.ids, grads["fwd_w"], grads["fwd_b"], grads["emb"])
    _lstm_backward(t["bwd_w"], cache.steps_b, dh_b.copy(), cache.rev_ids, grads["bwd_w"], grads["bwd_b"], grads["emb"])
    return grads


def sentence_representation(params: RerankerParams, ids) -> np.ndarray:
    """Concatenated final states of the forward and backward sweeps."""
    ids = np.asarray(ids, dtype=np.intp).reshape(1, -1)
    t = params.tensors
    h_f, _ = _lstm_forward(t["fwd_w"], t["fwd_b"], t["emb"][ids])
    h_b, _ = _lstm_forward(t["bwd_w"], t["bwd_b"], t["emb"][ids[:, ::-1]])
    return np.concatenate([h_f[0], h_b[0]])


def score(
    params: RerankerParams,
    ids,
    bundle: FeatureBundle,
    dropout_p: float = 0.0,
    train_mode: bool = False,
    seed: int = 0,
) -> SentenceScore:
    bins, feats = stack_bundles([bundle])
    u, cache = score_batch(
        params,
        np.asarray(ids, dtype=np.intp).reshape(1, -1),
        bins,
        feats,
        dropout_p=dropout_p,
        train_mode=train_mode,
        seed=seed,
    )
    return SentenceScore(s=float(cache.s[0]), u=float(u[0]), cache=cache)


def contrastive_loss(scores, correct_index: int):
    """Softmax cross-entropy of the correct candidate against the rest.

    Returns (loss, gradient w.r.t. the scores); computed with max
    subtraction so large score gaps stay stable.
    """
    arr = np.asarray(scores, dtype=float)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError("need at least two candidate scores")
    if not 0 <= correct_index < arr.size:
        raise ValueError("correct_index out of range")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite candidate score")
    shifted = arr - arr.max()
    exp = np.exp(shifted)
    norm = exp.sum()
    p = exp / norm
    loss = float(np.log(norm) - shifted[correct_index])
    grad = p.copy()
    grad[correct_index] -= 1.0
    return loss, grad


def sgd_momentum_update(tensors: dict, grads: dict, velocity: dict, lr: float, momentum: float, l2: float = 0.0):
    """Classical momentum with L2 pulled into the gradient; updates in place."""
    for name, theta in tensors.items():
        g = grads[name] + l2 * theta
        v = velocity[name]
        v *= momentum
        v -= lr * g
        theta += v
    return tensors, velocity
