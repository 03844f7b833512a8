"""Fully-connected ReLU embedding network trained with a triplet hinge loss.

Everything is float64 numpy: forward pass, exact backpropagation, Adam and a
small binary model format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, NoTriplets, ShapeError

MAGIC = b"CGF-NET1\n"
INIT_STD = 0.1


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_dims: tuple = (512, 512, 512, 512, 512)
    output_dim: int = 32
    margin: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ValueError("all layer sizes must be >= 1")
        if not self.margin > 0:
            raise ValueError("margin must be positive")

    @property
    def dims(self):
        return (self.input_dim,) + self.hidden_dims + (self.output_dim,)


class EmbeddingNet:
    """``f(x) = W_L relu(... relu(W_1 x + b_1) ...) + b_L``.

    ``weights[l]`` has shape (out, in). Inputs may be a single vector or a
    batch of row vectors.
    """

    def __init__(self, weights, biases, margin=1.0):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k} expects {w.shape[1]} inputs, "
                                 f"previous layer gives {self.weights[k - 1].shape[0]}")
        self.margin = float(margin)

    @property
    def config(self):
        dims = [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]
        return NetConfig(dims[0], tuple(dims[1:-1]), dims[-1], self.margin)

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self):
        """Parameters in storage order: w_1, b_1, w_2, b_2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return EmbeddingNet([w.copy() for w in self.weights],
                            [b.copy() for b in self.biases], self.margin)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim or x.ndim not in (1, 2):
            raise ShapeError(f"expected input of size {self.input_dim}, got shape {x.shape}")
        return x

    def forward(self, x):
        x = self._check(x)
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if k < last:
                np.maximum(h, 0.0, out=h)
        return h

    __call__ = forward

    def _forward_all(self, x):
        """Pre-activations of every layer (needed by backprop)."""
        pre = []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pre.append(z)
            h = np.maximum(z, 0.0) if k < last else z
        return pre


def init_net(config, seed=0):
    """Weights ~ N(0, 0.1^2), biases zero, drawn layer by layer."""
    rng = np.random.default_rng(seed)
    dims = config.dims
    weights = [rng.normal(0.0, INIT_STD, size=(dims[k + 1], dims[k])) for k in range(len(dims) - 1)]
    biases = [np.zeros(dims[k + 1]) for k in range(len(dims) - 1)]
    return EmbeddingNet(weights, biases, config.margin)


# ---------------------------------------------------------------------------
# triplets and loss

@dataclass(frozen=True, eq=False)
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        a, p, n = (np.atleast_2d(np.asarray(v, dtype=np.float64))
                   for v in (self.anchors, self.positives, self.negatives))
        if not (a.shape == p.shape == n.shape) or len(a) == 0:
            raise ShapeError("anchors, positives and negatives must be equal, non-empty batches")
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "positives", p)
        object.__setattr__(self, "negatives", n)

    def __len__(self):
        return len(self.anchors)

    def take(self, idx):
        return TripletBatch(self.anchors[idx], self.positives[idx], self.negatives[idx])


@dataclass(frozen=True, eq=False)
class IndexedTriplets:
    """Triplets stored as row indices into one shared histogram pool."""

    pool: np.ndarray
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __len__(self):
        return len(self.anchor)

    def take(self, idx):
        return TripletBatch(self.pool[self.anchor[idx]], self.pool[self.positive[idx]],
                            self.pool[self.negative[idx]])


def _hinge_terms(net, batch):
    B = len(batch)
    x = np.concatenate([batch.anchors, batch.positives, batch.negatives])
    net._check(x)
    pre = net._forward_all(x)
    out = pre[-1]
    fa, fp, fn = out[:B], out[B:2 * B], out[2 * B:]
    d_ap = ((fa - fp) ** 2).sum(axis=1)
    d_an = ((fa - fn) ** 2).sum(axis=1)
    return x, pre, fa, fp, fn, d_ap - d_an + net.margin


def triplet_loss(net, batch):
    """Mean of ``max(|f(a)-f(p)|^2 - |f(a)-f(n)|^2 + margin, 0)``."""
    *_, h = _hinge_terms(net, batch)
    return float(np.maximum(h, 0.0).mean())


def loss_and_gradient(net, batch):
    """Triplet loss and its exact gradient, ordered like ``net.params()``.

    Triplets with hinge argument <= 0 and ReLU units with pre-activation
    <= 0 contribute nothing.
    """
    B = len(batch)
    x, pre, fa, fp, fn, h = _hinge_terms(net, batch)
    active = (h > 0).astype(np.float64)[:, None] / B
    g_out = np.concatenate([
        2.0 * (fn - fp) * active,
        -2.0 * (fa - fp) * active,
        2.0 * (fa - fn) * active,
    ])
    grads = [None] * (2 * len(net.weights))
    dz = g_out
    for k in range(len(net.weights) - 1, -1, -1):
        h_in = x if k == 0 else np.maximum(pre[k - 1], 0.0)
        grads[2 * k] = dz.T @ h_in
        grads[2 * k + 1] = dz.sum(axis=0)
        if k:
            dz = (dz @ net.weights[k]) * (pre[k - 1] > 0)
    return float(np.maximum(h, 0.0).mean()), grads


def backward(net, batch):
    return loss_and_gradient(net, batch)[1]


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net, **hyper):
        return cls([np.zeros_like(p) for p in net.params()],
                   [np.zeros_like(p) for p in net.params()], **hyper)

    def copy(self):
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v],
                         self.t, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(net, state, grads):
    """One bias-corrected Adam update, in place. Returns ``(net, state)``."""
    params = net.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ShapeError("gradient does not match the network's parameters")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


@dataclass
class TrainResult:
    net: EmbeddingNet
    losses: list = field(default_factory=list)
    epoch_of_batch: list = field(default_factory=list)
    permutations: list = field(default_factory=list)

    def epoch_means(self):
        losses = np.asarray(self.losses)
        epochs = np.asarray(self.epoch_of_batch)
        return [float(losses[epochs == e].mean()) for e in np.unique(epochs)]


def train(net, triplets, epochs=3, batch_size=512, seed=0, lr=1e-4, eps=1e-8,
          beta1=0.9, beta2=0.999, keep_permutations=False, log=None):
    """Minibatch Adam on the triplet loss.

    ``triplets`` is a :class:`TripletBatch` or :class:`IndexedTriplets`. Each
    epoch reshuffles all triplets; the final short batch is kept. The net is
    updated in place and returned inside a :class:`TrainResult` together with
    the per-batch loss trace (loss before each update).
    """
    if len(triplets) == 0:
        raise NoTriplets("no triplets to train on")
    rng = np.random.default_rng(seed)
    state = AdamState.for_net(net, lr=lr, eps=eps, beta1=beta1, beta2=beta2)
    result = TrainResult(net)
    for epoch in range(epochs):
        perm = rng.permutation(len(triplets))
        if keep_permutations:
            result.permutations.append(perm)
        for start in range(0, len(perm), batch_size):
            batch = triplets.take(perm[start:start + batch_size])
            loss, grads = loss_and_gradient(net, batch)
            adam_step(net, state, grads)
            result.losses.append(loss)
            result.epoch_of_batch.append(epoch)
        if log:
            log(f"epoch {epoch}: mean loss {result.epoch_means()[-1]:.4f}")
    return result


# ---------------------------------------------------------------------------
# persistence

def save_model(path, net):
    """Magic line, text header with the layer sizes, then little-endian float64
    parameters layer by layer (row-major weights, then bias)."""
    cfg = net.config
    dims = " ".join(str(d) for d in cfg.dims)
    header = f"dims: {dims}; margin: {net.margin!r}\n".encode()
    blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params())
    Path(path).write_bytes(MAGIC + header + blob)


def load_model(path):
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ModelFormatError("bad magic: not a CGF-NET1 model file")
    rest = data[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise ModelFormatError("missing header line")
    header, blob = rest[:nl].decode("ascii", "replace"), rest[nl + 1:]
    try:
        dims_part, margin_part = header.split(";")
        key, dims_txt = dims_part.split(":")
        mkey, margin_txt = margin_part.split(":")
        if key.strip() != "dims" or mkey.strip() != "margin":
            raise ValueError(header)
        dims = [int(t) for t in dims_txt.split()]
        margin = float(margin_txt)
    except ValueError:
        raise ModelFormatError(f"malformed header {header!r}") from None
    if len(dims) < 2 or min(dims) < 1:
        raise ModelFormatError(f"invalid layer sizes {dims}")
    sizes = [(dims[k + 1], dims[k]) for k in range(len(dims) - 1)]
    expected = 8 * sum(o * i + o for o, i in sizes)
    if len(blob) != expected:
        raise ModelFormatError(f"parameter blob has {len(blob)} bytes, expected {expected}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise ModelFormatError("non-finite parameters")
    weights, biases, pos = [], [], 0
    for o, i in sizes:
        weights.append(flat[pos:pos + o * i].reshape(o, i).copy())
        pos += o * i
        biases.append(flat[pos:pos + o].copy())
        pos += o
    return EmbeddingNet(weights, biases, margin)


def embed_all(net, histograms, valid=None):
    """Embed the valid rows of a histogram matrix.

    Returns ``(indices, embeddings)``: the point indices that were embedded
    and one output row per index.
    """
    values = getattr(histograms, "values", histograms)
    if valid is None:
        valid = getattr(histograms, "valid", None)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        if values.size == 0:
            return np.zeros(0, dtype=np.int64), np.zeros((0, net.output_dim))
        raise ShapeError("histograms must be a 2-D array")
    idx = np.arange(len(values)) if valid is None else np.flatnonzero(valid)
    if len(idx) == 0:
        return idx, np.zeros((0, net.output_dim))
    if values.shape[1] != net.input_dim:
        raise ShapeError(f"model expects {net.input_dim}-dim histograms, got {values.shape[1]}")
    out = np.empty((len(idx), net.output_dim))
    for start in range(0, len(idx), 4096):
        sl = idx[start:start + 4096]
        out[start:start + len(sl)] = net.forward(values[sl])
    return idx, out
