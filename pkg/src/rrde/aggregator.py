"""Stacked-LSTM fusion of the per-network features of one face.

The n member features are scanned in the ensemble's fixed order; the top
layer's final hidden state is the fused face descriptor.  For training, a
scalar affine head regresses the happiness label from that descriptor
under squared error; the head is not part of the descriptor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np

from .nn import Dense, Parameter, SgdConfig, sgd_step
from .nn import checkpoint
from .nn.losses import l2_loss

log = logging.getLogger(__name__)

GATES = ("i", "f", "o", "g")
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class LstmConfig:
    input_dim: int = 64
    hidden_dim: int = 128
    num_layers: int = 2
    sequence_len: int = 5

    def __post_init__(self):
        if self.hidden_dim < 1 or self.num_layers < 1 or self.input_dim < 1 or self.sequence_len < 1:
            raise ValueError(f"invalid LSTM config {self}")


# default optimiser for the fusion network; not taken from the CNN recipe
AGGREGATOR_SGD = SgdConfig(initial_lr=0.05, decay_factor=0.1, decay_every_iters=1500,
                           weight_decay=0.00001, batch_size=32, total_iters=3000)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LstmLayer:
    """One LSTM cell with per-gate input (W) and recurrent (U) matrices."""

    def __init__(self, d_in, hidden, *, rng, name):
        k = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.W = {g: Parameter(rng.uniform(-k, k, (d_in, hidden)), f"{name}.W_{g}") for g in GATES}
        self.U = {g: Parameter(rng.uniform(-k, k, (hidden, hidden)), f"{name}.U_{g}") for g in GATES}
        self.b = {g: Parameter(np.full(hidden, FORGET_BIAS if g == "f" else 0.0), f"{name}.b_{g}")
                  for g in GATES}

    def parameters(self):
        return [*self.W.values(), *self.U.values(), *self.b.values()]

    def stacked(self):
        return (np.concatenate([self.W[g].value for g in GATES], axis=1),
                np.concatenate([self.U[g].value for g in GATES], axis=1),
                np.concatenate([self.b[g].value for g in GATES]))


def lstm_cell_step(x, h, c, W, U, b):
    """One step for a batch.  ``W``/``U``/``b`` hold the gates stacked as (i, f, o, g).

    i, f, o = sigmoid(x W + h U + b), g = tanh(...), c' = f*c + i*g,
    h' = o * tanh(c').  Returns ``(h', c', cache)``.
    """
    if x.shape[-1] != W.shape[0] or h.shape[-1] != U.shape[0] or W.shape[1] != 4 * U.shape[0]:
        raise ValueError(f"LSTM step: x {x.shape}, h {h.shape} do not fit W {W.shape}, U {U.shape}")
    H = U.shape[0]
    a = x @ W + h @ U + b
    i = _sigmoid(a[:, :H])
    f = _sigmoid(a[:, H:2 * H])
    o = _sigmoid(a[:, 2 * H:3 * H])
    g = np.tanh(a[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, o, g, tc, W, U)


def lstm_cell_backward(dh, dc, cache):
    """Returns ``(dx, dh_prev, dc_prev, dW, dU, db)`` for stacked parameters."""
    x, h, c, i, f, o, g, tc, W, U = cache
    do = dh * tc
    dc = dc + dh * o * (1 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c
    dc_prev = dc * f
    da = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1)
    return da @ W.T, da @ U.T, dc_prev, x.T @ da, h.T @ da, da.sum(axis=0)


class LstmAggregator:
    def __init__(self, config: LstmConfig = LstmConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.layers = [LstmLayer(config.input_dim if k == 0 else config.hidden_dim, config.hidden_dim,
                                 rng=rng, name=f"lstm.l{k}") for k in range(config.num_layers)]
        self.head = Dense(config.hidden_dim, 1, rng=rng, name="lstm.head")

    def parameters(self, with_head=True):
        out = [p for layer in self.layers for p in layer.parameters()]
        return out + self.head.parameters() if with_head else out

    def _check(self, seq):
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim == 2:
            seq = seq[None]
        n, d = self.config.sequence_len, self.config.input_dim
        if seq.ndim != 3 or seq.shape[1:] != (n, d):
            raise ValueError(f"expected sequences of {n} vectors of length {d}, got shape {seq.shape}")
        return seq

    def scan(self, seq, keep_cache=False):
        """Top-layer hidden state after the last step; ``seq`` is (B, n, input_dim) or (n, input_dim)."""
        seq = self._check(seq)
        B = seq.shape[0]
        H = self.config.hidden_dim
        stacked = [layer.stacked() for layer in self.layers]
        h = [np.zeros((B, H)) for _ in self.layers]
        c = [np.zeros((B, H)) for _ in self.layers]
        caches = []
        for t in range(seq.shape[1]):
            inp = seq[:, t]
            step = []
            for k, (W, U, b) in enumerate(stacked):
                h[k], c[k], cache = lstm_cell_step(inp, h[k], c[k], W, U, b)
                step.append(cache)
                inp = h[k]
            caches.append(step)
        if keep_cache:
            self._caches = caches
        return h[-1]

    def backward(self, dtop):
        """BPTT from a gradient on the final top-layer hidden state; accumulates into params."""
        L = len(self.layers)
        H = self.config.hidden_dim
        B = dtop.shape[0]
        dh = [np.zeros((B, H)) for _ in range(L)]
        dc = [np.zeros((B, H)) for _ in range(L)]
        dh[-1] = dtop
        grads = [[0.0, 0.0, 0.0] for _ in range(L)]
        dxs = []
        for step in reversed(self._caches):
            below = None
            for k in reversed(range(L)):
                d_in = dh[k] if below is None else dh[k] + below
                dx, dh[k], dc[k], dW, dU, db = lstm_cell_backward(d_in, dc[k], step[k])
                grads[k][0] = grads[k][0] + dW
                grads[k][1] = grads[k][1] + dU
                grads[k][2] = grads[k][2] + db
                below = dx
            dxs.append(below)
        for layer, (dW, dU, db) in zip(self.layers, grads):
            parts = zip(GATES, np.split(dW, 4, axis=1), np.split(dU, 4, axis=1), np.split(db, 4))
            for g, dw_g, du_g, db_g in parts:
                layer.W[g].grad += dw_g
                layer.U[g].grad += du_g
                layer.b[g].grad += db_g
        return np.stack(dxs[::-1], axis=1)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def predict(self, seq):
        return self.head.forward(self.scan(seq))[:, 0]

    def state(self):
        return {p.id: p.value for p in self.parameters()}

    def save(self, path, train_log=()):
        checkpoint.save(path, self.state(), {**asdict(self.config), "train_log": list(train_log)})

    @classmethod
    def load(cls, path) -> "LstmAggregator":
        arrays, meta = checkpoint.load(path)
        agg = cls(LstmConfig(meta["input_dim"], meta["hidden_dim"], meta["num_layers"], meta["sequence_len"]))
        for p in agg.parameters():
            p.value[...] = arrays[p.id]
        return agg


def scan(features, aggregator: LstmAggregator) -> np.ndarray:
    """Fused descriptor of one face from its n member features (fixed order)."""
    return aggregator.scan(np.asarray(features))[0]


def train_aggregator(features, labels, sgd: SgdConfig = AGGREGATOR_SGD, *, hidden_dim: int = 128,
                     num_layers: int = 2, seed: int = 0):
    """Fit the LSTM plus scalar head to ``labels`` under squared error.

    ``features`` is (faces, n, input_dim).  Returns ``(aggregator, loss_log)``.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 3 or y.shape != (X.shape[0],):
        raise ValueError(f"need features (faces, n, dim) and one label per face, got {X.shape}, {y.shape}")
    if np.any((y < 0) | (y > 5)):
        raise ValueError("labels must lie in [0, 5]")
    agg = LstmAggregator(LstmConfig(X.shape[2], hidden_dim, num_layers, X.shape[1]), seed)
    rng = np.random.default_rng([seed, 104729])
    params = agg.parameters()
    losses = []
    order = np.empty(0, dtype=int)
    bs = min(sgd.batch_size, len(X))
    for it in range(sgd.total_iters):
        if len(order) < bs:
            order = np.concatenate([order, rng.permutation(len(X))])
        idx, order = order[:bs], order[bs:]
        agg.zero_grad()
        top = agg.scan(X[idx], keep_cache=True)
        pred = agg.head.forward(top)
        value, grad = l2_loss(pred[:, 0], y[idx])
        if not np.isfinite(value):
            raise FloatingPointError(f"aggregator loss became non-finite at iteration {it}")
        agg.backward(agg.head.backward(grad[:, None]))
        sgd_step(params, sgd, it)
        losses.append(value)
    return agg, losses


def aggregate_face(ensemble, aggregator: LstmAggregator, image) -> np.ndarray:
    """Member features of one prepared 3x32x32 image, fused by the LSTM."""
    from .extractor import extract_feature

    feats = np.stack([extract_feature(m, image) for m in ensemble.members])
    return scan(feats, aggregator)


def aggregate_batch(ensemble, aggregator: LstmAggregator, images) -> np.ndarray:
    return aggregator.scan(ensemble.features(images))
