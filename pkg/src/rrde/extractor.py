"""Residual CNN feature extractors and their bootstrap ensemble."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from .nn import BatchNorm, Conv2d, Dense, GlobalAvgPool, Layer, ReLU, SgdConfig, learning_rate, sgd_step
from .nn import checkpoint
from .nn.losses import l2_loss, softmax, softmax_cross_entropy

log = logging.getLogger(__name__)

INPUT_SIZE = ds.INPUT_SIZE


@dataclass(frozen=True)
class ResidualNetConfig:
    depth: int = 20
    widths: tuple = (16, 32, 64)
    num_classes: int = 6
    feature_dim: int = 64

    def __post_init__(self):
        if self.depth < 8 or (self.depth - 2) % 6:
            raise ValueError(f"depth must be 6n+2 with n >= 1, got {self.depth}")
        if self.feature_dim != self.widths[-1]:
            raise ValueError(f"feature_dim {self.feature_dim} must equal last stage width {self.widths[-1]}")

    @property
    def blocks_per_stage(self) -> int:
        return (self.depth - 2) // 6


class BasicBlock(Layer):
    """conv-BN-ReLU-conv-BN plus shortcut, ReLU after the addition."""

    def __init__(self, in_ch, out_ch, stride, *, rng, name, dtype):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, rng=rng, name=f"{name}.conv1", dtype=dtype)
        self.bn1 = BatchNorm(out_ch, name=f"{name}.bn1", dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng=rng, name=f"{name}.conv2", dtype=dtype)
        self.bn2 = BatchNorm(out_ch, name=f"{name}.bn2", dtype=dtype)
        self.relu_out = ReLU()
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride, 0, rng=rng, name=f"{name}.proj", dtype=dtype)
            self.proj_bn = BatchNorm(out_ch, name=f"{name}.proj_bn", dtype=dtype)
        else:
            self.proj = self.proj_bn = None

    def _main(self):
        return [self.conv1, self.bn1, self.relu1, self.conv2, self.bn2]

    def _short(self):
        return [self.proj, self.proj_bn] if self.proj is not None else []

    def parameters(self):
        return [p for layer in self._main() + self._short() for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self._main() + self._short():
            out.update(layer.buffers())
        return out

    def forward(self, x, train=False):
        y = x
        for layer in self._main():
            y = layer.forward(y, train)
        s = x
        for layer in self._short():
            s = layer.forward(s, train)
        return self.relu_out.forward(y + s, train)

    def backward(self, dout):
        d = self.relu_out.backward(dout)
        dy = d
        for layer in reversed(self._main()):
            dy = layer.backward(dy)
        ds_ = d
        for layer in reversed(self._short()):
            ds_ = layer.backward(ds_)
        return dy + ds_


class ResNet:
    """CIFAR-style 6n+2 residual network.

    Takes NCHW input.  ``forward`` returns ``(logits, features)`` where
    features are the pooled penultimate activations.  With ``head_dim=1``
    the head is a scalar regressor instead of a classifier.
    """

    def __init__(self, config: ResidualNetConfig = ResidualNetConfig(), seed: int = 0,
                 head_dim: int | None = None, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        w0 = config.widths[0]
        self.stem = [Conv2d(3, w0, 3, 1, 1, rng=rng, name="stem.conv", dtype=dtype),
                     BatchNorm(w0, name="stem.bn", dtype=dtype), ReLU()]
        self.blocks = []
        in_ch = w0
        for s, width in enumerate(config.widths):
            for b in range(config.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                self.blocks.append(
                    BasicBlock(in_ch, width, stride, rng=rng, name=f"stage{s}.block{b}", dtype=dtype))
                in_ch = width
        self.pool = GlobalAvgPool()
        self.head = Dense(config.feature_dim, head_dim or config.num_classes, rng=rng, name="head",
                          dtype=dtype)

    def layers(self):
        return self.stem + self.blocks + [self.pool]

    def parameters(self):
        return [p for layer in self.layers() + [self.head] for p in layer.parameters()]

    def state(self) -> dict:
        out = {p.id: p.value for p in self.parameters()}
        for layer in self.layers():
            out.update(layer.buffers())
        return out

    def load_state(self, arrays: dict):
        for p in self.parameters():
            p.value[...] = arrays[p.id]
        for layer in self.layers():
            for key, buf in layer.buffers().items():
                buf[...] = arrays[key]

    def features(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected NCHW input with 3 channels, got shape {x.shape}")
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        for layer in self.layers():
            x = layer.forward(x, train)
        return x

    def forward(self, x, train=False):
        feats = self.features(x, train)
        return self.head.forward(feats, train), feats

    def backward(self, dlogits):
        d = self.head.backward(dlogits)
        for layer in reversed(self.layers()):
            d = layer.backward(d)
        return d

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def build_resnet(config: ResidualNetConfig = ResidualNetConfig(), seed: int = 0, head_dim=None,
                 dtype=np.float64) -> ResNet:
    return ResNet(config, seed, head_dim, dtype)


class TrainingError(RuntimeError):
    pass


@dataclass(eq=False)
class TrainedExtractor:
    """One ensemble member: a network plus where it came from."""

    model: ResNet
    bootstrap_seed: int
    train_log: list = field(default_factory=list)
    loss: str = "xent"

    @property
    def config(self) -> ResidualNetConfig:
        return self.model.config

    def forward(self, images, batch_size=128):
        """Eval-mode ``(head outputs, features)`` for a stack of prepared images."""
        images = np.asarray(images)
        outs, feats = [], []
        for i in range(0, len(images), batch_size):
            o, f = self.model.forward(images[i:i + batch_size], train=False)
            outs.append(o)
            feats.append(f)
        return (np.concatenate(outs).astype(np.float64),
                np.concatenate(feats).astype(np.float64))

    def extract_features(self, images) -> np.ndarray:
        return self.forward(images)[1]

    def predict_proba(self, images) -> np.ndarray:
        if self.loss != "xent":
            raise ValueError("class probabilities need a classification head")
        return softmax(self.forward(images)[0])

    def save(self, path):
        meta = {"config": asdict(self.config), "bootstrap_seed": self.bootstrap_seed,
                "loss": self.loss, "dtype": self.model.dtype.name,
                "head_dim": int(self.model.head.bias.value.shape[0]), "train_log": self.train_log}
        checkpoint.save(path, self.model.state(), meta)

    @classmethod
    def load(cls, path) -> "TrainedExtractor":
        arrays, meta = checkpoint.load(path)
        cfg = meta["config"]
        config = ResidualNetConfig(cfg["depth"], tuple(cfg["widths"]), cfg["num_classes"], cfg["feature_dim"])
        model = build_resnet(config, head_dim=meta["head_dim"], dtype=meta["dtype"])
        model.load_state(arrays)
        return cls(model, meta["bootstrap_seed"], meta["train_log"], meta["loss"])


def _check_image(image):
    if image.shape != (3, INPUT_SIZE, INPUT_SIZE):
        raise ValueError(f"expected a 3x{INPUT_SIZE}x{INPUT_SIZE} image, got shape {image.shape}")


def extract_feature(extractor: TrainedExtractor, image) -> np.ndarray:
    """Penultimate (pooled) activations for one normalized 3x32x32 image."""
    image = np.asarray(image)
    _check_image(image)
    return extractor.extract_features(image[None])[0]


def train_extractor(data, sgd: SgdConfig, seed: int = 0, *,
                    config: ResidualNetConfig = ResidualNetConfig(), augment: bool = True,
                    loss: str = "xent", dtype=np.float64, bootstrap_seed: int | None = None,
                    log_every: int = 0) -> TrainedExtractor:
    """Minibatch SGD on ``data`` (a sequence of :class:`FaceSample`).

    ``loss="xent"`` trains a 6-way classifier; ``loss="l2"`` regresses the
    label with a scalar head.  Batches are drawn from per-epoch shuffles and
    every image is jittered by :func:`rrde.dataset.augment` when ``augment``.
    """
    if loss not in ("xent", "l2"):
        raise ValueError(f"unknown loss {loss!r}")
    model = build_resnet(config, seed=seed, head_dim=1 if loss == "l2" else None, dtype=dtype)
    rng = np.random.default_rng([seed, 7919])
    labels = np.array([f.label for f in data])
    params = model.parameters()
    train_log = []
    order = np.empty(0, dtype=int)
    for it in range(sgd.total_iters):
        if len(order) < sgd.batch_size:
            order = np.concatenate([order, rng.permutation(len(data))])
        idx, order = order[:sgd.batch_size], order[sgd.batch_size:]
        if augment:
            x = np.stack([ds.normalize(ds.augment(data[i].image, rng)) for i in idx])
        else:
            x = np.stack([ds.prepare(data[i].image) for i in idx])
        model.zero_grad()
        out, _ = model.forward(x, train=True)
        if loss == "xent":
            value, grad = softmax_cross_entropy(out, labels[idx])
        else:
            value, grad = l2_loss(out[:, 0], labels[idx].astype(np.float64))
            grad = grad[:, None]
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at iteration {it} (lr={learning_rate(sgd, it)})")
        model.backward(grad.astype(model.dtype))
        sgd_step(params, sgd, it)
        train_log.append(value)
        if log_every and (it + 1) % log_every == 0:
            log.info("iter %d loss %.4f (trailing mean %.4f)", it + 1, value,
                     float(np.mean(train_log[-log_every:])))
    return TrainedExtractor(model, seed if bootstrap_seed is None else bootstrap_seed, train_log, loss)


def majority_vote(predictions, confidences=None) -> int:
    """Most frequent label.

    Ties go to the tied label with the largest summed confidence
    (``confidences`` maps label -> summed member probability), then to the
    lowest label.
    """
    predictions = [int(p) for p in predictions]
    if not predictions:
        raise ValueError("majority_vote needs at least one prediction")
    counts = np.bincount(predictions, minlength=ds.NUM_CLASSES)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) > 1 and confidences is not None:
        conf = np.array([confidences.get(int(c), 0.0) for c in tied])
        tied = tied[conf == conf.max()]
    return int(tied[0])


def vote_probabilities(member_probs) -> np.ndarray:
    """Ensemble class decision per sample from (members, samples, classes) probabilities."""
    member_probs = np.asarray(member_probs)
    preds = member_probs.argmax(axis=2)
    summed = member_probs.sum(axis=0)
    return np.array([majority_vote(preds[:, k], dict(enumerate(summed[k])))
                     for k in range(member_probs.shape[1])])


@dataclass(eq=False)
class Ensemble:
    """Members in training order; that order is the LSTM scan order."""

    members: list

    @property
    def fixed_order(self) -> list:
        return [f"member_{k}" for k in range(len(self.members))]

    @property
    def bootstrap_seeds(self) -> list:
        return [m.bootstrap_seed for m in self.members]

    def __len__(self):
        return len(self.members)

    def prefix(self, n: int) -> "Ensemble":
        if not 1 <= n <= len(self.members):
            raise ValueError(f"cannot take {n} of {len(self.members)} members")
        return Ensemble(self.members[:n])

    def features(self, images) -> np.ndarray:
        """(samples, n, feature_dim) member features in fixed order."""
        return np.stack([m.extract_features(images) for m in self.members], axis=1)

    def vote(self, images) -> np.ndarray:
        return vote_probabilities([m.predict_proba(images) for m in self.members])

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, m in zip(self.fixed_order, self.members):
            m.save(directory / f"{name}.ckpt")
        order = {"fixed_order": self.fixed_order, "bootstrap_seeds": self.bootstrap_seeds}
        (directory / "order.json").write_text(json.dumps(order, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "Ensemble":
        directory = Path(directory)
        order = json.loads((directory / "order.json").read_text())
        members = [TrainedExtractor.load(directory / f"{name}.ckpt") for name in order["fixed_order"]]
        if [m.bootstrap_seed for m in members] != order["bootstrap_seeds"]:
            raise ValueError(f"checkpoints in {directory} disagree with order.json")
        return cls(members)


def train_ensemble(balanced, n: int, base_seed: int, sgd: SgdConfig, *, workers: int = 1,
                   **train_kwargs) -> Ensemble:
    """Member k is trained on ``bootstrap_sample(balanced, base_seed + k)`` from init seed ``base_seed + k``."""
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    jobs = [(k, ds.bootstrap_sample(balanced, base_seed + k), base_seed + k) for k in range(n)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_train_member, k, data, s, sgd, train_kwargs) for k, data, s in jobs]
            members = [f.result() for f in futures]
    else:
        members = [_train_member(k, data, s, sgd, train_kwargs) for k, data, s in jobs]
    return Ensemble(members)


def _train_member(k, data, seed, sgd, train_kwargs):
    try:
        log.info("training member %d (bootstrap seed %d)", k, seed)
        return train_extractor(data, sgd, seed, bootstrap_seed=seed, **train_kwargs)
    except Exception as exc:
        raise TrainingError(f"ensemble member {k} failed: {exc}") from exc
