"""Minimal differentiable network toolkit and the deterministic acoustic classifier.

Parameters live in one flat float64 vector; layers hold reshaped views into
it, so optimizer updates of the flat vector are visible everywhere.  All
gradients are exact reverse-mode, computed layer by layer.  Training is
single threaded and bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio import AudioClip, log_mel_batch
from .corpus import SAMPLE_RATE, VOCAB, load_split

N_MEL_INPUT = 40  # model frontend uses 40 log-mel bands (distinct from the 26/13 MFCC metric)
CLIP_SAMPLES = 16000

CHECKPOINT_MAGIC = b"ADVAUDIO"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Layers: each exposes forward(x) -> (y, cache) and backward(dy, cache, grads)
# where grads is the flat gradient vector holding the same views as params.


class Conv1d:
    """Valid 1-D convolution over time; x is [B x T x in_ch], y is [B x T-k+1 x out_ch]."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int):
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.size = out_ch * in_ch * kernel + out_ch

    def views(self, flat: np.ndarray, offset: int):
        w_size = self.out_ch * self.in_ch * self.kernel
        w = flat[offset : offset + w_size].reshape(self.out_ch, self.in_ch, self.kernel)
        b = flat[offset + w_size : offset + self.size]
        return w, b

    def init(self, w: np.ndarray, b: np.ndarray, rng: np.random.Generator):
        fan_in = self.in_ch * self.kernel
        w[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / fan_in)
        b[...] = 0.0

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray):
        windows = sliding_window_view(x, self.kernel, axis=1)  # [B, T', in, k]
        bt = windows.shape[0] * windows.shape[1]
        flat_in = windows.reshape(bt, self.in_ch * self.kernel)
        w_mat = w.reshape(self.out_ch, self.in_ch * self.kernel).T
        y = (flat_in @ w_mat + b).reshape(windows.shape[0], windows.shape[1], self.out_ch)
        return y, (x, flat_in)

    def backward(self, dy: np.ndarray, cache, w: np.ndarray, dw: np.ndarray, db: np.ndarray):
        x, flat_in = cache
        b_, t_, _ = dy.shape
        dy_flat = dy.reshape(b_ * t_, self.out_ch)
        dw[...] = (flat_in.T @ dy_flat).T.reshape(dw.shape)
        db[...] = dy_flat.sum(axis=0)
        dx = np.zeros_like(x)
        for j in range(self.kernel):
            dx[:, j : j + t_, :] += dy @ w[:, :, j]
        return dx


class Dense:
    """Affine layer; x is [B x in], y is [B x out]."""

    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out
        self.size = n_in * n_out + n_out

    def views(self, flat: np.ndarray, offset: int):
        w = flat[offset : offset + self.n_in * self.n_out].reshape(self.n_in, self.n_out)
        b = flat[offset + self.n_in * self.n_out : offset + self.size]
        return w, b

    def init(self, w: np.ndarray, b: np.ndarray, rng: np.random.Generator):
        w[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / self.n_in)
        b[...] = 0.0

    def init_zero(self, w: np.ndarray, b: np.ndarray):
        w[...] = 0.0
        b[...] = 0.0

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray):
        return x @ w + b, x

    def backward(self, dy: np.ndarray, cache, w: np.ndarray, dw: np.ndarray, db: np.ndarray):
        x = cache
        dw[...] = x.T @ dy
        db[...] = dy.sum(axis=0)
        return dy @ w.T


def relu(x: np.ndarray):
    return np.maximum(x, 0.0), x


def relu_backward(dy: np.ndarray, cache: np.ndarray) -> np.ndarray:
    return dy * (cache > 0.0)


# ---------------------------------------------------------------------------
# Deterministic classifier


@dataclass
class ModelSpec:
    n_mels: int = N_MEL_INPUT
    channels: tuple[int, int] = (16, 32)
    kernel: int = 5
    hidden: int = 64
    n_classes: int = len(VOCAB)
    sample_rate: int = SAMPLE_RATE


class ClassifierModel:
    """Two conv blocks over log-mel frames, mean pool over time, dense head.

    The flat `params` vector is the single source of truth; `grad_buffer()`
    allocates a matching vector whose layer views are filled by backprop.
    """

    def __init__(self, spec: ModelSpec | None = None, seed: int = 0):
        self.spec = spec or ModelSpec()
        s = self.spec
        self.conv1 = Conv1d(s.n_mels, s.channels[0], s.kernel)
        self.conv2 = Conv1d(s.channels[0], s.channels[1], s.kernel)
        self.dense_hidden = Dense(s.channels[1], s.hidden)
        self.dense_out = Dense(s.hidden, s.n_classes)
        self.layout = self._layout()
        self.params = np.zeros(self.param_count)
        self.feat_mean = np.zeros(s.n_mels)
        self.feat_std = np.ones(s.n_mels)
        self._init_params(seed)

    def _layout(self):
        layout, offset = {}, 0
        for name, layer in (
            ("conv1", self.conv1),
            ("conv2", self.conv2),
            ("dense_hidden", self.dense_hidden),
            ("dense_out", self.dense_out),
        ):
            layout[name] = (offset, layer.size)
            offset += layer.size
        self.param_count = offset
        return layout

    def _init_params(self, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xC1A55,)))
        for name, layer in (("conv1", self.conv1), ("conv2", self.conv2)):
            w, b = layer.views(self.params, self.layout[name][0])
            layer.init(w, b, rng)
        w, b = self.dense_hidden.views(self.params, self.layout["dense_hidden"][0])
        self.dense_hidden.init(w, b, rng)
        # Zeroed output layer: a fresh model predicts the uniform distribution.
        w, b = self.dense_out.views(self.params, self.layout["dense_out"][0])
        self.dense_out.init_zero(w, b)

    def grad_buffer(self) -> np.ndarray:
        return np.zeros(self.param_count)

    def set_feature_norm(self, mean: np.ndarray, std: np.ndarray):
        self.feat_mean = np.asarray(mean, dtype=np.float64)
        self.feat_std = np.asarray(std, dtype=np.float64)

    # -- feature frontend ---------------------------------------------------

    def features(self, waves: np.ndarray) -> np.ndarray:
        """Normalized log-mel features for a [B x 16000] waveform batch."""
        waves = np.asarray(waves, dtype=np.float64)
        if waves.ndim != 2 or waves.shape[1] != CLIP_SAMPLES:
            raise ValueError(f"expected [B x {CLIP_SAMPLES}] waveforms, got {waves.shape}")
        feats = log_mel_batch(waves, self.spec.sample_rate, self.spec.n_mels)
        return (feats - self.feat_mean) / self.feat_std

    # -- inference ----------------------------------------------------------

    def _trunk(self, feats: np.ndarray, params: np.ndarray):
        w1, b1 = self.conv1.views(params, self.layout["conv1"][0])
        w2, b2 = self.conv2.views(params, self.layout["conv2"][0])
        c1, cache1 = self.conv1.forward(feats, w1, b1)
        a1, rcache1 = relu(c1)
        c2, cache2 = self.conv2.forward(a1, w2, b2)
        a2, rcache2 = relu(c2)
        pooled = a2.mean(axis=1)
        caches = (cache1, rcache1, cache2, rcache2, a2.shape[1])
        return pooled, caches

    def _trunk_backward(self, dpooled: np.ndarray, caches, params, grads):
        cache1, rcache1, cache2, rcache2, t2 = caches
        w1, _ = self.conv1.views(params, self.layout["conv1"][0])
        w2, _ = self.conv2.views(params, self.layout["conv2"][0])
        dw1, db1 = self.conv1.views(grads, self.layout["conv1"][0])
        dw2, db2 = self.conv2.views(grads, self.layout["conv2"][0])
        da2 = np.broadcast_to(dpooled[:, None, :] / t2, (dpooled.shape[0], t2, dpooled.shape[1]))
        dc2 = relu_backward(da2, rcache2)
        da1 = self.conv2.backward(dc2, cache2, w2, dw2, db2)
        dc1 = relu_backward(da1, rcache1)
        self.conv1.backward(dc1, cache1, w1, dw1, db1)

    def logits_from_features(self, feats: np.ndarray) -> np.ndarray:
        pooled, _ = self._trunk(feats, self.params)
        wh, bh = self.dense_hidden.views(self.params, self.layout["dense_hidden"][0])
        wo, bo = self.dense_out.views(self.params, self.layout["dense_out"][0])
        hidden, _ = self.dense_hidden.forward(pooled, wh, bh)
        act, _ = relu(hidden)
        logits, _ = self.dense_out.forward(act, wo, bo)
        return logits

    def forward_batch(self, waves: np.ndarray) -> np.ndarray:
        """Softmax posteriors for a [B x 16000] waveform batch."""
        return softmax(self.logits_from_features(self.features(waves)))

    def forward(self, clip: AudioClip) -> np.ndarray:
        if clip.sample_rate != self.spec.sample_rate:
            raise ValueError(f"expected {self.spec.sample_rate} Hz input, got {clip.sample_rate}")
        if len(clip) != CLIP_SAMPLES:
            raise ValueError(f"expected {CLIP_SAMPLES}-sample clip, got {len(clip)}")
        return self.forward_batch(clip.samples[None, :])[0]

    # -- training loss ------------------------------------------------------

    def loss_and_grad_features(self, feats: np.ndarray, labels: np.ndarray,
                               label_smoothing: float = 0.0):
        """Mean cross-entropy and its exact gradient for normalized features.

        With label_smoothing > 0 the target distribution mixes the one-hot
        label with uniform mass (caps achievable logit margins).
        """
        labels = np.asarray(labels)
        if labels.size == 0:
            raise ValueError("empty batch")
        if np.any(labels < 0) or np.any(labels >= self.spec.n_classes):
            raise ValueError("label out of range")
        grads = self.grad_buffer()
        pooled, trunk_caches = self._trunk(feats, self.params)
        wh, bh = self.dense_hidden.views(self.params, self.layout["dense_hidden"][0])
        wo, bo = self.dense_out.views(self.params, self.layout["dense_out"][0])
        hidden, hcache = self.dense_hidden.forward(pooled, wh, bh)
        act, rcache = relu(hidden)
        logits, ocache = self.dense_out.forward(act, wo, bo)
        logp = log_softmax(logits)
        n = labels.size
        k = self.spec.n_classes
        targets = np.full((n, k), label_smoothing / k)
        targets[np.arange(n), labels] += 1.0 - label_smoothing
        loss = -float(np.mean(np.sum(targets * logp, axis=1)))
        dlogits = softmax(logits)
        dlogits -= targets
        dlogits /= n
        dwo, dbo = self.dense_out.views(grads, self.layout["dense_out"][0])
        dact = self.dense_out.backward(dlogits, ocache, wo, dwo, dbo)
        dhidden = relu_backward(dact, rcache)
        dwh, dbh = self.dense_hidden.views(grads, self.layout["dense_hidden"][0])
        dpooled = self.dense_hidden.backward(dhidden, hcache, wh, dwh, dbh)
        self._trunk_backward(dpooled, trunk_caches, self.params, grads)
        return loss, grads


def loss_and_grad(model: ClassifierModel, batch: list[tuple[AudioClip, int]]):
    """Mean cross-entropy over (clip, label) pairs plus the flat gradient."""
    if not batch:
        raise ValueError("empty batch")
    waves = np.stack([clip.samples for clip, _ in batch])
    labels = np.array([label for _, label in batch])
    return model.loss_and_grad_features(model.features(waves), labels)


# ---------------------------------------------------------------------------
# Optimizer and training loop


class Adam:
    """Adaptive-moment optimizer on a flat parameter vector."""

    def __init__(self, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    label_smoothing: float = 0.0


@dataclass
class EpochStats:
    epoch: int
    loss: float
    dev_accuracy: float


def accuracy(model: ClassifierModel, feats: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.argmax(model.logits_from_features(feats), axis=1)
    return float(np.mean(predictions == labels))


def evaluate_accuracy(model: ClassifierModel, waves: np.ndarray, labels: np.ndarray) -> float:
    return accuracy(model, model.features(waves), labels)


def train(model: ClassifierModel, manifest, config: TrainConfig):
    """Adam training on the manifest's train split; returns (model, curve)."""
    train_waves, train_labels, _ = load_split(manifest, "train")
    dev_waves, dev_labels, _ = load_split(manifest, "dev")
    raw_feats = log_mel_batch(train_waves, model.spec.sample_rate, model.spec.n_mels)
    mean = raw_feats.mean(axis=(0, 1))
    std = raw_feats.std(axis=(0, 1))
    model.set_feature_norm(mean, np.maximum(std, 1e-6))
    feats = model.features(train_waves)
    dev_feats = model.features(dev_waves)

    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0x7124,)))
    optimizer = Adam(model.param_count, lr=config.lr)
    curve = []
    n = feats.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grad = model.loss_and_grad_features(feats[idx], train_labels[idx],
                                                      config.label_smoothing)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss} at epoch {epoch} batch {start // config.batch_size}"
                )
            optimizer.step(model.params, grad)
            losses.append(loss)
        curve.append(EpochStats(epoch, float(np.mean(losses)), accuracy(model, dev_feats, dev_labels)))
    return model, curve


def write_curve_csv(curve: list[EpochStats], path):
    with open(path, "w") as fh:
        fh.write("epoch,loss,dev_accuracy\n")
        for row in curve:
            fh.write(f"{row.epoch},{row.loss!r},{row.dev_accuracy!r}\n")


# ---------------------------------------------------------------------------
# Checkpoint format: magic + version + JSON header + little-endian float64 params


def _header_dict(model, kind: str) -> dict:
    s = model.spec
    return {
        "kind": kind,
        "n_mels": s.n_mels,
        "channels": list(s.channels),
        "kernel": s.kernel,
        "hidden": s.hidden,
        "n_classes": s.n_classes,
        "sample_rate": s.sample_rate,
        "feat_mean": model.feat_mean.tolist(),
        "feat_std": model.feat_std.tolist(),
        "sections": {name: list(span) for name, span in model.layout.items()},
        "param_count": model.param_count,
    }


def save_checkpoint(model: ClassifierModel, path, kind: str = "classifier",
                    extras: dict | None = None):
    header_dict = _header_dict(model, kind)
    if extras:
        header_dict.update(extras)
    header = json.dumps(header_dict, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(model.params.astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len))
        params = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if params.size != header["param_count"]:
        raise ValueError("checkpoint parameter count mismatch")
    return header, params


def load_classifier(path) -> ClassifierModel:
    header, params = read_checkpoint(path)
    if header["kind"] != "classifier":
        raise ValueError(f"checkpoint kind {header['kind']!r} is not a classifier")
    spec = ModelSpec(
        n_mels=header["n_mels"],
        channels=tuple(header["channels"]),
        kernel=header["kernel"],
        hidden=header["hidden"],
        n_classes=header["n_classes"],
        sample_rate=header["sample_rate"],
    )
    model = ClassifierModel(spec)
    model.params[...] = params
    model.set_feature_norm(np.array(header["feat_mean"]), np.array(header["feat_std"]))
    return model
