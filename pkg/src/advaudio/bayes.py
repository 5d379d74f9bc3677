"""Flipout variational dense layer, Gaussian KL, ELBO training, MC prediction.

The stochastic classifier keeps the deterministic conv trunk and output head
and replaces the hidden dense layer with a factorized-Gaussian weight
posterior sampled per call via Flipout: one shared perturbation matrix plus
per-example rank-one sign flips, so every batch row sees a pseudo-independent
weight draw at the cost of a single extra matmul.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .audio import AudioClip
from .corpus import SAMPLE_RATE, VOCAB, load_split
from .nn import (
    Adam,
    CLIP_SAMPLES,
    ClassifierModel,
    Conv1d,
    Dense,
    DivergenceError,
    EpochStats,
    ModelSpec,
    log_softmax,
    read_checkpoint,
    relu,
    relu_backward,
    save_checkpoint,
    softmax,
)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    """rho such that softplus(rho) = y."""
    return float(np.log(np.expm1(y)))


class VariationalDense:
    """Gaussian mean/scale parameters of a dense layer: sigma = softplus(rho)."""

    def __init__(self, mu_w, mu_b, rho_w, rho_b, prior_sigma: float = 1.0):
        self.mu_w, self.mu_b = mu_w, mu_b
        self.rho_w, self.rho_b = rho_w, rho_b
        self.prior_sigma = prior_sigma

    @classmethod
    def create(cls, n_in: int, n_out: int, mu_scale: float = 0.1, sigma_init: float = 0.05,
               prior_sigma: float = 1.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        return cls(
            mu_w=rng.standard_normal((n_in, n_out)) * mu_scale,
            mu_b=np.zeros(n_out),
            rho_w=np.full((n_in, n_out), softplus_inv(sigma_init)),
            rho_b=np.full(n_out, softplus_inv(sigma_init)),
            prior_sigma=prior_sigma,
        )

    @property
    def n_in(self) -> int:
        return self.mu_w.shape[0]

    @property
    def n_out(self) -> int:
        return self.mu_w.shape[1]

    def sigma_w(self) -> np.ndarray:
        return softplus(self.rho_w)

    def sigma_b(self) -> np.ndarray:
        return softplus(self.rho_b)


@dataclass
class FlipoutCache:
    """Values captured by a Flipout pass, enough to backprop through it."""

    inputs: np.ndarray
    eps_w: np.ndarray
    sign_in: np.ndarray
    sign_out: np.ndarray
    eps_b: np.ndarray
    sigma_w: np.ndarray
    sigma_b: np.ndarray
    sigma_scale: float


def flipout_forward(layer: VariationalDense, inputs: np.ndarray, seed,
                    sigma_scale: float = 1.0):
    """One Flipout pass over a batch; returns (pre-activations, cache).

    Draws a single shared weight perturbation sigma*eps and decorrelates it
    across batch rows with per-example +/-1 sign vectors; the bias draw is
    per-example.  Identical seed means identical output.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    batch = inputs.shape[0]
    eps_w = rng.standard_normal((layer.n_in, layer.n_out))
    sign_in = rng.integers(0, 2, size=(batch, layer.n_in)).astype(np.float64) * 2.0 - 1.0
    sign_out = rng.integers(0, 2, size=(batch, layer.n_out)).astype(np.float64) * 2.0 - 1.0
    eps_b = rng.standard_normal((batch, layer.n_out))
    sigma_w = layer.sigma_w() * sigma_scale
    sigma_b = layer.sigma_b() * sigma_scale
    delta_w = sigma_w * eps_w
    out = (
        inputs @ layer.mu_w
        + ((inputs * sign_in) @ delta_w) * sign_out
        + layer.mu_b
        + sigma_b * eps_b
    )
    cache = FlipoutCache(inputs, eps_w, sign_in, sign_out, eps_b, sigma_w, sigma_b, sigma_scale)
    return out, cache


def flipout_backward(layer: VariationalDense, d_out: np.ndarray, cache: FlipoutCache):
    """Gradients of a Flipout pass: (d_inputs, d_mu_w, d_mu_b, d_rho_w, d_rho_b)."""
    x, eps_w = cache.inputs, cache.eps_w
    delta_w = cache.sigma_w * eps_w
    d_mu_w = x.T @ d_out
    d_mu_b = d_out.sum(axis=0)
    d_delta = (x * cache.sign_in).T @ (d_out * cache.sign_out)
    d_sigma_w = d_delta * eps_w
    d_sigma_b = (d_out * cache.eps_b).sum(axis=0)
    # sigma = softplus(rho) * scale, so d rho = d sigma * scale * sigmoid(rho)
    d_rho_w = d_sigma_w * cache.sigma_scale * sigmoid(layer.rho_w)
    d_rho_b = d_sigma_b * cache.sigma_scale * sigmoid(layer.rho_b)
    d_inputs = d_out @ layer.mu_w.T + ((d_out * cache.sign_out) @ delta_w.T) * cache.sign_in
    return d_inputs, d_mu_w, d_mu_b, d_rho_w, d_rho_b


def kl_gaussian(layer: VariationalDense) -> float:
    """Closed-form KL(q || prior) summed over all weights and biases, >= 0."""
    total = 0.0
    for mu, sigma in ((layer.mu_w, layer.sigma_w()), (layer.mu_b, layer.sigma_b())):
        total += float(
            np.sum(
                np.log(layer.prior_sigma / sigma)
                + (sigma**2 + mu**2) / (2.0 * layer.prior_sigma**2)
                - 0.5
            )
        )
    return total


def kl_gradients(layer: VariationalDense):
    """(d_mu_w, d_mu_b, d_rho_w, d_rho_b) of kl_gaussian."""

    def one(mu, rho):
        sigma = softplus(rho)
        d_sigma = -1.0 / sigma + sigma / layer.prior_sigma**2
        return mu / layer.prior_sigma**2, d_sigma * sigmoid(rho)

    d_mu_w, d_rho_w = one(layer.mu_w, layer.rho_w)
    d_mu_b, d_rho_b = one(layer.mu_b, layer.rho_b)
    return d_mu_w, d_mu_b, d_rho_w, d_rho_b


# ---------------------------------------------------------------------------
# Stochastic classifier: deterministic trunk + variational hidden layer


class VariationalSlot:
    """Parameter-layout helper for a VariationalDense inside a flat vector."""

    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out
        self.size = 2 * (n_in * n_out + n_out)

    def views(self, flat: np.ndarray, offset: int):
        w = self.n_in * self.n_out
        mu_w = flat[offset : offset + w].reshape(self.n_in, self.n_out)
        mu_b = flat[offset + w : offset + w + self.n_out]
        rho_w = flat[offset + w + self.n_out : offset + 2 * w + self.n_out].reshape(
            self.n_in, self.n_out
        )
        rho_b = flat[offset + 2 * w + self.n_out : offset + self.size]
        return mu_w, mu_b, rho_w, rho_b


class BnnClassifier:
    """ClassifierModel trunk with one Flipout hidden layer and deterministic head.

    `sigma_scale` is an inference-time dispersion knob (1.0 during training);
    at 0 the model degenerates exactly to the mean network.
    """

    def __init__(self, spec: ModelSpec | None = None, seed: int = 0,
                 prior_sigma: float = 1.0, sigma_init: float = 0.05):
        self.spec = spec or ModelSpec()
        s = self.spec
        self.conv1 = Conv1d(s.n_mels, s.channels[0], s.kernel)
        self.conv2 = Conv1d(s.channels[0], s.channels[1], s.kernel)
        self.var_slot = VariationalSlot(s.channels[1], s.hidden)
        self.dense_out = Dense(s.hidden, s.n_classes)
        layout, offset = {}, 0
        for name, layer in (
            ("conv1", self.conv1),
            ("conv2", self.conv2),
            ("var", self.var_slot),
            ("dense_out", self.dense_out),
        ):
            layout[name] = (offset, layer.size)
            offset += layer.size
        self.layout = layout
        self.param_count = offset
        self.params = np.zeros(self.param_count)
        self.feat_mean = np.zeros(s.n_mels)
        self.feat_std = np.ones(s.n_mels)
        self.prior_sigma = prior_sigma
        self.sigma_scale = 1.0
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xB1A5,)))
        for name, layer in (("conv1", self.conv1), ("conv2", self.conv2)):
            w, b = layer.views(self.params, self.layout[name][0])
            layer.init(w, b, rng)
        mu_w, mu_b, rho_w, rho_b = self.var_slot.views(self.params, self.layout["var"][0])
        mu_w[...] = rng.standard_normal(mu_w.shape) * np.sqrt(2.0 / s.channels[1])
        mu_b[...] = 0.0
        rho_w[...] = softplus_inv(sigma_init)
        rho_b[...] = softplus_inv(sigma_init)
        w, b = self.dense_out.views(self.params, self.layout["dense_out"][0])
        self.dense_out.init_zero(w, b)

    # parameter plumbing shared with the deterministic model
    features = ClassifierModel.features
    set_feature_norm = ClassifierModel.set_feature_norm
    _trunk = ClassifierModel._trunk
    _trunk_backward = ClassifierModel._trunk_backward

    def grad_buffer(self) -> np.ndarray:
        return np.zeros(self.param_count)

    def var_layer(self) -> VariationalDense:
        mu_w, mu_b, rho_w, rho_b = self.var_slot.views(self.params, self.layout["var"][0])
        return VariationalDense(mu_w, mu_b, rho_w, rho_b, self.prior_sigma)

    @classmethod
    def from_deterministic(cls, model: ClassifierModel, prior_sigma: float = 1.0,
                           sigma_init: float = 0.05) -> "BnnClassifier":
        """Warm start: trunk/head copied, posterior means set to the trained weights."""
        bnn = cls(model.spec, prior_sigma=prior_sigma, sigma_init=sigma_init)
        for name in ("conv1", "conv2", "dense_out"):
            src_off, size = model.layout[name]
            dst_off, _ = bnn.layout[name]
            bnn.params[dst_off : dst_off + size] = model.params[src_off : src_off + size]
        wh, bh = model.dense_hidden.views(model.params, model.layout["dense_hidden"][0])
        mu_w, mu_b, rho_w, rho_b = bnn.var_slot.views(bnn.params, bnn.layout["var"][0])
        mu_w[...] = wh
        mu_b[...] = bh
        rho_w[...] = softplus_inv(sigma_init)
        rho_b[...] = softplus_inv(sigma_init)
        bnn.set_feature_norm(model.feat_mean, model.feat_std)
        return bnn

    def pooled_from_features(self, feats: np.ndarray) -> np.ndarray:
        pooled, _ = self._trunk(feats, self.params)
        return pooled

    def _head(self, act: np.ndarray) -> np.ndarray:
        wo, bo = self.dense_out.views(self.params, self.layout["dense_out"][0])
        return act @ wo + bo

    # -- deterministic (mean-weight) path ------------------------------------

    def mean_logits_from_features(self, feats: np.ndarray) -> np.ndarray:
        pooled = self.pooled_from_features(feats)
        layer = self.var_layer()
        act, _ = relu(pooled @ layer.mu_w + layer.mu_b)
        return self._head(act)

    def forward_batch(self, waves: np.ndarray) -> np.ndarray:
        """Posterior under the weight means; this is the black-box query surface."""
        return softmax(self.mean_logits_from_features(self.features(waves)))

    def forward(self, clip: AudioClip) -> np.ndarray:
        if clip.sample_rate != self.spec.sample_rate:
            raise ValueError(f"expected {self.spec.sample_rate} Hz input, got {clip.sample_rate}")
        if len(clip) != CLIP_SAMPLES:
            raise ValueError(f"expected {CLIP_SAMPLES}-sample clip, got {len(clip)}")
        return self.forward_batch(clip.samples[None, :])[0]

    # -- stochastic path ------------------------------------------------------

    def sample_probs_from_pooled(self, pooled: np.ndarray, seed):
        """One Flipout pass from trunk output; returns (probs, pre-activation hidden)."""
        layer = self.var_layer()
        hidden, _ = flipout_forward(layer, pooled, seed, self.sigma_scale)
        act, _ = relu(hidden)
        return softmax(self._head(act)), hidden


def mc_predict(model: BnnClassifier, wave: np.ndarray | AudioClip, T: int, seed: int):
    """T independent Flipout passes; returns (mean probabilities, hidden [T x H]).

    The trunk is deterministic so it runs once; each pass consumes its own
    seed derived from `seed`, and the mean is accumulated in pass order.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if isinstance(wave, AudioClip):
        wave = wave.samples
    pooled = model.pooled_from_features(model.features(np.asarray(wave)[None, :]))
    return _mc_from_pooled(model, pooled, T, seed)


def _mc_from_pooled(model: BnnClassifier, pooled: np.ndarray, T: int, seed: int):
    hidden = np.empty((T, model.spec.hidden))
    mean_probs = np.zeros(model.spec.n_classes)
    for t in range(T):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))
        probs, pre_act = model.sample_probs_from_pooled(pooled, rng)
        hidden[t] = pre_act[0]
        mean_probs += probs[0]
    return mean_probs / T, hidden


def mc_predict_batch(model: BnnClassifier, waves: np.ndarray, T: int, seeds):
    """mc_predict over many clips with one shared trunk batch; seeds is per clip."""
    pooled = model.pooled_from_features(model.features(waves))
    results = []
    for i in range(waves.shape[0]):
        results.append(_mc_from_pooled(model, pooled[i : i + 1], T, int(seeds[i])))
    return results


# ---------------------------------------------------------------------------
# ELBO training


def elbo_loss(model: BnnClassifier, feats: np.ndarray, labels: np.ndarray, seed,
              kl_weight: float):
    """Negative ELBO under one Flipout sample: mean NLL + kl_weight * KL.

    Exact gradients through the reparameterized draw; fixing the seed fixes
    the noise, so the loss is a deterministic function of the parameters.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty batch")
    if np.any(labels < 0) or np.any(labels >= model.spec.n_classes):
        raise ValueError("label out of range")
    grads = model.grad_buffer()
    pooled, trunk_caches = model._trunk(feats, model.params)
    layer = model.var_layer()
    hidden, fo_cache = flipout_forward(layer, pooled, seed, model.sigma_scale)
    act, rcache = relu(hidden)
    wo, bo = model.dense_out.views(model.params, model.layout["dense_out"][0])
    logits, ocache = model.dense_out.forward(act, wo, bo)
    logp = log_softmax(logits)
    n = labels.size
    nll = -float(np.mean(logp[np.arange(n), labels]))
    kl = kl_gaussian(layer)
    loss = nll + kl_weight * kl

    dlogits = softmax(logits)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    dwo, dbo = model.dense_out.views(grads, model.layout["dense_out"][0])
    dact = model.dense_out.backward(dlogits, ocache, wo, dwo, dbo)
    dhidden = relu_backward(dact, rcache)
    dpooled, d_mu_w, d_mu_b, d_rho_w, d_rho_b = flipout_backward(layer, dhidden, fo_cache)
    kl_mu_w, kl_mu_b, kl_rho_w, kl_rho_b = kl_gradients(layer)
    g_mu_w, g_mu_b, g_rho_w, g_rho_b = model.var_slot.views(grads, model.layout["var"][0])
    g_mu_w[...] = d_mu_w + kl_weight * kl_mu_w
    g_mu_b[...] = d_mu_b + kl_weight * kl_mu_b
    g_rho_w[...] = d_rho_w + kl_weight * kl_rho_w
    g_rho_b[...] = d_rho_b + kl_weight * kl_rho_b
    model._trunk_backward(dpooled, trunk_caches, model.params, grads)
    return loss, grads


@dataclass
class BnnTrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 5e-4
    seed: int = 0
    kl_weight: float | None = None  # None -> 1 / N_train


def train_bnn(model: BnnClassifier, manifest, config: BnnTrainConfig):
    """ELBO fine-tuning with a single Flipout sample per step."""
    train_waves, train_labels, _ = load_split(manifest, "train")
    dev_waves, dev_labels, _ = load_split(manifest, "dev")
    feats = model.features(train_waves)
    dev_feats = model.features(dev_waves)
    n = feats.shape[0]
    kl_weight = config.kl_weight if config.kl_weight is not None else 1.0 / n

    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0xE1B0,)))
    optimizer = Adam(model.param_count, lr=config.lr)
    curve = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            step_seed = np.random.SeedSequence(config.seed, spawn_key=(0x57E9, step))
            loss, grad = elbo_loss(
                model, feats[idx], train_labels[idx], np.random.default_rng(step_seed), kl_weight
            )
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite ELBO at epoch {epoch} step {step}")
            optimizer.step(model.params, grad)
            losses.append(loss)
            step += 1
        predictions = np.argmax(model.mean_logits_from_features(dev_feats), axis=1)
        curve.append(EpochStats(epoch, float(np.mean(losses)), float(np.mean(predictions == dev_labels))))
    return model, curve


def save_bnn(model: BnnClassifier, path):
    save_checkpoint(model, path, kind="bnn", extras={"prior_sigma": model.prior_sigma})


def load_bnn(path) -> BnnClassifier:
    header, params = read_checkpoint(path)
    if header["kind"] != "bnn":
        raise ValueError(f"checkpoint kind {header['kind']!r} is not a bnn")
    spec = ModelSpec(
        n_mels=header["n_mels"],
        channels=tuple(header["channels"]),
        kernel=header["kernel"],
        hidden=header["hidden"],
        n_classes=header["n_classes"],
        sample_rate=header["sample_rate"],
    )
    model = BnnClassifier(spec, prior_sigma=header.get("prior_sigma", 1.0))
    model.params[...] = params
    model.set_feature_norm(np.array(header["feat_mean"]), np.array(header["feat_std"]))
    return model
