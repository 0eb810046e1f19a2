"""Vision transformer for patch-level benign/malignant classification.

An input patch is cut into P x P sub-patches, each flattened and linearly
projected to the embed dimension. A learnable class token is prepended and a
trainable positional embedding added. Encoder layers are pre-norm:

    z' = MSA(LN(z)) + z
    z  = MLP(LN(z')) + z'

and the head is a single linear layer on the layer-normalized final class
token. Argmax ties break to the lower class index.

The default configuration is the ViT-B/16 shape; training tests run the
desk-scale config (32/8/64, depth 4) since no pretrained weights exist here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autograd as ag
from . import optim
from .autograd import GradTape, Tensor
from .exceptions import ConfigError, EmptyInputError
from .validation import check_binary_labels, check_fitted, check_rgb_stack
from .weights_io import load_weights, save_weights


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 224
    sub_patch: int = 16
    channels: int = 3
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_hidden: int = 3072
    classes: int = 2

    def __post_init__(self):
        if self.image_size % self.sub_patch != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by "
                f"sub_patch {self.sub_patch}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        for name in ("image_size", "sub_patch", "channels", "embed_dim", "depth", "heads", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")

    @property
    def grid(self):
        return self.image_size // self.sub_patch

    @property
    def n_tokens(self):
        """N = H*W/P^2, the sub-patch count (sequence adds one class token)."""
        return self.grid * self.grid

    @property
    def token_dim(self):
        return self.sub_patch * self.sub_patch * self.channels

    def to_text(self):
        return "".join(
            f"{k}={getattr(self, k)}\n"
            for k in (
                "image_size",
                "sub_patch",
                "channels",
                "embed_dim",
                "depth",
                "heads",
                "mlp_hidden",
                "classes",
            )
        )

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kwargs[key.strip()] = int(value)
        return cls(**kwargs)


def desk_config():
    """Small config used throughout the test suite and the synthetic runs."""
    return VitConfig(
        image_size=32, sub_patch=8, embed_dim=64, depth=4, heads=4, mlp_hidden=128
    )


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) with resampling outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_params(config, seed=0):
    """Seeded parameter dict; weights trunc-normal, biases/class token zero."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    params = {
        "embed.proj": trunc_normal(rng, (config.token_dim, d)),
        "embed.cls": np.zeros((1, d)),
        "embed.pos": trunc_normal(rng, (config.n_tokens + 1, d)),
    }
    for i in range(config.depth):
        p = f"enc{i}"
        params[f"{p}.ln1.gamma"] = np.ones(d)
        params[f"{p}.ln1.beta"] = np.zeros(d)
        for mat in ("wq", "wk", "wv", "wo"):
            params[f"{p}.{mat}"] = trunc_normal(rng, (d, d))
        for vec in ("bq", "bk", "bv", "bo"):
            params[f"{p}.{vec}"] = np.zeros(d)
        params[f"{p}.ln2.gamma"] = np.ones(d)
        params[f"{p}.ln2.beta"] = np.zeros(d)
        params[f"{p}.mlp.w1"] = trunc_normal(rng, (d, config.mlp_hidden))
        params[f"{p}.mlp.b1"] = np.zeros(config.mlp_hidden)
        params[f"{p}.mlp.w2"] = trunc_normal(rng, (config.mlp_hidden, d))
        params[f"{p}.mlp.b2"] = np.zeros(d)
    params["head.ln.gamma"] = np.ones(d)
    params["head.ln.beta"] = np.zeros(d)
    params["head.w"] = trunc_normal(rng, (d, config.classes))
    params["head.b"] = np.zeros(config.classes)
    return {name: Tensor(value, requires_grad=True) for name, value in params.items()}


def sub_patch_tokens(x, sub_patch):
    """(B, H, W, C) -> (B, N, P*P*C): row-major grid of flattened sub-patches."""
    b, h, w, c = x.shape
    g = h // sub_patch
    gw = w // sub_patch
    x = x.reshape(b, g, sub_patch, gw, sub_patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * gw, sub_patch * sub_patch * c)


def embed(x, params, config):
    """Project sub-patch tokens, prepend the class token, add positions."""
    b, h, w, c = x.shape
    if (h, w, c) != (config.image_size, config.image_size, config.channels):
        raise ConfigError(
            f"input {x.shape[1:]} does not match config "
            f"({config.image_size}, {config.image_size}, {config.channels})"
        )
    tokens = Tensor(sub_patch_tokens(np.asarray(x, dtype=np.float64), config.sub_patch))
    projected = ag.matmul(tokens, params["embed.proj"])  # (B, N, D)
    cls = ag.broadcast_to(
        ag.reshape(params["embed.cls"], (1, 1, config.embed_dim)),
        (b, 1, config.embed_dim),
    )
    z = ag.concat([cls, projected], axis=1)  # (B, N+1, D)
    return ag.add(z, params["embed.pos"])


def attention(z, params, prefix, heads, collect=None):
    """Multi-head scaled dot-product self-attention over (B, T, D)."""
    b, t, d = z.data.shape
    dh = d // heads

    def _project(mat, vec):
        return ag.add(ag.matmul(z, params[f"{prefix}.{mat}"]), params[f"{prefix}.{vec}"])

    def _split(x):
        return ag.transpose(ag.reshape(x, (b, t, heads, dh)), (0, 2, 1, 3))

    q = _split(_project("wq", "bq"))  # (B, h, T, dh)
    k = _split(_project("wk", "bk"))
    v = _split(_project("wv", "bv"))
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    att = ag.softmax(scores, axis=-1)  # row-stochastic (B, h, T, T)
    if collect is not None:
        collect.append(att.data.copy())
    mixed = ag.matmul(att, v)  # (B, h, T, dh)
    merged = ag.reshape(ag.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
    return ag.add(ag.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def encoder_layer(z, params, index, config, collect=None):
    """Pre-norm block: z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'."""
    p = f"enc{index}"
    normed = ag.layer_norm(z, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"])
    zp = ag.add(attention(normed, params, p, config.heads, collect), z)
    normed2 = ag.layer_norm(zp, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"])
    hidden = ag.gelu(ag.add(ag.matmul(normed2, params[f"{p}.mlp.w1"]), params[f"{p}.mlp.b1"]))
    mlp_out = ag.add(ag.matmul(hidden, params[f"{p}.mlp.w2"]), params[f"{p}.mlp.b2"])
    return ag.add(mlp_out, zp)


def forward(x, params, config, collect_attention=None):
    """Batched logits (B, classes) for (B, H, W, C) inputs."""
    z = embed(x, params, config)
    for i in range(config.depth):
        z = encoder_layer(z, params, i, config, collect_attention)
    cls_token = ag.index(z, (slice(None), 0))  # (B, D)
    normed = ag.layer_norm(cls_token, params["head.ln.gamma"], params["head.ln.beta"])
    return ag.add(ag.matmul(normed, params["head.w"]), params["head.b"])


def classify_patch(patch_input, params, config):
    """Logits and argmax label for one (H, W, C) patch; ties go to class 0."""
    if params is None:
        raise ValueError("classify_patch requires initialized parameters")
    with ag.no_grad():
        logits = forward(np.asarray(patch_input)[None], params, config).data[0]
    return logits, int(np.argmax(logits))


def save_vit(path, params, config):
    save_weights(path, {name: t.data for name, t in params.items()})
    with open(str(path) + ".cfg", "w") as f:
        f.write(config.to_text())


def load_vit(path):
    arrays = load_weights(path)
    with open(str(path) + ".cfg") as f:
        config = VitConfig.from_text(f.read())
    params = {name: Tensor(value, requires_grad=True) for name, value in arrays.items()}
    return params, config


class VitPatchClassifier(BaseEstimator, ClassifierMixin):
    """Patch classifier trained with SGD under a cosine learning-rate schedule.

    fit keeps the parameter snapshot with the best validation accuracy
    (training accuracy when no validation split is supplied). All randomness
    comes from ``seed``.
    """

    def __init__(
        self,
        config=None,
        epochs=20,
        batch_size=16,
        lr=3e-4,
        momentum=0.9,
        seed=0,
        eval_batch_size=64,
    ):
        self.config = config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.seed = seed
        self.eval_batch_size = eval_batch_size

    def _resolved_config(self):
        return self.config if self.config is not None else desk_config()

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_rgb_stack(X)
        y = check_binary_labels(y, len(X))
        if len(X) == 0:
            raise EmptyInputError("cannot fit on an empty train set")
        if (X_val is None) != (y_val is None):
            raise ValueError("X_val and y_val must be supplied together")
        config = self._resolved_config()
        rng = np.random.default_rng(self.seed)
        params = init_params(config, seed=self.seed)
        sgd = optim.Sgd(params, momentum=self.momentum)
        steps_per_epoch = max(1, -(-len(X) // self.batch_size))
        total_steps = self.epochs * steps_per_epoch
        best = (-1.0, None)
        history = []
        step = 0
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            epoch_loss = 0.0
            for start in range(0, len(X), self.batch_size):
                batch = order[start : start + self.batch_size]
                lr_t = optim.cosine_lr(self.lr, step, total_steps)
                with GradTape() as tape:
                    logits = forward(X[batch], params, config)
                    loss = ag.cross_entropy_loss(logits, y[batch])
                    tape.backward(loss)
                sgd.step(lr_t)
                optim.zero_grads(params)
                epoch_loss += float(loss.data) * len(batch)
                step += 1
            if X_val is not None and len(X_val) > 0:
                score = float(np.mean(self._predict_with(X_val, params, config) == y_val))
            else:
                score = float(np.mean(self._predict_with(X, params, config) == y))
            history.append({"epoch": epoch, "loss": epoch_loss / len(X), "val_accuracy": score})
            if score > best[0]:
                best = (score, {n: t.data.copy() for n, t in params.items()})
        self.params_ = {
            name: Tensor(value, requires_grad=True) for name, value in best[1].items()
        }
        self.config_ = config
        self.classes_ = np.array([0, 1])
        self.history_ = history
        self.best_val_accuracy_ = best[0]
        return self

    def _predict_with(self, X, params, config):
        X = check_rgb_stack(X)
        out = np.empty(len(X), dtype=np.int64)
        with ag.no_grad():
            for start in range(0, len(X), self.eval_batch_size):
                stop = start + self.eval_batch_size
                logits = forward(X[start:stop], params, config).data
                out[start:stop] = np.argmax(logits, axis=1)
        return out

    def predict(self, X):
        check_fitted(self, "params_")
        return self._predict_with(X, self.params_, self.config_)

    def predict_logits(self, X):
        check_fitted(self, "params_")
        X = check_rgb_stack(X)
        rows = []
        with ag.no_grad():
            for start in range(0, len(X), self.eval_batch_size):
                rows.append(forward(X[start : start + self.eval_batch_size], self.params_, self.config_).data)
        return np.concatenate(rows, axis=0)

    def save(self, path):
        check_fitted(self, "params_")
        save_vit(path, self.params_, self.config_)

    @classmethod
    def load(cls, path):
        params, config = load_vit(path)
        est = cls(config=config)
        est.params_ = params
        est.config_ = config
        est.classes_ = np.array([0, 1])
        return est
