"""Small CNN WSI classifier and Grad-CAM++ saliency extraction.

The network is three conv blocks (conv -> batch norm -> relu -> avg pool)
followed by a final batch norm, global average pooling, dropout, and one
linear layer to two logits. The final batch-norm output is the hook tensor:
the feature maps F^q whose gradients drive the saliency map. The hook is the
very tensor consumed by the pooling path, not a copy, so its gradient is the
one the classifier actually sees.

Grad-CAM++ here uses the exponential-score convention: with S the raw target
logit and g = dS/dF, the pixel coefficients are

    w = g^2 / (2 g^2 + (sum F) g^3),   0/0 -> 0

and the channel weight is lambda_q = exp(S) * sum(w * max(g, 0)). Since the
head after the hook is linear in F (GAP, inference dropout, linear), the
closed form is exact, and exp(S) cancels when the map is max-normalized.
The saliency map is ReLU(sum_q lambda_q F^q), bilinearly upsampled to the
padded WSI size and divided by its max (when positive) to land in [0, 1].

The target class at inference defaults to the model's own predicted class;
the map's class is recorded alongside the values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autograd as ag
from . import optim
from .autograd import GradTape, RunningStats, Tensor
from .exceptions import ConfigError, EmptyInputError, NotRecordingError
from .image_io import load_gray16, save_gray16
from .interpolate import bilinear_resize
from .tiling import padded_dims
from .validation import check_binary_labels, check_fitted
from .weights_io import load_weights, save_weights


@dataclass(frozen=True)
class CnnConfig:
    input_size: int = 224
    channels: tuple = (8, 16, 32)
    kernel: int = 3
    strides: tuple = (2, 1, 1)
    pool: int = 2
    bn_momentum: float = 0.1
    classes: int = 2

    def __post_init__(self):
        if len(self.channels) != 3 or len(self.strides) != 3:
            raise ConfigError(
                f"expected 3 conv blocks, got channels={self.channels} "
                f"strides={self.strides}"
            )
        if self.input_size < self.kernel:
            raise ConfigError(f"input_size {self.input_size} below kernel {self.kernel}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")

    def to_text(self):
        lines = [
            f"input_size={self.input_size}",
            "channels=" + ",".join(str(c) for c in self.channels),
            f"kernel={self.kernel}",
            "strides=" + ",".join(str(s) for s in self.strides),
            f"pool={self.pool}",
            f"bn_momentum={self.bn_momentum}",
            f"classes={self.classes}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key in ("channels", "strides"):
                kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key == "bn_momentum":
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def desk_cnn_config():
    """Small input size shared by the test suite and the synthetic runs."""
    return CnnConfig(input_size=64)


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_cnn(config, seed=0):
    """Seeded parameters and running stats; He-normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    k = config.kernel
    params = {}
    stats = {}
    c_in = 3
    for i, c_out in enumerate(config.channels, start=1):
        params[f"conv{i}.k"] = Tensor(
            he_normal(rng, (c_out, c_in, k, k), fan_in=c_in * k * k), requires_grad=True
        )
        params[f"bn{i}.gamma"] = Tensor(np.ones(c_out), requires_grad=True)
        params[f"bn{i}.beta"] = Tensor(np.zeros(c_out), requires_grad=True)
        stats[f"bn{i}"] = RunningStats(c_out, momentum=config.bn_momentum)
        c_in = c_out
    q = config.channels[-1]
    params["bn4.gamma"] = Tensor(np.ones(q), requires_grad=True)
    params["bn4.beta"] = Tensor(np.zeros(q), requires_grad=True)
    stats["bn4"] = RunningStats(q, momentum=config.bn_momentum)
    params["head.w"] = Tensor(he_normal(rng, (q, config.classes), fan_in=q), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(config.classes), requires_grad=True)
    return params, stats


def forward_cnn(x, params, stats, config, training, dropout_rate=0.0, dropout_rng=None):
    """Logits and the hooked feature tensor for a (B, 3, H, W) batch.

    Returns (logits, hook). ``hook`` is the final batch-norm output consumed
    by the classifier path; recording a tape around this call makes
    hook.grad available after backward.
    """
    h = Tensor(np.asarray(x, dtype=np.float64)) if not isinstance(x, Tensor) else x
    for i in range(1, 4):
        h = ag.conv2d(h, params[f"conv{i}.k"], stride=config.strides[i - 1], padding=config.kernel // 2)
        h = ag.batch_norm2d(h, params[f"bn{i}.gamma"], params[f"bn{i}.beta"], stats[f"bn{i}"], training)
        h = ag.relu(h)
        h = ag.avg_pool2d(h, config.pool)
    hook = ag.batch_norm2d(h, params["bn4.gamma"], params["bn4.beta"], stats["bn4"], training)
    pooled = ag.global_avg_pool(hook)
    if training and dropout_rate > 0.0:
        pooled = ag.dropout(pooled, dropout_rate, dropout_rng, training=True)
    logits = ag.add(ag.matmul(pooled, params["head.w"]), params["head.b"])
    return logits, hook


def gradcampp_channel_weights(score, fmaps, grads):
    """Closed-form Grad-CAM++ channel weights lambda_q.

    ``score`` is the raw target logit S; ``fmaps``/``grads`` are (Q, Hf, Wf)
    arrays of feature values F and gradients g = dS/dF. Coefficients follow
    w = g^2 / (2 g^2 + (sum F) g^3) with 0/0 -> 0, and
    lambda_q = exp(S) * sum_ab(w_ab * max(g_ab, 0)).
    """
    fmaps = np.asarray(fmaps, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if fmaps.shape != grads.shape or fmaps.ndim != 3:
        raise ValueError(
            f"feature maps {fmaps.shape} and gradients {grads.shape} must be "
            "matching (Q, Hf, Wf) arrays"
        )
    g2 = grads * grads
    fsum = fmaps.sum(axis=(1, 2), keepdims=True)
    denom = 2.0 * g2 + fsum * g2 * grads
    w = np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0.0)
    return float(np.exp(score)) * (w * np.maximum(grads, 0.0)).sum(axis=(1, 2))


def build_raw_map(lams, fmaps):
    """ReLU over the lambda-weighted channel sum."""
    return np.maximum(np.tensordot(lams, fmaps, axes=(0, 0)), 0.0)


def normalize_map(values):
    """Divide by the max when positive; all-zero maps stay all-zero."""
    peak = float(values.max()) if values.size else 0.0
    return values / peak if peak > 0.0 else values.copy()


@dataclass
class SaliencyMap:
    """Normalized WSI saliency; values in [0, 1] at the padded WSI size."""

    wsi_id: str
    target_class: int
    values: np.ndarray = field(repr=False)
    raw_max: float = 0.0


def save_saliency(path_prefix, smap):
    """16-bit grayscale PNG plus a JSON sidecar with the raw pre-norm max."""
    save_gray16(f"{path_prefix}.png", smap.values)
    with open(f"{path_prefix}.json", "w") as f:
        json.dump(
            {
                "wsi_id": smap.wsi_id,
                "target_class": int(smap.target_class),
                "raw_max": smap.raw_max,
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")


def load_saliency(path_prefix):
    values = load_gray16(f"{path_prefix}.png")
    with open(f"{path_prefix}.json") as f:
        meta = json.load(f)
    return SaliencyMap(
        wsi_id=meta["wsi_id"],
        target_class=meta["target_class"],
        values=values,
        raw_max=meta["raw_max"],
    )


def _to_batch(images, size):
    """Resize (H, W, 3) images to the model input and stack channels-first."""
    out = np.empty((len(images), 3, size, size))
    for i, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ValueError(f"image {i} must be (H, W, 3), got {img.shape}")
        if img.shape[:2] != (size, size):
            img = bilinear_resize(img, size, size)
        out[i] = img.transpose(2, 0, 1)
    return out


class CnnWsiClassifier(BaseEstimator, ClassifierMixin):
    """Whole-WSI classifier trained with Adam; Grad-CAM++ saliency extractor.

    Images of any size are bilinearly resized to the configured input size.
    fit returns the parameter/statistics snapshot with the best validation
    accuracy (training accuracy when no validation set is given).
    """

    def __init__(self, config=None, epochs=30, batch_size=8, lr=1e-4, dropout=0.40, seed=0):
        self.config = config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.dropout = dropout
        self.seed = seed

    def _resolved_config(self):
        return self.config if self.config is not None else CnnConfig()

    def fit(self, X, y, X_val=None, y_val=None):
        if len(X) == 0:
            raise EmptyInputError("cannot fit on an empty train set")
        if (X_val is None) != (y_val is None):
            raise ValueError("X_val and y_val must be supplied together")
        config = self._resolved_config()
        y = check_binary_labels(y, len(X))
        batch_all = _to_batch(X, config.input_size)
        val_batch = None
        if X_val is not None and len(X_val) > 0:
            val_batch = _to_batch(X_val, config.input_size)
            y_val = check_binary_labels(y_val, len(val_batch))
        rng = np.random.default_rng(self.seed)
        dropout_rng = np.random.default_rng(rng.integers(1 << 63))
        params, stats = init_cnn(config, seed=self.seed)
        adam = optim.Adam(params, lr=self.lr)
        best = (-1.0, None, None)
        history = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(batch_all))
            epoch_loss = 0.0
            for start in range(0, len(batch_all), self.batch_size):
                batch = order[start : start + self.batch_size]
                with GradTape() as tape:
                    logits, _ = forward_cnn(
                        batch_all[batch],
                        params,
                        stats,
                        config,
                        training=True,
                        dropout_rate=self.dropout,
                        dropout_rng=dropout_rng,
                    )
                    loss = ag.cross_entropy_loss(logits, y[batch])
                    tape.backward(loss)
                adam.step()
                optim.zero_grads(params)
                epoch_loss += float(loss.data) * len(batch)
            if val_batch is not None:
                score = float(np.mean(self._predict_batch(val_batch, params, stats, config) == y_val))
            else:
                score = float(np.mean(self._predict_batch(batch_all, params, stats, config) == y))
            history.append({"epoch": epoch, "loss": epoch_loss / len(batch_all), "val_accuracy": score})
            if score > best[0]:
                best = (
                    score,
                    {n: t.data.copy() for n, t in params.items()},
                    {n: s.copy() for n, s in stats.items()},
                )
        self.params_ = {n: Tensor(v, requires_grad=True) for n, v in best[1].items()}
        self.stats_ = best[2]
        self.config_ = config
        self.classes_ = np.array([0, 1])
        self.history_ = history
        self.best_val_accuracy_ = best[0]
        return self

    def _predict_batch(self, batch, params, stats, config):
        with ag.no_grad():
            logits, _ = forward_cnn(batch, params, stats, config, training=False)
        return np.argmax(logits.data, axis=1)

    def predict(self, X):
        check_fitted(self, "params_")
        batch = _to_batch(X, self.config_.input_size)
        return self._predict_batch(batch, self.params_, self.stats_, self.config_)

    def predict_logits(self, X):
        check_fitted(self, "params_")
        batch = _to_batch(X, self.config_.input_size)
        with ag.no_grad():
            logits, _ = forward_cnn(batch, self.params_, self.stats_, self.config_, training=False)
        return logits.data

    def saliency_map(self, image, wsi_id="", target_class=None, out_shape=None):
        """Grad-CAM++ map for one WSI image, upsampled to the padded WSI size.

        ``target_class`` defaults to the model's own prediction for the image.
        ``out_shape`` overrides the output size (defaults to the image's
        dimensions padded up to whole patches).
        """
        check_fitted(self, "params_")
        image = np.asarray(image, dtype=np.float64)
        if out_shape is None:
            out_shape = padded_dims(image.shape[0], image.shape[1])
        batch = _to_batch([image], self.config_.input_size)
        with GradTape() as tape:
            logits, hook = forward_cnn(batch, self.params_, self.stats_, self.config_, training=False)
            if target_class is None:
                target_class = int(np.argmax(logits.data[0]))
            score = ag.index(logits, (0, int(target_class)))
            tape.backward(score)
        if hook.grad is None:
            raise NotRecordingError(
                "feature-map gradients missing; run the forward pass inside a "
                "recording tape and call backward first"
            )
        fmaps = hook.data[0]
        grads = hook.grad[0]
        lams = gradcampp_channel_weights(float(score.data), fmaps, grads)
        optim.zero_grads(self.params_)
        raw = build_raw_map(lams, fmaps)
        upsampled = bilinear_resize(raw, out_shape[0], out_shape[1])
        return SaliencyMap(
            wsi_id=wsi_id,
            target_class=int(target_class),
            values=normalize_map(upsampled),
            raw_max=float(raw.max()),
        )

    def save(self, path):
        check_fitted(self, "params_")
        payload = {name: t.data for name, t in self.params_.items()}
        for name, s in self.stats_.items():
            payload[f"{name}.running_mean"] = s.mean
            payload[f"{name}.running_var"] = s.var
            payload[f"{name}.initialized"] = np.array(float(s.initialized))
        save_weights(path, payload)
        with open(str(path) + ".cfg", "w") as f:
            f.write(self.config_.to_text())

    @classmethod
    def load(cls, path):
        arrays = load_weights(path)
        with open(str(path) + ".cfg") as f:
            config = CnnConfig.from_text(f.read())
        est = cls(config=config)
        est.config_ = config
        est.params_ = {}
        est.stats_ = {}
        for name, value in arrays.items():
            if ".running_mean" in name:
                bn = name.split(".running_mean")[0]
                est.stats_.setdefault(bn, RunningStats(len(value), config.bn_momentum))
                est.stats_[bn].mean = value
            elif ".running_var" in name:
                bn = name.split(".running_var")[0]
                est.stats_.setdefault(bn, RunningStats(len(value), config.bn_momentum))
                est.stats_[bn].var = value
            elif ".initialized" in name:
                bn = name.split(".initialized")[0]
                est.stats_.setdefault(bn, RunningStats(1, config.bn_momentum))
                est.stats_[bn].initialized = bool(value)
            else:
                est.params_[name] = Tensor(value, requires_grad=True)
        est.classes_ = np.array([0, 1])
        return est
