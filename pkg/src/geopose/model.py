"""Small multi-task flow regressor with hand-written backpropagation.

A shared convolutional trunk (tanh activations, zero "same" padding) feeds
three heads:

* orientation: a tanh convolution (``orient_kernel`` wide) of the head input
  yields paired evidence maps ``e_k`` and ``r_k``. Each ``r_k`` is
  Gaussian-blurred (``orient_blur`` pixels) and differentiated by central
  differences; the valid-pixel mean of ``e_k * grad(blur(r_k))`` gives one
  2-vector per pair, and a linear map of these gives two outputs, supervised
  as raw ``(sin, cos)``. The pooled vectors turn with the image, so the head can
  tell directions apart without having to discover direction-selective
  filters. The blur lets a facade vote with its area rather than its outline;
* height: 1x1 convolution, scaled by ``height_scale`` meters;
* magnitude: 1x1 convolution over the head input, scaled by
  ``magnitude_scale`` pixels.

The head input is the trunk features, plus the predicted height when the
variant has a height head. That channel is ``max(h / height_scale - g, 0)``
with a learned gate ``g`` (``height.gate.b``, zero at init), so small height
predictions on open ground need not leak into the magnitude. Both the
orientation and magnitude heads read it, and their gradients reach the height
head wherever the clamp is inactive.

Variants without the height head drop the height output, its parameters and
its loss term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .flow import DegenerateFlowError, FlowField, flip_sample, rotate_sample, unit

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.parameter = name


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; ``params`` holds the last finite state."""

    def __init__(self, step: int, params: dict):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.params = params


@dataclass(frozen=True)
class VariantConfig:
    with_height_head: bool = True
    with_rotation_aug: bool = True

    @property
    def name(self) -> str:
        return "flow" + ("-" if self.with_height_head or self.with_rotation_aug else "") + (
            ("h" if self.with_height_head else "") + ("a" if self.with_rotation_aug else "")
        )

    @classmethod
    def from_name(cls, name: str) -> "VariantConfig":
        for v in VARIANTS:
            if v.name == name:
                return v
        raise ValueError(f"unknown variant {name!r}; expected one of {[v.name for v in VARIANTS]}")


VARIANTS = (
    VariantConfig(False, False),
    VariantConfig(True, False),
    VariantConfig(False, True),
    VariantConfig(True, True),
)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    kernels: tuple[int, ...] = (5, 3, 3)
    orient_channels: int = 8
    orient_kernel: int = 1
    orient_scale: float = 1000.0
    orient_blur: float = 8.0
    height_scale: float = 10.0
    magnitude_scale: float = 10.0

    def validate(self) -> None:
        if self.channels < 1 or not self.kernels or self.orient_channels < 1:
            raise ValueError("need at least one channel and one trunk layer")
        if any(k < 1 or k % 2 == 0 for k in self.kernels + (self.orient_kernel,)):
            raise ValueError(f"kernels must be odd and positive, got {self.kernels}, {self.orient_kernel}")
        if self.height_scale <= 0 or self.magnitude_scale <= 0 or self.orient_scale <= 0:
            raise ValueError("output scales must be positive")
        if self.orient_blur < 0:
            raise ValueError("orient_blur must be non-negative")

    @property
    def receptive_field(self) -> int:
        return 1 + sum(k - 1 for k in self.kernels)


@dataclass
class Model:
    config: ModelConfig
    variant: VariantConfig
    params: dict[str, np.ndarray]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def param_shapes(config: ModelConfig, variant: VariantConfig) -> dict[str, tuple[int, ...]]:
    c = config.channels
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, k in enumerate(config.kernels):
        shapes[f"trunk.{i}.w"] = (c, c_in * k * k)
        shapes[f"trunk.{i}.b"] = (c,)
        c_in = c
    c_head = c + (1 if variant.with_height_head else 0)
    shapes["orient.conv.w"] = (2 * config.orient_channels, c_head * config.orient_kernel**2)
    shapes["orient.conv.b"] = (2 * config.orient_channels,)
    shapes["orient.w"] = (2, 2 * config.orient_channels)
    shapes["orient.b"] = (2,)
    if variant.with_height_head:
        shapes["height.w"] = (c,)
        shapes["height.b"] = (1,)
        shapes["height.gate.b"] = (1,)
    shapes["mag.w"] = (c_head,)
    shapes["mag.b"] = (1,)
    return shapes


def init_model(config: ModelConfig, variant: VariantConfig, seed: int) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, variant).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[-1]
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
    return Model(config, variant, params)


# ----------------------------------------------------------------------------
# Forward / backward
# ----------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (C*k*k, H*W) patches with zero padding."""
    c, h, w = x.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    r = k // 2
    cols = cols.reshape(c, k, k, h, w)
    out = np.zeros((c, h + 2 * r, w + 2 * r))
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + h, dx:dx + w] += cols[:, dy, dx]
    return out[:, r:r + h, r:r + w]


def _grad(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of (C, H, W) maps along x and y, zero outside."""
    p = np.pad(a, ((0, 0), (1, 1), (1, 1)))
    return 0.5 * (p[:, 1:-1, 2:] - p[:, 1:-1, :-2]), 0.5 * (p[:, 2:, 1:-1] - p[:, :-2, 1:-1])


def _gaussian(sigma: float) -> np.ndarray:
    r = int(math.ceil(3.0 * sigma))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return k / k.sum()


def _blur(a: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of (C, H, W) maps with zero padding.

    The kernel is symmetric and the padding is zero, so the operator is
    self-adjoint and backward reuses it unchanged.
    """
    if sigma == 0:
        return a
    k = _gaussian(sigma)
    r = k.size // 2
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        win = sliding_window_view(np.pad(a, pad), k.size, axis=axis)
        a = win @ k
    return a


@dataclass
class Prediction:
    orientation: np.ndarray          # raw (2,)
    height: np.ndarray | None        # raw (H, W) meters
    magnitude: np.ndarray            # raw (H, W) pixels
    cache: dict = field(default_factory=dict, repr=False)

    def unit_orientation(self) -> tuple[float, float] | None:
        """Renormalized orientation, or None when the raw output is degenerate."""
        try:
            return unit(self.orientation)
        except DegenerateFlowError:
            return None

    def flow(self) -> FlowField:
        o = self.unit_orientation()
        if o is None:
            raise DegenerateFlowError("predicted orientation is degenerate")
        return FlowField(o, np.maximum(self.magnitude, 0.0))

    def reported_height(self) -> np.ndarray | None:
        return None if self.height is None else np.maximum(self.height, 0.0)


def forward(model: Model, intensity: np.ndarray, valid: np.ndarray | None = None) -> Prediction:
    cfg, p = model.config, model.params
    x = np.asarray(intensity, dtype=np.float64)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise ValueError("intensity must be a finite 2-D raster")
    h, w = x.shape
    if min(h, w) < cfg.receptive_field:
        raise ValueError(f"raster {x.shape} smaller than the receptive field {cfg.receptive_field}")
    m = np.ones((h, w), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if m.shape != x.shape:
        raise ValueError(f"valid mask shape {m.shape} does not match {x.shape}")
    n_valid = int(m.sum())
    if n_valid == 0:
        raise ValueError("forward needs at least one valid pixel")

    a = (x - 0.5)[None]
    cols_list, acts = [], []
    for i, k in enumerate(cfg.kernels):
        cols = _im2col(a, k)
        a = np.tanh(p[f"trunk.{i}.w"] @ cols + p[f"trunk.{i}.b"][:, None]).reshape(-1, h, w)
        cols_list.append(cols)
        acts.append(a)
    feats = a.reshape(cfg.channels, h * w)
    mflat = m.ravel()
    height = None
    head_in = feats
    if model.variant.with_height_head:
        hraw = p["height.w"] @ feats + p["height.b"][0]
        height = cfg.height_scale * hraw
        head_in = np.vstack([feats, np.maximum(hraw - p["height.gate.b"][0], 0.0)[None]])
    n_in = head_in.shape[0]
    ocols = _im2col(head_in.reshape(n_in, h, w), cfg.orient_kernel)
    oact = np.tanh(p["orient.conv.w"] @ ocols + p["orient.conv.b"][:, None])
    ev, rv = oact[: cfg.orient_channels], oact[cfg.orient_channels:]
    rx, ry = _grad(_blur(rv.reshape(-1, h, w), cfg.orient_blur))
    weighted = np.where(mflat, ev, 0.0) / n_valid
    pooled = np.concatenate([(weighted * rx.reshape(-1, h * w)).sum(axis=1),
                             (weighted * ry.reshape(-1, h * w)).sum(axis=1)])
    orient = cfg.orient_scale * (p["orient.w"] @ pooled) + p["orient.b"]
    mag = cfg.magnitude_scale * (p["mag.w"] @ head_in + p["mag.b"][0])
    cache = {"cols": cols_list, "acts": acts, "feats": feats, "pooled": pooled,
             "ocols": ocols, "oact": oact, "rgrad": (rx, ry), "weighted": weighted,
             "mask": mflat, "n_valid": n_valid, "head_in": head_in, "shape": (h, w)}
    return Prediction(orient, None if height is None else height.reshape(h, w), mag.reshape(h, w), cache)


@dataclass(frozen=True)
class Target:
    orientation: tuple[float, float]
    height: np.ndarray
    magnitude: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_sample(cls, sample) -> "Target":
        return cls(sample.flow.orientation, sample.agl, sample.flow.magnitude, sample.valid)


def loss_terms(pred: Prediction, target: Target, with_height: bool) -> dict[str, float]:
    """Per-head MSE terms and their sum. Dense terms average over valid pixels."""
    m = np.asarray(target.valid, dtype=bool)
    if not m.any():
        raise ValueError("loss over an empty valid mask")
    o = np.asarray(target.orientation, dtype=np.float64)
    terms = {"orientation": float(np.mean((pred.orientation - o) ** 2))}
    if with_height:
        terms["height"] = float(np.mean((pred.height - target.height)[m] ** 2))
    terms["magnitude"] = float(np.mean((pred.magnitude - target.magnitude)[m] ** 2))
    terms["total"] = float(sum(terms.values()))
    return terms


def backward(model: Model, pred: Prediction, target: Target, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of ``scale * total loss`` for one image."""
    cfg, p, cache = model.config, model.params, pred.cache
    h, w = cache["shape"]
    m = np.asarray(target.valid, dtype=bool).ravel()
    n = int(m.sum())
    if n == 0:
        raise ValueError("loss over an empty valid mask")
    feats = cache["feats"]
    grads: dict[str, np.ndarray] = {}

    d_orient = scale * (pred.orientation - np.asarray(target.orientation, dtype=np.float64))
    grads["orient.b"] = d_orient
    d_orient = cfg.orient_scale * d_orient
    grads["orient.w"] = np.outer(d_orient, cache["pooled"])
    co = cfg.orient_channels
    d_pool = p["orient.w"].T @ d_orient
    dpx, dpy = d_pool[:co, None], d_pool[co:, None]
    rx, ry = (g.reshape(co, h * w) for g in cache["rgrad"])
    d_oact = np.empty_like(cache["oact"])
    d_oact[:co] = np.where(cache["mask"], dpx * rx + dpy * ry, 0.0) / cache["n_valid"]
    wgt = cache["weighted"].reshape(co, h, w)
    # central differences are antisymmetric, so the adjoint is the negation
    gx, _ = _grad(dpx[:, :, None] * wgt)
    _, gy = _grad(dpy[:, :, None] * wgt)
    d_oact[co:] = _blur(-(gx + gy), cfg.orient_blur).reshape(co, h * w)
    d_oz = d_oact * (1.0 - cache["oact"] ** 2)
    grads["orient.conv.w"] = d_oz @ cache["ocols"].T
    grads["orient.conv.b"] = d_oz.sum(axis=1)
    head_in = cache["head_in"]
    n_in = head_in.shape[0]
    d_in = _col2im(p["orient.conv.w"].T @ d_oz, n_in, h, w, cfg.orient_kernel).reshape(n_in, h * w)

    d_mag = np.where(m, 2.0 * scale * (pred.magnitude.ravel() - target.magnitude.ravel()) / n, 0.0)
    d_mag_pre = cfg.magnitude_scale * d_mag
    grads["mag.w"] = head_in @ d_mag_pre
    grads["mag.b"] = np.array([d_mag_pre.sum()])
    d_in += np.outer(p["mag.w"], d_mag_pre)
    d_feats = d_in[: cfg.channels]

    if model.variant.with_height_head:
        d_h = np.where(m, 2.0 * scale * (pred.height.ravel() - target.height.ravel()) / n, 0.0)
        d_gated = np.where(head_in[cfg.channels] > 0, d_in[cfg.channels], 0.0)
        d_hraw = cfg.height_scale * d_h + d_gated
        grads["height.gate.b"] = np.array([-d_gated.sum()])
        grads["height.w"] = feats @ d_hraw
        grads["height.b"] = np.array([d_hraw.sum()])
        d_feats += np.outer(p["height.w"], d_hraw)

    d_a = d_feats
    for i in reversed(range(len(cfg.kernels))):
        k = cfg.kernels[i]
        act = cache["acts"][i].reshape(cfg.channels, h * w)
        d_z = d_a * (1.0 - act * act)
        grads[f"trunk.{i}.w"] = d_z @ cache["cols"][i].T
        grads[f"trunk.{i}.b"] = d_z.sum(axis=1)
        if i > 0:
            d_cols = p[f"trunk.{i}.w"].T @ d_z
            d_a = _col2im(d_cols, cfg.channels, h, w, k).reshape(cfg.channels, h * w)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    return {name: grads[name] for name in p}


def batch_loss_and_grad(model: Model, batch: Sequence[Target], intensities: Sequence[np.ndarray]):
    """Mean loss over a batch and its gradient, reduced in batch order."""
    if not batch:
        raise ValueError("empty batch")
    scale = 1.0 / len(batch)
    totals: dict[str, float] = {}
    grads = {name: np.zeros_like(v) for name, v in model.params.items()}
    for target, img in zip(batch, intensities):
        pred = forward(model, img, target.valid)
        for key, val in loss_terms(pred, target, model.variant.with_height_head).items():
            totals[key] = totals.get(key, 0.0) + scale * val
        for name, g in backward(model, pred, target, scale).items():
            grads[name] += g
    return totals, grads


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    epochs: int = 40
    batch_size: int = 4
    learning_rate: float = 0.02
    momentum: float = 0.9
    clip_norm: float = 5.0
    lr_decay: float = 0.93

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1 or self.clip_norm <= 0:
            raise ValueError("invalid optimizer settings")


LOG_COLUMNS = ("epoch", "total", "orientation", "height", "magnitude")


def augment(sample, rng: np.random.Generator):
    """Random rotation in [0, 360) plus independent horizontal/vertical flips."""
    angle = float(rng.uniform(0.0, 360.0))
    hflip, vflip = rng.uniform(size=2) < 0.5
    out = rotate_sample(sample, angle)
    if hflip:
        out = flip_sample(out, "horizontal")
    if vflip:
        out = flip_sample(out, "vertical")
    return out


def train(
    variant: VariantConfig,
    dataset: Sequence,
    schedule: Schedule = Schedule(),
    config: ModelConfig = ModelConfig(),
    seed: int = 0,
) -> tuple[Model, list[dict]]:
    """Momentum SGD over ``dataset`` (GeoPoseSamples). Returns the model and per-epoch log rows."""
    schedule.validate()
    if not dataset:
        raise ValueError("empty dataset")
    model = init_model(config, variant, seed)
    rng = np.random.default_rng([seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    log: list[dict] = []
    step = 0
    lr = schedule.learning_rate
    for epoch in range(schedule.epochs):
        order = rng.permutation(len(dataset))
        sums = dict.fromkeys(LOG_COLUMNS[1:], 0.0)
        batches = 0
        for start in range(0, len(order), schedule.batch_size):
            chosen = [dataset[i] for i in order[start:start + schedule.batch_size]]
            if variant.with_rotation_aug:
                chosen = [augment(s, rng) for s in chosen]
            targets = [Target.from_sample(s) for s in chosen]
            last_good = {k: v.copy() for k, v in model.params.items()}
            totals, grads = batch_loss_and_grad(model, targets, [s.intensity for s in chosen])
            if not math.isfinite(totals["total"]):
                raise TrainingDivergedError(step, last_good)
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            clip = min(1.0, schedule.clip_norm / norm) if norm > 0 else 1.0
            for k in model.params:
                velocity[k] = schedule.momentum * velocity[k] - lr * clip * grads[k]
                model.params[k] = model.params[k] + velocity[k]
            for key in sums:
                sums[key] += totals.get(key, 0.0)
            batches += 1
            step += 1
        row = {"epoch": epoch}
        row.update({k: v / batches for k, v in sums.items()})
        log.append(row)
        logger.debug("%s epoch %d loss %.5f", variant.name, epoch, row["total"])
        lr *= schedule.lr_decay
    return model, log


def predict(model: Model, sample) -> Prediction:
    return forward(model, sample.intensity, sample.valid)
