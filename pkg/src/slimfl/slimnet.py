"""Width-slimmable UL-MobileNet with hand-written forward and backward passes.

Parameters live in one flat float64 vector ``theta``.  A width configuration
keeps the first ``ceil(r * C)`` channels of every layer (``r = 0.5`` for width
index 1, ``r = 1`` for index 2); the class dimension of the final linear
layer and the image channel are never sliced.  Evaluating a sub-width slices
the weight tensors, which gives the same logits as zeroing the masked-out
parameters and running the full network.

Activations are channels-last ``(batch, height, width, channels)``; all
convolutions are stride 1 with same padding.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidParameterError, ShapeError, SlimFLError
from .rng import stream

KINDS = ("conv", "depthwise_conv", "pointwise_conv", "global_avg_pool", "linear")
WIDTH_RATIOS = {1: 0.5, 2: 1.0}

# Per-round upload payloads, honoured verbatim for bit accounting.
PAYLOAD_BITS = {2: 172_688, 1: 86_344}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 1
    activation: str = "none"
    has_bias: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu6", "none"):
            raise InvalidParameterError(f"unknown activation {self.activation!r}")
        if self.kind in ("depthwise_conv", "global_avg_pool") and self.in_channels != self.out_channels:
            raise InvalidParameterError(f"{self.kind} must preserve channel count")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        k, ci, co = self.kernel, self.in_channels, self.out_channels
        if self.kind == "conv":
            shapes = [("weight", (k, k, ci, co))]
        elif self.kind == "depthwise_conv":
            shapes = [("weight", (k, k, co))]
        elif self.kind in ("pointwise_conv", "linear"):
            shapes = [("weight", (ci, co))]
        else:
            return []
        if self.has_bias:
            shapes.append(("bias", (co,)))
        return shapes

    def fans(self) -> tuple[int, int]:
        k2 = self.kernel * self.kernel
        if self.kind == "conv":
            return k2 * self.in_channels, k2 * self.out_channels
        if self.kind == "depthwise_conv":
            return k2, k2
        return self.in_channels, self.out_channels


@dataclass(frozen=True)
class ParamSlot:
    layer: int
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class LayerPlan:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise InvalidParameterError("consecutive layers disagree on channel count")

    @functools.cached_property
    def slots(self) -> tuple[ParamSlot, ...]:
        out, offset = [], 0
        for i, spec in enumerate(self.layers):
            for name, shape in spec.param_shapes():
                slot = ParamSlot(i, name, offset, shape)
                out.append(slot)
                offset += slot.size
        return tuple(out)

    @property
    def n_params(self) -> int:
        return sum(s.size for s in self.slots)

    @functools.cached_property
    def classifier_index(self) -> int:
        return max(i for i, s in enumerate(self.layers) if s.param_shapes())

    def active_channels(self, width: int) -> list[tuple[int, int]]:
        """Per-layer ``(active_in, active_out)`` channel counts at ``width``."""
        r = WIDTH_RATIOS[width]
        cur = self.layers[0].in_channels
        out = []
        for i, spec in enumerate(self.layers):
            if spec.kind in ("depthwise_conv", "global_avg_pool"):
                a_out = cur
            elif i == self.classifier_index:
                a_out = spec.out_channels
            else:
                a_out = math.ceil(r * spec.out_channels)
            out.append((cur, a_out))
            cur = a_out
        return out


UL_MOBILENET = LayerPlan((
    LayerSpec("conv", 1, 32, 3, "relu6"),
    LayerSpec("depthwise_conv", 32, 32, 3, "relu6"),
    LayerSpec("pointwise_conv", 32, 32, 1, "relu6"),
    LayerSpec("depthwise_conv", 32, 32, 3, "relu6"),
    LayerSpec("pointwise_conv", 32, 64, 1, "relu6"),
    LayerSpec("global_avg_pool", 64, 64),
    LayerSpec("linear", 64, 10, 1, "none", has_bias=True),
))


@dataclass(frozen=True)
class WidthMask:
    index: int
    ratio: float
    vector: np.ndarray = field(repr=False)
    channels: tuple[tuple[int, int], ...] = ()

    @property
    def count(self) -> int:
        return int(self.vector.sum())


def _prefix(shape: tuple[int, ...], kind: str, name: str, a_in: int, a_out: int) -> tuple[slice, ...]:
    if name == "bias":
        return (slice(0, a_out),)
    if kind == "conv":
        return (slice(None), slice(None), slice(0, a_in), slice(0, a_out))
    if kind == "depthwise_conv":
        return (slice(None), slice(None), slice(0, a_out))
    return (slice(0, a_in), slice(0, a_out))


@functools.lru_cache(maxsize=None)
def _plan_mask(plan: LayerPlan, width: int) -> WidthMask:
    if width not in WIDTH_RATIOS:
        raise InvalidParameterError(f"width index must be 1 or 2, got {width}")
    chans = plan.active_channels(width)
    vec = np.zeros(plan.n_params, dtype=bool)
    for slot in plan.slots:
        a_in, a_out = chans[slot.layer]
        block = np.zeros(slot.shape, dtype=bool)
        block[_prefix(slot.shape, plan.layers[slot.layer].kind, slot.name, a_in, a_out)] = True
        vec[slot.offset:slot.offset + slot.size] = block.ravel()
    vec.setflags(write=False)
    return WidthMask(width, WIDTH_RATIOS[width], vec, tuple(chans))


@dataclass
class SlimmableModel:
    theta: np.ndarray
    plan: LayerPlan = UL_MOBILENET

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.plan.n_params,):
            raise ShapeError(f"theta has {self.theta.size} entries, plan needs {self.plan.n_params}")
        if not np.all(np.isfinite(self.theta)):
            raise InvalidParameterError("theta contains non-finite entries")

    @property
    def masks(self) -> tuple[WidthMask, WidthMask]:
        return _plan_mask(self.plan, 1), _plan_mask(self.plan, 2)

    def copy(self) -> "SlimmableModel":
        return SlimmableModel(self.theta.copy(), self.plan)

    def with_theta(self, theta: np.ndarray) -> "SlimmableModel":
        return SlimmableModel(theta, self.plan)

    def params(self, layer: int) -> dict[str, np.ndarray]:
        return {
            s.name: self.theta[s.offset:s.offset + s.size].reshape(s.shape)
            for s in self.plan.slots if s.layer == layer
        }


def build_model(plan: LayerPlan, seed: int) -> SlimmableModel:
    theta = np.zeros(plan.n_params)
    for slot in plan.slots:
        if slot.name == "bias":
            continue
        fan_in, fan_out = plan.layers[slot.layer].fans()
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        rng = stream(seed, "init", slot.layer)
        theta[slot.offset:slot.offset + slot.size] = rng.uniform(-limit, limit, slot.size)
    return SlimmableModel(theta, plan)


def build_ul_mobilenet(seed: int) -> SlimmableModel:
    return build_model(UL_MOBILENET, seed)


def width_mask(model: SlimmableModel, i: int) -> WidthMask:
    return _plan_mask(model.plan, i)


def rh_mask(model: SlimmableModel) -> np.ndarray:
    """Coordinates in the full width but not in the half width."""
    m1, m2 = model.masks
    return m2.vector & ~m1.vector


def _as_mask(model: SlimmableModel, mask) -> WidthMask:
    if isinstance(mask, WidthMask):
        return mask
    return width_mask(model, int(mask))


# --- layer kernels -------------------------------------------------------

def _pad(x, p):
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


def _conv_forward(x, w):
    k = w.shape[0]
    B, H, W, ci = x.shape
    xp = _pad(x, k // 2)
    cols = np.empty((B, H, W, k, k, ci))
    for a in range(k):
        for b in range(k):
            cols[:, :, :, a, b, :] = xp[:, a:a + H, b:b + W, :]
    cols = cols.reshape(B * H * W, k * k * ci)
    y = cols @ w.reshape(k * k * ci, -1)
    return y.reshape(B, H, W, -1), cols


def _conv_backward(dy, cols, w, x_shape, need_dx):
    k = w.shape[0]
    B, H, W, ci = x_shape
    dy2 = dy.reshape(B * H * W, -1)
    dw = (cols.T @ dy2).reshape(w.shape)
    if not need_dx:
        return dw, None
    dcols = (dy2 @ w.reshape(k * k * ci, -1).T).reshape(B, H, W, k, k, ci)
    p = k // 2
    dxp = np.zeros((B, H + 2 * p, W + 2 * p, ci))
    for a in range(k):
        for b in range(k):
            dxp[:, a:a + H, b:b + W, :] += dcols[:, :, :, a, b, :]
    return dw, dxp[:, p:p + H, p:p + W, :]


def _dw_forward(x, w):
    k = w.shape[0]
    _, H, W, _ = x.shape
    xp = _pad(x, k // 2)
    y = np.zeros_like(x)
    for a in range(k):
        for b in range(k):
            y += xp[:, a:a + H, b:b + W, :] * w[a, b]
    return y, xp


def _dw_backward(dy, xp, w, need_dx):
    k = w.shape[0]
    _, H, W, _ = dy.shape
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for a in range(k):
        for b in range(k):
            win = xp[:, a:a + H, b:b + W, :]
            dw[a, b] = np.einsum("bhwc,bhwc->c", win, dy)
            if need_dx:
                dxp[:, a:a + H, b:b + W, :] += dy * w[a, b]
    if not need_dx:
        return dw, None
    p = k // 2
    return dw, dxp[:, p:p + H, p:p + W, :]


def _prepare_input(plan: LayerPlan, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    first = plan.layers[0]
    if first.kind == "linear":
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != first.in_channels:
            raise ShapeError(f"expected {first.in_channels} input features, got {x.shape[1]}")
        return x
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[-1] != first.in_channels:
        raise ShapeError(f"expected images shaped (batch, H, W[, {first.in_channels}]), got {x.shape}")
    return x


def _forward(model: SlimmableModel, mask: WidthMask, images, keep_cache: bool):
    plan = model.plan
    x = _prepare_input(plan, images)
    cache = []
    for i, (spec, (a_in, a_out)) in enumerate(zip(plan.layers, mask.channels)):
        p = model.params(i)
        if spec.kind != "global_avg_pool" and x.shape[-1] != a_in:
            raise ShapeError(f"layer {i}: expected {a_in} channels, got {x.shape[-1]}")
        entry = {"x_shape": x.shape}
        if spec.kind == "conv":
            w = p["weight"][:, :, :a_in, :a_out]
            z, entry["cols"] = _conv_forward(x, w)
            entry["w"] = w
        elif spec.kind == "depthwise_conv":
            w = p["weight"][:, :, :a_out]
            z, entry["xp"] = _dw_forward(x, w)
            entry["w"] = w
        elif spec.kind in ("pointwise_conv", "linear"):
            if spec.kind == "pointwise_conv" and x.ndim != 4:
                raise ShapeError(f"layer {i}: pointwise conv needs a spatial input")
            w = p["weight"][:a_in, :a_out]
            z = x @ w
            entry["x"], entry["w"] = x, w
        else:
            if x.ndim != 4:
                raise ShapeError(f"layer {i}: pooling needs a spatial input")
            z = x.mean(axis=(1, 2))
        if "bias" in p:
            z = z + p["bias"][:a_out]
        if spec.activation == "relu6":
            entry["z"] = z
            x = np.clip(z, 0.0, 6.0)
        else:
            x = z
        if keep_cache:
            cache.append(entry)
    return x, cache


def forward(model: SlimmableModel, mask, images) -> np.ndarray:
    """Logits ``(batch, classes)`` of the sub-network selected by ``mask``."""
    logits, _ = _forward(model, _as_mask(model, mask), images, keep_cache=False)
    return logits


def _backward(model: SlimmableModel, mask: WidthMask, cache, dlogits) -> np.ndarray:
    plan = model.plan
    g = np.zeros(plan.n_params)
    slots = {(s.layer, s.name): s for s in plan.slots}
    dx = dlogits
    for i in range(len(plan.layers) - 1, -1, -1):
        spec, entry = plan.layers[i], cache[i]
        a_in, a_out = mask.channels[i]
        need_dx = i > 0
        dz = dx
        if spec.activation == "relu6":
            z = entry["z"]
            dz = dx * ((z > 0.0) & (z < 6.0))
        if spec.has_bias:
            axes = tuple(range(dz.ndim - 1))
            db = dz.sum(axis=axes)
            s = slots[(i, "bias")]
            g[s.offset:s.offset + a_out] = db
        if spec.kind == "conv":
            dw, dx = _conv_backward(dz, entry["cols"], entry["w"], entry["x_shape"], need_dx)
        elif spec.kind == "depthwise_conv":
            dw, dx = _dw_backward(dz, entry["xp"], entry["w"], need_dx)
        elif spec.kind in ("pointwise_conv", "linear"):
            x = entry["x"]
            dw = x.reshape(-1, a_in).T @ dz.reshape(-1, a_out)
            dx = dz @ entry["w"].T if need_dx else None
        else:
            B, H, W, C = entry["x_shape"]
            dx = np.broadcast_to(dz[:, None, None, :] / (H * W), (B, H, W, C))
            continue
        s = slots[(i, "weight")]
        full = g[s.offset:s.offset + s.size].reshape(s.shape)
        full[_prefix(s.shape, spec.kind, "weight", a_in, a_out)] = dw
    return g


# --- losses --------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def task_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against integer labels and its logit gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise InvalidParameterError("labels must be integers in [0, classes)")
    ls = log_softmax(logits)
    loss = -ls[np.arange(n), labels].mean()
    grad = np.exp(ls)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def distill_loss(student_logits: np.ndarray, teacher_logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy of the student against the (constant) teacher softmax."""
    n = student_logits.shape[0]
    pt = softmax(teacher_logits)
    ls = log_softmax(student_logits)
    loss = -(pt * ls).sum(axis=1).mean()
    return float(loss), (np.exp(ls) - pt) / n


def grad(
    model: SlimmableModel,
    mask,
    images,
    labels=None,
    loss_kind: str = "task",
    teacher_logits: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss, flat gradient (zero outside ``mask``) and logits for one batch."""
    mask = _as_mask(model, mask)
    logits, cache = _forward(model, mask, images, keep_cache=True)
    if loss_kind == "task":
        if teacher_logits is not None:
            raise InvalidParameterError("teacher logits only apply to the distill loss")
        loss, dlogits = task_loss(logits, labels)
    elif loss_kind == "distill":
        if teacher_logits is None:
            raise InvalidParameterError("distill loss needs teacher logits")
        loss, dlogits = distill_loss(logits, teacher_logits)
    else:
        raise InvalidParameterError(f"unknown loss kind {loss_kind!r}")
    return loss, _backward(model, mask, cache, dlogits), logits


# --- optimisers ----------------------------------------------------------

Schedule = Callable[[int], float]


class SGD:
    def __init__(self, lr: float | Schedule):
        self.lr = lr
        self.t = 0

    def _rate(self) -> float:
        return self.lr(self.t) if callable(self.lr) else self.lr

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        return theta - self._rate() * g


class Adam(SGD):
    def __init__(self, lr: float | Schedule, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = None
        self.v = None

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self._rate() * mhat / (np.sqrt(vhat) + self.eps)


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str = "sustrain"
    weights: tuple[float, float] = (0.5, 0.5)
    optimizer: str = "adam"
    learning_rate: float | Schedule = 1e-3
    distill_mode: str = "soft_ipkd"
    widths: tuple[int, ...] = (2, 1)
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # boundary-test hook: allows zero or unnormalised superposition weights
    unchecked_weights: bool = False

    def __post_init__(self):
        if self.algorithm not in ("sustrain", "slimtrain", "ustrain"):
            raise InvalidParameterError(f"unknown algorithm {self.algorithm!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.distill_mode not in ("soft_ipkd", "hard_target"):
            raise InvalidParameterError(f"unknown distill mode {self.distill_mode!r}")
        if not callable(self.learning_rate) and self.learning_rate <= 0:
            raise InvalidParameterError("learning rate must be positive")
        if not self.unchecked_weights:
            w1, w2 = self.weights
            if w1 <= 0 or w2 <= 0 or abs(w1 + w2 - 1.0) > 1e-12:
                raise InvalidParameterError("superposition weights must be positive and sum to 1")
        if not self.widths or any(w not in WIDTH_RATIOS for w in self.widths):
            raise InvalidParameterError("width list must be a non-empty subset of {1, 2}")

    def make_optimizer(self) -> SGD:
        if self.optimizer == "sgd":
            return SGD(self.learning_rate)
        return Adam(self.learning_rate, self.beta1, self.beta2, self.eps)


def _apply(model, g, cfg: TrainerConfig, opt: SGD | None) -> SlimmableModel:
    if cfg.weight_decay:
        g = g + cfg.weight_decay * model.theta
    opt = opt if opt is not None else cfg.make_optimizer()
    return model.with_theta(opt.step(model.theta, g))


def superposed_gradient(model: SlimmableModel, images, labels, cfg: TrainerConfig) -> tuple[np.ndarray, float, float]:
    """``w1 * grad F_hat(theta . Xi_1) + w2 * grad F(theta . Xi_2)`` and both losses."""
    w1, w2 = cfg.weights
    loss2, g2, teacher = grad(model, 2, images, labels)
    if cfg.distill_mode == "soft_ipkd":
        loss1, g1, _ = grad(model, 1, images, loss_kind="distill", teacher_logits=teacher)
    else:
        loss1, g1, _ = grad(model, 1, images, labels)
    return w1 * g1 + w2 * g2, loss1, loss2


def sustrain_step(model: SlimmableModel, images, labels, cfg: TrainerConfig, opt: SGD | None = None) -> SlimmableModel:
    g, _, _ = superposed_gradient(model, images, labels, cfg)
    return _apply(model, g, cfg, opt)


def slimtrain_step(model: SlimmableModel, images, labels, cfg: TrainerConfig, opt: SGD | None = None) -> SlimmableModel:
    total = np.zeros_like(model.theta)
    for width in cfg.widths:
        _, g, _ = grad(model, width, images, labels)
        total += g
    return _apply(model, total, cfg, opt)


def ustrain_step(model: SlimmableModel, images, labels, cfg: TrainerConfig, opt: SGD | None = None) -> SlimmableModel:
    _, total, teacher = grad(model, 2, images, labels)
    for width in cfg.widths:
        if width == 2:
            continue
        if cfg.distill_mode == "soft_ipkd":
            _, g, _ = grad(model, width, images, loss_kind="distill", teacher_logits=teacher)
        else:
            _, g, _ = grad(model, width, images, labels)
        total = total + g
    return _apply(model, total, cfg, opt)


def task_only_step(model: SlimmableModel, images, labels, width: int, cfg: TrainerConfig, opt: SGD | None = None) -> SlimmableModel:
    """Single-width update used by the fixed-width baselines."""
    _, g, _ = grad(model, width, images, labels)
    return _apply(model, g, cfg, opt)


TRAINERS = {"sustrain": sustrain_step, "slimtrain": slimtrain_step, "ustrain": ustrain_step}


def train_step(model: SlimmableModel, images, labels, cfg: TrainerConfig, opt: SGD | None = None) -> SlimmableModel:
    return TRAINERS[cfg.algorithm](model, images, labels, cfg, opt)


# --- cost accounting -----------------------------------------------------

@dataclass(frozen=True)
class ModelStats:
    params: int
    flops: int
    payload_bits: int


def count_flops(plan: LayerPlan, width: int, image_size: int = 28) -> int:
    """Multiply-accumulate count of one forward pass on a square input."""
    hw = image_size * image_size
    total = 0
    for spec, (a_in, a_out) in zip(plan.layers, plan.active_channels(width)):
        k2 = spec.kernel * spec.kernel
        if spec.kind == "conv":
            total += hw * k2 * a_in * a_out
        elif spec.kind == "depthwise_conv":
            total += hw * k2 * a_out
        elif spec.kind == "pointwise_conv":
            total += hw * a_in * a_out
        elif spec.kind == "global_avg_pool":
            total += hw * a_out
        else:
            total += a_in * a_out
    return total


def model_stats(model: SlimmableModel, width_index: int, image_size: int = 28,
                bits_per_param: float | None = None) -> ModelStats:
    mask = width_mask(model, width_index)
    params = mask.count
    if bits_per_param is None:
        bits = PAYLOAD_BITS[width_index]
    else:
        bits = int(round(params * bits_per_param))
    return ModelStats(params, count_flops(model.plan, width_index, image_size), bits)


# --- checkpoints ---------------------------------------------------------

CHECKPOINT_MAGIC = b"SLNN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQB")


class CheckpointError(SlimFLError):
    pass


def save_checkpoint(model: SlimmableModel, path: str | Path) -> Path:
    path = Path(path)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.theta.size, len(WIDTH_RATIOS))
    path.write_bytes(header + model.theta.astype("<f8").tobytes())
    return path


def load_checkpoint(path: str | Path, plan: LayerPlan = UL_MOBILENET) -> SlimmableModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, count, widths = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if count != plan.n_params:
        raise CheckpointError(f"{path}: {count} parameters, plan expects {plan.n_params}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise CheckpointError(f"{path}: payload has {len(body)} bytes, expected {8 * count}")
    return SlimmableModel(np.frombuffer(body, dtype="<f8").astype(np.float64), plan)


def evaluate(model: SlimmableModel, width: int, images, labels, batch_size: int = 512) -> tuple[float, float]:
    """Mean task loss and top-1 accuracy on a labelled set."""
    labels = np.asarray(labels)
    n = labels.size
    if n == 0:
        return math.nan, math.nan
    loss_sum, correct = 0.0, 0
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        logits = forward(model, width, images[sl])
        loss, _ = task_loss(logits, labels[sl])
        loss_sum += loss * logits.shape[0]
        correct += int((logits.argmax(axis=1) == labels[sl]).sum())
    return loss_sum / n, correct / n


def replace_trainer(cfg: TrainerConfig, **changes) -> TrainerConfig:
    return replace(cfg, **changes)
