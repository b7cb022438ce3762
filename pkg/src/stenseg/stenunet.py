"""UNet-style encoder/decoder for stenosis segmentation, plus training.

The network is a fixed topology: encoder stages of (conv, instance norm,
leaky relu) blocks joined by 2x2 max pools, a mirrored decoder driven by
stride-2 transposed convolutions, skip concatenation at matching
resolutions, and a 1x1 sigmoid head. The backward pass is hand-wired in
reverse layer order; there is no general autodiff graph.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import specio, tensorkit as tk


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite loss shows up during training."""


@dataclass
class ArchConfig:
    stages: int = 7
    channels: tuple[int, ...] = (32, 64, 128, 256, 512, 512, 512)
    convs_per_stage: int = 2
    kernel: int = 3
    in_channels: int = 1
    out_channels: int = 1
    leaky_slope: float = 0.01
    use_instance_norm: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.stages < 2:
            raise ValueError(f"need at least 2 stages, got {self.stages}")
        if len(self.channels) != self.stages:
            raise ValueError(
                f"channel list length {len(self.channels)} != stages {self.stages}"
            )
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def divisor(self) -> int:
        """Required divisibility of input spatial dims: 2^(stages-1)."""
        return 1 << (self.stages - 1)

    def descriptor(self) -> specio.ArchDescriptor:
        return specio.ArchDescriptor(
            stages=self.stages,
            channels=self.channels,
            convs_per_stage=self.convs_per_stage,
            in_channels=self.in_channels,
            out_channels=self.out_channels,
        )


@dataclass
class LossWeights:
    w_bce: float = 1.0
    w_dice: float = 1.0

    def __post_init__(self):
        if self.w_bce < 0 or self.w_dice < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.w_bce == 0 and self.w_dice == 0:
            raise ValueError("loss weights must not both be zero")


@dataclass
class AugmentConfig:
    enabled: bool = True
    p_spatial: float = 0.5
    scale_min: float = 0.7
    scale_max: float = 1.4
    rot_min_deg: float = -180.0
    rot_max_deg: float = 180.0
    p_noise: float = 0.15
    noise_var_max: float = 0.1
    p_blur: float = 0.15
    blur_sigma_min: float = 0.5
    blur_sigma_max: float = 1.0

    def __post_init__(self):
        for name in ("p_spatial", "p_noise", "p_blur"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.scale_min > self.scale_max or self.rot_min_deg > self.rot_max_deg:
            raise ValueError("augment ranges must be well ordered")
        if self.blur_sigma_min > self.blur_sigma_max or self.noise_var_max < 0:
            raise ValueError("augment ranges must be well ordered")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr0: float = 0.01
    poly_exp: float = 0.9
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# layers


class _Conv:
    def __init__(self, cin, cout, kernel, rng, dtype):
        fan_in = cin * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.w = tk.ParamTensor(
            (rng.standard_normal((cout, cin, kernel, kernel)) * std).astype(dtype)
        )
        self.b = tk.ParamTensor(np.zeros(cout, dtype=dtype))
        self.pad = (kernel - 1) // 2
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, backend, record):
        self._x = x if record else None
        return tk.conv2d(x, self.w.value, self.b.value, stride=1, pad=self.pad,
                         backend=backend)

    def backward(self, grad_y):
        gx, gw, gb = tk.conv2d_backward(grad_y, self._x, self.w.value,
                                        stride=1, pad=self.pad)
        self.w.grad += gw
        self.b.grad += gb
        return gx


class _InstanceNorm:
    def __init__(self, channels, dtype):
        self.gamma = tk.ParamTensor(np.ones(channels, dtype=dtype))
        self.beta = tk.ParamTensor(np.zeros(channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, backend, record):
        y, cache = tk.instance_norm(x, self.gamma.value, self.beta.value)
        self._cache = cache if record else None
        return y

    def backward(self, grad_y):
        gx, gg, gb = tk.instance_norm_backward(grad_y, self._cache)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


class _LeakyReLU:
    def __init__(self, slope):
        self.slope = slope
        self._x = None

    def params(self):
        return []

    def forward(self, x, backend, record):
        self._x = x if record else None
        return tk.leaky_relu(x, self.slope)

    def backward(self, grad_y):
        return tk.leaky_relu_backward(grad_y, self._x, self.slope)


class _ConvBlock:
    """convs_per_stage x (conv -> [instance norm] -> leaky relu)."""

    def __init__(self, cin, cout, config: ArchConfig, rng, dtype):
        self.layers = []
        c = cin
        for _ in range(config.convs_per_stage):
            self.layers.append(_Conv(c, cout, config.kernel, rng, dtype))
            if config.use_instance_norm:
                self.layers.append(_InstanceNorm(cout, dtype))
            self.layers.append(_LeakyReLU(config.leaky_slope))
            c = cout

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, backend, record):
        for layer in self.layers:
            x = layer.forward(x, backend, record)
        return x

    def backward(self, grad_y):
        for layer in reversed(self.layers):
            grad_y = layer.backward(grad_y)
        return grad_y


class _MaxPool:
    def __init__(self):
        self._idx = None

    def params(self):
        return []

    def forward(self, x, backend, record):
        y, idx = tk.maxpool2(x)
        self._idx = idx if record else None
        return y

    def backward(self, grad_y):
        return tk.maxpool2_backward(grad_y, self._idx)


class _UpConv:
    def __init__(self, cin, cout, rng, dtype):
        std = np.sqrt(2.0 / (cin * 4))
        self.w = tk.ParamTensor(
            (rng.standard_normal((cin, cout, 2, 2)) * std).astype(dtype)
        )
        self._x = None

    def params(self):
        return [self.w]

    def forward(self, x, backend, record):
        self._x = x if record else None
        return tk.upconv2(x, self.w.value, backend=backend)

    def backward(self, grad_y):
        gx, gw = tk.upconv2_backward(grad_y, self._x, self.w.value)
        self.w.grad += gw
        return gx


class Model:
    """StenUNet-style encoder/decoder. Build through `build()`."""

    def __init__(self, config: ArchConfig, rng, dtype=np.float32):
        self.config = config
        ch = config.channels
        self.encoder = []
        self.pools = []
        c = config.in_channels
        for i in range(config.stages):
            self.encoder.append(_ConvBlock(c, ch[i], config, rng, dtype))
            c = ch[i]
            if i < config.stages - 1:
                self.pools.append(_MaxPool())
        self.ups = []
        self.decoder = []
        c = ch[-1]
        for j in range(config.stages - 1):
            skip_c = ch[config.stages - 2 - j]
            self.ups.append(_UpConv(c, skip_c, rng, dtype))
            self.decoder.append(_ConvBlock(2 * skip_c, skip_c, config, rng, dtype))
            c = skip_c
        self.head = _Conv(ch[0], config.out_channels, 1, rng, dtype)
        self._skip_grads = None

    def parameters(self) -> list[tk.ParamTensor]:
        out = []
        for block in self.encoder:
            out.extend(block.params())
        for up, block in zip(self.ups, self.decoder):
            out.extend(up.params())
            out.extend(block.params())
        out.extend(self.head.params())
        return out

    def _check_input(self, x):
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} input channels, got {c}"
            )
        div = self.config.divisor
        if h % div or w % div:
            raise ValueError(
                f"input {h}x{w} not divisible by 2^(stages-1) = {div}"
            )

    def forward_logits(self, x, backend="gemm", record=False):
        self._check_input(x)
        cfg = self.config
        skips = []
        a = x
        for i, block in enumerate(self.encoder):
            a = block.forward(a, backend, record)
            if i < cfg.stages - 1:
                skips.append(a)
                a = self.pools[i].forward(a, backend, record)
        self._skip_channels = []
        for j, (up, block) in enumerate(zip(self.ups, self.decoder)):
            a = up.forward(a, backend, record)
            skip = skips[cfg.stages - 2 - j]
            a = np.concatenate([skip, a], axis=1)
            a = block.forward(a, backend, record)
        return self.head.forward(a, backend, record)

    def forward(self, x, backend="gemm", record=False):
        """Probability map with the same spatial shape as the input."""
        return tk.sigmoid(self.forward_logits(x, backend=backend, record=record))

    def backward(self, grad_logits):
        """Accumulate parameter gradients; needs a recorded forward pass."""
        cfg = self.config
        g = self.head.backward(grad_logits)
        skip_grads = [None] * (cfg.stages - 1)
        for j in reversed(range(cfg.stages - 1)):
            g = self.decoder[j].backward(g)
            skip_c = cfg.channels[cfg.stages - 2 - j]
            skip_grads[cfg.stages - 2 - j] = g[:, :skip_c]
            g = self.ups[j].backward(np.ascontiguousarray(g[:, skip_c:]))
        for i in reversed(range(cfg.stages)):
            g = self.encoder[i].backward(g)
            if i > 0:
                g = self.pools[i - 1].backward(g)
                g = g + skip_grads[i - 1]
        return g


def build(config: ArchConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialized model (fan-in scaled normal weights)."""
    rng = np.random.default_rng(seed)
    return Model(config, rng, dtype=dtype)


def count_params(config: ArchConfig) -> int:
    """Closed-form parameter count for an architecture, computed without
    building the model."""
    k2 = config.kernel * config.kernel
    norm = 2 if config.use_instance_norm else 0

    def block(cin, cout):
        total = 0
        c = cin
        for _ in range(config.convs_per_stage):
            total += c * cout * k2 + cout + norm * cout
            c = cout
        return total

    ch = config.channels
    total = 0
    c = config.in_channels
    for i in range(config.stages):
        total += block(c, ch[i])
        c = ch[i]
    c = ch[-1]
    for j in range(config.stages - 1):
        skip_c = ch[config.stages - 2 - j]
        total += c * skip_c * 4  # upconv, no bias
        total += block(2 * skip_c, skip_c)
        c = skip_c
    total += ch[0] * config.out_channels + config.out_channels
    return total


# ---------------------------------------------------------------------------
# loss


def bce_loss(yhat: np.ndarray, y: np.ndarray, clamp: float = 1e-7) -> float:
    """Mean binary cross entropy; predictions clamped away from {0, 1}."""
    yc = np.clip(yhat, clamp, 1.0 - clamp)
    return float(-(y * np.log(yc) + (1.0 - y) * np.log(1.0 - yc)).mean())


def dice_loss(yhat: np.ndarray, y: np.ndarray, smooth: float = 1e-5) -> float:
    """Soft dice over the whole batch: 1 - (2|Y.Yhat|+e)/(|Y|+|Yhat|+e)."""
    inter = float((yhat * y).sum())
    total = float(y.sum() + yhat.sum())
    return 1.0 - (2.0 * inter + smooth) / (total + smooth)


def soft_dice(yhat: np.ndarray, y: np.ndarray, smooth: float = 1e-5) -> float:
    return 1.0 - dice_loss(yhat, y, smooth)


def total_loss(
    yhat: np.ndarray,
    y: np.ndarray,
    weights: LossWeights = LossWeights(),
    clamp: float = 1e-7,
    smooth: float = 1e-5,
):
    """Weighted BCE + dice. Returns (loss, gradient wrt pre-sigmoid logits)."""
    n = yhat.size
    loss = weights.w_bce * bce_loss(yhat, y, clamp) + weights.w_dice * dice_loss(
        yhat, y, smooth
    )

    yc = np.clip(yhat, clamp, 1.0 - clamp)
    active = (yhat > clamp) & (yhat < 1.0 - clamp)
    g_bce = np.where(active, (-y / yc + (1.0 - y) / (1.0 - yc)) / n, 0.0)

    denom = float(y.sum() + yhat.sum()) + smooth
    numer = 2.0 * float((yhat * y).sum()) + smooth
    g_dice = -(2.0 * y * denom - numer) / (denom * denom)

    g_yhat = weights.w_bce * g_bce + weights.w_dice * g_dice
    grad_logits = (g_yhat * yhat * (1.0 - yhat)).astype(yhat.dtype)
    return loss, grad_logits


def poly_lr(epoch: int, total_epochs: int, lr0: float = 0.01, exponent: float = 0.9):
    """Polynomial decay from lr0 at epoch 0 to 0 at epoch == total_epochs."""
    return lr0 * (1.0 - epoch / total_epochs) ** exponent


# ---------------------------------------------------------------------------
# augmentation


def _bilinear_sample(image, sy, sx):
    h, w = image.shape
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy = sy - y0
    fx = sx - x0
    y0 = np.clip(y0, 0, h - 1).astype(np.intp)
    x0 = np.clip(x0, 0, w - 1).astype(np.intp)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    top = (1.0 - fx) * image[y0, x0] + fx * image[y0, x1]
    bot = (1.0 - fx) * image[y1, x0] + fx * image[y1, x1]
    return (1.0 - fy) * top + fy * bot


def _nearest_sample(mask, sy, sx):
    h, w = mask.shape
    yi = np.clip(np.rint(sy), 0, h - 1).astype(np.intp)
    xi = np.clip(np.rint(sx), 0, w - 1).astype(np.intp)
    return mask[yi, xi]


def _blur3(image, sigma):
    d = np.exp(-1.0 / (2.0 * sigma * sigma))
    kernel = np.array([d, 1.0, d]) / (1.0 + 2.0 * d)
    padded = np.pad(image, 1, mode="edge")
    tmp = (
        kernel[0] * padded[:, :-2]
        + kernel[1] * padded[:, 1:-1]
        + kernel[2] * padded[:, 2:]
    )
    return (
        kernel[0] * tmp[:-2, :] + kernel[1] * tmp[1:-1, :] + kernel[2] * tmp[2:, :]
    )


def augment(image, mask, config: AugmentConfig, rng: np.random.Generator):
    """Seeded augmentation of one (image, mask) pair.

    Draw order is fixed regardless of which transforms fire: scale coin,
    scale factor, rotate coin, angle, noise coin, noise variance, blur
    coin, blur sigma. Scale and rotation combine into one affine warp
    about the image center; the image samples bilinearly with edge
    replication, the mask with nearest neighbor so it stays binary.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)

    do_scale = rng.random() < config.p_spatial
    scale = rng.uniform(config.scale_min, config.scale_max)
    do_rotate = rng.random() < config.p_spatial
    angle = rng.uniform(config.rot_min_deg, config.rot_max_deg)
    do_noise = rng.random() < config.p_noise
    noise_var = rng.uniform(0.0, config.noise_var_max)
    do_blur = rng.random() < config.p_blur
    sigma = rng.uniform(config.blur_sigma_min, config.blur_sigma_max)

    if do_scale or do_rotate:
        s = scale if do_scale else 1.0
        theta = np.deg2rad(angle) if do_rotate else 0.0
        h, w = image.shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        dx = jj - cx
        dy = ii - cy
        # inverse map: un-rotate then un-scale
        cos_t, sin_t = np.cos(-theta), np.sin(-theta)
        sx = (cos_t * dx - sin_t * dy) / s + cx
        sy = (sin_t * dx + cos_t * dy) / s + cy
        image = _bilinear_sample(image, sy, sx)
        mask = _nearest_sample(mask, sy, sx)

    if do_noise:
        image = image + rng.normal(0.0, np.sqrt(noise_var), image.shape)
    if do_blur:
        image = _blur3(image, sigma)

    return np.clip(image, 0.0, 1.0), mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# training / inference drivers


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float


def train(
    model: Model,
    dataset,
    train_config: TrainConfig,
    aug_config: AugmentConfig = AugmentConfig(),
    loss_weights: LossWeights = LossWeights(),
    checkpoint_dir=None,
    callback=None,
) -> list[EpochStats]:
    """SGD training loop over (image, mask) pairs.

    Deterministic for a given (seed, BLAS thread count): one generator
    drives shuffling and augmentation in a fixed draw order. `callback`
    runs after each epoch with (epoch, lr, loss, model); returning a
    truthy value stops training early.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    cfg = train_config
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochStats] = []

    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg.epochs, cfg.lr0, cfg.poly_exp)
        order = rng.permutation(len(dataset))
        total = 0.0
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            xs, ys = [], []
            for idx in batch:
                img, msk = dataset[idx]
                if aug_config.enabled:
                    img, msk = augment(img, msk, aug_config, rng)
                xs.append(np.asarray(img, dtype=np.float32))
                ys.append(np.asarray(msk, dtype=np.float32))
            x = np.stack(xs)[:, None]
            y = np.stack(ys)[:, None]
            logits = model.forward_logits(x, record=True)
            yhat = tk.sigmoid(logits)
            loss, grad_logits = total_loss(yhat, y, loss_weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, "
                    f"batch starting at {start} (lr={lr:.3g}); "
                    f"logit range [{logits.min():.3g}, {logits.max():.3g}]"
                )
            model.backward(grad_logits)
            tk.sgd_step(
                model.parameters(),
                lr,
                momentum=cfg.momentum,
                nesterov=cfg.nesterov,
                weight_decay=cfg.weight_decay,
            )
            total += loss * len(batch)
            seen += len(batch)
        stats = EpochStats(epoch=epoch, lr=lr, loss=total / seen)
        history.append(stats)
        if checkpoint_dir is not None and cfg.checkpoint_every:
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
                save_model_checkpoint(
                    model,
                    checkpoint_dir / f"epoch-{epoch + 1}.sten",
                    epoch=epoch + 1,
                    seed=cfg.seed,
                )
        if callback is not None and callback(epoch, lr, stats.loss, model):
            break
    return history


def infer(model: Model, image, pre_config=None, backend="gemm"):
    """Preprocess (if configured) and run one image through the model.

    Returns (probability map, forward seconds). Timing covers only the
    network forward pass.
    """
    from . import prefilter

    img = np.asarray(image, dtype=np.float64)
    if pre_config is not None:
        img = prefilter.preprocess(img, pre_config)
    x = img.astype(np.float32)[None, None]
    t0 = time.perf_counter()
    probs = model.forward(x, backend=backend)
    seconds = time.perf_counter() - t0
    return probs[0, 0], seconds


# ---------------------------------------------------------------------------
# checkpoint glue


def save_model_checkpoint(model: Model, path, epoch: int = 0, seed: int = 0):
    params = [p.value.astype("<f4").reshape(-1) for p in model.parameters()]
    specio.save_checkpoint(model.config.descriptor(), params, path,
                           epoch=epoch, seed=seed)


def load_model_checkpoint(path, config: ArchConfig | None = None) -> tuple[Model, specio.Checkpoint]:
    """Rebuild a model from a checkpoint; validates arch when config given."""
    ckpt = specio.load_checkpoint(
        path, expected_arch=config.descriptor() if config is not None else None
    )
    if config is None:
        config = ArchConfig(
            stages=ckpt.arch.stages,
            channels=ckpt.arch.channels,
            convs_per_stage=ckpt.arch.convs_per_stage,
            in_channels=ckpt.arch.in_channels,
            out_channels=ckpt.arch.out_channels,
        )
    model = build(config, seed=0)
    params = model.parameters()
    if len(params) != len(ckpt.params):
        raise specio.SpecIOError(
            f"{path}: checkpoint has {len(ckpt.params)} tensors, "
            f"model expects {len(params)}"
        )
    for p, flat in zip(params, ckpt.params):
        if flat.size != p.value.size:
            raise specio.SpecIOError(
                f"{path}: parameter size mismatch "
                f"({flat.size} vs {p.value.size})"
            )
        p.value[...] = flat.reshape(p.value.shape)
    return model, ckpt


def loss_gradcheck(seed: int = 0, rounds: int = 5) -> float:
    """Finite-difference check of the BCE+dice gradient wrt logits."""
    max_err = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(rounds):
        z = rng.standard_normal((1, 1, 4, 4))
        y = (rng.random((1, 1, 4, 4)) < 0.4).astype(np.float64)

        def fn(inputs):
            (zi,) = inputs
            yhat = tk.sigmoid(zi)
            loss, grad = total_loss(yhat, y, LossWeights())
            return loss, [grad]

        max_err = max(max_err, tk.gradcheck(fn, [z]))
    return max_err
