"""Dense NCHW tensors and differentiable primitives with analytic backwards.

Tensors are plain numpy arrays with shape (n, c, h, w). Every primitive
keeps a fixed loop nest / reduction order so results are bit-reproducible
run to run for a given BLAS thread count. Convolutions ship two routes:

  gemm  - im2col patches multiplied by the kernel matrix in row bands
          (the production path, BLAS-backed)
  naive - scalar-weight shift-and-accumulate over the kernel support
          (the reference path; both must agree within 1e-5)

float32 is the training/inference precision; float64 exists for the
finite-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Patch-buffer cap for the gemm route, in float bytes per band.
_COL_BYTES_CAP = 96 * 1024 * 1024

CONV_BACKENDS = ("gemm", "naive")


@dataclass
class ParamTensor:
    """Trainable value with its gradient and momentum buffer."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


def _check_backend(backend: str) -> None:
    if backend not in CONV_BACKENDS:
        raise ValueError(f"unknown conv backend {backend!r}")


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_out_size(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    num_h = h + 2 * pad - kh
    num_w = w + 2 * pad - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ValueError(
            f"non-integral output size for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    return num_h // stride + 1, num_w // stride + 1


def _patch_view(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def _oh_bands(n: int, ow: int, ckk: int, oh: int, itemsize: int):
    rows_cap = max(_COL_BYTES_CAP // max(n * ow * ckk * itemsize, 1), 1)
    for start in range(0, oh, rows_cap):
        yield start, min(start + rows_cap, oh)


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    backend: str = "gemm",
) -> np.ndarray:
    """Cross-correlation with bias: x (n,cin,h,w), w (cout,cin,kh,kw)."""
    _check_backend(backend)
    n, cin, h, win = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input has {cin}, kernel wants {cin_w}")
    oh, ow = _conv_out_size(h, win, kh, kw, stride, pad)
    xp = _pad_nchw(x, pad)

    if backend == "naive":
        y = np.zeros((n, cout, oh, ow), dtype=x.dtype)
        hs = (oh - 1) * stride + 1
        ws = (ow - 1) * stride + 1
        for co in range(cout):
            acc = y[:, co]
            for ci in range(cin):
                plane = xp[:, ci]
                for a in range(kh):
                    for bb in range(kw):
                        acc += w[co, ci, a, bb] * plane[
                            :, a : a + hs : stride, bb : bb + ws : stride
                        ]
            acc += b[co]
        return y

    view = _patch_view(xp, kh, kw, stride, oh, ow)
    wmat = w.reshape(cout, cin * kh * kw)
    y = np.empty((n, cout, oh, ow), dtype=x.dtype)
    for r0, r1 in _oh_bands(n, ow, wmat.shape[1], oh, x.dtype.itemsize):
        cols = view[:, :, :, :, r0:r1, :].transpose(0, 4, 5, 1, 2, 3)
        cols = cols.reshape(n * (r1 - r0) * ow, -1)
        band = cols @ wmat.T
        y[:, :, r0:r1, :] = band.reshape(n, r1 - r0, ow, cout).transpose(0, 3, 1, 2)
    y += b[None, :, None, None]
    return y


def conv2d_backward(
    grad_y: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    stride: int = 1,
    pad: int = 0,
):
    """Adjoints of conv2d: returns (grad_x, grad_w, grad_b)."""
    n, cin, h, win = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = grad_y.shape[2], grad_y.shape[3]
    xp = _pad_nchw(x, pad)

    grad_b = grad_y.sum(axis=(0, 2, 3))

    view = _patch_view(xp, kh, kw, stride, oh, ow)
    gy_mat = grad_y.transpose(0, 2, 3, 1).reshape(n * oh * ow, cout)
    ckk = cin * kh * kw
    grad_w_mat = np.zeros((cout, ckk), dtype=x.dtype)
    grad_cols = np.empty((n, oh, ow, ckk), dtype=x.dtype)
    wmat = w.reshape(cout, ckk)
    for r0, r1 in _oh_bands(n, ow, ckk, oh, x.dtype.itemsize):
        cols = view[:, :, :, :, r0:r1, :].transpose(0, 4, 5, 1, 2, 3)
        cols = cols.reshape(n * (r1 - r0) * ow, ckk)
        gy_band = grad_y[:, :, r0:r1, :].transpose(0, 2, 3, 1).reshape(-1, cout)
        grad_w_mat += gy_band.T @ cols
        grad_cols[:, r0:r1] = (gy_band @ wmat).reshape(n, r1 - r0, ow, ckk)
    grad_w = grad_w_mat.reshape(w.shape)

    # col2im: scatter-add each kernel offset back into the padded gradient
    gxp = np.zeros_like(xp)
    gc = grad_cols.reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    hs = (oh - 1) * stride + 1
    ws = (ow - 1) * stride + 1
    for a in range(kh):
        for bb in range(kw):
            gxp[:, :, a : a + hs : stride, bb : bb + ws : stride] += gc[:, :, a, bb]
    grad_x = gxp if pad == 0 else gxp[:, :, pad : pad + h, pad : pad + win]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def maxpool2(x: np.ndarray):
    """Stride-2 2x2 max pool. Ties go to the first window element in
    row-major order. Returns (y, argmax indices in 0..3)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    windows = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(grad_y: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c, oh, ow = grad_y.shape
    g = np.zeros((n, c, oh, ow, 4), dtype=grad_y.dtype)
    np.put_along_axis(g, idx[..., None], grad_y[..., None], axis=-1)
    return (
        g.reshape(n, c, oh, ow, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh * 2, ow * 2)
    )


def upconv2(x: np.ndarray, w: np.ndarray, backend: str = "gemm") -> np.ndarray:
    """Transposed convolution, stride 2, kernel 2x2, w (cin,cout,2,2).

    Each input pixel expands into a disjoint 2x2 output block, so the
    output is exactly (n, cout, 2h, 2w).
    """
    _check_backend(backend)
    n, cin, h, win = x.shape
    cin_w, cout = w.shape[:2]
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input has {cin}, kernel wants {cin_w}")

    if backend == "naive":
        y = np.zeros((n, cout, 2 * h, 2 * win), dtype=x.dtype)
        for co in range(cout):
            acc = y[:, co]
            for ci in range(cin):
                plane = x[:, ci]
                for a in range(2):
                    for bb in range(2):
                        acc[:, a::2, bb::2] += w[ci, co, a, bb] * plane
        return y

    # (n,h,w,cout,2,2) blocks, then interleave into the upsampled grid
    blocks = np.tensordot(x.transpose(0, 2, 3, 1), w, axes=([3], [0]))
    y = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * win)
    return np.ascontiguousarray(y)


def upconv2_backward(grad_y: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Adjoints of upconv2: returns (grad_x, grad_w)."""
    n, cin, h, win = x.shape
    cout = w.shape[1]
    gy = grad_y.reshape(n, cout, h, 2, win, 2).transpose(0, 2, 4, 1, 3, 5)
    grad_x = np.tensordot(gy, w, axes=([3, 4, 5], [1, 2, 3]))
    grad_x = np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2))
    grad_w = np.tensordot(x, gy, axes=([0, 2, 3], [0, 1, 2]))
    return grad_x, grad_w


def instance_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Per-sample, per-channel spatial standardization with scale/shift.

    Returns (y, cache) where cache feeds instance_norm_backward.
    """
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv, gamma)


def instance_norm_backward(grad_y: np.ndarray, cache):
    xhat, inv, gamma = cache
    dxhat = grad_y * gamma[None, :, None, None]
    mean_d = dxhat.mean(axis=(2, 3), keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
    grad_x = inv * (dxhat - mean_d - xhat * mean_dx)
    grad_gamma = (grad_y * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_y.sum(axis=(0, 2, 3))
    return grad_x, grad_gamma, grad_beta


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(grad_y: np.ndarray, x: np.ndarray, slope: float = 0.01):
    return grad_y * np.where(x > 0, 1.0, slope).astype(grad_y.dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_y: np.ndarray, y: np.ndarray) -> np.ndarray:
    return grad_y * y * (1.0 - y)


def sgd_step(
    params: list[ParamTensor],
    lr: float,
    momentum: float = 0.99,
    nesterov: bool = True,
    weight_decay: float = 0.0,
) -> None:
    """Momentum SGD update in place; gradients are zeroed afterwards."""
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.value
        p.velocity *= momentum
        p.velocity += g
        if nesterov:
            p.value -= lr * (g + momentum * p.velocity)
        else:
            p.value -= lr * p.velocity
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def gradcheck(fn, inputs, step: float = 1e-5) -> float:
    """Central-difference check of fn's analytic gradients, in float64.

    fn(inputs) must return (scalar loss, list of gradient arrays aligned
    with inputs). Returns the max relative error, normalized per element
    by max(|analytic|, |numeric|, 1e-8).
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    _, grads = fn(inputs)
    max_err = 0.0
    for arr, g in zip(inputs, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = fn(inputs)
            flat[i] = orig - step
            lm, _ = fn(inputs)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            max_err = max(max_err, err)
    return max_err


def _projected(out: np.ndarray, r: np.ndarray) -> float:
    return float((out * r).sum())


def _check_conv2d(rng: np.random.Generator) -> float:
    n = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h = int(rng.integers(4, 8))
    w_sp = int(rng.integers(4, 8))
    stride = int(rng.integers(1, 3))
    pad = 1
    h -= (h + 2 * pad - 3) % stride
    w_sp -= (w_sp + 2 * pad - 3) % stride
    x = rng.standard_normal((n, cin, h, w_sp))
    w = rng.standard_normal((cout, cin, 3, 3))
    b = rng.standard_normal(cout)
    oh, ow = _conv_out_size(h, w_sp, 3, 3, stride, pad)
    r = rng.standard_normal((n, cout, oh, ow))

    def fn(inputs):
        xi, wi, bi = inputs
        y = conv2d(xi, wi, bi, stride=stride, pad=pad)
        gx, gw, gb = conv2d_backward(r, xi, wi, stride=stride, pad=pad)
        return _projected(y, r), [gx, gw, gb]

    return gradcheck(fn, [x, w, b])


def _check_upconv2(rng: np.random.Generator) -> float:
    n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w_sp = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    x = rng.standard_normal((n, cin, h, w_sp))
    w = rng.standard_normal((cin, cout, 2, 2))
    r = rng.standard_normal((n, cout, 2 * h, 2 * w_sp))

    def fn(inputs):
        xi, wi = inputs
        y = upconv2(xi, wi)
        gx, gw = upconv2_backward(r, xi, wi)
        return _projected(y, r), [gx, gw]

    return gradcheck(fn, [x, w])


def _check_maxpool2(rng: np.random.Generator) -> float:
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w_sp = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
    # spread values so no window has near-ties; keeps the check off the
    # max function's kink set
    x = rng.permutation(n * c * h * w_sp).astype(np.float64).reshape(n, c, h, w_sp)
    x += rng.uniform(-0.3, 0.3, x.shape)
    r = rng.standard_normal((n, c, h // 2, w_sp // 2))

    def fn(inputs):
        (xi,) = inputs
        y, idx = maxpool2(xi)
        gx = maxpool2_backward(r, idx)
        return _projected(y, r), [gx]

    return gradcheck(fn, [x])


def _check_instance_norm(rng: np.random.Generator) -> float:
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w_sp = int(rng.integers(3, 6)), int(rng.integers(3, 6))
    x = rng.standard_normal((n, c, h, w_sp))
    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.standard_normal(c)
    r = rng.standard_normal(x.shape)

    def fn(inputs):
        xi, gi, bi = inputs
        y, cache = instance_norm(xi, gi, bi)
        gx, gg, gb = instance_norm_backward(r, cache)
        return _projected(y, r), [gx, gg, gb]

    return gradcheck(fn, [x, gamma, beta])


def _check_leaky_relu(rng: np.random.Generator) -> float:
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep clear of the kink at 0
    r = rng.standard_normal(x.shape)

    def fn(inputs):
        (xi,) = inputs
        y = leaky_relu(xi)
        return _projected(y, r), [leaky_relu_backward(r, xi)]

    return gradcheck(fn, [x])


def _check_sigmoid(rng: np.random.Generator) -> float:
    x = rng.standard_normal((2, 3, 4, 4)) * 2.0
    r = rng.standard_normal(x.shape)

    def fn(inputs):
        (xi,) = inputs
        y = sigmoid(xi)
        return _projected(y, r), [sigmoid_backward(r, y)]

    return gradcheck(fn, [x])


PRIMITIVE_CHECKS = {
    "conv2d": _check_conv2d,
    "upconv2": _check_upconv2,
    "maxpool2": _check_maxpool2,
    "instance_norm": _check_instance_norm,
    "leaky_relu": _check_leaky_relu,
    "sigmoid": _check_sigmoid,
}


def run_all_gradchecks(seed: int = 0, rounds: int = 5) -> dict[str, float]:
    """Gradcheck every primitive over `rounds` random shapes each.

    Returns the max relative error per primitive.
    """
    results = {}
    for name, check in PRIMITIVE_CHECKS.items():
        rng = np.random.default_rng(seed)
        results[name] = max(check(rng) for _ in range(rounds))
    return results
