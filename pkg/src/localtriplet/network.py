"""The embedding network f(I; theta): a configurable stack of conv/pool/
dense layers with hand-derived backward passes, plus the softmax
classification head for the end-to-end baseline and the Adam optimizer.

Layout conventions: image batches are (n, H, W, C) float64, flat batches
are (n, d). Convolutions are 3x3-style odd square filters, stride 1,
zero "same" padding, realized as im2col + one matrix multiply; max
pooling is 2x2 stride 2 and routes gradients to the first maximum in
row-major window order. Leaky ReLU is max(0.01x, x) with derivative 0.01
at exactly 0.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

LEAKY_SLOPE = 0.01
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the stack.

    kind is one of "conv2d", "maxpool2", "dense", "flatten". Optional
    in_channels / in_dim pin the expected input and are validated against
    the inferred shape chain at construction.
    """

    kind: str
    out_channels: int | None = None   # conv2d
    filter_size: int = 3              # conv2d, odd
    in_channels: int | None = None    # conv2d, optional check
    out_dim: int | None = None        # dense
    in_dim: int | None = None         # dense, optional check
    activation: str = "none"          # "leaky_relu" | "none"


def conv2d(out_channels: int, filter_size: int = 3, activation: str = "leaky_relu",
           in_channels: int | None = None) -> LayerSpec:
    return LayerSpec(kind="conv2d", out_channels=out_channels, filter_size=filter_size,
                     in_channels=in_channels, activation=activation)


def maxpool2() -> LayerSpec:
    return LayerSpec(kind="maxpool2")


def flatten() -> LayerSpec:
    return LayerSpec(kind="flatten")


def dense(out_dim: int, activation: str = "leaky_relu", in_dim: int | None = None) -> LayerSpec:
    return LayerSpec(kind="dense", out_dim=out_dim, in_dim=in_dim, activation=activation)


def mnist_cnn() -> list[LayerSpec]:
    """Digit-image reference stack: two 3x3 conv+pool blocks into a 128-d
    embedding (28x28x1 -> 14x14x32 -> 7x7x64 -> 3136 -> 128)."""
    return [conv2d(32), maxpool2(), conv2d(64), maxpool2(), flatten(), dense(128)]


def mlp(*dims: int) -> list[LayerSpec]:
    """Feed-forward embedding stack, leaky ReLU on every layer."""
    return [dense(d) for d in dims]


def leaky_relu(x: np.ndarray) -> np.ndarray:
    # identical to max(0.01x, x); single ufunc pass
    return np.maximum(LEAKY_SLOPE * x, x)


def leaky_relu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x.dtype.type(1.0), x.dtype.type(LEAKY_SLOPE))


def _apply_activation(kind: str, z: np.ndarray):
    if kind == "leaky_relu":
        return leaky_relu(z), z
    if kind == "none":
        return z, None
    raise ValueError(f"bad_activation: {kind}")


def _activation_backward(kind: str, g: np.ndarray, z):
    if kind == "leaky_relu":
        return g * leaky_relu_grad(z)
    return g


class _Conv2d:
    """Same-padding stride-1 convolution via im2col."""

    def __init__(self, spec: LayerSpec, in_shape, rng, dtype):
        f = spec.filter_size
        if f % 2 != 1 or f < 1:
            raise ValueError(f"shape_mismatch: conv filter_size {f} must be odd")
        if len(in_shape) != 3:
            raise ValueError(f"shape_mismatch: conv2d needs (H, W, C) input, got {in_shape}")
        h, w, cin = in_shape
        if spec.in_channels is not None and spec.in_channels != cin:
            raise ValueError(f"shape_mismatch: conv in_channels {spec.in_channels} != {cin}")
        if not spec.out_channels or spec.out_channels < 1:
            raise ValueError("shape_mismatch: conv2d needs out_channels >= 1")
        cout = spec.out_channels
        self.spec = spec
        self.f = f
        self.pad = f // 2
        self.in_shape = (h, w, cin)
        self.out_shape = (h, w, cout)
        fan_in = f * f * cin
        self.w = (rng.standard_normal((fan_in, cout)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)

    @property
    def params(self):
        return [self.w, self.b]

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        n, (h, w, cin), f, p = x.shape[0], self.in_shape, self.f, self.pad
        xp = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=x.dtype)
        xp[:, p:p + h, p:p + w, :] = x
        cols = [xp[:, dy:dy + h, dx:dx + w, :] for dy in range(f) for dx in range(f)]
        return np.concatenate(cols, axis=3).reshape(n * h * w, f * f * cin)

    def forward(self, x: np.ndarray, want_cache: bool):
        n = x.shape[0]
        h, w, _ = self.out_shape
        cols = self._im2col(x)
        z = (cols @ self.w + self.b).reshape(n, h, w, self.spec.out_channels)
        y, zc = _apply_activation(self.spec.activation, z)
        return y, ((cols, zc, n) if want_cache else None)

    def backward(self, cache, g: np.ndarray):
        cols, zc, n = cache
        h, w, cin = self.in_shape
        f, p = self.f, self.pad
        g = _activation_backward(self.spec.activation, g, zc)
        g_flat = g.reshape(n * h * w, self.spec.out_channels)
        grad_w = cols.T @ g_flat
        grad_b = g_flat.sum(axis=0)
        g_cols = (g_flat @ self.w.T).reshape(n, h, w, f * f, cin)
        g_pad = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=g.dtype)
        for i, (dy, dx) in enumerate((dy, dx) for dy in range(f) for dx in range(f)):
            g_pad[:, dy:dy + h, dx:dx + w, :] += g_cols[:, :, :, i, :]
        return g_pad[:, p:p + h, p:p + w, :], [grad_w, grad_b]


class _MaxPool2:
    def __init__(self, spec: LayerSpec, in_shape, rng, dtype):
        if len(in_shape) != 3:
            raise ValueError(f"shape_mismatch: maxpool2 needs (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        if h % 2 or w % 2:
            raise ValueError(f"shape_mismatch: maxpool2 needs even spatial dims, got {h}x{w}")
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = (h // 2, w // 2, c)

    params: list = []

    def forward(self, x: np.ndarray, want_cache: bool):
        n = x.shape[0]
        h2, w2, c = self.out_shape
        # windows ordered (0,0),(0,1),(1,0),(1,1): argmax ties go to the
        # first element in row-major scan order
        win = x.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h2, w2, 4, c)
        arg = np.argmax(win, axis=3)
        y = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        return y, ((arg, n) if want_cache else None)

    def backward(self, cache, g: np.ndarray):
        arg, n = cache
        h2, w2, c = self.out_shape
        g_win = np.zeros((n, h2, w2, 4, c), dtype=g.dtype)
        np.put_along_axis(g_win, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        g_in = g_win.reshape(n, h2, w2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        return g_in.reshape(n, h2 * 2, w2 * 2, c), []


class _Flatten:
    def __init__(self, spec: LayerSpec, in_shape, rng, dtype):
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = (int(np.prod(in_shape)),)

    params: list = []

    def forward(self, x: np.ndarray, want_cache: bool):
        return x.reshape(x.shape[0], -1), (x.shape if want_cache else None)

    def backward(self, cache, g: np.ndarray):
        return g.reshape(cache), []


class _Dense:
    def __init__(self, spec: LayerSpec, in_shape, rng, dtype):
        if len(in_shape) != 1:
            raise ValueError(f"shape_mismatch: dense needs flat input, got {in_shape}")
        (d_in,) = in_shape
        if spec.in_dim is not None and spec.in_dim != d_in:
            raise ValueError(f"shape_mismatch: dense in_dim {spec.in_dim} != {d_in}")
        if not spec.out_dim or spec.out_dim < 1:
            raise ValueError("shape_mismatch: dense needs out_dim >= 1")
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = (spec.out_dim,)
        self.w = (rng.standard_normal((d_in, spec.out_dim)) * np.sqrt(2.0 / d_in)).astype(dtype)
        self.b = np.zeros(spec.out_dim, dtype=dtype)

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x: np.ndarray, want_cache: bool):
        z = x @ self.w + self.b
        y, zc = _apply_activation(self.spec.activation, z)
        return y, ((x, zc) if want_cache else None)

    def backward(self, cache, g: np.ndarray):
        x, zc = cache
        g = _activation_backward(self.spec.activation, g, zc)
        return g @ self.w.T, [x.T @ g, g.sum(axis=0)]


_LAYER_KINDS = {"conv2d": _Conv2d, "maxpool2": _MaxPool2, "flatten": _Flatten, "dense": _Dense}


class EmbeddingNet:
    """A layer stack with shape chain validated at construction.

    Parameters are float64 arrays, He-initialized from `seed`; the flat
    `params` list (layer order, weight before bias) is the unit the
    optimizer and checkpoints operate on.
    """

    def __init__(self, input_shape, layers: list[LayerSpec], seed: int = 0,
                 dtype: str = "float64"):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.specs = list(layers)
        self.seed = int(seed)
        if dtype not in ("float64", "float32"):
            raise ValueError(f"bad_dtype: {dtype}")
        self.dtype = np.dtype(dtype)
        if not self.specs:
            raise ValueError("shape_mismatch: empty layer stack")
        rng = np.random.default_rng(self.seed)
        self.layers = []
        shape = self.input_shape
        for spec in self.specs:
            if spec.kind not in _LAYER_KINDS:
                raise ValueError(f"bad_layer_kind: {spec.kind}")
            layer = _LAYER_KINDS[spec.kind](spec, shape, rng, self.dtype)
            self.layers.append(layer)
            shape = layer.out_shape
        if len(shape) != 1:
            raise ValueError(f"shape_mismatch: embedding must be flat, stack ends at {shape}")
        self.out_dim = shape[0]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def set_params(self, values: list[np.ndarray]) -> None:
        current = self.params
        if len(values) != len(current):
            raise ValueError(f"shape_mismatch: {len(values)} arrays for {len(current)} params")
        for dst, src in zip(current, values):
            if dst.shape != src.shape:
                raise ValueError(f"shape_mismatch: {src.shape} into {dst.shape}")
            dst[...] = src

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim < 2:
            raise ValueError(f"shape_mismatch: need a batch, got {x.shape}")
        flat = int(np.prod(self.input_shape))
        if x.ndim == 2 and x.shape[1] == flat:
            return x.reshape((x.shape[0],) + self.input_shape)
        if x.shape[1:] == self.input_shape:
            return x
        raise ValueError(f"shape_mismatch: batch {x.shape} vs input {self.input_shape}")

    def forward(self, x, want_cache: bool = True):
        """Run the stack; returns (embeddings, caches-for-backward)."""
        x = self._check_input(x)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, want_cache)
            caches.append(cache)
        return x, (caches if want_cache else None)

    def backward(self, caches, grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients for a forward pass, aligned with `params`."""
        if caches is None:
            raise ValueError("stale_cache: forward was run without want_cache")
        g = np.asarray(grad_out, dtype=self.dtype)
        grads: list[np.ndarray] = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g, layer_grads = layer.backward(cache, g)
            grads = layer_grads + grads
        return grads

    def embed(self, x, batch: int = 512) -> np.ndarray:
        """Cache-free forward over arbitrarily many samples."""
        x = np.asarray(x, dtype=self.dtype)
        outs = [self.forward(x[lo:lo + batch], want_cache=False)[0]
                for lo in range(0, x.shape[0], batch)]
        return np.concatenate(outs, axis=0)


class SoftmaxHead:
    """Linear class head on top of the embedding, for the end-to-end baseline."""

    def __init__(self, in_dim: int, n_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_classes = int(n_classes)
        self.w = rng.standard_normal((in_dim, n_classes)) * np.sqrt(2.0 / in_dim)
        self.b = np.zeros(n_classes)

    @property
    def params(self):
        return [self.w, self.b]


def softmax_head_loss(embeddings, labels, head: SoftmaxHead):
    """Mean cross-entropy of the head's softmax over a batch.

    Returns (loss, grad wrt embeddings, [grad_w, grad_b]). Logits are
    max-shifted before exponentiation.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= head.n_classes):
        raise ValueError(f"label_out_of_range: labels must be in 0..{head.n_classes - 1}")
    n = x.shape[0]
    z = x @ head.w + head.b
    z = z - np.max(z, axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / np.sum(ez, axis=1, keepdims=True)
    loss = float(-np.mean(np.log(p[np.arange(n), y])))
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    return loss, dz @ head.w.T, [x.T @ dz, dz.sum(axis=0)]


class Adam:
    """Bias-corrected Adam; update is -lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("shape_mismatch: optimizer state built for a different net")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"shape_mismatch: grad {g.shape} for param {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def save_checkpoint(path, net: EmbeddingNet, extra: dict | None = None) -> None:
    """Write a versioned npz: JSON meta + flat parameter arrays in layer order."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "layers": [asdict(s) for s in net.specs],
        "seed": net.seed,
        "dtype": net.dtype.name,
        "extra": extra or {},
    }
    arrays = {f"param_{i:03d}": p for i, p in enumerate(net.params)}
    np.savez(path, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path) -> tuple[EmbeddingNet, dict]:
    """Rebuild an EmbeddingNet from a checkpoint; returns (net, extra-meta)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"bad_checkpoint: format_version {meta.get('format_version')}")
        specs = [LayerSpec(**s) for s in meta["layers"]]
        net = EmbeddingNet(meta["input_shape"], specs, seed=meta["seed"],
                           dtype=meta.get("dtype", "float64"))
        net.set_params([z[f"param_{i:03d}"] for i in range(len(net.params))])
    return net, meta.get("extra", {})
