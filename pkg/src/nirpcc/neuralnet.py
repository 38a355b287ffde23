"""Coordinate MLP with residual blocks, trained by hand-written backprop.

Layout of one network::

    encoded coords -> dense(in -> outer)
                   -> [LN -> dense(outer -> inner) -> ReLU
                          -> dense(inner -> outer) -> ReLU -> + skip] x blocks
                   -> LN -> dense(outer -> out) -> sigmoid

Layer norm has no learned affine; its statistics are recomputed on every
forward pass, so the dense layers hold every trainable scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LAYERNORM_EPS = 1e-5
LR_INITIAL = 1e-3
LR_FINAL = 1e-6


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    out_channels: int = 1
    num_frequencies: int = 12
    num_resblocks: int = 2
    block_outer_width: int = 512
    block_inner_width: int = 128

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")
        if self.num_resblocks < 1:
            raise ValueError("num_resblocks must be >= 1")
        for name in ("in_channels", "out_channels", "block_outer_width", "block_inner_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def encoded_width(self) -> int:
        return self.in_channels * (2 * self.num_frequencies + 1)

    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(fan_in, fan_out)`` of every dense layer in forward order."""
        outer, inner = self.block_outer_width, self.block_inner_width
        shapes = [(self.encoded_width, outer)]
        for _ in range(self.num_resblocks):
            shapes += [(outer, inner), (inner, outer)]
        shapes.append((outer, self.out_channels))
        return shapes


@dataclass
class DenseLayer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)


@dataclass
class NetworkModel:
    config: NetworkConfig
    layers: list[DenseLayer]

    def tensors(self) -> list[np.ndarray]:
        """Parameter tensors in canonical order: per layer, weights then bias."""
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def l1_norm(self) -> float:
        return float(sum(np.abs(t).sum() for t in self.tensors()))

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def copy(self) -> "NetworkModel":
        return NetworkModel(
            self.config,
            [DenseLayer(l.weights.copy(), l.bias.copy()) for l in self.layers],
        )

    def astype(self, dtype) -> "NetworkModel":
        return NetworkModel(
            self.config,
            [DenseLayer(l.weights.astype(dtype), l.bias.astype(dtype)) for l in self.layers],
        )

    @classmethod
    def from_tensors(cls, config: NetworkConfig, tensors) -> "NetworkModel":
        tensors = list(tensors)
        layers = [DenseLayer(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)]
        model = cls(config, layers)
        check_shapes(model)
        return model


def check_shapes(model: NetworkModel) -> None:
    shapes = model.config.layer_shapes()
    if len(model.layers) != len(shapes):
        raise ValueError(f"expected {len(shapes)} dense layers, got {len(model.layers)}")
    for i, (layer, (fi, fo)) in enumerate(zip(model.layers, shapes)):
        if layer.weights.shape != (fi, fo) or layer.bias.shape != (fo,):
            raise ValueError(
                f"layer {i}: expected weights {(fi, fo)} / bias {(fo,)}, "
                f"got {layer.weights.shape} / {layer.bias.shape}"
            )


def param_count(config: NetworkConfig) -> int:
    return sum(fi * fo + fo for fi, fo in config.layer_shapes())


def init_model(config: NetworkConfig, seed: int) -> NetworkModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fi, fo in config.layer_shapes():
        limit = np.sqrt(6.0 / (fi + fo))
        layers.append(DenseLayer(rng.uniform(-limit, limit, size=(fi, fo)), np.zeros(fo)))
    return NetworkModel(config, layers)


# --------------------------------------------------------------------------
# positional encoding


def normalize_coords(x, N: int) -> np.ndarray:
    """Map grid coordinates ``0..2**N - 1`` onto ``[-1, 1]``."""
    x = np.asarray(x, dtype=np.float64)
    return 2.0 * x / ((1 << N) - 1) - 1.0


def positional_encode(x, N: int, L: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal lift of voxel coordinates.

    Output columns are grouped ``[x~ | sin(2^0 pi x~) .. sin(2^(L-1) pi x~) | cos(...)]``,
    each frequency contributing one column per input axis.  A single
    3-vector gives a 1-D result; an ``(n, 3)`` array gives ``(n, 3(2L+1))``.
    """
    xt = normalize_coords(x, N).astype(dtype, copy=False)
    single = xt.ndim == 1
    xt = xt.reshape(-1, xt.shape[-1])
    if L == 0:
        out = xt.copy()
    else:
        freqs = ((2.0 ** np.arange(L)) * np.pi).astype(dtype)
        angles = (xt[:, None, :] * freqs[None, :, None]).reshape(len(xt), -1)
        out = np.concatenate([xt, np.sin(angles), np.cos(angles)], axis=1)
    return out[0] if single else out


# --------------------------------------------------------------------------
# forward / backward


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _row_mean(a):
    # matmul against a constant column beats ndarray.mean(axis=1) on narrow rows
    w = np.full((a.shape[1], 1), 1.0 / a.shape[1], dtype=a.dtype)
    return a @ w


def _layernorm(h):
    centered = h - _row_mean(h)
    var = np.einsum("ij,ij->i", centered, centered)[:, None] * centered.dtype.type(1.0 / h.shape[1])
    inv_std = 1.0 / np.sqrt(var + centered.dtype.type(LAYERNORM_EPS))
    centered *= inv_std
    return centered, inv_std


def _layernorm_backward(g, xhat, inv_std):
    proj = np.einsum("ij,ij->i", g, xhat)[:, None] * g.dtype.type(1.0 / g.shape[1])
    out = g - _row_mean(g)
    out -= xhat * proj
    out *= inv_std
    return out


@dataclass
class ForwardCache:
    model_id: int
    inputs: np.ndarray
    blocks: list = field(default_factory=list)  # (xhat, inv_std, a1, a2) per block
    final_xhat: np.ndarray | None = None
    final_inv_std: np.ndarray | None = None
    outputs: np.ndarray | None = None


def forward(model: NetworkModel, encoded_batch: np.ndarray):
    """Evaluate the network; returns ``(outputs, cache)`` with outputs in (0, 1)."""
    x = np.asarray(encoded_batch, dtype=model.dtype)
    if x.ndim != 2 or x.shape[1] != model.config.encoded_width:
        raise ValueError(
            f"batch width {x.shape[-1] if x.ndim else None} does not match "
            f"encoded width {model.config.encoded_width}"
        )
    layers = model.layers
    cache = ForwardCache(id(model), x)
    h = x @ layers[0].weights + layers[0].bias
    for b in range(model.config.num_resblocks):
        d1, d2 = layers[1 + 2 * b], layers[2 + 2 * b]
        xhat, inv_std = _layernorm(h)
        a1 = xhat @ d1.weights
        a1 += d1.bias
        np.maximum(a1, 0, out=a1)
        a2 = a1 @ d2.weights
        a2 += d2.bias
        np.maximum(a2, 0, out=a2)
        cache.blocks.append((xhat, inv_std, a1, a2))
        h = h + a2
    xhat, inv_std = _layernorm(h)
    cache.final_xhat, cache.final_inv_std = xhat, inv_std
    out = _sigmoid(xhat @ layers[-1].weights + layers[-1].bias)
    cache.outputs = out
    return out, cache


def backward(model: NetworkModel, cache: ForwardCache, output_gradients: np.ndarray) -> list[DenseLayer]:
    """Gradients of a scalar loss given ``dL/d(outputs)``; one DenseLayer per layer."""
    if cache.model_id != id(model) or cache.outputs is None:
        raise ValueError("stale cache: it was not produced by forward() on this model")
    g_out = np.asarray(output_gradients, dtype=model.dtype)
    if g_out.shape != cache.outputs.shape:
        raise ValueError(f"output gradient shape {g_out.shape} != outputs {cache.outputs.shape}")
    return _backward_from_logits(model, cache, g_out * cache.outputs * (1.0 - cache.outputs))


def backward_logits(model: NetworkModel, cache: ForwardCache, logit_gradients: np.ndarray) -> list[DenseLayer]:
    """Like :func:`backward` but starting from ``dL/d(pre-sigmoid logits)``."""
    if cache.model_id != id(model) or cache.outputs is None:
        raise ValueError("stale cache: it was not produced by forward() on this model")
    return _backward_from_logits(model, cache, np.asarray(logit_gradients, dtype=model.dtype))


def _backward_from_logits(model, cache, gz):
    layers = model.layers
    grads = [None] * len(layers)
    grads[-1] = DenseLayer(cache.final_xhat.T @ gz, gz.sum(axis=0))
    g_h = _layernorm_backward(gz @ layers[-1].weights.T, cache.final_xhat, cache.final_inv_std)
    for b in reversed(range(model.config.num_resblocks)):
        d1, d2 = layers[1 + 2 * b], layers[2 + 2 * b]
        xhat, inv_std, a1, a2 = cache.blocks[b]
        g2 = g_h * (a2 > 0)
        grads[2 + 2 * b] = DenseLayer(a1.T @ g2, g2.sum(axis=0))
        g1 = g2 @ d2.weights.T
        g1 *= a1 > 0
        grads[1 + 2 * b] = DenseLayer(xhat.T @ g1, g1.sum(axis=0))
        g_h = g_h + _layernorm_backward(g1 @ d1.weights.T, xhat, inv_std)
    grads[0] = DenseLayer(cache.inputs.T @ g_h, g_h.sum(axis=0))
    return grads


def predict(model: NetworkModel, coords, N: int, chunk: int = 1 << 16) -> np.ndarray:
    """Network outputs for integer voxel coordinates, evaluated in chunks."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    out = np.empty((len(coords), model.config.out_channels), dtype=model.dtype)
    for s in range(0, len(coords), chunk):
        enc = positional_encode(coords[s:s + chunk], N, model.config.num_frequencies, model.dtype)
        out[s:s + chunk] = forward(model, enc)[0]
    return out


# --------------------------------------------------------------------------
# optimizer


def learning_rate(step: int, total_steps: int) -> float:
    """Exponential decay from 1e-3 at step 0 to 1e-6 at ``total_steps``."""
    if total_steps <= 0:
        return LR_INITIAL
    frac = min(max(step / total_steps, 0.0), 1.0)
    return LR_INITIAL * (LR_FINAL / LR_INITIAL) ** frac


@dataclass
class OptimizerState:
    total_steps: int
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model: NetworkModel, total_steps: int) -> "OptimizerState":
        tensors = model.tensors()
        return cls(total_steps, m=[np.zeros_like(t) for t in tensors], v=[np.zeros_like(t) for t in tensors])

    @property
    def lr(self) -> float:
        return learning_rate(self.step, self.total_steps)


def adam_step(model: NetworkModel, opt: OptimizerState, grads: list[DenseLayer]) -> None:
    lr = opt.lr
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    flat_grads = []
    for g in grads:
        flat_grads += [g.weights, g.bias]
    for p, g, m, v in zip(model.tensors(), flat_grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
