"""Toy-scale styled-convolution U-Net with a parallel style track.

Feature grids are ``(C, H, W)`` arrays. Every layer has a ``*_forward``
returning ``(output, cache)`` and a matching ``*_backward`` taking the
output adjoint and the cache. Parameters live in flat ``name -> array``
dicts so optimizers and checkpoints can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .latent import LatentMaps, decode, decode_vjp
from .maps import SvbrdfMaps
from .render import tonemap

LEAK = 0.2
N_OUT = 10  # 3 normal + 3 diffuse + 1 roughness + 3 specular
ARCHS = ("dynamic", "fixed")


# -- primitive layers -------------------------------------------------------


def _cols(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H, W, k, k)


def conv2d(x, w, b=None):
    """Same-padded stride-1 convolution (cross-correlation) with bias."""
    if x.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ValueError(f"conv expects {w.shape[1]} input channels, got shape {x.shape}")
    if w.shape[-1] % 2 == 0:
        raise ValueError("kernel size must be odd")
    y = np.tensordot(w, _cols(x, w.shape[-1]), axes=([1, 2, 3], [0, 3, 4]))
    if b is not None:
        y += b[:, None, None]
    return y


def conv2d_backward(dy, x, w):
    """Returns ``(dx, dw, db)``."""
    dw = np.tensordot(dy, _cols(x, w.shape[-1]), axes=([1, 2], [1, 2]))
    db = dy.sum(axis=(1, 2))
    dx = conv2d(dy, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
    return dx, dw, db


def leaky_relu(x):
    return np.where(x > 0, x, LEAK * x)


def leaky_relu_backward(dy, x):
    return np.where(x > 0, dy, LEAK * dy)


def styled_conv_forward(x, w, b, sigma):
    """Convolution whose weights are modulated per input channel,
    ``w'[o, i] = w[o, i] * sigma[i]``. No demodulation."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (w.shape[1],):
        raise ValueError(f"sigma must have length {w.shape[1]}, got {sigma.shape}")
    w_mod = w * sigma[None, :, None, None]
    return conv2d(x, w_mod, b), (x, w, sigma, w_mod)


def styled_conv_backward(dy, cache):
    """Returns ``(dx, dw, db, dsigma)``."""
    x, w, sigma, w_mod = cache
    dx, dw_mod, db = conv2d_backward(dy, x, w_mod)
    dw = dw_mod * sigma[None, :, None, None]
    dsigma = np.sum(dw_mod * w, axis=(0, 2, 3))
    return dx, dw, db, dsigma


def avg_pool2(x):
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"cannot downsample odd spatial size {h}x{w}")
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def avg_pool2_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) / 4.0


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(dy):
    c, h, w = dy.shape
    return dy.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


# -- style block ------------------------------------------------------------


def init_style_block(rng, c_in, c_out, style_dim, mean_channels, kernel=3) -> dict:
    fan_in = c_in * kernel * kernel
    n_z = mean_channels + style_dim
    return {
        "fc1.w": rng.normal(0, 1 / np.sqrt(n_z), (style_dim, n_z)),
        "fc1.b": np.zeros(style_dim),
        "fc2.w": rng.normal(0, 0.1 / np.sqrt(style_dim), (c_in, style_dim)),
        # modulation starts near 1
        "fc2.b": np.ones(c_in),
        "conv.w": rng.normal(0, np.sqrt(2.0 / fan_in), (c_out, c_in, kernel, kernel)),
        "conv.b": np.zeros(c_out),
    }


def style_block_param_count(c_in, c_out, style_dim, mean_channels, kernel=3) -> int:
    return (style_dim * (mean_channels + style_dim) + style_dim
            + c_in * style_dim + c_in
            + c_out * c_in * kernel * kernel + c_out)


def style_block_forward(x, style_in, p, mean_channels, activate=True):
    """Returns ``((features, style_out), cache)``.

    The mean of the first ``mean_channels`` channels is concatenated with the
    incoming style and passed through FC -> leaky ReLU -> FC to give
    ``sigma``. The hidden FC activation is the outgoing style, which lets
    feature information flow back into the style track.
    """
    if x.shape[0] < mean_channels:
        raise ValueError(f"block needs at least {mean_channels} channels, got {x.shape[0]}")
    z = np.concatenate([x[:mean_channels].mean(axis=(1, 2)), style_in])
    h1 = p["fc1.w"] @ z + p["fc1.b"]
    a1 = leaky_relu(h1)
    sigma = p["fc2.w"] @ a1 + p["fc2.b"]
    y, conv_cache = styled_conv_forward(x, p["conv.w"], p["conv.b"], sigma)
    out = leaky_relu(y) if activate else y
    return (out, a1), (p, x.shape, z, h1, a1, y, conv_cache, activate, mean_channels)


def style_block_backward(d_out, d_style, cache):
    """Returns ``(dx, dstyle_in, grads)``."""
    p, x_shape, z, h1, a1, y, conv_cache, activate, mc = cache
    dy = leaky_relu_backward(d_out, y) if activate else d_out
    dx, dw, db, dsigma = styled_conv_backward(dy, conv_cache)
    d_a1 = p["fc2.w"].T @ dsigma + d_style
    d_h1 = leaky_relu_backward(d_a1, h1)
    d_z = p["fc1.w"].T @ d_h1
    hw = x_shape[1] * x_shape[2]
    dx[:mc] += d_z[:mc, None, None] / hw
    grads = {
        "fc1.w": np.outer(d_h1, z), "fc1.b": d_h1,
        "fc2.w": np.outer(dsigma, a1), "fc2.b": dsigma,
        "conv.w": dw, "conv.b": db,
    }
    return dx, d_z[mc:], grads


def encode_block_forward(x, style, p, mean_channels):
    """2x average-pool, then a style block."""
    (out, s), cache = style_block_forward(avg_pool2(x), style, p, mean_channels)
    return (out, s), cache


def encode_block_backward(d_out, d_style, cache):
    dx, ds, grads = style_block_backward(d_out, d_style, cache)
    return avg_pool2_backward(dx), ds, grads


def decode_block_forward(x, style, skip, skip_style, p, mean_channels):
    """2x nearest upsample, concatenate the skip features, add the skip
    style, then a style block."""
    up = upsample2(x)
    if skip.shape[1:] != up.shape[1:]:
        raise ValueError(f"skip shape {skip.shape} does not match upsampled {up.shape}")
    cat = np.concatenate([up, skip], axis=0)
    (out, s), cache = style_block_forward(cat, style + skip_style, p, mean_channels)
    return (out, s), (cache, x.shape[0])


def decode_block_backward(d_out, d_style, cache):
    """Returns ``(dx, dstyle, dskip, dskip_style, grads)``."""
    block_cache, c_x = cache
    dcat, ds, grads = style_block_backward(d_out, d_style, block_cache)
    return upsample2_backward(dcat[:c_x]), ds, dcat[c_x:], ds, grads


# -- aggregation ------------------------------------------------------------


def aggregate_dynamic(features):
    """Elementwise max over K grids; returns ``(max, argmax)``.

    ``argmax`` picks the first index on ties so the backward pass routes
    each adjoint entry to exactly one input.
    """
    if len(features) == 0:
        raise ValueError("need at least one feature grid")
    shape = np.shape(features[0])
    if any(np.shape(f) != shape for f in features):
        raise ValueError("feature grids differ in shape")
    stack = np.stack(features)
    idx = np.argmax(stack, axis=0)
    return np.take_along_axis(stack, idx[None], axis=0)[0], idx


def aggregate_dynamic_backward(d_out, idx, k):
    return [np.where(idx == j, d_out, 0.0) for j in range(k)]


def assemble_fixed_input(images, k=None):
    """Concatenate ``(H, W, 3)`` images channelwise into a ``(3K, H, W)`` grid."""
    if k is not None and len(images) != k:
        raise ValueError(f"expected exactly {k} images, got {len(images)}")
    return np.concatenate([np.asarray(im, dtype=np.float64).transpose(2, 0, 1) for im in images], axis=0)


# -- full model -------------------------------------------------------------


@dataclass(frozen=True)
class NetConfig:
    arch: str = "dynamic"
    n_inputs: int = 6
    widths: tuple = (8, 16, 32, 64)
    style_dim: int = 16
    mean_channels: int = 8
    kernel: int = 3

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.widths[0] < self.mean_channels:
            raise ValueError("first width must cover the mean channels")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def inner_in_channels(self) -> int:
        return 3 if self.arch == "dynamic" else 3 * self.n_inputs

    def block_table(self):
        """``(name, c_in, c_out)`` for every style block of the inner model."""
        w = self.widths
        rows = [("e0", w[0], w[0])]
        rows += [(f"e{i}", w[i - 1], w[i]) for i in range(1, len(w))]
        rows += [(f"d{i}", w[i + 1] + w[i], w[i]) for i in reversed(range(len(w) - 1))]
        return rows


def init_params(config: NetConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    k = config.kernel
    c_in = config.inner_in_channels
    w0 = config.widths[0]
    params = {
        "inner.stem.w": rng.normal(0, np.sqrt(2.0 / (c_in * k * k)), (w0, c_in, k, k)),
        "inner.stem.b": np.zeros(w0),
    }
    for name, ci, co in config.block_table():
        blk = init_style_block(rng, ci, co, config.style_dim, config.mean_channels, k)
        params.update({f"inner.{name}.{key}": v for key, v in blk.items()})
    head = init_style_block(rng, w0, N_OUT, config.style_dim, config.mean_channels, k)
    head["conv.w"] *= 0.1
    params.update({f"head.{key}": v for key, v in head.items()})
    return params


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def inner_model_forward(x, params, config: NetConfig):
    """U-shaped encoder/decoder; returns ``((features, style), cache)``."""
    h, w = x.shape[1:]
    depth = config.depth
    if h != w or h < 2**depth or h & (h - 1):
        raise ValueError(f"inner model needs a square power-of-two input >= {2**depth}, got {h}x{w}")
    mc = config.mean_channels
    stem_pre = conv2d(x, params["inner.stem.w"], params["inner.stem.b"])
    f = leaky_relu(stem_pre)
    s = np.zeros(config.style_dim)
    caches = {}
    skips = []
    (f, s), caches["e0"] = style_block_forward(f, s, _sub(params, "inner.e0"), mc)
    skips.append((f, s))
    for i in range(1, depth + 1):
        (f, s), caches[f"e{i}"] = encode_block_forward(f, s, _sub(params, f"inner.e{i}"), mc)
        if i < depth:
            skips.append((f, s))
    for i in reversed(range(depth)):
        sk, sk_s = skips[i]
        (f, s), caches[f"d{i}"] = decode_block_forward(f, s, sk, sk_s, _sub(params, f"inner.d{i}"), mc)
    return (f, s), (x, stem_pre, caches)


def inner_model_backward(d_f, d_s, cache, params, config: NetConfig):
    """Returns ``(dx, grads)`` with grads keyed like ``params``."""
    x, stem_pre, caches = cache
    depth = config.depth
    grads = {}

    def put(block, g):
        for key, v in g.items():
            grads[f"inner.{block}.{key}"] = v

    d_skips = [None] * depth
    for i in range(depth):
        d_f, d_s, d_sk, d_sk_s, g = decode_block_backward(d_f, d_s, caches[f"d{i}"])
        put(f"d{i}", g)
        d_skips[i] = (d_sk, d_sk_s)
    for i in range(depth, 0, -1):
        if i < depth:
            d_f = d_f + d_skips[i][0]
            d_s = d_s + d_skips[i][1]
        d_f, d_s, g = encode_block_backward(d_f, d_s, caches[f"e{i}"])
        put(f"e{i}", g)
    d_f = d_f + d_skips[0][0]
    d_s = d_s + d_skips[0][1]
    d_f, d_s, g = style_block_backward(d_f, d_s, caches["e0"])
    put("e0", g)
    d_pre = leaky_relu_backward(d_f, stem_pre)
    dx, grads["inner.stem.w"], grads["inner.stem.b"] = conv2d_backward(d_pre, x, params["inner.stem.w"])
    return dx, grads


def head_to_latent(out) -> LatentMaps:
    """Split a ``(10, H, W)`` head output into latent map fields."""
    hwc = out.transpose(1, 2, 0)
    return LatentMaps(hwc[..., 0:3], hwc[..., 3:6], hwc[..., 6], hwc[..., 7:10])


def latent_to_head(lat: LatentMaps):
    hwc = np.concatenate(
        [lat.normals, lat.diffuse, lat.roughness[..., None], lat.specular], axis=-1
    )
    return hwc.transpose(2, 0, 1)


def svbrdf_head_forward(features, style, params, config: NetConfig):
    """Style block to 10 channels, squashed into valid map ranges."""
    if features.shape[0] != config.widths[0]:
        raise ValueError(f"head expects {config.widths[0]} channels, got {features.shape[0]}")
    (out, _), cache = style_block_forward(features, style, _sub(params, "head"), config.mean_channels, activate=False)
    lat = head_to_latent(out)
    return decode(lat), (cache, lat)


def svbrdf_head_backward(d_maps: SvbrdfMaps, cache):
    """Returns ``(dfeatures, dstyle, grads)``."""
    block_cache, lat = cache
    d_out = latent_to_head(decode_vjp(lat, d_maps))
    d_f, d_s, g = style_block_backward(d_out, np.zeros_like(block_cache[4]), block_cache)
    return d_f, d_s, {f"head.{k}": v for k, v in g.items()}


def preprocess(image):
    """``(H, W, 3)`` linear image -> tonemapped ``(3, H, W)`` grid."""
    return tonemap(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)).transpose(2, 0, 1)


class StyledNet:
    """"Dynamic" (shared inner model per image, max-pooled) or "fixed"
    (images concatenated into one inner model) SVBRDF estimator."""

    def __init__(self, config: NetConfig | None = None, params: dict | None = None, seed: int = 0):
        self.config = config or NetConfig()
        self.params = params if params is not None else init_params(self.config, seed)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def forward(self, images):
        """``images``: sequence of ``(H, W, 3)`` arrays. Returns ``(maps, cache)``."""
        cfg = self.config
        if len(images) == 0:
            raise ValueError("no input images")
        xs = [preprocess(im) for im in images]
        if cfg.arch == "fixed":
            if len(xs) != cfg.n_inputs:
                raise ValueError(f"fixed model expects exactly {cfg.n_inputs} images, got {len(xs)}")
            (f, s), inner = inner_model_forward(np.concatenate(xs, axis=0), self.params, cfg)
            agg = None
            inners = [inner]
        else:
            outs, inners = [], []
            for x in xs:
                fs, c = inner_model_forward(x, self.params, cfg)
                outs.append(fs)
                inners.append(c)
            f, f_idx = aggregate_dynamic([o[0] for o in outs])
            s, s_idx = aggregate_dynamic([o[1] for o in outs])
            agg = (f_idx, s_idx, len(outs))
        maps, head = svbrdf_head_forward(f, s, self.params, cfg)
        return maps, (inners, agg, head)

    def predict(self, images) -> SvbrdfMaps:
        return self.forward(images)[0]

    def backward(self, cache, d_maps: SvbrdfMaps) -> dict:
        inners, agg, head = cache
        d_f, d_s, grads = svbrdf_head_backward(d_maps, head)
        if agg is None:
            per = [(d_f, d_s)]
        else:
            f_idx, s_idx, k = agg
            per = list(zip(aggregate_dynamic_backward(d_f, f_idx, k),
                           aggregate_dynamic_backward(d_s, s_idx, k)))
        for (df, ds), c in zip(per, inners):
            _, g = inner_model_backward(df, ds, c, self.params, self.config)
            for key, v in g.items():
                grads[key] = grads[key] + v if key in grads else v
        return grads

    def copy(self) -> StyledNet:
        return StyledNet(self.config, {k: v.copy() for k, v in self.params.items()})


def param_count(config: NetConfig) -> int:
    """Closed-form parameter count from the block table."""
    k = config.kernel
    w0 = config.widths[0]
    total = w0 * config.inner_in_channels * k * k + w0
    for _, ci, co in config.block_table():
        total += style_block_param_count(ci, co, config.style_dim, config.mean_channels, k)
    return total + style_block_param_count(w0, N_OUT, config.style_dim, config.mean_channels, k)
