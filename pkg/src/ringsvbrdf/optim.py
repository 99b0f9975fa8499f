"""Gradient-based recovery of SVBRDF maps from observed images."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .brdf import DOT_EPS
from .latent import INIT_SPECULAR, NZ_FLOOR, LatentMaps, decode
from .losses import loss_brdf, loss_brdf_grad, render_loss_and_grad
from .maps import FIELDS, R_MIN, SvbrdfMaps
from .render import LightField, LightRig, SceneGeometry, light_field, shade_field, tonemap

log = logging.getLogger(__name__)

IMPROVEMENT_EPS = 1e-6
MAX_BACKOFFS = 10
# the sigmoid is flat at the low specular start; matching its mid-range slope
# lets specular move as fast as the other maps early on
SPECULAR_STEP_SCALE = 0.25 / (INIT_SPECULAR * (1.0 - INIT_SPECULAR))
DEFAULT_LR_SCALE = {"specular": SPECULAR_STEP_SCALE}


class OptimizationDiverged(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


def _check_grads(params, grads):
    for k, p in params.items():
        g = grads[k]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {k} {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise OptimizationDiverged("diverged")


class SGD:
    """Plain SGD; ``momentum > 0`` adds a heavy-ball velocity term."""

    def __init__(self, lr: float = 0.05, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        _check_grads(params, grads)
        for k in params:
            g = grads[k]
            if self.momentum:
                v = self.velocity.get(k)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[k] = v
                g = v
            params[k] -= self.lr * g


class Adam:
    """Adam with bias correction, updating ``params`` in place."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        _check_grads(params, grads)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


@dataclass
class EarlyStopper:
    """Tracks the best loss; ``update`` returns True once ``patience``
    consecutive iterations fail to improve it by more than ``min_delta``."""

    patience: int
    min_delta: float = IMPROVEMENT_EPS
    best: float = math.inf
    since_best: int = 0

    def update(self, loss: float) -> bool:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.since_best = 0
            return False
        self.best = min(self.best, loss)
        self.since_best += 1
        return self.since_best >= self.patience


@dataclass
class DirectResult:
    maps: SvbrdfMaps
    latent: LatentMaps
    trace: list = field(default_factory=list)
    best_trace: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def best_loss(self) -> float:
        return self.best_trace[-1] if self.best_trace else math.inf


_TM_LOG_OFF = math.log(0.01)
_TM_NORM = math.log(1.0 + 0.01) - math.log(0.01)


@njit(cache=True, error_model="numpy")
def _sig(u):
    if u >= 0.0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


@njit(cache=True, error_model="numpy", fastmath=True)
def _latent_step_kernel(un, ud, ur, us, l, h, p, scale, target, clip, gun, gud, gur, gus):
    """Clipped tonemapped L1 render loss of ``decode(latent)`` and its
    latent gradient, fused per pixel. Returns the unnormalized L1 sum."""
    H, W, K = p.shape
    total = 0.0
    n = np.empty(3)
    m = np.empty(3)
    d = np.empty(3)
    s = np.empty(3)
    gn = np.empty(3)
    gd = np.empty(3)
    gs = np.empty(3)
    w = np.empty(3)
    for y in range(H):
        for x in range(W):
            m[0] = un[y, x, 0]
            m[1] = un[y, x, 1]
            z = un[y, x, 2]
            m[2] = (z if z > 0.0 else 0.0) + math.log1p(math.exp(-abs(z))) + NZ_FLOOR
            norm = math.sqrt(m[0] * m[0] + m[1] * m[1] + m[2] * m[2])
            for j in range(3):
                n[j] = m[j] / norm
                d[j] = _sig(ud[y, x, j])
                s[j] = _sig(us[y, x, j])
                gn[j] = 0.0
                gd[j] = 0.0
                gs[j] = 0.0
            sr = _sig(ur[y, x])
            rr = R_MIN + (1.0 - R_MIN) * sr
            gr = 0.0
            a2 = rr * rr * rr * rr
            kk = 0.5 * rr * rr
            bc = max(n[2], DOT_EPS)
            gb = bc * (1.0 - kk) + kk
            for k in range(K):
                a = n[0] * l[y, x, k, 0] + n[1] * l[y, x, k, 1] + n[2] * l[y, x, k, 2]
                lit = a > 0.0
                c = n[0] * h[y, x, k, 0] + n[1] * h[y, x, k, 1] + n[2] * h[y, x, k, 2]
                q = c * c * (a2 - 1.0) + 1.0
                ac = max(a, DOT_EPS)
                ga = ac * (1.0 - kk) + kk
                D = a2 / (np.pi * q * q)
                V = 0.25 / (ga * gb)
                DV = D * V
                pk = p[y, x, k]
                any_adj = False
                for ch in range(3):
                    F = s[ch] + (1.0 - s[ch]) * pk
                    rho = d[ch] * (1.0 - s[ch]) / np.pi + DV * F
                    v = scale[y, x, k, ch] * a * rho if lit else 0.0
                    live = True
                    if clip:
                        if v >= 1.0:
                            v = 1.0
                            live = False
                        if v < 0.0:
                            v = 0.0
                    diff = (math.log(v + 0.01) - _TM_LOG_OFF) / _TM_NORM - target[y, x, k, ch]
                    total += abs(diff)
                    g = 0.0
                    if live and lit and diff != 0.0:
                        g = 1.0 / ((v + 0.01) * _TM_NORM)
                        if diff < 0.0:
                            g = -g
                        any_adj = True
                    w[ch] = g * scale[y, x, k, ch]
                if not any_adj:
                    continue
                u = 0.0
                t = 0.0
                for ch in range(3):
                    F = s[ch] + (1.0 - s[ch]) * pk
                    rho = d[ch] * (1.0 - s[ch]) / np.pi + DV * F
                    gd[ch] += w[ch] * a * (1.0 - s[ch]) / np.pi
                    gs[ch] += w[ch] * a * (DV * (1.0 - pk) - d[ch] / np.pi)
                    t += w[ch] * a * F
                    u += w[ch] * rho
                q3 = np.pi * q * q * q
                dD_dr = 4.0 * rr * rr * rr * (q - 2.0 * a2 * c * c) / q3
                dD_dc = -4.0 * a2 * c * (a2 - 1.0) / q3
                dV_dk = -V * ((1.0 - ac) / ga + (1.0 - bc) / gb)
                gr += t * (dD_dr * V + D * dV_dk * rr)
                dV_da = -V * (1.0 - kk) / ga if a > DOT_EPS else 0.0
                dV_db = -V * (1.0 - kk) / gb if n[2] > DOT_EPS else 0.0
                for j in range(3):
                    gn[j] += u * l[y, x, k, j] + t * (V * dD_dc * h[y, x, k, j] + D * dV_da * l[y, x, k, j])
                gn[2] += t * D * dV_db
            nd = n[0] * gn[0] + n[1] * gn[1] + n[2] * gn[2]
            for j in range(3):
                gun[y, x, j] = (gn[j] - n[j] * nd) / norm
                gud[y, x, j] = gd[j] * d[j] * (1.0 - d[j])
                gus[y, x, j] = gs[j] * s[j] * (1.0 - s[j])
            gun[y, x, 2] *= _sig(z)
            gur[y, x] = gr * (1.0 - R_MIN) * sr * (1.0 - sr)
    return total


@dataclass
class PixelMajorField:
    """Light field and tonemapped targets stored light-innermost, so the
    fused kernel reads each pixel's data contiguously."""

    l: np.ndarray
    h: np.ndarray
    fresnel_p: np.ndarray
    scale: np.ndarray
    target_tm: np.ndarray

    @classmethod
    def build(cls, lf: LightField, target_tm) -> PixelMajorField:
        def pm(a):
            return np.ascontiguousarray(np.moveaxis(np.asarray(a, dtype=np.float64), 0, 2))

        target_tm = np.asarray(target_tm, dtype=np.float64)
        if target_tm.shape != lf.scale.shape:
            raise ValueError(f"targets {target_tm.shape} do not match the light field {lf.scale.shape}")
        return cls(pm(lf.l), pm(lf.h), pm(lf.fresnel_p), pm(lf.scale), pm(target_tm))


def latent_loss_and_grad(latent: LatentMaps, lf, target_tm=None, clip: bool = True):
    """Render loss of ``decode(latent)`` against tonemapped targets and its
    gradient w.r.t. the latent; equals composing ``decode``,
    ``render_loss_and_grad`` and ``decode_vjp``.

    ``lf`` is a ``LightField`` (then ``target_tm`` is required) or a
    prebuilt ``PixelMajorField``.
    """
    pm = lf if isinstance(lf, PixelMajorField) else PixelMajorField.build(lf, target_tm)
    g = LatentMaps(*(np.empty_like(getattr(latent, f)) for f in FIELDS))
    total = _latent_step_kernel(latent.normals, latent.diffuse, latent.roughness, latent.specular,
                                pm.l, pm.h, pm.fresnel_p, pm.scale, pm.target_tm, bool(clip),
                                g.normals, g.diffuse, g.roughness, g.specular)
    per_light = pm.target_tm.shape[0] * pm.target_tm.shape[1] * 3
    for f in FIELDS:
        getattr(g, f)[...] /= per_light
    return total / per_light, g


def _observed_stack(observed, n_lights, res):
    obs = np.asarray(observed, dtype=np.float64)
    if obs.shape != (n_lights, res, res, 3):
        raise ValueError(f"observed images have shape {obs.shape}, expected {(n_lights, res, res, 3)}")
    return obs


def optimize_svbrdf_direct(observed, rig: LightRig, geom: SceneGeometry, input_lights,
                           iters: int = 2000, patience: int = 100, lr: float = 0.2,
                           init: LatentMaps | None = None, momentum: float = 0.0,
                           lr_scale: dict | None = None) -> DirectResult:
    """Fit the maps themselves to the observed images with plain SGD.

    Every pixel's parameters touch only that pixel's loss terms, so the
    gradient of the pixel-averaged loss is rescaled by the pixel count;
    ``lr`` is then a per-pixel step size independent of resolution.
    ``lr_scale`` maps latent names to step multipliers and defaults to
    ``DEFAULT_LR_SCALE``.
    """
    lights = list(input_lights)
    if not lights:
        raise ValueError("need at least one input light")
    res = geom.resolution
    target = tonemap(_observed_stack(observed, len(lights), res))
    field_pm = PixelMajorField.build(light_field(rig, geom, lights), target)
    latent = init.copy() if init is not None else LatentMaps.initial(res)
    params = latent.as_dict()
    sgd = SGD(lr, momentum)
    stopper = EarlyStopper(patience)
    best_latent = latent.copy()
    result = DirectResult(decode(latent), best_latent)
    scale = float(res * res)
    mult = dict(DEFAULT_LR_SCALE if lr_scale is None else lr_scale)
    backoffs = 0

    for it in range(iters):
        cur = LatentMaps.from_dict(params)
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            loss = math.nan
        else:
            loss, g_lat = latent_loss_and_grad(cur, field_pm, clip=True)
        if not math.isfinite(loss):
            backoffs += 1
            if backoffs > MAX_BACKOFFS:
                raise OptimizationDiverged(f"non-finite loss at iteration {it}", result.trace)
            sgd.lr *= 0.5
            sgd.velocity.clear()
            params.update({k: v.copy() for k, v in best_latent.as_dict().items()})
            log.warning("non-finite loss at iteration %d; lr -> %g", it, sgd.lr)
            continue
        result.trace.append(loss)
        stop = stopper.update(loss)
        if stopper.since_best == 0:
            best_latent = cur.copy()
        result.best_trace.append(stopper.best)
        if stop:
            result.stopped_early = True
            break
        sgd.step(params, {k: v * (scale * mult.get(k, 1.0)) for k, v in g_lat.as_dict().items()})

    result.latent = best_latent
    result.maps = decode(best_latent)
    return result


@dataclass
class NetworkResult:
    model: object
    maps: SvbrdfMaps
    trace: list


def _render_loss_grad(model, images, lf, target):
    maps, cache = model.forward(list(images))
    loss, g_maps = render_loss_and_grad(maps, lf, target, clip=True)
    return loss, maps, cache, g_maps


def optimize_network_weights(model, observed, rig: LightRig, geom: SceneGeometry, input_lights,
                             iters: int = 100, lr: float = 0.001) -> NetworkResult:
    """Overfit network weights to one material with Adam.

    The input-light images are both the network input and the loss target.
    ``trace[i]`` is the render loss after ``i`` updates; the returned maps are
    the prediction of the final weights.
    """
    lights = list(input_lights)
    obs = _observed_stack(observed, len(lights), geom.resolution)
    lf = light_field(rig, geom, lights)
    target = tonemap(obs)
    adam = Adam(lr)
    trace = []
    for _ in range(iters):
        loss, _, cache, g_maps = _render_loss_grad(model, obs, lf, target)
        if not math.isfinite(loss):
            raise OptimizationDiverged("non-finite loss", trace)
        trace.append(loss)
        adam.step(model.params, model.backward(cache, g_maps))
    loss, maps, _, _ = _render_loss_grad(model, obs, lf, target)
    trace.append(loss)
    return NetworkResult(model, maps, trace)


@dataclass
class CaptureSample:
    """A real (or simulated) capture used for render-loss-only finetuning."""

    input_images: np.ndarray
    input_lights: list
    loss_images: np.ndarray
    loss_lights: list
    rig: LightRig
    geom: SceneGeometry


def example_loss_and_grad(model, example, mode: str = "synthetic"):
    """Loss of one example and gradients w.r.t. the model parameters."""
    if mode == "synthetic":
        maps, cache = model.forward(list(example.input_images))
        lf = light_field(example.rig_jittered, example.geom, example.loss_light_indices)
        target = tonemap(shade_field(example.gt_maps, lf))
        loss_r, g_r = render_loss_and_grad(maps, lf, target, clip=False)
        g_b = loss_brdf_grad(maps, example.gt_maps)
        loss = loss_brdf(maps, example.gt_maps) + loss_r
        g_maps = SvbrdfMaps(*(getattr(g_b, f) + getattr(g_r, f) for f in FIELDS))
    elif mode == "real":
        maps, cache = model.forward(list(example.input_images))
        lf = light_field(example.rig, example.geom, example.loss_lights)
        loss, g_maps = render_loss_and_grad(maps, lf, tonemap(np.asarray(example.loss_images)), clip=True)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return loss, model.backward(cache, g_maps)


def batch_loss_and_grad(model, batch, mode: str = "synthetic"):
    if len(batch) == 0:
        raise ValueError("empty batch")
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for ex in batch:
        loss, g = example_loss_and_grad(model, ex, mode)
        total += loss
        for k, v in g.items():
            grads[k] += v
    n = len(batch)
    return total / n, {k: v / n for k, v in grads.items()}


def finetune_step(model, optimizer: Adam, batch, mode: str = "synthetic") -> float:
    """One Adam update on a batch; ``mode="synthetic"`` uses the map loss
    plus the render loss, ``mode="real"`` the render loss only."""
    loss, grads = batch_loss_and_grad(model, batch, mode)
    if not math.isfinite(loss):
        raise OptimizationDiverged("non-finite batch loss")
    optimizer.step(model.params, grads)
    return loss
