"""Training losses and evaluation metrics.

L1 terms are means over every entry, so magnitudes do not depend on the
image resolution; the render loss sums those means over lights.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

from .maps import FIELDS, SvbrdfMaps
from .render import LightField, LightRig, SceneGeometry, light_field, shade_field, shade_field_vjp, tonemap

BRDF_WEIGHTS = {"normals": 10.0, "diffuse": 3.0, "roughness": 1.0, "specular": 2.0}


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a, b) -> np.ndarray:
    """Subgradient of ``l1`` w.r.t. ``a`` (zero where ``a == b``)."""
    a, b = _same_shape(a, b)
    return np.sign(a - b) / a.size


@dataclass
class LossBreakdown:
    brdf_loss: float
    render_loss: float
    per_map: dict

    @property
    def total(self) -> float:
        return self.brdf_loss + self.render_loss


def _check_maps(pred: SvbrdfMaps, gt: SvbrdfMaps):
    if pred.resolution != gt.resolution:
        raise ValueError(f"resolution mismatch: {pred.resolution} vs {gt.resolution}")


def brdf_terms(pred: SvbrdfMaps, gt: SvbrdfMaps) -> dict:
    _check_maps(pred, gt)
    return {f: l1(getattr(pred, f), getattr(gt, f)) for f in FIELDS}


def loss_brdf(pred: SvbrdfMaps, gt: SvbrdfMaps) -> float:
    terms = brdf_terms(pred, gt)
    return sum(BRDF_WEIGHTS[f] * terms[f] for f in FIELDS)


def loss_brdf_grad(pred: SvbrdfMaps, gt: SvbrdfMaps) -> SvbrdfMaps:
    _check_maps(pred, gt)
    return SvbrdfMaps(*(BRDF_WEIGHTS[f] * l1_grad(getattr(pred, f), getattr(gt, f)) for f in FIELDS))


_TM_LOG_OFF = math.log(0.01)
_TM_NORM = math.log(1.0 + 0.01) - math.log(0.01)


@njit(cache=True)
def _tm_l1_kernel(pred, target_tm, clip, adj):
    flat_p = pred.ravel()
    flat_t = target_tm.ravel()
    flat_a = adj.ravel()
    total = 0.0
    for i in range(flat_p.size):
        x = flat_p[i]
        live = True
        if clip:
            if x > 1.0:
                x = 1.0
            if x >= 1.0:
                live = False
            if x < 0.0:
                x = 0.0
        diff = (math.log(x + 0.01) - _TM_LOG_OFF) / _TM_NORM - flat_t[i]
        total += abs(diff)
        g = 0.0
        if live and diff != 0.0:
            g = 1.0 / ((x + 0.01) * _TM_NORM)
            if diff < 0.0:
                g = -g
        flat_a[i] = g
    return total


def _render_l1(pred_render, target_tm, clip):
    """Summed-over-lights L1 of tonemapped renders, plus d loss / d render."""
    pred_render = np.ascontiguousarray(pred_render, dtype=np.float64)
    target_tm = np.ascontiguousarray(target_tm, dtype=np.float64)
    if pred_render.shape != target_tm.shape:
        raise ValueError(f"shape mismatch: {pred_render.shape} vs {target_tm.shape}")
    adj = np.empty_like(pred_render)
    total = _tm_l1_kernel(pred_render, target_tm, bool(clip), adj)
    per_light = pred_render[0].size
    return total / per_light, adj / per_light


def render_loss_and_grad(pred: SvbrdfMaps, lf: LightField, target_tm: np.ndarray, clip: bool, specular=True):
    """Render loss against precomputed tonemapped targets ``(K, H, W, 3)``."""
    loss, adj = _render_l1(shade_field(pred, lf, specular), target_tm, clip)
    return loss, shade_field_vjp(pred, lf, adj, specular)


def loss_render_maps(pred, gt, rig: LightRig, geom: SceneGeometry, light_indices) -> float:
    _check_maps(pred, gt)
    lf = light_field(rig, geom, light_indices)
    target = tonemap(shade_field(gt, lf))
    return _render_l1(shade_field(pred, lf), target, clip=False)[0]


def loss_render_maps_grad(pred, gt, rig, geom, light_indices):
    _check_maps(pred, gt)
    lf = light_field(rig, geom, light_indices)
    return render_loss_and_grad(pred, lf, tonemap(shade_field(gt, lf)), clip=False)


def _stack_observed(observed, light_indices, res):
    idx = np.atleast_1d(light_indices)
    obs = np.asarray(observed, dtype=np.float64)
    if obs.ndim == 3:
        obs = obs[None]
    if obs.shape[0] != len(idx):
        raise ValueError(f"{obs.shape[0]} observed images for {len(idx)} lights")
    if obs.shape[1:] != (res, res, 3):
        raise ValueError(f"observed images have shape {obs.shape[1:]}, expected {(res, res, 3)}")
    return obs


def loss_render_images(pred, observed, rig, geom, light_indices) -> float:
    obs = _stack_observed(observed, light_indices, geom.resolution)
    lf = light_field(rig, geom, light_indices)
    return _render_l1(shade_field(pred, lf), tonemap(obs), clip=True)[0]


def loss_render_images_grad(pred, observed, rig, geom, light_indices):
    obs = _stack_observed(observed, light_indices, geom.resolution)
    lf = light_field(rig, geom, light_indices)
    return render_loss_and_grad(pred, lf, tonemap(obs), clip=True)


def total_loss(pred, gt, rig, geom, light_indices) -> LossBreakdown:
    terms = brdf_terms(pred, gt)
    brdf = sum(BRDF_WEIGHTS[f] * terms[f] for f in FIELDS)
    return LossBreakdown(brdf, loss_render_maps(pred, gt, rig, geom, light_indices), terms)


def total_loss_grad(pred, gt, rig, geom, light_indices):
    """Value and gradient of the combined map + render loss."""
    g_b = loss_brdf_grad(pred, gt)
    loss_r, g_r = loss_render_maps_grad(pred, gt, rig, geom, light_indices)
    grad = SvbrdfMaps(*(getattr(g_b, f) + getattr(g_r, f) for f in FIELDS))
    return loss_brdf(pred, gt) + loss_r, grad


# SSIM with the usual Gaussian-window constants.
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gauss_window():
    x = np.arange(SSIM_WIN) - (SSIM_WIN - 1) / 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(x, g):
    x = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(x, len(g), axis=1) @ g


def _ssim_channel(a, b, data_range):
    g = _gauss_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM, computed per channel and averaged over channels."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], data_range) for c in range(a.shape[-1])]))


def one_minus_ssim(a, b, data_range: float = 1.0) -> float:
    return 1.0 - ssim(a, b, data_range)
