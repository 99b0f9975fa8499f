"""Cook-Torrance shading with a GGX distribution, Schlick Fresnel and
Schlick-GGX masking.

Every function broadcasts over leading axes; vectors use the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .maps import R_MIN

FRESNEL_SCHLICK = "schlick"
# s + (1 - s) (v.h)^5, kept selectable for comparisons against the printed form
FRESNEL_COS5 = "cos5"
FRESNEL_MODES = (FRESNEL_SCHLICK, FRESNEL_COS5)

DOT_EPS = 1e-6


def dot(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def normalize(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def half_vector(v, l):
    s = np.asarray(v, dtype=np.float64) + np.asarray(l, dtype=np.float64)
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("degenerate half vector")
    return s / norm


def ggx_d(n_dot_h, r):
    """GGX / Trowbridge-Reitz normal distribution with alpha = r**2."""
    a2 = np.asarray(r, dtype=np.float64) ** 4
    q = np.asarray(n_dot_h, dtype=np.float64) ** 2 * (a2 - 1.0) + 1.0
    return a2 / (np.pi * q * q)


def fresnel_weight(v_dot_h, mode=FRESNEL_SCHLICK):
    """The ``(1 - s)`` coefficient of the Fresnel term."""
    v_dot_h = np.asarray(v_dot_h, dtype=np.float64)
    if mode == FRESNEL_SCHLICK:
        return (1.0 - v_dot_h) ** 5
    if mode == FRESNEL_COS5:
        return v_dot_h**5
    raise ValueError(f"unknown fresnel mode {mode!r}")


def schlick_f(s, v_dot_h, mode=FRESNEL_SCHLICK):
    s = np.asarray(s, dtype=np.float64)
    p = fresnel_weight(v_dot_h, mode)
    return s + (1.0 - s) * np.asarray(p)[..., None]


def smith_g(n_dot_v, n_dot_l, r):
    k = np.asarray(r, dtype=np.float64) ** 2 / 2.0
    n_dot_v = np.asarray(n_dot_v, dtype=np.float64)
    n_dot_l = np.asarray(n_dot_l, dtype=np.float64)
    return (n_dot_v / (n_dot_v * (1.0 - k) + k)) * (n_dot_l / (n_dot_l * (1.0 - k) + k))


@dataclass
class ShadingSample:
    """Inputs for shading one or many pixels (arrays broadcast together)."""

    n: np.ndarray
    d: np.ndarray
    r: np.ndarray
    s: np.ndarray
    v: np.ndarray
    l: np.ndarray
    i: np.ndarray = 1.0


def brdf_eval(sample: ShadingSample, fresnel=FRESNEL_SCHLICK, specular=True):
    """Reflectance: Lambertian lobe weighted by ``1 - s`` plus the
    microfacet lobe ``D F G / (4 (n.v)(n.l))``."""
    n, v, l = sample.n, sample.v, sample.l
    d = np.asarray(sample.d, dtype=np.float64)
    s = np.asarray(sample.s, dtype=np.float64)
    rho = d * (1.0 - s) / np.pi
    if not specular:
        return rho
    h = half_vector(v, l)
    nv = np.maximum(dot(n, v), DOT_EPS)
    nl = np.maximum(dot(n, l), DOT_EPS)
    r = np.asarray(sample.r, dtype=np.float64)
    spec = ggx_d(dot(n, h), r) * smith_g(nv, nl, r) / (4.0 * nv * nl)
    return rho + spec[..., None] * schlick_f(s, dot(v, h), fresnel)


def shade_pixel(sample: ShadingSample, fresnel=FRESNEL_SCHLICK, specular=True):
    """Radiance ``i * max(n.l, 0) * brdf``; zero for back-facing lights."""
    cos = np.maximum(dot(sample.n, sample.l), 0.0)
    rho = brdf_eval(sample, fresnel=fresnel, specular=specular)
    return np.asarray(sample.i, dtype=np.float64) * cos[..., None] * rho


def clamp_roughness(r):
    return np.clip(r, R_MIN, 1.0)
