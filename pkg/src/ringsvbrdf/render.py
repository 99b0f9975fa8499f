"""Differentiable renderer for a planar patch lit by the 12-light ring.

The camera is orthographic and looks down the +z axis at a plane placed at
``depth_mm``. Shading happens in a frame where +z points back toward the
camera, so the view vector is ``(0, 0, 1)`` for every pixel and light
vectors are ``(light - pixel)`` with the z component flipped.

Gradients are analytical and per pixel: pixels never interact, so the
Jacobian of a render is block diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .brdf import DOT_EPS, FRESNEL_MODES, FRESNEL_SCHLICK, fresnel_weight
from .maps import SvbrdfMaps

N_LIGHTS = 12
RING_RADIUS_MM = 225.0
FOV_DEG = 28.0
DEPTH_RANGE_MM = (250.0, 650.0)
DEFAULT_INTENSITY = 2.0

VIEW = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class SceneGeometry:
    depth_mm: float = 450.0
    resolution: int = 256
    strict_depth: bool = True

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError(f"resolution must be >= 8, got {self.resolution}")
        lo, hi = DEPTH_RANGE_MM
        if self.strict_depth and not lo <= self.depth_mm <= hi:
            raise ValueError(f"depth {self.depth_mm} mm outside [{lo}, {hi}]")
        if self.depth_mm <= 0:
            raise ValueError("depth must be positive")

    @property
    def patch_halfwidth_mm(self) -> float:
        return self.depth_mm * math.tan(math.radians(FOV_DEG / 2))

    def pixel_centers(self) -> np.ndarray:
        """World positions of all pixel centers, shape ``(res, res, 3)``."""
        res = self.resolution
        t = (2.0 * np.arange(res) + 1.0) / res - 1.0
        hw = self.patch_halfwidth_mm
        out = np.empty((res, res, 3))
        out[..., 0] = t[None, :] * hw
        out[..., 1] = -t[:, None] * hw
        out[..., 2] = self.depth_mm
        return out


def pixel_world_position(geom: SceneGeometry, row: int, col: int) -> np.ndarray:
    res = geom.resolution
    if not (0 <= row < res and 0 <= col < res):
        raise IndexError(f"pixel ({row}, {col}) outside {res}x{res} grid")
    hw = geom.patch_halfwidth_mm
    x = ((2.0 * col + 1.0) / res - 1.0) * hw
    y = (1.0 - (2.0 * row + 1.0) / res) * hw
    return np.array([x, y, geom.depth_mm])


def ring_positions(radius_mm: float = RING_RADIUS_MM) -> np.ndarray:
    """Light 0 at North, indices increasing clockwise (+x right, +y up)."""
    ang = np.radians(30.0 * np.arange(N_LIGHTS))
    return np.stack([radius_mm * np.sin(ang), radius_mm * np.cos(ang), np.zeros(N_LIGHTS)], axis=1)


@dataclass
class LightRig:
    positions_mm: np.ndarray = field(default_factory=ring_positions)
    intensities: np.ndarray = field(
        default_factory=lambda: np.full((N_LIGHTS, 3), DEFAULT_INTENSITY)
    )
    radius_mm: float = RING_RADIUS_MM
    falloff: bool = True
    fresnel: str = FRESNEL_SCHLICK

    def __post_init__(self):
        self.positions_mm = np.asarray(self.positions_mm, dtype=np.float64).reshape(N_LIGHTS, 3)
        inten = np.asarray(self.intensities, dtype=np.float64)
        if inten.ndim < 2:
            inten = np.broadcast_to(inten, (N_LIGHTS, 3))
        self.intensities = np.array(inten, dtype=np.float64).reshape(N_LIGHTS, 3)
        if np.any(self.intensities < 0):
            raise ValueError("light intensities must be nonnegative")
        if self.fresnel not in FRESNEL_MODES:
            raise ValueError(f"unknown fresnel mode {self.fresnel!r}")

    @classmethod
    def ring(cls, intensity=DEFAULT_INTENSITY, radius_mm=RING_RADIUS_MM, **kwargs) -> LightRig:
        inten = np.broadcast_to(np.asarray(intensity, dtype=np.float64), (N_LIGHTS, 3))
        return cls(ring_positions(radius_mm), inten.copy(), radius_mm, **kwargs)

    def copy(self, **changes) -> LightRig:
        base = replace(self, positions_mm=self.positions_mm.copy(), intensities=self.intensities.copy())
        return replace(base, **changes) if changes else base

    def scaled(self, factor) -> LightRig:
        return self.copy(intensities=self.intensities * np.asarray(factor, dtype=np.float64))


def _check_lights(light_indices) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(light_indices, dtype=int))
    if idx.size == 0:
        raise ValueError("no lights given")
    if np.any((idx < 0) | (idx >= N_LIGHTS)):
        raise ValueError(f"light index out of range: {light_indices}")
    return idx


@dataclass
class LightField:
    """Per-light, per-pixel shading inputs that do not depend on the material."""

    l: np.ndarray  # (K, H, W, 3) unit light vectors
    h: np.ndarray  # (K, H, W, 3) half vectors
    fresnel_p: np.ndarray  # (K, H, W) weight of (1 - s) in the Fresnel term
    scale: np.ndarray  # (K, H, W, 3) intensity times falloff


def light_field(rig: LightRig, geom: SceneGeometry, light_indices) -> LightField:
    idx = _check_lights(light_indices)
    pix = geom.pixel_centers()
    pos = rig.positions_mm[idx]
    vec = np.empty((len(idx),) + pix.shape)
    vec[..., 0] = pos[:, None, None, 0] - pix[None, ..., 0]
    vec[..., 1] = pos[:, None, None, 1] - pix[None, ..., 1]
    vec[..., 2] = pix[None, ..., 2] - pos[:, None, None, 2]
    dist2 = np.sum(vec * vec, axis=-1)
    l = vec / np.sqrt(dist2)[..., None]
    hv = l + VIEW
    h = hv / np.linalg.norm(hv, axis=-1, keepdims=True)
    p = fresnel_weight(h[..., 2], rig.fresnel)
    if rig.falloff:
        att = (geom.depth_mm**2 + rig.radius_mm**2) / dist2
    else:
        att = np.ones_like(dist2)
    scale = att[..., None] * rig.intensities[idx][:, None, None, :]
    return LightField(l, h, p, scale)


def _check_res(maps: SvbrdfMaps, geom: SceneGeometry):
    if maps.resolution != (geom.resolution, geom.resolution):
        raise ValueError(
            f"map resolution {maps.resolution} does not match geometry {geom.resolution}"
        )


@njit(cache=True)
def _shade_kernel(n, d, r, s, l, h, p, scale, specular, out):
    K, H, W = p.shape
    for k in range(K):
        for y in range(H):
            for x in range(W):
                a = n[y, x, 0] * l[k, y, x, 0] + n[y, x, 1] * l[k, y, x, 1] + n[y, x, 2] * l[k, y, x, 2]
                if a <= 0.0:
                    for ch in range(3):
                        out[k, y, x, ch] = 0.0
                    continue
                DV = 0.0
                if specular:
                    c = n[y, x, 0] * h[k, y, x, 0] + n[y, x, 1] * h[k, y, x, 1] + n[y, x, 2] * h[k, y, x, 2]
                    rr = r[y, x]
                    a2 = rr * rr * rr * rr
                    kk = 0.5 * rr * rr
                    q = c * c * (a2 - 1.0) + 1.0
                    ac = max(a, DOT_EPS)
                    bc = max(n[y, x, 2], DOT_EPS)
                    # G / (4 (n.v)(n.l)) with the numerators of G cancelled
                    DV = a2 / (np.pi * q * q) * 0.25 / ((ac * (1.0 - kk) + kk) * (bc * (1.0 - kk) + kk))
                pk = p[k, y, x]
                for ch in range(3):
                    sc = s[y, x, ch]
                    rho = d[y, x, ch] * (1.0 - sc) / np.pi
                    if specular:
                        rho += DV * (sc + (1.0 - sc) * pk)
                    out[k, y, x, ch] = scale[k, y, x, ch] * a * rho


@njit(cache=True)
def _shade_vjp_kernel(n, d, r, s, l, h, p, scale, adj, specular, g_n, g_d, g_r, g_s):
    K, H, W = p.shape
    for k in range(K):
        for y in range(H):
            for x in range(W):
                a = n[y, x, 0] * l[k, y, x, 0] + n[y, x, 1] * l[k, y, x, 1] + n[y, x, 2] * l[k, y, x, 2]
                if a <= 0.0:
                    continue
                pk = p[k, y, x]
                D = 0.0
                V = 0.0
                c = 0.0
                rr = r[y, x]
                a2 = 0.0
                kk = 0.0
                q = 1.0
                ga = 1.0
                gb = 1.0
                ac = 0.0
                bc = 0.0
                if specular:
                    c = n[y, x, 0] * h[k, y, x, 0] + n[y, x, 1] * h[k, y, x, 1] + n[y, x, 2] * h[k, y, x, 2]
                    a2 = rr * rr * rr * rr
                    kk = 0.5 * rr * rr
                    q = c * c * (a2 - 1.0) + 1.0
                    ac = max(a, DOT_EPS)
                    bc = max(n[y, x, 2], DOT_EPS)
                    ga = ac * (1.0 - kk) + kk
                    gb = bc * (1.0 - kk) + kk
                    D = a2 / (np.pi * q * q)
                    V = 0.25 / (ga * gb)
                DV = D * V
                u = 0.0  # sum_c w_c rho_c
                t = 0.0  # sum_c w_c a F_c
                for ch in range(3):
                    w = adj[k, y, x, ch] * scale[k, y, x, ch]
                    sc = s[y, x, ch]
                    dc = d[y, x, ch]
                    rho = dc * (1.0 - sc) / np.pi
                    g_d[y, x, ch] += w * a * (1.0 - sc) / np.pi
                    gs = -dc / np.pi
                    if specular:
                        F = sc + (1.0 - sc) * pk
                        rho += DV * F
                        gs += DV * (1.0 - pk)
                        t += w * a * F
                    g_s[y, x, ch] += w * a * gs
                    u += w * rho
                for j in range(3):
                    g_n[y, x, j] += u * l[k, y, x, j]
                if specular:
                    q3 = np.pi * q * q * q
                    dD_dr = 4.0 * rr * rr * rr * (q - 2.0 * a2 * c * c) / q3
                    dD_dc = -4.0 * a2 * c * (a2 - 1.0) / q3
                    dV_dk = -V * ((1.0 - ac) / ga + (1.0 - bc) / gb)
                    g_r[y, x] += t * (dD_dr * V + D * dV_dk * rr)
                    dV_da = -V * (1.0 - kk) / ga if a > DOT_EPS else 0.0
                    dV_db = -V * (1.0 - kk) / gb if n[y, x, 2] > DOT_EPS else 0.0
                    for j in range(3):
                        g_n[y, x, j] += t * (V * dD_dc * h[k, y, x, j] + D * dV_da * l[k, y, x, j])
                    g_n[y, x, 2] += t * D * dV_db


def shade_field(maps: SvbrdfMaps, lf: LightField, specular: bool = True) -> np.ndarray:
    """Render every light in ``lf``; returns ``(K, H, W, 3)``."""
    out = np.empty(lf.scale.shape)
    _shade_kernel(maps.normals, maps.diffuse, maps.roughness, maps.specular,
                  lf.l, lf.h, lf.fresnel_p, lf.scale, bool(specular), out)
    return out


def shade_field_vjp(maps: SvbrdfMaps, lf: LightField, adjoint: np.ndarray, specular: bool = True) -> SvbrdfMaps:
    """Gradients of ``<adjoint, shade_field(maps, lf)>`` w.r.t. every map.

    Normal gradients are taken on the raw 3-vectors (no reprojection).
    """
    adjoint = np.ascontiguousarray(np.broadcast_to(adjoint, lf.scale.shape), dtype=np.float64)
    g_n = np.zeros(maps.normals.shape)
    g_d = np.zeros(maps.diffuse.shape)
    g_r = np.zeros(maps.roughness.shape)
    g_s = np.zeros(maps.specular.shape)
    _shade_vjp_kernel(maps.normals, maps.diffuse, maps.roughness, maps.specular,
                      lf.l, lf.h, lf.fresnel_p, lf.scale, adjoint, bool(specular), g_n, g_d, g_r, g_s)
    return SvbrdfMaps(g_n, g_d, g_r, g_s)


def render_lights(maps, rig, geom, light_indices, specular=True) -> np.ndarray:
    _check_res(maps, geom)
    return shade_field(maps, light_field(rig, geom, light_indices), specular)


def render(maps: SvbrdfMaps, rig: LightRig, geom: SceneGeometry, light_index: int, specular=True) -> np.ndarray:
    """Radiance image ``(H, W, 3)`` of ``maps`` lit by one ring light."""
    return render_lights(maps, rig, geom, [light_index], specular)[0]


def render_vjp(maps, rig, geom, light_index, adjoint, specular=True) -> SvbrdfMaps:
    _check_res(maps, geom)
    adjoint = np.asarray(adjoint, dtype=np.float64)
    if adjoint.shape != maps.diffuse.shape:
        raise ValueError("adjoint shape does not match the render")
    lf = light_field(rig, geom, [light_index])
    return shade_field_vjp(maps, lf, adjoint[None], specular)


def render_lights_vjp(maps, rig, geom, light_indices, adjoint, specular=True) -> SvbrdfMaps:
    _check_res(maps, geom)
    return shade_field_vjp(maps, light_field(rig, geom, light_indices), adjoint, specular)


_TM_OFFSET = 0.01
_TM_NORM = math.log(1.0 + _TM_OFFSET) - math.log(_TM_OFFSET)


def tonemap(x):
    """Logarithmic tonemap with tm(0) = 0 and tm(1) = 1."""
    return (np.log(np.asarray(x, dtype=np.float64) + _TM_OFFSET) - math.log(_TM_OFFSET)) / _TM_NORM


def tonemap_derivative(x):
    return 1.0 / ((np.asarray(x, dtype=np.float64) + _TM_OFFSET) * _TM_NORM)
