"""Synthetic training data: procedural materials, mixing, augmentation and
scene sampling that mimics the capture rig."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .maps import R_MIN, SvbrdfMaps
from .render import DEPTH_RANGE_MM, LightRig, SceneGeometry, render_lights

EVEN_LIGHTS = (0, 2, 4, 6, 8, 10)
ODD_LIGHTS = (1, 3, 5, 7, 9, 11)
ABLATION_ORDER = (0, 6, 8, 2, 4, 10)
JITTER_MM = 20.0

MATERIAL_KINDS = ("diffuse", "glossy")


def light_subset(k: int) -> list[int]:
    """First ``k`` lights of the ablation order."""
    if not 1 <= k <= len(ABLATION_ORDER):
        raise ValueError(f"number of input lights must be in [1, 6], got {k}")
    return list(ABLATION_ORDER[:k])


def _smooth_noise(rng, res, sigma):
    x = gaussian_filter(rng.standard_normal((res, res)), sigma, mode="wrap")
    x -= x.min()
    return x / max(x.max(), 1e-12)


def procedural_material(resolution: int, seed: int, kind: str | None = None) -> SvbrdfMaps:
    """Random smooth blobs and gradients for every map.

    ``kind="diffuse"`` gives rough, weakly specular materials;
    ``kind="glossy"`` gives smoother and more specular ones.
    """
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = MATERIAL_KINDS[int(rng.integers(len(MATERIAL_KINDS)))]
    if kind not in MATERIAL_KINDS:
        raise ValueError(f"unknown material kind {kind!r}")
    res = resolution
    scale = res / 8.0

    height = _smooth_noise(rng, res, rng.uniform(0.5, 1.5) * scale)
    gy, gx = np.gradient(height)
    tilt = rng.uniform(0.15, 0.5) / max(np.abs(gx).max(), np.abs(gy).max(), 1e-12)
    # rows grow downward while +y points up
    n = np.stack([-gx * tilt, gy * tilt, np.ones_like(height)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)

    ramp = np.linspace(0.0, 1.0, res)
    theta = rng.uniform(0, 2 * np.pi)
    grad = np.cos(theta) * ramp[None, :] + np.sin(theta) * ramp[:, None]
    grad = (grad - grad.min()) / max(np.ptp(grad), 1e-12)
    blend = 0.7 * _smooth_noise(rng, res, rng.uniform(0.3, 1.0) * scale) + 0.3 * grad
    mask = np.clip((blend - 0.5) * rng.uniform(2.0, 6.0) + 0.5, 0.0, 1.0)[..., None]
    c1 = rng.uniform(0.05, 0.95, 3)
    c2 = rng.uniform(0.05, 0.95, 3)
    diffuse = mask * c1 + (1 - mask) * c2

    rough_noise = _smooth_noise(rng, res, rng.uniform(0.3, 1.0) * scale)
    if kind == "diffuse":
        lo, hi = rng.uniform(0.5, 0.7), rng.uniform(0.75, 0.95)
        s_lo, s_hi = 0.01, rng.uniform(0.03, 0.06)
    else:
        # sharper or brighter lobes saturate most highlights under the ring
        lo, hi = rng.uniform(0.3, 0.4), rng.uniform(0.5, 0.7)
        s_lo, s_hi = rng.uniform(0.04, 0.08), rng.uniform(0.15, 0.3)
    roughness = lo + (hi - lo) * rough_noise
    spec_tint = rng.uniform(0.8, 1.0, 3)
    spec_level = s_lo + (s_hi - s_lo) * (1 - mask[..., 0])
    specular = np.clip(spec_level[..., None] * spec_tint, 0, 1)
    return SvbrdfMaps(n, np.clip(diffuse, 0, 1), np.clip(roughness, R_MIN, 1), specular)


def is_diffuse_dominant(maps: SvbrdfMaps) -> bool:
    return float(maps.specular.mean()) < 0.1 and float(maps.roughness.mean()) > 0.5


def _blend_normals(na, nb, alpha):
    n = alpha * na + (1 - alpha) * nb
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    bad = (norm[..., 0] < 1e-8) | (n[..., 2] <= 0)
    n = np.where(norm > 1e-8, n / np.maximum(norm, 1e-300), 0.0)
    n[bad] = (0.0, 0.0, 1.0)
    return n


def mix_materials(a: SvbrdfMaps, b: SvbrdfMaps, alpha: float) -> SvbrdfMaps:
    """Global convex blend ``alpha * a + (1 - alpha) * b``; normals renormalized."""
    if a.resolution != b.resolution:
        raise ValueError(f"resolution mismatch: {a.resolution} vs {b.resolution}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return a.copy()
    if alpha == 0.0:
        return b.copy()
    mix = lambda x, y: alpha * x + (1 - alpha) * y  # noqa: E731
    return SvbrdfMaps(
        _blend_normals(a.normals, b.normals, alpha),
        np.clip(mix(a.diffuse, b.diffuse), 0, 1),
        np.clip(mix(a.roughness, b.roughness), R_MIN, 1),
        np.clip(mix(a.specular, b.specular), 0, 1),
    )


def augment_with(maps: SvbrdfMaps, mirror: bool, flip: bool, row: int, col: int, size: int) -> SvbrdfMaps:
    """Mirror (left-right), flip (top-bottom) then crop a ``size`` square."""
    n, d, r, s = maps.normals, maps.diffuse, maps.roughness, maps.specular
    if mirror:
        n, d, r, s = n[:, ::-1], d[:, ::-1], r[:, ::-1], s[:, ::-1]
        n = n * np.array([-1.0, 1.0, 1.0])
    if flip:
        n, d, r, s = n[::-1], d[::-1], r[::-1], s[::-1]
        n = n * np.array([1.0, -1.0, 1.0])
    return SvbrdfMaps(n, d, r, s).crop(row, col, size)


def augment(maps: SvbrdfMaps, seed, out_size: int = 256) -> SvbrdfMaps:
    if maps.resolution != (2 * out_size, 2 * out_size):
        raise ValueError(
            f"augment expects {2 * out_size}x{2 * out_size} maps, got {maps.resolution}"
        )
    rng = np.random.default_rng(seed)
    mirror, flip = bool(rng.random() < 0.5), bool(rng.random() < 0.5)
    row, col = (int(v) for v in rng.integers(0, out_size + 1, size=2))
    return augment_with(maps, mirror, flip, row, col, out_size)


def sample_scene(seed, resolution: int = 256, rig: LightRig | None = None, jitter: bool = True,
                 input_lights=EVEN_LIGHTS) -> tuple[SceneGeometry, LightRig]:
    """Depth uniform in the capture range; input lights jittered in x and y."""
    rng = np.random.default_rng(seed)
    depth = float(rng.uniform(*DEPTH_RANGE_MM))
    base = rig if rig is not None else LightRig.ring()
    out = base.copy()
    offsets = rng.uniform(-JITTER_MM, JITTER_MM, size=(len(input_lights), 2))
    if jitter:
        out.positions_mm[list(input_lights), :2] += offsets
    return SceneGeometry(depth, resolution), out


@dataclass
class TrainingExample:
    gt_maps: SvbrdfMaps
    input_images: np.ndarray  # (K, H, W, 3)
    input_light_indices: list
    loss_light_indices: list
    geom: SceneGeometry
    rig_jittered: LightRig
    seed: int


def make_training_example(material_pool, seed: int, k: int, resolution: int = 256,
                          rig: LightRig | None = None, input_lights=None) -> TrainingExample:
    """Mix two pool materials, augment, sample a scene and render the inputs.

    Pool materials must be ``2 * resolution`` square.
    """
    if len(material_pool) == 0:
        raise ValueError("material pool is empty")
    rng = np.random.default_rng(seed)
    ia, ib = (int(i) for i in rng.integers(len(material_pool), size=2))
    alpha = float(rng.uniform(0.1, 0.9))
    aug_seed, scene_seed = (int(s) for s in rng.integers(2**31, size=2))
    mixed = mix_materials(material_pool[ia], material_pool[ib], alpha)
    gt = augment(mixed, aug_seed, resolution)
    geom, rig_j = sample_scene(scene_seed, resolution, rig)
    lights = list(input_lights) if input_lights is not None else light_subset(k)
    if len(lights) != k or not set(lights) <= set(EVEN_LIGHTS):
        raise ValueError(f"input lights {lights} must be {k} even-numbered lights")
    images = render_lights(gt, rig_j, geom, lights)
    return TrainingExample(gt, images, lights, list(ODD_LIGHTS), geom, rig_j, seed)
