"""Radiometric response fitting and gray-card light intensity calibration."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .maps import SvbrdfMaps
from .render import N_LIGHTS, LightRig, SceneGeometry, render

log = logging.getLogger(__name__)

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class CalibrationError(ValueError):
    pass


@dataclass
class RadiometricCurve:
    """Per-channel quadratic ``a u^2 + b u + c`` from raw to linear values."""

    coeffs: np.ndarray  # (3, 3): one (a, b, c) row per channel
    residual_rms: np.ndarray | None = None

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(3, 3)

    @classmethod
    def identity(cls) -> RadiometricCurve:
        return cls(np.tile([0.0, 1.0, 0.0], (3, 1)))

    def is_monotone(self) -> bool:
        a, b = self.coeffs[:, 0], self.coeffs[:, 1]
        # derivative 2au + b is linear, so checking the endpoints suffices
        tol = -1e-9
        return bool(np.all(b >= tol) and np.all(2 * a + b >= tol) and np.all(self.coeffs[:, 2] >= tol))

    def __call__(self, raw):
        return apply_radiometric(self, raw)

    def inverse(self, linear):
        """Raw value in [0, 1] producing ``linear`` (monotone curves only)."""
        y = np.asarray(linear, dtype=np.float64)
        a, b, c = (self.coeffs[:, j] for j in range(3))
        dy = y - c
        disc = np.maximum(b * b + 4.0 * a * dy, 0.0)
        den = b + np.sqrt(disc)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(den > 0, 2.0 * dy / den, 0.0)
        return np.clip(u, 0.0, 1.0)


@dataclass(frozen=True)
class GrayCardSpec:
    reflectance: float = 0.18

    def __post_init__(self):
        if not 0 < self.reflectance < 1:
            raise ValueError("gray card reflectance must lie in (0, 1)")


def fit_radiometric(raw, reference) -> RadiometricCurve:
    """Least-squares quadratic per channel from ``(N, 3)`` raw/reference pairs."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if raw.shape != ref.shape:
        raise CalibrationError("raw and reference sample counts differ")
    coeffs = np.zeros((3, 3))
    rms = np.zeros(3)
    for ch in range(3):
        u = raw[:, ch]
        if len(np.unique(u)) < 3:
            raise CalibrationError(
                f"channel {ch}: need at least 3 distinct raw values, got {len(np.unique(u))}"
            )
        A = np.stack([u * u, u, np.ones_like(u)], axis=1)
        sol, _, rank, _ = np.linalg.lstsq(A, ref[:, ch], rcond=None)
        if rank < 3:
            raise CalibrationError(f"channel {ch}: rank-deficient fit")
        coeffs[ch] = sol
        rms[ch] = math.sqrt(np.mean((A @ sol - ref[:, ch]) ** 2))
    curve = RadiometricCurve(coeffs, rms)
    if not curve.is_monotone():
        warnings.warn("fitted radiometric curve is not monotone on [0, 1]; check calibration data")
    return curve


def apply_radiometric(curve: RadiometricCurve, image):
    img = np.asarray(image, dtype=np.float64)
    a, b, c = (curve.coeffs[:, j] for j in range(3))
    return np.maximum(a * img * img + b * img + c, 0.0)


def gray_card_maps(resolution: int, card: GrayCardSpec = GrayCardSpec()) -> SvbrdfMaps:
    return SvbrdfMaps.uniform(resolution, diffuse=card.reflectance, specular=0.0, roughness=1.0)


def _l1_objective(unit, obs):
    return lambda t: float(np.sum(np.abs(t * unit - obs)))


def golden_section(f, lo: float, hi: float, rtol: float = 1e-6, atol: float = 1e-12) -> float:
    """Minimize a unimodal scalar function on ``[lo, hi]``."""
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > max(rtol * 0.5 * (hi + lo), atol):
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = f(x2)
    return 0.5 * (lo + hi)


def fit_scale_l1(unit, observed, rtol: float = 1e-6) -> float:
    """Scalar ``t >= 0`` minimizing ``sum |t * unit - observed|``.

    Golden-section search brackets the optimum; the result is then snapped to
    the best nearby breakpoint ``observed / unit`` where the piecewise-linear
    objective attains its minimum.
    """
    unit = np.ravel(np.asarray(unit, dtype=np.float64))
    obs = np.ravel(np.asarray(observed, dtype=np.float64))
    live = unit > 0
    if not np.any(live) or not np.any(obs[live] > 0):
        return 0.0
    ratios = obs[live] / unit[live]
    f = _l1_objective(unit, obs)
    t = golden_section(f, 0.0, float(ratios.max()), rtol=rtol)
    near = ratios[np.argsort(np.abs(ratios - t), kind="stable")[:8]]
    cands = np.concatenate([[t], np.unique(near)])
    vals = [f(c) for c in cands]
    return float(cands[int(np.argmin(vals))])


def calibrate_light_intensity(graycard_images, rig: LightRig, geom: SceneGeometry, card: GrayCardSpec = GrayCardSpec()) -> np.ndarray:
    """Per-light RGB intensities, ``(12, 3)``, fitted to gray-card photos."""
    imgs = np.asarray(graycard_images, dtype=np.float64)
    if imgs.shape[0] != N_LIGHTS:
        raise CalibrationError(f"expected {N_LIGHTS} gray-card images, got {imgs.shape[0]}")
    maps = gray_card_maps(geom.resolution, card)
    unit_rig = rig.copy(intensities=np.ones((N_LIGHTS, 3)))
    out = np.zeros((N_LIGHTS, 3))
    for k in range(N_LIGHTS):
        unit = render(maps, unit_rig, geom, k, specular=False)
        if not np.any(imgs[k] > 0):
            warnings.warn(f"gray-card image for light {k} is black; intensity set to 0")
            continue
        for ch in range(3):
            out[k, ch] = fit_scale_l1(unit[..., ch], imgs[k, ..., ch])
        log.debug("light %d intensity %s", k, out[k])
    return out
