"""Unconstrained parameterization of SVBRDF maps.

Scalar maps go through a logistic squash (roughness rescaled to
``[R_MIN, 1]``); normals are normalized after mapping the z component
through a softplus, so decoded normals always face the camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .maps import FIELDS, R_MIN, SvbrdfMaps

# keeps decoded n_z strictly positive when softplus underflows
NZ_FLOOR = 1e-6
# dielectric base reflectance; starting at 0.5 lets specular absorb diffuse
INIT_SPECULAR = 0.04


@dataclass
class LatentMaps:
    normals: np.ndarray
    diffuse: np.ndarray
    roughness: np.ndarray
    specular: np.ndarray

    @classmethod
    def zeros(cls, resolution: int) -> LatentMaps:
        r = resolution
        return cls(np.zeros((r, r, 3)), np.zeros((r, r, 3)), np.zeros((r, r)), np.zeros((r, r, 3)))

    @classmethod
    def initial(cls, resolution: int) -> LatentMaps:
        """Flat normals, mid-gray diffuse and roughness, low specular."""
        lat = cls.zeros(resolution)
        lat.specular[:] = logit(INIT_SPECULAR)
        return lat

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in FIELDS}

    @classmethod
    def from_dict(cls, d) -> LatentMaps:
        return cls(*(d[f] for f in FIELDS))

    def copy(self) -> LatentMaps:
        return LatentMaps(*(getattr(self, f).copy() for f in FIELDS))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def decode(latent: LatentMaps) -> SvbrdfMaps:
    for f in FIELDS:
        if not np.all(np.isfinite(getattr(latent, f))):
            raise ValueError(f"non-finite latent {f}")
    m = latent.normals.copy()
    m[..., 2] = _softplus(m[..., 2]) + NZ_FLOOR
    n = m / np.linalg.norm(m, axis=-1, keepdims=True)
    return SvbrdfMaps(
        n,
        expit(latent.diffuse),
        R_MIN + (1.0 - R_MIN) * expit(latent.roughness),
        expit(latent.specular),
    )


def decode_vjp(latent: LatentMaps, grad: SvbrdfMaps) -> LatentMaps:
    """Pull map gradients back through ``decode``."""
    m = latent.normals.copy()
    m[..., 2] = _softplus(m[..., 2]) + NZ_FLOOR
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    n = m / norm
    gn = grad.normals
    gm = (gn - n * np.sum(n * gn, axis=-1, keepdims=True)) / norm
    gm[..., 2] *= expit(latent.normals[..., 2])

    def sig_grad(u, g, scale=1.0):
        s = expit(u)
        return g * scale * s * (1.0 - s)

    return LatentMaps(
        gm,
        sig_grad(latent.diffuse, grad.diffuse),
        sig_grad(latent.roughness, grad.roughness, 1.0 - R_MIN),
        sig_grad(latent.specular, grad.specular),
    )


def encode(maps: SvbrdfMaps, eps: float = 1e-9) -> LatentMaps:
    """Inverse of ``decode`` for maps strictly inside their ranges."""
    n = maps.normals / np.linalg.norm(maps.normals, axis=-1, keepdims=True)
    u_n = n.copy()
    u_n[..., 2] = _softplus_inv(np.maximum(n[..., 2] - NZ_FLOOR, eps))
    clip = lambda x: np.clip(x, eps, 1 - eps)  # noqa: E731
    return LatentMaps(
        u_n,
        logit(clip(maps.diffuse)),
        logit(clip((maps.roughness - R_MIN) / (1.0 - R_MIN))),
        logit(clip(maps.specular)),
    )
