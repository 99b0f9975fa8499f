"""Per-pixel SVBRDF map container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

R_MIN = 0.045

FIELDS = ("normals", "diffuse", "roughness", "specular")


@dataclass
class SvbrdfMaps:
    """Normal, diffuse, roughness and specular fields of one material.

    ``normals``, ``diffuse`` and ``specular`` are ``(H, W, 3)`` arrays,
    ``roughness`` is ``(H, W)``. Normals live in tangent space with +z
    pointing back at the camera.
    """

    normals: np.ndarray
    diffuse: np.ndarray
    roughness: np.ndarray
    specular: np.ndarray

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.diffuse = np.asarray(self.diffuse, dtype=np.float64)
        self.roughness = np.asarray(self.roughness, dtype=np.float64)
        self.specular = np.asarray(self.specular, dtype=np.float64)
        h, w = self.roughness.shape
        for name in ("normals", "diffuse", "specular"):
            if getattr(self, name).shape != (h, w, 3):
                raise ValueError(
                    f"{name} has shape {getattr(self, name).shape}, expected {(h, w, 3)}"
                )

    @property
    def resolution(self) -> tuple[int, int]:
        return self.roughness.shape

    @classmethod
    def uniform(cls, resolution, normal=(0.0, 0.0, 1.0), diffuse=0.5, roughness=0.5, specular=0.04):
        h, w = (resolution, resolution) if np.isscalar(resolution) else resolution
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return cls(
            normals=np.broadcast_to(n, (h, w, 3)).copy(),
            diffuse=np.broadcast_to(np.asarray(diffuse, float), (h, w, 3)).copy(),
            roughness=np.full((h, w), float(roughness)),
            specular=np.broadcast_to(np.asarray(specular, float), (h, w, 3)).copy(),
        )

    def copy(self) -> SvbrdfMaps:
        return SvbrdfMaps(*(getattr(self, f).copy() for f in FIELDS))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in FIELDS}

    def crop(self, row: int, col: int, size: int) -> SvbrdfMaps:
        sl = (slice(row, row + size), slice(col, col + size))
        return SvbrdfMaps(*(getattr(self, f)[sl].copy() for f in FIELDS))

    def validate(self, atol: float = 1e-6) -> None:
        """Raise ``ValueError`` if any map leaves its valid range."""
        norms = np.linalg.norm(self.normals, axis=-1)
        if not np.all(np.abs(norms - 1.0) <= atol):
            raise ValueError("normals are not unit length")
        if not np.all(self.normals[..., 2] > 0):
            raise ValueError("normals must have positive z")
        for name in ("diffuse", "specular"):
            arr = getattr(self, name)
            if not np.all((arr >= 0) & (arr <= 1)):
                raise ValueError(f"{name} outside [0, 1]")
        if not np.all((self.roughness >= R_MIN) & (self.roughness <= 1)):
            raise ValueError(f"roughness outside [{R_MIN}, 1]")

    def is_valid(self, atol: float = 1e-6) -> bool:
        try:
            self.validate(atol)
        except ValueError:
            return False
        return True
