"""D1 (point-to-point) and D2 (point-to-plane) geometry PSNR."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry

# value written to CSV in place of an infinite PSNR
PSNR_DISPLAY_CAP = 100.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    return geometry.as_cloud(a), geometry.as_cloud(b)


def d1_error(a, b) -> float:
    """Mean squared distance from each point of ``a`` to its nearest point in ``b``."""
    a, b = _pair(a, b)
    _, dist = geometry.nearest_neighbors(a, b)
    return float(dist.mean())


def d2_error(a, b, normals_a) -> float:
    """Mean squared length of each nearest-neighbour residual projected on ``a``'s normal."""
    a, b = _pair(a, b)
    normals_a = np.asarray(normals_a, dtype=np.float64)
    if normals_a.shape != a.shape:
        raise ValueError(f"normals shape {normals_a.shape} does not match cloud {a.shape}")
    idx, _ = geometry.nearest_neighbors(a, b)
    residual = b[idx] - a
    along = np.einsum("ij,ij->i", residual, normals_a)
    return float(np.mean(along * along))


def psnr(e: float, peak: float) -> float:
    """``10 log10(peak^2 / e)``; ``e == 0`` gives ``inf``."""
    if not peak > 0:
        raise ValueError(f"PSNR peak must be positive, got {peak}")
    if e < 0:
        raise ValueError(f"error must be non-negative, got {e}")
    if e == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / e)


def display_psnr(value: float) -> float:
    return PSNR_DISPLAY_CAP if math.isinf(value) else value


@dataclass
class QualityReport:
    d1_psnr_db: float
    d2_psnr_db: float
    e_c2c: float
    e_c2p: float
    peak: float
    n_a: int
    n_b: int
    # B -> A direction combined with the above by taking the larger error
    d1_psnr_symmetric_db: float = math.nan
    d2_psnr_symmetric_db: float = math.nan

    @property
    def infinite(self) -> bool:
        return math.isinf(self.d1_psnr_db) and math.isinf(self.d2_psnr_db)


def evaluate(a, b, normal_k: int = 12) -> QualityReport:
    """Quality of reconstruction ``b`` against original ``a`` (peak from ``a``)."""
    a, b = _pair(a, b)
    peak = geometry.bbox_diagonal(a)
    e1 = d1_error(a, b)
    e1_rev = d1_error(b, a)
    e2 = _plane_error(a, b, normal_k, e1)
    e2_rev = _plane_error(b, a, normal_k, e1_rev)
    return QualityReport(
        psnr(e1, peak), psnr(e2, peak), e1, e2, peak, len(a), len(b),
        psnr(max(e1, e1_rev), peak), psnr(max(e2, e2_rev), peak),
    )


def _plane_error(a: np.ndarray, b: np.ndarray, normal_k: int, fallback: float) -> float:
    # fewer than 3 points define no plane; report the point-to-point error
    if len(a) < 3:
        return fallback
    return d2_error(a, b, geometry.estimate_normals(a, min(normal_k, len(a))))
