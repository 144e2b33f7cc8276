"""Learned semantic codec: patch encoder, multi-view global encoder, decoder, Chamfer loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .nn_core import (Conv2d, Linear, Module, Tensor, _accumulate, _result, amax, broadcast_to,
                      concat, max_pool2d, relu, reshape, tanh, view_pool)


# local branch -------------------------------------------------------------

class LocalEncoder(Module):
    """Per-patch encoder: one set-abstraction stage followed by a PointNet.

    A patch of ``K`` centred points is reduced by FPS to ``K/2`` sub-centres,
    each grouped with its ``K/4`` nearest patch points in relative
    coordinates.  A shared MLP lifts every grouped point to 128 channels and
    is max-pooled per group; the pooled features, concatenated with the
    sub-centre coordinates, go through a second shared MLP and a max pool to
    produce the ``d``-dimensional patch descriptor.
    """

    def __init__(self, K: int, d: int, rng: np.random.Generator, inner=(32, 64, 128),
                 outer=(128, 128), coord_scale: float = 1.0):
        if K % 4:
            raise ValueError(f"patch size K={K} must be divisible by 4")
        self.K = K
        self.d = d
        self.coord_scale = coord_scale
        widths = (3,) + tuple(inner)
        self.inner = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        widths = (inner[-1] + 3,) + tuple(outer) + (d,)
        self.outer = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def group(self, patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(P, K, 3)`` patches -> grouped ``(P, K/2, K/4, 3)`` offsets and ``(P, K/2, 3)`` sub-centres."""
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim != 3 or patches.shape[1:] != (self.K, 3):
            raise ValueError(f"expected patches of shape (P, {self.K}, 3), got {patches.shape}")
        # seed at the point nearest the patch origin so the result ignores point order
        seeds = np.argmin(geometry.squared_distances(patches, np.zeros(3)), axis=1)
        centre_idx = geometry.fps_batched(patches, self.K // 2, seeds)
        rows = np.arange(patches.shape[0])[:, None]
        centres = patches[rows, centre_idx]
        members = geometry.knn_batched(patches, centres, self.K // 4)
        grouped = patches[rows[:, :, None], members] - centres[:, :, None, :]
        return grouped / self.coord_scale, centres / self.coord_scale

    def forward_grouped(self, grouped: np.ndarray, centres: np.ndarray) -> Tensor:
        h = Tensor(grouped)
        for i, layer in enumerate(self.inner):
            h = layer(h)
            if i < len(self.inner) - 1:
                h = relu(h)
        # relu commutes with max, so pool first and rectify the smaller tensor
        h = relu(amax(h, axis=-2))
        h = concat([h, Tensor(centres)], axis=-1)
        for i, layer in enumerate(self.outer):
            h = layer(h)
            if i < len(self.outer) - 1:
                h = relu(h)
        return amax(h, axis=-2)

    def __call__(self, patches: np.ndarray) -> Tensor:
        return self.forward_grouped(*self.group(patches))


def local_encode(patches: geometry.PatchSet, encoder: LocalEncoder) -> Tensor:
    return encoder(patches.patches)


# cameras and rendering ----------------------------------------------------

@dataclass
class CameraParams:
    azimuth: np.ndarray     # (V,) radians
    elevation: np.ndarray   # (V,) radians
    distance: np.ndarray    # (V,) model units


def unit_cloud(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Centre on the bounding-box centre and divide by the bounding-sphere radius."""
    centre = (points.min(axis=0) + points.max(axis=0)) / 2.0
    radius = float(np.sqrt(geometry.squared_distances(points, centre).max()))
    radius = radius if radius > 0 else 1.0
    return (points - centre) / radius, centre, radius


def squash_cameras(raw: Tensor) -> Tensor:
    """Map unconstrained ``(..., V, 3)`` outputs to (azimuth, elevation, distance/radius).

    Azimuth is an offset in (-pi, pi) around the canonical ``2*pi*v/V``,
    elevation lies in (-pi/3, pi/3) and distance in (1, 3) bounding radii.
    """
    views = raw.shape[-2]
    scale = np.array([math.pi, math.pi / 3.0, 1.0])
    base = np.zeros((views, 3))
    base[:, 0] = 2.0 * math.pi * np.arange(views) / views
    base[:, 2] = 2.0
    return tanh(raw) * scale + base


class CameraPredictor(Module):
    """PointNet over the whole cloud followed by an MLP emitting ``V`` camera triples."""

    def __init__(self, views: int, rng: np.random.Generator, widths=(32, 64), hidden: int = 32):
        if views < 1:
            raise ValueError("need at least one view")
        self.views = views
        dims = (3,) + tuple(widths)
        self.point_mlp = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.fc1 = Linear(widths[-1], hidden, rng)
        # small final layer: starts near the canonical ring of views
        self.fc2 = Linear(hidden, 3 * views, rng, gain=0.01)

    def __call__(self, unit_clouds: np.ndarray) -> Tensor:
        h = Tensor(unit_clouds)
        for layer in self.point_mlp:
            h = relu(layer(h))
        h = amax(h, axis=-2)
        raw = self.fc2(relu(self.fc1(h)))
        return squash_cameras(reshape(raw, raw.shape[:-1] + (self.views, 3)))


def predict_cameras(cloud, predictor: CameraPredictor) -> CameraParams:
    pts = geometry.as_cloud(cloud)
    unit, _, radius = unit_cloud(pts)
    cams = predictor(unit[None]).data[0]
    return CameraParams(cams[:, 0].copy(), cams[:, 1].copy(), cams[:, 2] * radius)


def _project(points: np.ndarray, cams: np.ndarray, focal: float, cx: float, cy: float):
    # points (B, N, 3); cams (B, V, 3) -> pixel coords and the pieces needed for d/dcams
    az = cams[..., 0][..., None]
    el = cams[..., 1][..., None]
    dist = cams[..., 2][..., None]
    x, y, z = (points[:, None, :, i] for i in range(3))
    ca, sa, ce, se = np.cos(az), np.sin(az), np.cos(el), np.sin(el)
    xr = ca * x + sa * y
    yr = -sa * x + ca * y
    vert = -se * yr + ce * z
    k = focal / dist
    col = cx + k * xr
    row = cy - k * vert
    return col, row, (x, y, z, xr, yr, vert, ca, sa, ce, se, k, dist)


def render(points, cams: Tensor, height: int, width: int, splat_sigma: float = 1.0,
           focal: float | None = None) -> Tensor:
    """Soft orthographic splatting of ``(B, N, 3)`` clouds into ``(B, V, H, W)`` images.

    Camera triples are (azimuth, elevation, distance); the view rotates the
    cloud about z by the azimuth then tilts it by the elevation, and projects
    onto the rotated x/z plane at ``focal / distance`` pixels per unit.  Each
    point adds a unit-height isotropic Gaussian; pixels saturate at 1.  The
    Gaussian is separable, so each image is one ``(H, N) @ (N, W)`` product.
    Differentiable with respect to ``cams`` only.
    """
    points = np.asarray(points, dtype=np.float64)
    if height < 16 or width < 16:
        raise ValueError("render needs images of at least 16x16 pixels")
    if focal is None:
        focal = 0.45 * min(height, width)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    col, row, saved = _project(points, cams.data, focal, cx, cy)
    inv = 1.0 / (2.0 * splat_sigma ** 2)
    dc = np.arange(width) - col[..., None]       # (B, V, N, W)
    dr = np.arange(height) - row[..., None]      # (B, V, N, H)
    gx = np.exp(-dc * dc * inv)
    gy = np.exp(-dr * dr * inv)
    dens = np.swapaxes(gy, -1, -2) @ gx          # (B, V, H, W)
    out = _result(np.minimum(dens, 1.0), (cams,), "render")
    if out.requires_grad:
        def _backward():
            g = out.grad * (dens < 1.0)
            dgx = gy @ g                          # (B, V, N, W)
            dgy = gx @ np.swapaxes(g, -1, -2)     # (B, V, N, H)
            s2 = splat_sigma ** 2
            dcol = np.sum(dgx * gx * dc, axis=-1) / s2
            drow = np.sum(dgy * gy * dr, axis=-1) / s2
            x, y, z, xr, yr, vert, ca, sa, ce, se, k, dist = saved
            d_az = dcol * k * yr - drow * k * se * xr
            d_el = drow * k * (ce * yr + se * z)
            d_dist = (-dcol * k * xr + drow * k * vert) / dist
            grad = np.stack([d_az.sum(-1), d_el.sum(-1), d_dist.sum(-1)], axis=-1)
            _accumulate(cams, grad)
        out._backward = _backward
    return out


def render_views(cloud, cams, height: int = 64, width: int = 64, splat_sigma: float = 1.0,
                 focal_scale: float = 1.0) -> np.ndarray:
    """Render one cloud (model units, about the origin) into a ``(V, H, W)`` stack.

    ``focal_scale`` is the unit length the camera distances are measured in;
    pass the bounding radius to match :func:`render` on unit clouds.
    """
    pts = geometry.as_cloud(cloud)
    if isinstance(cams, CameraParams):
        triples = np.stack([cams.azimuth, cams.elevation, cams.distance], axis=1)
    else:
        triples = np.asarray(cams, dtype=np.float64)
    if np.any(triples[:, 2] <= 0):
        raise ValueError("camera distance must be positive")
    triples = triples.copy()
    triples[:, 2] /= focal_scale
    return render(pts[None] / focal_scale, Tensor(triples[None]), height, width, splat_sigma).data[0]


def dump_views_pgm(views: np.ndarray, directory, prefix: str = "view") -> list[Path]:
    """Write each ``(H, W)`` image as a binary PGM (white background, dark points)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(np.asarray(views)):
        path = directory / f"{prefix}_{i}.pgm"
        pixels = np.round(255 * (1.0 - np.clip(img, 0.0, 1.0))).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes())
        paths.append(path)
    return paths


# global branch ------------------------------------------------------------

class GlobalEncoder(Module):
    """Shared CNN per view, max view pooling, then a three-layer MLP to ``D'``."""

    def __init__(self, D_prime: int, rng: np.random.Generator, image_size: int = 64,
                 channels=(16, 32, 64), feature_width: int = 128, mlp=(64, 32)):
        if image_size % 8:
            raise ValueError("image size must be divisible by 8")
        chans = (1,) + tuple(channels)
        self.convs = [Conv2d(a, b, 3, rng, padding=1) for a, b in zip(chans[:-1], chans[1:])]
        reduced = image_size // 2 ** len(channels)
        self.fc = Linear(chans[-1] * reduced * reduced, feature_width, rng)
        dims = (feature_width,) + tuple(mlp) + (D_prime,)
        self.mlp = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, views: Tensor) -> Tensor:
        views = views if isinstance(views, Tensor) else Tensor(views)
        b, v, height, width = views.shape
        h = reshape(views, (b * v, 1, height, width))
        for conv in self.convs:
            h = max_pool2d(relu(conv(h)), 2)
        h = relu(self.fc(reshape(h, (b, v, -1))))
        h = view_pool(h)
        for i, layer in enumerate(self.mlp):
            h = layer(h)
            if i < len(self.mlp) - 1:
                h = relu(h)
        return h


def global_encode(views, encoder: GlobalEncoder) -> Tensor:
    """``(V, H, W)`` or ``(B, V, H, W)`` images -> ``(1, D')`` or ``(B, D')`` features."""
    arr = views.data if isinstance(views, Tensor) else np.asarray(views, dtype=np.float64)
    if arr.ndim == 3:
        return encoder(Tensor(arr[None]))
    return encoder(views)


class GlobalBranch(Module):
    """Camera prediction, soft rendering and the view encoder chained together."""

    def __init__(self, views: int, D_prime: int, rng: np.random.Generator, image_size: int = 64,
                 splat_sigma: float = 1.0, **encoder_kwargs):
        self.cameras = CameraPredictor(views, rng)
        self.encoder = GlobalEncoder(D_prime, rng, image_size, **encoder_kwargs)
        self.image_size = image_size
        self.splat_sigma = splat_sigma

    def views(self, clouds: np.ndarray) -> tuple[Tensor, Tensor]:
        unit = np.stack([unit_cloud(c)[0] for c in clouds])
        cams = self.cameras(unit)
        return render(unit, cams, self.image_size, self.image_size, self.splat_sigma), cams

    def __call__(self, clouds: np.ndarray) -> Tensor:
        return self.encoder(self.views(clouds)[0])


# decoder and loss ---------------------------------------------------------

class SemanticDecoder(Module):
    """Per-patch upsampler: ``[L_i, G] -> (K/2, 3)`` offsets added to centroid ``i``."""

    def __init__(self, K: int, d: int, D_prime: int, rng: np.random.Generator, hidden: int = 256,
                 coord_scale: float = 1.0):
        self.K = K
        self.d = d
        self.D_prime = D_prime
        self.coord_scale = coord_scale
        self.fc1 = Linear(d + D_prime, hidden, rng)
        self.fc2 = Linear(hidden, (K // 2) * 3, rng)

    def __call__(self, local: Tensor, global_: Tensor | None, centroids: np.ndarray) -> Tensor:
        b, s, d = local.shape
        if d != self.d or np.shape(centroids) != (b, s, 3):
            raise ValueError(f"decoder got local {local.shape} and centroids {np.shape(centroids)}")
        h = local
        if self.D_prime:
            if global_ is None or global_.shape != (b, self.D_prime):
                raise ValueError(f"decoder expects global features of shape ({b}, {self.D_prime})")
            tiled = broadcast_to(reshape(global_, (b, 1, self.D_prime)), (b, s, self.D_prime))
            h = concat([local, tiled], axis=-1)
        offsets = self.fc2(relu(self.fc1(h))) * self.coord_scale
        points = reshape(offsets, (b, s, self.K // 2, 3)) + np.asarray(centroids)[:, :, None, :]
        return reshape(points, (b, s * (self.K // 2), 3))


def semantic_decode(local, global_, centroids, decoder: SemanticDecoder) -> Tensor:
    """Single-cloud convenience wrapper: ``(S, d)``, ``(1, D')``, ``(S, 3)`` -> ``(N, 3)``."""
    local = local if isinstance(local, Tensor) else Tensor(local)
    local = reshape(local, (1,) + local.shape)
    if global_ is not None:
        global_ = global_ if isinstance(global_, Tensor) else Tensor(global_)
        global_ = reshape(global_, (1, -1))
    out = decoder(local, global_, np.asarray(centroids)[None])
    return reshape(out, out.shape[1:])


def chamfer(p, p_prime) -> Tensor:
    """Chamfer distance normalised by ``|P|``; differentiable w.r.t. ``p_prime``.

    Accepts single clouds ``(N, 3)``/``(M, 3)`` or batches ``(B, N, 3)``/``(B, M, 3)``,
    in which case the per-cloud distances are averaged.  Nearest-neighbour
    assignments are held fixed in the backward pass.
    """
    q = p_prime if isinstance(p_prime, Tensor) else Tensor(p_prime)
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 2
    pb = p[None] if single else p
    qb = q.data[None] if single else q.data
    if pb.shape[1] == 0 or qb.shape[1] == 0:
        raise ValueError("chamfer distance of an empty cloud")
    n = pb.shape[1]
    total = 0.0
    grads = np.zeros_like(qb)
    for i in range(pb.shape[0]):
        d = geometry.pairwise_squared(pb[i], qb[i])          # (N, M)
        fwd = np.argmin(d, axis=1)
        bwd = np.argmin(d, axis=0)
        total += (d[np.arange(n), fwd].sum() + d[bwd, np.arange(qb.shape[1])].sum()) / n
        g = np.zeros_like(qb[i])
        np.add.at(g, fwd, 2.0 * (qb[i][fwd] - pb[i]))
        g += 2.0 * (qb[i] - pb[i][bwd])
        grads[i] = g / n
    batch = pb.shape[0]
    out = _result(np.array(total / batch), (q,), "chamfer")
    if out.requires_grad:
        scale = 1.0 / batch
        out._backward = lambda: _accumulate(q, out.grad * (grads[0] if single else grads) * scale)
    return out
