"""Mesh/point file ingestion, cloud preparation, toy shapes and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import geometry


class ParseError(ValueError):
    """Malformed input file; the message names the offending line."""


class CheckpointError(ValueError):
    pass


@dataclass
class RawModel:
    vertices: np.ndarray                 # (V, 3)
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.vertices.shape[0] < 1:
            raise ValueError("model has no vertices")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.vertices.shape[0]):
            raise ValueError("face index out of range")


# OFF ---------------------------------------------------------------------

def _content_lines(text: str) -> Iterable[tuple[int, list[str]]]:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def load_off(path) -> RawModel:
    """Read an ASCII OFF file; polygons with more than three corners are fan-triangulated.

    Accepts the ``OFF<nv> <nf> <ne>`` header variant where the counts are
    glued to the keyword, as found in parts of ModelNet40.
    """
    text = Path(path).read_text()
    lines = iter(_content_lines(text))
    try:
        lineno, tokens = next(lines)
    except StopIteration:
        raise ParseError(f"{path}: empty file") from None
    head = tokens[0]
    if not head.startswith("OFF"):
        raise ParseError(f"{path}:{lineno}: missing OFF header")
    rest = ([head[3:]] if len(head) > 3 else []) + tokens[1:]
    if not rest:
        try:
            lineno, rest = next(lines)
        except StopIteration:
            raise ParseError(f"{path}: missing counts line") from None
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise ParseError(f"{path}:{lineno}: bad counts line") from None
    if nv < 1 or nf < 0:
        raise ParseError(f"{path}:{lineno}: invalid counts {nv} {nf}")

    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, tokens = next(lines)
        except StopIteration:
            raise ParseError(f"{path}: expected {nv} vertices, file ended after {i}") from None
        try:
            verts[i] = [float(t) for t in tokens[:3]]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric vertex coordinate") from None
        if len(tokens) < 3:
            raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")

    tris: list[tuple[int, int, int]] = []
    for i in range(nf):
        try:
            lineno, tokens = next(lines)
        except StopIteration:
            raise ParseError(f"{path}: expected {nf} faces, file ended after {i}") from None
        try:
            n = int(tokens[0])
            idx = [int(t) for t in tokens[1:1 + n]]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric face entry") from None
        if n < 3 or len(idx) != n:
            raise ParseError(f"{path}:{lineno}: face must list at least 3 indices")
        if min(idx) < 0 or max(idx) >= nv:
            raise ParseError(f"{path}:{lineno}: face index out of range (vertex count {nv})")
        for j in range(1, n - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
    return RawModel(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))


def save_off(model: RawModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"OFF\n{len(model.vertices)} {len(model.faces)} 0\n")
        for v in model.vertices.tolist():
            fh.write(f"{v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in model.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# PLY ---------------------------------------------------------------------

def write_ply(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in pts.tolist():
            fh.write(f"{p[0]!r} {p[1]!r} {p[2]!r}\n")


def read_ply(path) -> np.ndarray:
    """Read the x, y, z vertex properties of an ASCII PLY file."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}:1: missing ply magic")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body = None
    skip_before = 0
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format" and tokens[1] != "ascii":
            raise ParseError(f"{path}:{lineno}: only ASCII PLY is supported")
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                n_vertex = int(tokens[2])
            elif n_vertex is None:
                # element listed before vertices: its rows precede ours
                skip_before += int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            props.append(tokens[-1])
        elif tokens[0] == "end_header":
            body = lineno
            break
    if body is None or n_vertex is None:
        raise ParseError(f"{path}: incomplete PLY header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ParseError(f"{path}: vertex element lacks x/y/z") from None
    start = body + skip_before
    rows = lines[start:start + n_vertex]
    if len(rows) != n_vertex:
        raise ParseError(f"{path}: expected {n_vertex} vertices, found {len(rows)}")
    out = np.empty((n_vertex, 3))
    for i, row in enumerate(rows):
        tokens = row.split()
        try:
            out[i] = [float(tokens[c]) for c in cols]
        except (ValueError, IndexError):
            raise ParseError(f"{path}:{start + i + 1}: bad vertex row") from None
    return out


# clouds --------------------------------------------------------------------

def mesh_to_cloud(model: RawModel, n_surface: int, rng=None) -> np.ndarray:
    """Area-weighted uniform surface sample of ``n_surface`` points."""
    rng = np.random.default_rng(rng)
    v, f = model.vertices, model.faces
    if len(f) == 0:
        if len(v) == n_surface:
            return v.copy()
        if len(v) > n_surface:
            keep = np.sort(rng.choice(len(v), size=n_surface, replace=False))
            return v[keep]
        raise ValueError(f"faceless model has {len(v)} vertices, {n_surface} requested")
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    tri = rng.choice(len(f), size=n_surface, p=areas / total)
    r1, r2 = rng.random(n_surface), rng.random(n_surface)
    s = np.sqrt(r1)[:, None]
    r2 = r2[:, None]
    return (1 - s) * a[tri] + s * (1 - r2) * b[tri] + s * r2 * c[tri]


def normalize_cloud(cloud, lo: float = 0.0, hi: float = 63.0) -> np.ndarray:
    """Uniformly scale and centre the cloud so its longest extent spans ``[lo, hi]``."""
    pts = geometry.as_cloud(cloud)
    if not hi > lo:
        raise ValueError("normalize_cloud needs hi > lo")
    mins, maxs = pts.min(axis=0), pts.max(axis=0)
    longest = float((maxs - mins).max())
    if longest == 0.0:
        raise ValueError("cannot normalize a zero-extent cloud")
    scale = (hi - lo) / longest
    out = (pts - (mins + maxs) / 2.0) * scale + (lo + hi) / 2.0
    return np.clip(out, lo, hi)


def prepare_cloud(model: RawModel, n_points: int, lo: float, hi: float, rng=None,
                  oversample: int = 4) -> np.ndarray:
    """Dense surface sample -> FPS down to ``n_points`` -> normalise."""
    dense = mesh_to_cloud(model, n_points * oversample if len(model.faces) else n_points, rng)
    picked = dense[geometry.fps(dense, n_points)]
    return normalize_cloud(picked, lo, hi)


# procedural toy shapes -------------------------------------------------------

def _grid_mesh(fn, nu: int, nv: int, wrap_u: bool, wrap_v: bool) -> RawModel:
    us = np.linspace(0.0, 1.0, nu, endpoint=not wrap_u)
    vs = np.linspace(0.0, 1.0, nv, endpoint=not wrap_v)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    verts = fn(uu.ravel(), vv.ravel())
    faces = []
    iu = nu if wrap_u else nu - 1
    iv = nv if wrap_v else nv - 1
    for i in range(iu):
        for j in range(iv):
            a = i * nv + j
            b = ((i + 1) % nu) * nv + j
            c = ((i + 1) % nu) * nv + (j + 1) % nv
            d = i * nv + (j + 1) % nv
            faces += [(a, b, c), (a, c, d)]
    return RawModel(verts, faces)


def _merge(*models: RawModel) -> RawModel:
    verts, faces, offset = [], [], 0
    for m in models:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return RawModel(np.concatenate(verts), np.concatenate(faces))


def _box(sx: float, sy: float, sz: float, origin=(0.0, 0.0, 0.0)) -> RawModel:
    corners = np.array([[x, y, z] for x in (0, sx) for y in (0, sy) for z in (0, sz)], dtype=float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [t for q in quads for t in ((q[0], q[1], q[2]), (q[0], q[2], q[3]))]
    return RawModel(corners + np.asarray(origin), faces)


def _revolve(profile, nu: int = 48, nv: int = 24) -> RawModel:
    # profile(v) -> (radius, height) for v in [0, 1]
    def fn(u, v):
        r, h = profile(v)
        ang = 2 * np.pi * u
        return np.stack([r * np.cos(ang), r * np.sin(ang), h], axis=1)
    return _grid_mesh(fn, nu, nv, wrap_u=True, wrap_v=False)


def _disk(radius: float, height: float) -> RawModel:
    return _revolve(lambda v: (radius * v, np.full_like(v, height)), nv=8)


def toy_mesh(name: str) -> RawModel:
    if name == "sphere":
        return _revolve(lambda v: (np.sin(np.pi * v), -np.cos(np.pi * v)))
    if name == "torus":
        def fn(u, v):
            a, b = 2 * np.pi * u, 2 * np.pi * v
            r = 1.0 + 0.35 * np.cos(b)
            return np.stack([r * np.cos(a), r * np.sin(a), 0.35 * np.sin(b)], axis=1)
        return _grid_mesh(fn, 48, 24, wrap_u=True, wrap_v=True)
    if name == "box":
        return _box(1.6, 1.0, 0.7)
    if name == "cylinder":
        side = _revolve(lambda v: (np.full_like(v, 0.5), 2.0 * v - 1.0), nv=8)
        return _merge(side, _disk(0.5, -1.0), _disk(0.5, 1.0))
    if name == "cone":
        side = _revolve(lambda v: (0.7 * (1.0 - v), 1.6 * v - 0.8), nv=12)
        return _merge(side, _disk(0.7, -0.8))
    if name == "capsule":
        def profile(v):
            # lower cap, straight body, upper cap along one sweep
            t = v * 3.0
            r = np.where(t < 1, np.sin(t * np.pi / 2), np.where(t < 2, 1.0, np.cos((t - 2) * np.pi / 2)))
            h = np.where(t < 1, -1.0 - np.cos(t * np.pi / 2), np.where(t < 2, 2 * (t - 1) - 1.0,
                                                                         1.0 + np.sin((t - 2) * np.pi / 2)))
            return 0.5 * r, 0.5 * h
        return _revolve(profile, nv=36)
    if name == "lbracket":
        return _merge(_box(2.0, 0.8, 0.4), _box(0.4, 0.8, 1.6, origin=(0.0, 0.0, 0.4)))
    if name == "helix":
        def fn(u, v):
            t = 4 * np.pi * u
            phi = 2 * np.pi * v
            c = np.stack([np.cos(t), np.sin(t), 0.25 * t], axis=1)
            tangent = np.stack([-np.sin(t), np.cos(t), np.full_like(t, 0.25)], axis=1)
            tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
            normal = np.stack([-np.cos(t), -np.sin(t), np.zeros_like(t)], axis=1)
            binormal = np.cross(tangent, normal)
            return c + 0.2 * (np.cos(phi)[:, None] * normal + np.sin(phi)[:, None] * binormal)
        return _grid_mesh(fn, 96, 12, wrap_u=False, wrap_v=True)
    raise KeyError(f"unknown toy shape {name!r}")


TOY_SHAPES = ("sphere", "torus", "box", "cylinder", "cone", "capsule", "lbracket", "helix")


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def toy_dataset(split: str = "train", n_points: int = 1024, per_shape: int = 1, seed: int = 0,
                lo: float = 0.0, hi: float = 63.0) -> tuple[list[np.ndarray], list[str]]:
    """Jittered instances of the procedural shapes; splits use disjoint RNG streams."""
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    stream = np.random.SeedSequence([seed, 0 if split == "train" else 1])
    rng = np.random.default_rng(stream)
    clouds, names = [], []
    for name in TOY_SHAPES:
        mesh = toy_mesh(name)
        for i in range(per_shape):
            rot = _random_rotation(rng)
            stretch = rng.uniform(0.8, 1.2, size=3)
            jittered = RawModel((mesh.vertices @ rot.T) * stretch, mesh.faces)
            clouds.append(prepare_cloud(jittered, n_points, lo, hi, rng))
            names.append(f"{name}_{i}")
    return clouds, names


@dataclass
class DatasetSpec:
    root: str = "toy"
    split: str = "train"
    n_points: int = 1024
    lo: float = 0.0
    hi: float = 63.0
    seed: int = 0
    per_shape: int = 1

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("dataset range needs lo < hi")
        if self.n_points < 8:
            raise ValueError("dataset needs at least 8 points per cloud")


def load_dataset(spec: DatasetSpec) -> tuple[list[np.ndarray], list[str]]:
    """Clouds for ``spec``.

    ``root == "toy"`` generates the procedural set.  A directory holding
    ``<split>/*.ply`` is read as already prepared clouds; otherwise a
    ModelNet-style ``<root>/<class>/<split>/*.off`` tree is sampled.
    """
    if spec.root == "toy":
        return toy_dataset(spec.split, spec.n_points, spec.per_shape, spec.seed, spec.lo, spec.hi)
    root = Path(spec.root)
    prepared = sorted((root / spec.split).glob("*.ply"))
    if prepared:
        clouds = [read_ply(p) for p in prepared]
        bad = [p.name for p, c in zip(prepared, clouds) if len(c) != spec.n_points]
        if bad:
            raise ValueError(f"prepared clouds with wrong point count: {bad[:3]}")
        return clouds, [p.stem for p in prepared]
    offs = sorted(root.glob(f"*/{spec.split}/*.off"))
    if not offs:
        raise FileNotFoundError(f"no prepared .ply or ModelNet .off files under {root}")
    rng = np.random.default_rng(spec.seed)
    clouds = [prepare_cloud(load_off(p), spec.n_points, spec.lo, spec.hi, rng) for p in offs]
    return clouds, [p.stem for p in offs]


# checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"PCSM"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    stage: str = "stage1"
    rng_state: dict = field(default_factory=dict)
    hyperparams: dict = field(default_factory=dict)
    history: list[float] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Layout: magic, u32 version, u32 manifest length, JSON manifest, f64 LE blobs."""
    blobs = []
    entries = []
    offset = 0
    for name, value in ckpt.params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({
        "stage": ckpt.stage,
        "rng_state": ckpt.rng_state,
        "hyperparams": ckpt.hyperparams,
        "history": [float(h) for h in ckpt.history],
        "blobs": entries,
        "blob_bytes": offset,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    data = raw[12 + mlen:]
    if len(data) != manifest["blob_bytes"]:
        raise CheckpointError(f"{path}: expected {manifest['blob_bytes']} blob bytes, found {len(data)}")
    params = {}
    for e in manifest["blobs"]:
        if int(np.prod(e["shape"], dtype=np.int64)) != e["count"]:
            raise CheckpointError(f"{path}: blob {e['name']} count does not match its shape")
        arr = np.frombuffer(data, dtype="<f8", count=e["count"], offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return Checkpoint(params, manifest["stage"], manifest["rng_state"], manifest["hyperparams"],
                      manifest.get("history", []), version)
