"""Synthetic object meshes, surface sampling, signed distance and cloud I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class InvalidDimension(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyCloud(ValueError):
    pass


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float, meters
    faces: np.ndarray  # (F, 3) int, counter-clockwise seen from outside

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def volume(self) -> float:
        tri = self.triangles
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def centroid(self) -> np.ndarray:
        """Center of mass of the enclosed solid (uniform density)."""
        tri = self.triangles
        vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])) / 6.0
        return (vol[:, None] * tri.sum(axis=1) / 4.0).sum(axis=0) / vol.sum()

    def bounding_radius(self) -> float:
        lo, hi = self.bounds()
        return float(0.5 * np.linalg.norm(hi - lo))


def is_watertight(mesh: TriMesh) -> bool:
    """Every undirected edge is shared by exactly two faces, used once in each direction."""
    f = mesh.faces
    if f.min() < 0 or f.max() >= len(mesh.vertices):
        return False
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    uniq, counts = np.unique(directed, axis=0, return_counts=True)
    if np.any(counts != 1):
        return False
    keys = {tuple(e) for e in uniq.tolist()}
    return all((b, a) in keys for a, b in keys)


def extrude(polygon: np.ndarray, height: float) -> TriMesh:
    """Prism over a counter-clockwise polygon that is star-shaped from vertex 0."""
    polygon = np.asarray(polygon, dtype=float)
    n = len(polygon)
    bottom = np.column_stack([polygon, np.full(n, -height / 2)])
    top = np.column_stack([polygon, np.full(n, height / 2)])
    verts = np.vstack([bottom, top])
    faces = []
    for i in range(1, n - 1):
        faces.append((0, i + 1, i))  # bottom, facing -z
        faces.append((n, n + i, n + i + 1))  # top, facing +z
    for i in range(n):
        j = (i + 1) % n
        faces.append((i, j, n + j))
        faces.append((i, n + j, n + i))
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def _centered(mesh: TriMesh) -> TriMesh:
    lo, hi = mesh.bounds()
    return TriMesh(mesh.vertices - 0.5 * (lo + hi), mesh.faces)


def _check_positive(**dims):
    for name, value in dims.items():
        if not value > 0:
            raise InvalidDimension(f"{name} must be positive, got {value}")


def box(w: float, d: float, h: float) -> TriMesh:
    _check_positive(w=w, d=d, h=h)
    rect = np.array([[-w / 2, -d / 2], [w / 2, -d / 2], [w / 2, d / 2], [-w / 2, d / 2]])
    return _centered(extrude(rect, h))


def plate(w: float, d: float, t: float) -> TriMesh:
    return box(w, d, t)


def cylinder(r: float, h: float, segments: int = 32) -> TriMesh:
    """Faceted cylinder with its axis along z."""
    _check_positive(r=r, h=h)
    if segments < 3:
        raise InvalidDimension(f"segments must be >= 3, got {segments}")
    ang = 2 * np.pi * np.arange(segments) / segments
    return _centered(extrude(np.column_stack([r * np.cos(ang), r * np.sin(ang)]), h))


def capped_l(arm_x: float, arm_y: float, thickness: float, depth: float) -> TriMesh:
    """L-shaped bracket: two arms of width ``thickness`` in the xy plane, extruded by ``depth``."""
    _check_positive(arm_x=arm_x, arm_y=arm_y, thickness=thickness, depth=depth)
    if thickness >= min(arm_x, arm_y):
        raise InvalidDimension("thickness must be smaller than both arm lengths")
    t = thickness
    poly = np.array([[0, 0], [arm_x, 0], [arm_x, t], [t, t], [t, arm_y], [0, arm_y]], dtype=float)
    return _centered(extrude(poly, depth))


PRIMITIVES = {"box": box, "plate": plate, "cylinder": cylinder, "capped_l": capped_l}


def make_primitive(spec: dict) -> TriMesh:
    """Build a mesh from ``{"type": name, **dimensions}``."""
    spec = dict(spec)
    kind = spec.pop("type")
    if kind not in PRIMITIVES:
        raise InvalidDimension(f"unknown primitive {kind!r}")
    return PRIMITIVES[kind](**spec)


def sample_surface(mesh: TriMesh, n: int, seed: int, return_faces: bool = False):
    """Area-uniform surface samples: face chosen proportional to area, then uniform barycentric."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles[face]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    if return_faces:
        return pts, face
    return pts


def closest_point_distances(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Unsigned point-triangle distances, ``(N, 3) x (F, 3, 3) -> (N, F)``.

    Region-based closest point on a triangle (Voronoi regions of the vertices,
    edges and face), evaluated for all pairs at once.
    """
    p = points[:, None, :]
    a, b, c = tris[None, :, 0], tris[None, :, 1], tris[None, :, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...k,...k", ab, ap)
    d2 = np.einsum("...k,...k", ac, ap)
    bp = p - b
    d3 = np.einsum("...k,...k", ab, bp)
    d4 = np.einsum("...k,...k", ac, bp)
    cp = p - c
    d5 = np.einsum("...k,...k", ab, cp)
    d6 = np.einsum("...k,...k", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_face = vb / denom
        w_face = vc / denom
        closest = a + v_face[..., None] * ab + w_face[..., None] * ac

        t_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        closest = np.where(m[..., None], a + t_ab[..., None] * ab, closest)
        t_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        closest = np.where(m[..., None], a + t_ac[..., None] * ac, closest)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        closest = np.where(m[..., None], b + t_bc[..., None] * (c - b), closest)

    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, closest)
    return np.linalg.norm(p - closest, axis=-1)


def ray_triangle_hits(origins: np.ndarray, direction: np.ndarray, tris: np.ndarray):
    """Moeller-Trumbore for rays ``origin + s * direction`` against all triangles.

    Returns ``(s, hit)`` arrays of shape ``(N, F)``; ``s`` is meaningful where ``hit``.
    Rays parallel to a face never hit it.
    """
    direction = np.broadcast_to(np.asarray(direction, dtype=float), origins.shape)
    d = direction[:, None, :]
    e1 = (tris[:, 1] - tris[:, 0])[None]
    e2 = (tris[:, 2] - tris[:, 0])[None]
    pvec = np.cross(d, e2)
    det = np.einsum("...k,...k", e1, pvec)
    parallel = np.abs(det) < 1e-15
    inv = 1.0 / np.where(parallel, 1.0, det)
    tvec = origins[:, None, :] - tris[None, :, 0]
    u = np.einsum("...k,...k", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("...k,...k", d, qvec) * inv
    s = np.einsum("...k,...k", e2, qvec) * inv
    hit = ~parallel & (u >= 0) & (v >= 0) & (u + v <= 1)
    return s, hit


# Generic directions: a parity ray through an edge or vertex is measure-zero for
# these, and the majority vote absorbs the rare coincidence.
_PARITY_DIRS = np.array(
    [[0.5773502691896257, 0.5773803, 0.5773202], [-0.6123724, 0.3535534, 0.7071068], [0.2672612, -0.8017837, 0.5345225]]
)


def inside(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Ray-parity inside test (majority over three ray directions)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tris = mesh.triangles
    votes = np.zeros(len(points), dtype=int)
    for d in _PARITY_DIRS:
        s, hit = ray_triangle_hits(points, d / np.linalg.norm(d), tris)
        votes += (np.count_nonzero(hit & (s > 0), axis=1) % 2).astype(int)
    return votes >= 2


def sdf(mesh: TriMesh, points: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Signed distance, negative inside, by brute-force scan over all triangles."""
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    points = np.atleast_2d(points)
    tris = mesh.triangles
    out = np.empty(len(points))
    for i in range(0, len(points), chunk):
        block = points[i : i + chunk]
        dist = closest_point_distances(block, tris).min(axis=1)
        out[i : i + chunk] = np.where(inside(mesh, block), -dist, dist)
    return out[0] if single else out


class SdfGrid:
    """Trilinear interpolation of exact SDF samples on a regular grid around a mesh.

    Points outside the grid fall back to the exact brute-force SDF.  Inside,
    the interpolation error is at most the half cell diagonal (the SDF is
    1-Lipschitz).
    """

    def __init__(self, mesh: TriMesh, resolution: int = 48, margin: float = 0.15):
        self.mesh = mesh
        lo, hi = mesh.bounds()
        self.lo = lo - margin
        self.hi = hi + margin
        self.res = resolution
        axes = [np.linspace(a, b, resolution) for a, b in zip(self.lo, self.hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        self.values = sdf(mesh, grid).reshape(resolution, resolution, resolution)
        self.cell = (self.hi - self.lo) / (resolution - 1)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        clamped = np.clip(points, self.lo, self.hi)
        outside = np.any(clamped != points, axis=1)
        u = (clamped - self.lo) / self.cell
        i0 = np.clip(np.floor(u).astype(int), 0, self.res - 2)
        f = u - i0
        out = np.zeros(len(points))
        for corner in range(8):
            bits = np.array([(corner >> k) & 1 for k in range(3)])
            w = np.prod(np.where(bits, f, 1 - f), axis=1)
            idx = i0 + bits
            out += w * self.values[idx[:, 0], idx[:, 1], idx[:, 2]]
        if outside.any():
            out[outside] = sdf(self.mesh, points[outside])
        return out


def center_cloud(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shift a cloud to its centroid; returns ``(centered, centroid)``."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or len(points) == 0:
        raise EmptyCloud("point cloud is empty")
    c = points.mean(axis=0)
    return points - c, c


def save_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=float)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines += [" ".join(repr(float(c)) for c in p) for p in points]
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path) -> np.ndarray:
    """Read the x, y, z properties of the vertex element of an ASCII PLY file."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    elements = []  # (name, count, [properties])
    i = 1
    while True:
        if i >= len(text):
            raise ParseError("missing end_header", i)
        tok = text[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"unsupported format {' '.join(tok[1:])!r}", i)
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", i)
            try:
                count = int(tok[2])
            except ValueError:
                raise ParseError(f"bad element count {tok[2]!r}", i) from None
            elements.append((tok[1], count, []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", i)
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[-1]))
            else:
                elements[-1][2].append(("scalar", tok[-1]))
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", i)

    points = None
    for name, count, props in elements:
        if name != "vertex":
            i += count  # ascii: one line per element
            continue
        if count < 1:
            raise ParseError("vertex element is empty", i)
        names = [p[1] for p in props]
        if any(kind == "list" for kind, _ in props):
            raise ParseError("list properties on vertex are not supported", i)
        try:
            cols = [names.index(k) for k in ("x", "y", "z")]
        except ValueError:
            raise ParseError("vertex element lacks x, y, z properties", i) from None
        points = np.empty((count, 3))
        for k in range(count):
            if i >= len(text):
                raise ParseError("unexpected end of file", i + 1)
            tok = text[i].split()
            i += 1
            if len(tok) != len(names):
                raise ParseError(f"expected {len(names)} values, got {len(tok)}", i)
            try:
                points[k] = [float(tok[c]) for c in cols]
            except ValueError:
                raise ParseError("non-numeric vertex value", i) from None
        if not np.all(np.isfinite(points)):
            raise ParseError("non-finite coordinate", i)
    if points is None:
        raise ParseError("no vertex element", len(text))
    return points


def save_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(x.split("/")[0]) - 1 for x in tok[1:]]
                faces.extend((idx[0], idx[k], idx[k + 1]) for k in range(1, len(idx) - 1))
        except ValueError:
            raise ParseError(f"malformed {tok[0]} record", n) from None
    return TriMesh(np.asarray(verts, dtype=float), np.asarray(faces, dtype=np.int64))
