"""Icosphere meshes: construction, subdivision, neighbor rings and pooling maps.

The meshes here are the substrate every convolution runs on.  A level-L
icosphere has 10*4**L + 2 vertices, of which exactly 12 (the original
icosahedron corners) have 5 neighbors; every other vertex has 6.  Subdivision
keeps the coarse vertices as a prefix of the fine vertex array, which is what
makes the pool/unpool maps between adjacent levels trivial to express.

Neighbor rings are stored in a canonical order: counter-clockwise when viewed
from outside the sphere, starting from the lowest-index neighbor.  Convolution
kernels index taps by this order, so the ordering is part of the contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh",
    "MeshHierarchy",
    "base_icosahedron",
    "subdivide",
    "build_hierarchy",
    "one_ring",
    "mesh_from_arrays",
    "save_mesh_text",
    "load_mesh_text",
    "conv_tables",
    "pool_tables",
    "unpool_tables",
]

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

# Corner coordinates and CCW-from-outside face windings of the regular
# icosahedron (before normalization to the unit sphere).
_ICO_VERTS = np.array(
    [
        [-1, _GOLDEN, 0], [1, _GOLDEN, 0], [-1, -_GOLDEN, 0], [1, -_GOLDEN, 0],
        [0, -1, _GOLDEN], [0, 1, _GOLDEN], [0, -1, -_GOLDEN], [0, 1, -_GOLDEN],
        [_GOLDEN, 0, -1], [_GOLDEN, 0, 1], [-_GOLDEN, 0, -1], [-_GOLDEN, 0, 1],
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _sorted_edges(faces: np.ndarray) -> np.ndarray:
    e = np.r_[faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]
    return np.unique(np.sort(e, axis=1), axis=0)


def _ordered_rings(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Build per-vertex neighbor rings from the face list.

    Returns (ring, degree) where ring is (V, max_degree) padded with -1 and
    each row lists the neighbors counter-clockwise (seen from outside, i.e.
    rotating right-handed about the outward vertex direction), rotated so the
    lowest-index neighbor comes first.
    """
    n = len(vertices)
    edges = _sorted_edges(faces)
    src = np.r_[edges[:, 0], edges[:, 1]]
    dst = np.r_[edges[:, 1], edges[:, 0]]
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    degree = np.bincount(src, minlength=n)
    max_deg = int(degree.max())
    offsets = np.r_[0, np.cumsum(degree)]
    slot = np.arange(src.size) - offsets[src]

    normals = vertices / np.linalg.norm(vertices, axis=1, keepdims=True)
    rel = vertices[dst] - vertices[src]
    nv = normals[src]
    tang = rel - np.sum(rel * nv, axis=1, keepdims=True) * nv
    ref = np.zeros_like(vertices)
    ref[src[slot == 0]] = tang[slot == 0]  # tangent toward the lowest-index neighbor
    refp = ref[src]
    cosang = np.sum(tang * refp, axis=1)
    sinang = np.sum(np.cross(refp, tang) * nv, axis=1)
    theta = np.mod(np.arctan2(sinang, cosang), 2.0 * np.pi)

    theta_mat = np.full((n, max_deg), np.inf)
    nbr_mat = np.full((n, max_deg), -1, dtype=np.int64)
    theta_mat[src, slot] = theta
    nbr_mat[src, slot] = dst
    perm = np.argsort(theta_mat, axis=1, kind="stable")
    ring = np.take_along_axis(nbr_mat, perm, axis=1)
    return ring, degree.astype(np.int64)


class Mesh:
    """Triangulated sphere mesh with canonicalized neighbor rings.

    Immutable after construction; all arrays are read-only views, so a Mesh
    can be shared freely across threads.
    """

    def __init__(self, level: int, vertices: np.ndarray, faces: np.ndarray):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {faces.shape}")
        self.level = int(level)
        self.vertices = _freeze(vertices.copy())
        self.faces = _freeze(faces.copy())
        ring, degree = _ordered_rings(self.vertices, self.faces)
        self.ring = _freeze(ring)
        self.degree = _freeze(degree)
        self._cache: dict = {}

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def edges(self) -> np.ndarray:
        if "edges" not in self._cache:
            e = np.r_[self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
            self._cache["edges"] = _freeze(np.unique(np.sort(e, axis=1), axis=0))
        return self._cache["edges"]

    def one_ring(self, v: int) -> np.ndarray:
        if not 0 <= v < self.n_vertices:
            raise IndexError(f"vertex {v} out of range for mesh with {self.n_vertices} vertices")
        return self.ring[v, : self.degree[v]].copy()

    def __repr__(self) -> str:
        return f"Mesh(level={self.level}, vertices={self.n_vertices}, faces={self.n_faces})"


@dataclass
class MeshHierarchy:
    """Nested icosphere levels, coarse to fine.

    ``parents[k]`` maps each fine-only vertex of ``levels[k+1]`` (those with
    index >= levels[k].n_vertices) to the coarse edge it bisects, as an
    (n_new, 2) array of coarse vertex indices.  Coarse vertex i coincides with
    fine vertex i (vertex-prefix property).
    """

    levels: list[Mesh]
    parents: list[np.ndarray]
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def max_level(self) -> int:
        return self.levels[-1].level

    @property
    def finest(self) -> Mesh:
        return self.levels[-1]

    def mesh_at(self, level: int) -> Mesh:
        base = self.levels[0].level
        idx = level - base
        if not 0 <= idx < len(self.levels):
            raise IndexError(f"level {level} not in hierarchy [{base}, {self.max_level}]")
        return self.levels[idx]


def base_icosahedron() -> Mesh:
    """Level-0 mesh: the regular icosahedron projected to the unit sphere."""
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    return Mesh(0, verts, _ICO_FACES)


def subdivide(mesh: Mesh) -> Mesh:
    """Split each face into four; new vertices are normalized edge midpoints.

    The input vertices are copied bit-exactly into the output prefix, so
    ``subdivide(m).vertices[:m.n_vertices] == m.vertices``.  Midpoints are
    numbered by the lexicographic order of the coarse edge they bisect.
    """
    n_v = mesh.n_vertices
    edges = _sorted_edges(mesh.faces)
    mids = mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    verts = np.vstack([mesh.vertices, mids])

    keys = edges[:, 0] * n_v + edges[:, 1]

    def mid_index(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return n_v + np.searchsorted(keys, lo * n_v + hi)

    a, b, c = mesh.faces.T
    ab, bc, ca = mid_index(a, b), mid_index(b, c), mid_index(c, a)
    faces = np.empty((4 * mesh.n_faces, 3), dtype=np.int64)
    faces[0::4] = np.column_stack([a, ab, ca])
    faces[1::4] = np.column_stack([ab, b, bc])
    faces[2::4] = np.column_stack([ca, bc, c])
    faces[3::4] = np.column_stack([ab, bc, ca])
    return Mesh(mesh.level + 1, verts, faces)


def build_hierarchy(max_level: int) -> MeshHierarchy:
    """Hierarchy of levels 0..max_level with parent maps for each level pair."""
    if max_level < 0:
        raise ValueError("max_level must be >= 0")
    levels = [base_icosahedron()]
    parents: list[np.ndarray] = []
    for _ in range(max_level):
        coarse = levels[-1]
        fine = subdivide(coarse)
        levels.append(fine)
        parents.append(_parent_edges(coarse, fine))
    return MeshHierarchy(levels, parents)


def _parent_edges(coarse: Mesh, fine: Mesh) -> np.ndarray:
    """For each fine-only vertex, the coarse edge (i, j), i < j, it bisects.

    `subdivide` numbers midpoints in lexicographic coarse-edge order, so the
    parent table is exactly the sorted coarse edge list.
    """
    edges = _sorted_edges(coarse.faces)
    if len(edges) != fine.n_vertices - coarse.n_vertices:
        raise AssertionError("fine level does not look like a subdivision of the coarse level")
    return _freeze(edges)


def one_ring(mesh: Mesh, v: int) -> np.ndarray:
    """Ordered neighbor indices of vertex v (5 or 6 entries)."""
    return mesh.one_ring(v)


def mesh_from_arrays(vertices: np.ndarray, faces: np.ndarray, level: int = 0) -> Mesh:
    """Ingestion path for externally supplied sphere-like meshes.

    Neighbor rings are derived from the faces using the same canonical
    ordering as generated icospheres.  The geometry must be sphere-like
    (vertex position usable as outward normal); generated icospheres remain
    the tested default.
    """
    return Mesh(level, vertices, faces)


def save_mesh_text(mesh: Mesh, path) -> None:
    """Write the mesh exchange format: vertex triples then face index triples."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"vertices {mesh.n_vertices}\n")
        for x, y, z in mesh.vertices:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        f.write(f"faces {mesh.n_faces}\n")
        for a, b, c in mesh.faces:
            f.write(f"{a} {b} {c}\n")


def load_mesh_text(path, level: int = 0) -> Mesh:
    """Read the mesh exchange format; neighbor tables are rebuilt on load."""
    with open(path, "r", encoding="utf-8") as f:
        tokens = [ln.split() for ln in f if ln.strip() and not ln.startswith("#")]
    if not tokens or tokens[0][0] != "vertices":
        raise ValueError(f"{path}: expected leading 'vertices <count>' line")
    n_v = int(tokens[0][1])
    verts = np.array([[float(t) for t in row] for row in tokens[1 : 1 + n_v]])
    if tokens[1 + n_v][0] != "faces":
        raise ValueError(f"{path}: expected 'faces <count>' after vertex block")
    n_f = int(tokens[1 + n_v][1])
    faces = np.array([[int(t) for t in row] for row in tokens[2 + n_v : 2 + n_v + n_f]])
    return Mesh(level, verts, faces)


# ---------------------------------------------------------------------------
# Gather tables for convolution and level transfer.
#
# Convolution taps: column 0 is the center vertex, columns 1..6 the ordered
# ring.  Pentagonal vertices have no 6th neighbor; tap 6 re-reads the center
# so every vertex has exactly 7 taps.  A consequence worth knowing: every
# vertex then appears in exactly 7 tap slots overall, so the adjoint of the
# tap gather is itself a fixed-width (V, 7) gather (``inv_flat`` below).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvTables:
    tap: np.ndarray       # (V, 7) vertex index per tap
    inv_flat: np.ndarray  # (V, 7) flat indices into a (V*7,) tap-major gradient array
    inv_src: np.ndarray   # (V, 7) flat indices into a (7*V,) k-major stacked array


@dataclass(frozen=True)
class TransferTables:
    """Fixed-width gather maps for one level transfer and its adjoint."""

    idx: np.ndarray      # (n_out, w) source vertex indices
    weight: np.ndarray   # (n_out, w) weights, 0.0 on padding
    inv_idx: np.ndarray  # (n_in, w') output positions reading each input vertex
    inv_weight: np.ndarray


def conv_tables(mesh: Mesh) -> ConvTables:
    if "conv" not in mesh._cache:
        v = mesh.n_vertices
        w = min(mesh.ring.shape[1], 6)
        tap = np.full((v, 7), -1, dtype=np.int64)
        tap[:, 0] = np.arange(v)
        tap[:, 1 : 1 + w] = mesh.ring[:, :w]
        pent = tap < 0
        tap[pent] = np.nonzero(pent)[0]  # missing ring slots re-read the center

        flat = tap.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=v)
        if not np.all(counts == 7):
            raise AssertionError("tap table is not uniformly invertible")
        inv_flat = order.reshape(v, 7).astype(np.int64)
        inv_src = (inv_flat % 7) * v + inv_flat // 7
        mesh._cache["conv"] = ConvTables(_freeze(tap), _freeze(inv_flat), _freeze(inv_src))
    return mesh._cache["conv"]


def pool_tables(h: MeshHierarchy, fine_level: int) -> TransferTables:
    """Maps for averaging a fine field down one level.

    Each coarse vertex averages itself with its fine-only ring neighbors
    (6 or 7 values).  The adjoint scatters through a width-2 gather: a fine
    vertex feeds its own row if coarse-coincident, else its two parents' rows.
    """
    key = ("pool", fine_level)
    if key not in h._cache:
        fine = h.mesh_at(fine_level)
        coarse = h.mesh_at(fine_level - 1)
        n_c, n_f = coarse.n_vertices, fine.n_vertices

        idx = np.zeros((n_c, 7), dtype=np.int64)
        weight = np.zeros((n_c, 7), dtype=np.float64)
        for i in range(n_c):
            members = np.concatenate(([i], fine.one_ring(i)))
            if np.any(members[1:] < n_c):
                raise AssertionError("coarse vertex has a coarse fine-level neighbor")
            idx[i, : len(members)] = members
            weight[i, : len(members)] = 1.0 / len(members)

        inv_idx = np.zeros((n_f, 2), dtype=np.int64)
        inv_weight = np.zeros((n_f, 2), dtype=np.float64)
        for i in range(n_c):
            for k in range(7):
                if weight[i, k] == 0.0:
                    continue
                u = idx[i, k]
                slot = 0 if inv_weight[u, 0] == 0.0 else 1
                inv_idx[u, slot] = i
                inv_weight[u, slot] = weight[i, k]
        h._cache[key] = TransferTables(
            _freeze(idx), _freeze(weight), _freeze(inv_idx), _freeze(inv_weight)
        )
    return h._cache[key]


def unpool_tables(h: MeshHierarchy, coarse_level: int) -> TransferTables:
    """Maps for lifting a coarse field up one level.

    Coincident vertices copy their value; each midpoint child averages its two
    parents.  The adjoint is a width-7 gather back onto the coarse vertices.
    """
    key = ("unpool", coarse_level)
    if key not in h._cache:
        coarse = h.mesh_at(coarse_level)
        fine = h.mesh_at(coarse_level + 1)
        n_c, n_f = coarse.n_vertices, fine.n_vertices
        par = h.parents[coarse_level - h.levels[0].level]

        idx = np.zeros((n_f, 2), dtype=np.int64)
        weight = np.zeros((n_f, 2), dtype=np.float64)
        idx[:n_c, 0] = np.arange(n_c)
        weight[:n_c, 0] = 1.0
        idx[n_c:] = par
        weight[n_c:] = 0.5

        inv_idx = np.zeros((n_c, 7), dtype=np.int64)
        inv_weight = np.zeros((n_c, 7), dtype=np.float64)
        fill = np.zeros(n_c, dtype=np.int64)
        for u in range(n_f):
            for slot in range(2):
                if weight[u, slot] == 0.0:
                    continue
                i = idx[u, slot]
                inv_idx[i, fill[i]] = u
                inv_weight[i, fill[i]] = weight[u, slot]
                fill[i] += 1
        h._cache[key] = TransferTables(
            _freeze(idx), _freeze(weight), _freeze(inv_idx), _freeze(inv_weight)
        )
    return h._cache[key]
