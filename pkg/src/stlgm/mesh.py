"""Triangular meshes, finite-element assembly, and the Matérn field precision.

The spatial field is a Gaussian random field with Matérn covariance
(smoothness fixed at ν = 1 in two dimensions), represented on a triangular
mesh through the stochastic-PDE construction: the precision of the mesh
weights is

    Q = τ² (κ⁴ C + 2 κ² G + G C⁻¹ G)

with C the lumped (diagonal) mass matrix and G the stiffness matrix of
piecewise-linear elements.  κ and τ are tied to the interpretable range and
marginal standard deviation by :func:`matern_to_spde`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import kv

from .sparse import SparseSymMatrix


class DegenerateBBox(ValueError):
    """Bounding box has no area."""


class ParseError(ValueError):
    """Mesh file is malformed."""


class InvalidTriangle(ValueError):
    """Triangle has non-positive signed area (wrong orientation or degenerate)."""


class IndexOutOfRange(ValueError):
    """Triangle references a vertex that does not exist."""


class PointOutsideMesh(ValueError):
    """One or more projection points fall outside every triangle."""

    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"points outside mesh at indices {self.indices}")


class NonPositiveInput(ValueError):
    """Range or standard deviation must be strictly positive."""


def _signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))


@dataclass(frozen=True)
class Mesh:
    """Planar triangulation in projected kilometres.

    Vertices are (x, y) pairs; triangles are counter-clockwise vertex-index
    triples.  Validation enforces positive areas, in-range indices, and that
    every vertex is used by at least one triangle.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise IndexOutOfRange(
                f"triangle index out of range (have {len(v)} vertices)"
            )
        areas = _signed_areas(v, t)
        bad = np.nonzero(areas <= 0.0)[0]
        if bad.size:
            raise InvalidTriangle(
                f"non-positive signed area for triangles {bad.tolist()[:5]}"
            )
        used = np.zeros(len(v), dtype=bool)
        used[t.ravel()] = True
        if not used.all():
            raise IndexOutOfRange(
                f"unreferenced vertices: {np.nonzero(~used)[0].tolist()[:5]}"
            )

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)


def build_structured_mesh(bbox, nx: int, ny: int, extension: float = 0.0) -> Mesh:
    """Regular grid mesh over a bbox widened by ``extension`` on every side.

    Vertices are laid out row-major (x fastest); each grid cell is split
    into two counter-clockwise triangles.
    """
    xmin, ymin, xmax, ymax = (float(v) for v in bbox)
    if xmin >= xmax or ymin >= ymax:
        raise DegenerateBBox(f"degenerate bbox {bbox}")
    if nx < 2 or ny < 2:
        raise ValueError("nx and ny must be >= 2")
    if extension < 0:
        raise ValueError("extension must be nonnegative")
    xs = np.linspace(xmin - extension, xmax + extension, nx)
    ys = np.linspace(ymin - extension, ymax + extension, ny)
    xx, yy = np.meshgrid(xs, ys)
    vertices = np.column_stack([xx.ravel(), yy.ravel()])
    tris = []
    for iy in range(ny - 1):
        for ix in range(nx - 1):
            v00 = iy * nx + ix
            v10 = v00 + 1
            v01 = v00 + nx
            v11 = v01 + 1
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return Mesh(vertices, np.array(tris, dtype=np.int64))


def write_mesh(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{mesh.num_vertices} {mesh.num_triangles}\n")
        for x, y in mesh.vertices:
            fh.write("%.17g %.17g\n" % (x, y))
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def load_mesh(path) -> Mesh:
    """Read the text format: header ``V T``, V vertex lines, T triangle lines."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ParseError("empty mesh file")
    head = lines[0].split()
    if len(head) != 2:
        raise ParseError(f"bad header line: {lines[0]!r}")
    try:
        nv, nt = int(head[0]), int(head[1])
    except ValueError as err:
        raise ParseError(f"bad header line: {lines[0]!r}") from err
    if len(lines) != 1 + nv + nt:
        raise ParseError(
            f"expected {1 + nv + nt} lines, found {len(lines)}"
        )
    try:
        vertices = np.array(
            [[float(tok) for tok in lines[1 + i].split()] for i in range(nv)]
        ).reshape(nv, 2)
    except ValueError as err:
        raise ParseError(f"bad vertex line: {err}") from err
    try:
        triangles = np.array(
            [[int(tok) for tok in lines[1 + nv + i].split()] for i in range(nt)],
            dtype=np.int64,
        ).reshape(nt, 3)
    except ValueError as err:
        raise ParseError(f"bad triangle line: {err}") from err
    return Mesh(vertices, triangles)


def fem_matrices(mesh: Mesh):
    """Lumped mass matrix C (diagonal) and stiffness matrix G.

    C_ii sums area/3 over the triangles containing vertex i, so the trace of
    C equals the mesh area.  G rows sum to zero because constants lie in the
    null space of the gradient.
    """
    m = mesh.num_vertices
    areas = mesh.areas()
    c_diag = np.zeros(m)
    rows, cols, vals = [], [], []
    for (i, j, k), area in zip(mesh.triangles, areas):
        idx = (i, j, k)
        pts = mesh.vertices[list(idx)]
        c_diag[list(idx)] += area / 3.0
        # gradients of the linear basis functions
        b = np.array([pts[1, 1] - pts[2, 1], pts[2, 1] - pts[0, 1],
                      pts[0, 1] - pts[1, 1]])
        c = np.array([pts[2, 0] - pts[1, 0], pts[0, 0] - pts[2, 0],
                      pts[1, 0] - pts[0, 0]])
        local = (np.outer(b, b) + np.outer(c, c)) / (4.0 * area)
        for a in range(3):
            for bcol in range(a + 1):
                rows.append(idx[a])
                cols.append(idx[bcol])
                vals.append(local[a, bcol])
    c_mat = SparseSymMatrix.from_diag(c_diag)
    g_mat = SparseSymMatrix(m)
    g_mat.add_batch(rows, cols, vals)
    return c_mat, g_mat.finalize()


@dataclass(frozen=True)
class MaternParams:
    """Range (km) and marginal standard deviation of the ν = 1 Matérn field."""

    range_km: float
    marginal_sd: float
    smoothness: float = field(default=1.0, init=False)

    def __post_init__(self):
        if self.range_km <= 0 or self.marginal_sd <= 0:
            raise NonPositiveInput("range and marginal sd must be positive")


def matern_to_spde(range_km: float, marginal_sd: float):
    """Map (range, sd) to the SPDE parameters (κ, τ) for ν = 1, d = 2.

    κ = sqrt(8)/range; the marginal variance identity σ² = 1/(4π τ² κ²)
    gives τ = 1/(σ κ sqrt(4π)).
    """
    if range_km <= 0 or marginal_sd <= 0:
        raise NonPositiveInput("range and marginal sd must be positive")
    kappa = np.sqrt(8.0) / range_km
    tau = 1.0 / (marginal_sd * kappa * np.sqrt(4.0 * np.pi))
    return kappa, tau


def spde_to_matern(kappa: float, tau: float):
    """Inverse of :func:`matern_to_spde`."""
    if kappa <= 0 or tau <= 0:
        raise NonPositiveInput("kappa and tau must be positive")
    range_km = np.sqrt(8.0) / kappa
    marginal_sd = 1.0 / (tau * kappa * np.sqrt(4.0 * np.pi))
    return range_km, marginal_sd


def matern_correlation(h, range_km: float) -> np.ndarray:
    """Analytic ν = 1 Matérn correlation at distance h (oracle for tests)."""
    h = np.asarray(h, dtype=np.float64)
    kappa = np.sqrt(8.0) / range_km
    out = np.ones_like(h)
    pos = h > 0
    kh = kappa * h[pos]
    out[pos] = kh * kv(1, kh)
    return out


def matern_precision(mesh: Mesh, params: MaternParams,
                     fem=None) -> SparseSymMatrix:
    """SPDE precision τ²(κ⁴C + 2κ²G + G C⁻¹ G) with lumped (diagonal) C.

    Pass precomputed ``fem = (C, G)`` to amortize assembly across calls with
    different parameters.
    """
    if fem is None:
        fem = fem_matrices(mesh)
    c_mat, g_mat = fem
    kappa, tau = matern_to_spde(params.range_km, params.marginal_sd)
    c_diag = c_mat.diagonal()
    g = g_mat.csc
    gcg = (g @ sp.diags(1.0 / c_diag) @ g).tocsc()
    q = (tau ** 2) * (
        (kappa ** 4) * sp.diags(c_diag) + 2.0 * (kappa ** 2) * g + gcg
    )
    return SparseSymMatrix.from_csc(q)


def projector(mesh: Mesh, points) -> sp.csr_matrix:
    """Sparse n x m matrix of barycentric weights at each point.

    Row i carries the three barycentric coordinates of point i within its
    containing triangle (tolerance 1e-9 on the point-in-triangle test); rows
    sum to one.  Raises :class:`PointOutsideMesh` listing the uncovered
    points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    tri = mesh.triangles
    a = mesh.vertices[tri[:, 0]]
    b = mesh.vertices[tri[:, 1]]
    c = mesh.vertices[tri[:, 2]]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) \
        - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    rows, cols, vals = [], [], []
    outside = []
    tol = 1e-9
    for i, p in enumerate(pts):
        w1 = ((b[:, 0] - p[0]) * (c[:, 1] - p[1])
              - (c[:, 0] - p[0]) * (b[:, 1] - p[1])) / det
        w2 = ((c[:, 0] - p[0]) * (a[:, 1] - p[1])
              - (a[:, 0] - p[0]) * (c[:, 1] - p[1])) / det
        w3 = 1.0 - w1 - w2
        ok = (w1 >= -tol) & (w2 >= -tol) & (w3 >= -tol)
        hits = np.nonzero(ok)[0]
        if hits.size == 0:
            outside.append(i)
            continue
        t = hits[0]
        w = np.clip([w1[t], w2[t], w3[t]], 0.0, None)
        w = w / w.sum()
        rows.extend([i, i, i])
        cols.extend(tri[t].tolist())
        vals.extend(w.tolist())
    if outside:
        raise PointOutsideMesh(outside)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, mesh.num_vertices))
