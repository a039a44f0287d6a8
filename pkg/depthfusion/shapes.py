"""Closed test shapes, normalized to fit the unit view sphere."""
import numpy as np

from .geometry import TriangleMesh

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0


def icosahedron_vertices() -> np.ndarray:
    """Unit icosahedron vertices: cyclic permutations of (0, ±1, ±φ), lexicographically sorted."""
    base = []
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            base.append((0.0, s1, s2 * GOLDEN_RATIO))
            base.append((s1, s2 * GOLDEN_RATIO, 0.0))
            base.append((s2 * GOLDEN_RATIO, 0.0, s1))
    vertices = np.array(base) / np.sqrt(1.0 + GOLDEN_RATIO ** 2)
    order = np.lexsort(vertices.T[::-1])
    return vertices[order]


def _icosahedron_faces(vertices):
    edge = np.min([np.linalg.norm(vertices[0] - v) for v in vertices[1:]])
    faces = []
    n = len(vertices)
    for a in range(n):
        for b in range(a + 1, n):
            for c in range(b + 1, n):
                if all(abs(np.linalg.norm(vertices[i] - vertices[j]) - edge) < 1e-9 for i, j in ((a, b), (b, c), (a, c))):
                    tri = [a, b, c]
                    normal = np.cross(vertices[b] - vertices[a], vertices[c] - vertices[a])
                    if normal @ vertices[a] < 0.0:
                        tri = [a, c, b]
                    faces.append(tri)
    return np.array(faces)


def icosphere(subdivisions: int = 3, radius: float = 0.8, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    vertices = [tuple(v) for v in icosahedron_vertices()]
    faces = _icosahedron_faces(np.array(vertices)).tolist()
    for _ in range(subdivisions):
        cache = {}
        refined = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.add(vertices[i], vertices[j])
                vertices.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(vertices) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = refined
    unit = np.array(vertices)
    return TriangleMesh(unit * radius + np.asarray(center), np.array(faces), vertex_normals=unit)


def box(size=(0.6, 0.6, 0.6), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    half = np.asarray(size, dtype=np.float64) / 2.0
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    vertices = corners * half + np.asarray(center)
    # corner index = 4*ix + 2*iy + iz
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [[a, b, c], [a, c, d]]
    return TriangleMesh(vertices, np.array(faces))


def torus(major_radius: float = 0.6, minor_radius: float = 0.2, major_segments: int = 64,
          minor_segments: int = 32) -> TriangleMesh:
    """Torus around the y axis."""
    u = 2.0 * np.pi * np.arange(major_segments) / major_segments
    v = 2.0 * np.pi * np.arange(minor_segments) / minor_segments
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major_radius + minor_radius * np.cos(vv)
    vertices = np.stack([ring * np.cos(uu), minor_radius * np.sin(vv), ring * np.sin(uu)], axis=-1).reshape(-1, 3)
    normals = np.stack([np.cos(vv) * np.cos(uu), np.sin(vv), np.cos(vv) * np.sin(uu)], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(major_segments):
        for j in range(minor_segments):
            a = i * minor_segments + j
            b = ((i + 1) % major_segments) * minor_segments + j
            c = ((i + 1) % major_segments) * minor_segments + (j + 1) % minor_segments
            d = i * minor_segments + (j + 1) % minor_segments
            faces += [[a, d, c], [a, c, b]]
    faces = np.array(faces)
    mesh = TriangleMesh(vertices, faces, vertex_normals=normals)
    outward = np.einsum("ij,ij->i", mesh.face_normals, normals[faces].mean(axis=1))
    if np.mean(outward) < 0.0:
        mesh = TriangleMesh(vertices, faces[:, ::-1], vertex_normals=normals)
    return mesh


def grid_plane(n: int = 8, size: float = 1.0, z: float = 0.0) -> TriangleMesh:
    """Regular (n+1)x(n+1) vertex grid in the plane z = const, all diagonals in one direction."""
    coords = np.linspace(-size / 2.0, size / 2.0, n + 1)
    xx, yy = np.meshgrid(coords, coords, indexing="ij")
    vertices = np.stack([xx, yy, np.full_like(xx, z)], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = (i + 1) * (n + 1) + j
            faces += [[a, b, b + 1], [a, b + 1, a + 1]]
    return TriangleMesh(vertices, np.array(faces))


def normalize_to_unit_sphere(mesh: TriangleMesh, radius: float = 0.9) -> TriangleMesh:
    """Centre the bounding box on the origin and scale the farthest vertex to `radius`."""
    center = 0.5 * (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0))
    shifted = mesh.vertices - center
    scale = radius / np.linalg.norm(shifted, axis=1).max()
    return TriangleMesh(shifted * scale, mesh.triangles, mesh.vertex_normals)


SHAPES = {
    "sphere": lambda: icosphere(4, 0.8),
    "box": lambda: box((0.6, 0.6, 0.6)),
    "torus": lambda: torus(0.6, 0.2),
}
