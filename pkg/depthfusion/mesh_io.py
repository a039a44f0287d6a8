import os

import numpy as np

from .exceptions import GeometryError, MeshIOError
from .geometry import OrientedPointCloud, TriangleMesh
from .logging_conf import logger

PLY_VERTEX_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
])

_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "u2", "uint16": "u2", "short": "i2", "int16": "i2",
    "uint": "u4", "uint32": "u4", "int": "i4", "int32": "i4",
}


def _obj_index(token, count, path, line_no):
    index = int(token)
    if index < 0:
        index += count
    else:
        index -= 1
    if not 0 <= index < count:
        raise MeshIOError(f"{path}:{line_no}: index {token} out of range")
    return index


def read_obj(path) -> TriangleMesh:
    """ASCII OBJ reader; polygons are fan-triangulated, `vn` kept when faces reference them."""
    if not os.path.exists(path):
        raise MeshIOError(f"mesh file not found: {path}")
    vertices, normals, triangles = [], [], []
    corner_normals = {}
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(x) for x in parts[1:4]])
                elif parts[0] == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    face = []
                    for token in parts[1:]:
                        fields = token.split("/")
                        v = _obj_index(fields[0], len(vertices), path, line_no)
                        if len(fields) >= 3 and fields[2]:
                            corner_normals[v] = _obj_index(fields[2], len(normals), path, line_no)
                        face.append(v)
                    if len(face) < 3:
                        raise MeshIOError(f"{path}:{line_no}: face with fewer than 3 vertices")
                    for k in range(1, len(face) - 1):
                        triangles.append([face[0], face[k], face[k + 1]])
            except ValueError as e:
                raise MeshIOError(f"{path}:{line_no}: {e}")

    vertex_normals = None
    if normals and len(corner_normals) == len(vertices):
        normals = np.asarray(normals, dtype=np.float64)
        vertex_normals = normals[[corner_normals[v] for v in range(len(vertices))]]
    try:
        mesh = TriangleMesh(np.asarray(vertices).reshape(-1, 3), np.asarray(triangles).reshape(-1, 3), vertex_normals)
    except GeometryError as e:
        raise MeshIOError(f"{path}: {e}")
    logger.info(f"Loaded mesh {path}: {len(mesh.vertices)} vertices, {len(mesh)} triangles")
    return mesh


def write_obj(path, mesh: TriangleMesh):
    with open(path, "w") as f:
        for x, y, z in mesh.vertices:
            f.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        if mesh.vertex_normals is not None:
            for x, y, z in mesh.vertex_normals:
                f.write(f"vn {x:.17g} {y:.17g} {z:.17g}\n")
            for a, b, c in mesh.triangles + 1:
                f.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")
        else:
            for a, b, c in mesh.triangles + 1:
                f.write(f"f {a} {b} {c}\n")


def write_ply(path, cloud: OrientedPointCloud):
    """Binary little-endian PLY with float32 x, y, z, nx, ny, nz."""
    data = np.zeros(len(cloud), dtype=PLY_VERTEX_DTYPE)
    data["x"], data["y"], data["z"] = cloud.points.T
    if cloud.normals is not None:
        data["nx"], data["ny"], data["nz"] = cloud.normals.T
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def read_ply(path) -> OrientedPointCloud:
    if not os.path.exists(path):
        raise MeshIOError(f"point cloud file not found: {path}")
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise MeshIOError(f"{path}: not a PLY file")
        fields, count, fmt = [], None, None
        element = None
        while True:
            line = f.readline()
            if not line:
                raise MeshIOError(f"{path}: header has no end_header")
            parts = line.decode("ascii").split()
            if not parts:
                continue
            if parts[0] == "end_header":
                break
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                element = parts[1]
                if element == "vertex":
                    count = int(parts[2])
            elif parts[0] == "property" and element == "vertex":
                if parts[1] == "list" or parts[1] not in _PLY_TYPES:
                    raise MeshIOError(f"{path}: unsupported vertex property {' '.join(parts[1:])}")
                fields.append((parts[2], "<" + _PLY_TYPES[parts[1]]))
        if fmt != "binary_little_endian":
            raise MeshIOError(f"{path}: only binary_little_endian PLY is supported, got {fmt}")
        if count is None or not {"x", "y", "z"} <= {name for name, _ in fields}:
            raise MeshIOError(f"{path}: missing vertex element or x/y/z properties")
        dtype = np.dtype(fields)
        raw = f.read(dtype.itemsize * count)
        if len(raw) != dtype.itemsize * count:
            raise MeshIOError(f"{path}: truncated vertex data")
    data = np.frombuffer(raw, dtype=dtype, count=count)
    points = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    normals = None
    if {"nx", "ny", "nz"} <= set(dtype.names):
        normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1).astype(np.float64)
    return OrientedPointCloud(points, normals)


def read_shape(path):
    """Mesh for .obj, oriented point cloud for .ply."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        return read_obj(path)
    if ext == ".ply":
        return read_ply(path)
    raise MeshIOError(f"unsupported shape format: {path}")
