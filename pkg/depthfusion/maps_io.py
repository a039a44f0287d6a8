"""Per-view depth/normal/mask maps and their on-disk directory format.

Layout of a map set directory::

    rig.json
    depth_<v>.pfm     Pf, float32 little-endian, scale -1.0
    normal_<v>.pfm    PF, 3 channels, camera frame
    mask_<v>.pgm      P5, maxval 255, 255 = foreground
    prob_<v>.pfm      optional stand-in for mask_<v>.pgm, thresholded at load

Arrays are indexed ``[j, i]`` with row 0 at the lowest camera-frame y. PFM
stores rows bottom-to-top, so rows go to disk in array order; PGM stores them
top-to-bottom, so mask rows are flipped on the way in and out.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .exceptions import MapDimensionError, MapHeaderError, MissingMapFileError, ValidationError
from .logging_conf import logger
from .views import ViewRig

NORMAL_TOLERANCE = 1e-3
FOREGROUND_THRESHOLD = 0.5
BACKGROUND_NORMAL = (0.0, 0.0, 1.0)
RIG_FILE = "rig.json"


def depth_file(view: int) -> str:
    return f"depth_{view}.pfm"


def normal_file(view: int) -> str:
    return f"normal_{view}.pfm"


def mask_file(view: int) -> str:
    return f"mask_{view}.pgm"


def probability_file(view: int) -> str:
    return f"prob_{view}.pfm"


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype, copy=True, order="C")
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class ViewMaps:
    depth: np.ndarray   # (H, W) float32
    normal: np.ndarray  # (H, W, 3) float32, camera frame
    mask: np.ndarray    # (H, W) bool

    def __post_init__(self):
        depth = _frozen(self.depth, np.float32)
        normal = _frozen(self.normal, np.float32)
        mask = _frozen(self.mask, bool)
        if depth.ndim != 2 or normal.shape != depth.shape + (3,) or mask.shape != depth.shape:
            raise MapDimensionError(
                f"inconsistent map shapes depth={depth.shape} normal={normal.shape} mask={mask.shape}")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def empty(cls, width: int, height: int) -> "ViewMaps":
        normal = np.zeros((height, width, 3), dtype=np.float32)
        normal[...] = BACKGROUND_NORMAL
        return cls(np.zeros((height, width), dtype=np.float32), normal, np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def foreground_pixels(self) -> Tuple[np.ndarray, np.ndarray]:
        """(i, j) index arrays of foreground pixels in row-major order."""
        j, i = np.nonzero(self.mask)
        return i, j

    def replace(self, depth=None, normal=None, mask=None) -> "ViewMaps":
        """Copy with some maps replaced; background pixels are reset to placeholders."""
        depth = self.depth if depth is None else depth
        normal = self.normal if normal is None else normal
        mask = self.mask if mask is None else np.asarray(mask, dtype=bool)
        depth = np.where(mask, depth, 0.0).astype(np.float32)
        normal = np.where(mask[..., None], normal, np.asarray(BACKGROUND_NORMAL)).astype(np.float32)
        return ViewMaps(depth, normal, mask)

    def equals(self, other: "ViewMaps") -> bool:
        return (
            self.depth.tobytes() == other.depth.tobytes()
            and self.normal.tobytes() == other.normal.tobytes()
            and np.array_equal(self.mask, other.mask)
            and self.depth.shape == other.depth.shape
        )


@dataclass(frozen=True, eq=False)
class MapSet:
    rig: ViewRig
    views: Tuple[ViewMaps, ...]

    def __post_init__(self):
        views = tuple(self.views)
        if len(views) != len(self.rig):
            raise MapDimensionError(f"{len(views)} map triples for {len(self.rig)} cameras")
        for v, maps in enumerate(views):
            if (maps.width, maps.height) != (self.rig.width, self.rig.height):
                raise MapDimensionError(
                    f"view {v}: maps are {maps.width}x{maps.height}, rig expects {self.rig.width}x{self.rig.height}",
                    view=v)
        object.__setattr__(self, "views", views)

    def __len__(self):
        return len(self.views)

    def __getitem__(self, view: int) -> ViewMaps:
        return self.views[view]

    def __iter__(self):
        return iter(self.views)

    @property
    def foreground_count(self) -> int:
        return sum(maps.foreground_count for maps in self.views)

    def with_views(self, views: Sequence[ViewMaps]) -> "MapSet":
        return MapSet(self.rig, tuple(views))

    def with_rig(self, rig: ViewRig) -> "MapSet":
        return MapSet(rig, self.views)

    def equals(self, other: "MapSet") -> bool:
        """Bitwise equality of every map plus the rig poses."""
        if len(self) != len(other) or not self.rig.same_layout(other.rig):
            return False
        for a, b in zip(self.rig, other.rig):
            if a.rotation.tobytes() != b.rotation.tobytes() or a.translation.tobytes() != b.translation.tobytes():
                return False
        return all(a.equals(b) for a, b in zip(self.views, other.views))


class Violation(NamedTuple):
    view: int
    pixel: Optional[Tuple[int, int]]
    rule: str
    detail: str = ""

    def __str__(self):
        where = f"view {self.view}" + (f" pixel {self.pixel}" if self.pixel is not None else "")
        return f"{where}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def _pixel_violations(view, bad, rule, values):
    j, i = np.nonzero(bad)
    return [Violation(view, (int(a), int(b)), rule, f"value {values[b, a]}") for a, b in zip(i, j)]


def validate_mapset(mapset: MapSet) -> List[Violation]:
    """Every broken invariant as data; an empty list means the map set is valid."""
    violations = []
    if len(mapset.views) != len(mapset.rig):
        violations.append(Violation(-1, None, "view count", f"{len(mapset.views)} != {len(mapset.rig)}"))
    for v, maps in enumerate(mapset.views):
        if (maps.width, maps.height) != (mapset.rig.width, mapset.rig.height):
            violations.append(Violation(v, None, "dimensions", f"{maps.width}x{maps.height}"))
            continue
        finite_depth = np.isfinite(maps.depth)
        violations += _pixel_violations(v, ~finite_depth, "depth not finite", maps.depth)
        finite_normal = np.all(np.isfinite(maps.normal), axis=-1)
        norms = np.linalg.norm(maps.normal.astype(np.float64), axis=-1)
        violations += _pixel_violations(v, ~finite_normal, "normal not finite", norms)
        with np.errstate(invalid="ignore"):
            out_of_range = maps.mask & finite_depth & (np.abs(maps.depth) > 1.0)
            not_unit = maps.mask & finite_normal & (np.abs(norms - 1.0) > NORMAL_TOLERANCE)
        violations += _pixel_violations(v, out_of_range, "depth outside [-1, 1]", maps.depth)
        violations += _pixel_violations(v, not_unit, "normal not unit length", norms)
    return violations


def threshold_foreground(probability) -> np.ndarray:
    """Foreground where probability is strictly above one half."""
    return np.asarray(probability) > FOREGROUND_THRESHOLD


def write_pfm(path, image):
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 2:
        kind, (height, width) = "Pf", image.shape
    elif image.ndim == 3 and image.shape[2] == 3:
        kind, (height, width) = "PF", image.shape[:2]
    else:
        raise MapDimensionError(f"cannot store array of shape {image.shape} as PFM", path=path)
    with open(path, "wb") as f:
        f.write(f"{kind}\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


def _header_tokens(f, count, path):
    """Read `count` whitespace-separated header tokens, skipping # comments; consumes one trailing whitespace byte."""
    tokens, current = [], b""
    while len(tokens) < count:
        byte = f.read(1)
        if not byte:
            raise MapHeaderError(f"{path}: truncated header", path=path)
        if byte == b"#" and not current:
            f.readline()
            continue
        if byte.isspace():
            if current:
                tokens.append(current.decode("ascii"))
                current = b""
            continue
        current += byte
    return tokens


def read_pfm(path) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingMapFileError(f"missing map file {path}", path=path)
    with open(path, "rb") as f:
        try:
            kind, width, height, scale = _header_tokens(f, 4, path)
            width, height, scale = int(width), int(height), float(scale)
        except ValueError as e:
            raise MapHeaderError(f"{path}: malformed PFM header: {e}", path=path)
        if kind not in ("Pf", "PF") or width < 1 or height < 1 or scale == 0.0:
            raise MapHeaderError(f"{path}: malformed PFM header", path=path)
        channels = 3 if kind == "PF" else 1
        dtype = np.dtype("<f4" if scale < 0 else ">f4")
        count = width * height * channels
        data = np.frombuffer(f.read(count * 4), dtype=dtype)
    if len(data) != count:
        raise MapHeaderError(f"{path}: expected {count} floats, found {len(data)}", path=path)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.astype(np.float32).reshape(shape)


def write_pgm(path, mask):
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.where(mask[::-1], 255, 0).astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary P5 mask; values above half of maxval are foreground."""
    if not os.path.exists(path):
        raise MissingMapFileError(f"missing map file {path}", path=path)
    with open(path, "rb") as f:
        try:
            magic, width, height, maxval = _header_tokens(f, 4, path)
            width, height, maxval = int(width), int(height), int(maxval)
        except ValueError as e:
            raise MapHeaderError(f"{path}: malformed PGM header: {e}", path=path)
        if magic != "P5" or width < 1 or height < 1 or not 0 < maxval < 256:
            raise MapHeaderError(f"{path}: expected 8-bit binary P5", path=path)
        data = np.frombuffer(f.read(width * height), dtype=np.uint8)
    if len(data) != width * height:
        raise MapHeaderError(f"{path}: truncated pixel data", path=path)
    return (data.reshape(height, width)[::-1].astype(np.int32) * 2 > maxval).copy()


def write_mapset(directory, mapset: MapSet):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, RIG_FILE), "w") as f:
        f.write(mapset.rig.to_json())
    for v, maps in enumerate(mapset.views):
        write_pfm(os.path.join(directory, depth_file(v)), maps.depth)
        write_pfm(os.path.join(directory, normal_file(v)), maps.normal)
        write_pgm(os.path.join(directory, mask_file(v)), maps.mask)
    logger.info(f"Wrote {len(mapset)} views to {directory}")


def _read_view(directory, v, rig):
    def load(name, reader):
        path = os.path.join(directory, name)
        try:
            return reader(path)
        except MissingMapFileError:
            raise MissingMapFileError(f"view {v}: missing {name}", view=v, path=path)
        except MapHeaderError as e:
            raise MapHeaderError(f"view {v}: {e}", view=v, path=path)

    depth = load(depth_file(v), read_pfm)
    normal = load(normal_file(v), read_pfm)
    if os.path.exists(os.path.join(directory, mask_file(v))) or not os.path.exists(
            os.path.join(directory, probability_file(v))):
        mask_name = mask_file(v)
        mask = load(mask_name, read_pgm)
    else:
        mask_name = probability_file(v)
        mask = threshold_foreground(load(mask_name, read_pfm))
    expected = (rig.height, rig.width)
    for name, array, ndim in ((depth_file(v), depth, 2), (normal_file(v), normal, 3), (mask_name, mask, 2)):
        if array.shape[:2] != expected or array.ndim != ndim:
            raise MapDimensionError(
                f"view {v}: {name} has shape {array.shape}, expected {expected}", view=v,
                path=os.path.join(directory, name))
    return ViewMaps(depth, normal, mask)


def read_mapset(directory, validate: bool = True, threads: int = 1) -> MapSet:
    rig_path = os.path.join(directory, RIG_FILE)
    if not os.path.exists(rig_path):
        raise MissingMapFileError(f"missing {RIG_FILE} in {directory}", path=rig_path)
    with open(rig_path, "r") as f:
        rig = ViewRig.from_json(f.read())
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        views = list(pool.map(lambda v: _read_view(directory, v, rig), range(len(rig))))
    mapset = MapSet(rig, tuple(views))
    if validate:
        violations = validate_mapset(mapset)
        if violations:
            raise ValidationError(violations)
    logger.info(f"Loaded {len(mapset)} views from {directory}", extra={"foreground": mapset.foreground_count})
    return mapset
