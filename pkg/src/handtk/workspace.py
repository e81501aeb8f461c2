"""Reachable-workspace estimation for single digits.

Fingertip positions are sampled by Monte-Carlo over the joint ROM, voxelized
on a global lattice (so grids from different runs intersect exactly), and
optionally extracted as a closed boundary mesh for visualization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .model import HandModel

DEFAULT_RESOLUTION = 2.0  # mm
DEFAULT_SAMPLES = 500_000
FAST_SAMPLES = 50_000
FAST_RESOLUTION = 4.0

CLOUD_MAGIC = b"HTKC"
GRID_MAGIC = b"HTKG"
FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    pass


class EmptyGridError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (n, 3) mm, palm frame
    digit: str
    sample_count: int
    rng_seed: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if not np.all(np.isfinite(pts)):
            raise ConfigurationError("point cloud contains non-finite coordinates")
        if self.sample_count != len(pts):
            raise ConfigurationError("sample_count does not match number of points")


@dataclass(frozen=True)
class OccupancyGrid:
    origin: np.ndarray  # mm, lattice-aligned corner of voxel (0,0,0)
    resolution: float  # mm per voxel
    occupancy: np.ndarray = field(repr=False)  # bool, shape dims

    def __post_init__(self):
        if self.resolution <= 0:
            raise ConfigurationError("resolution must be > 0")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "occupancy", np.asarray(self.occupancy, dtype=bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    @property
    def volume(self) -> float:
        """Occupied volume in mm^3."""
        return self.count * self.resolution**3

    @property
    def base_index(self) -> np.ndarray:
        """Integer origin on the global lattice (origin / resolution)."""
        idx = self.origin / self.resolution
        rounded = np.round(idx)
        if np.any(np.abs(idx - rounded) > 1e-6):
            raise ConfigurationError("grid origin is not on the global lattice")
        return rounded.astype(np.int64)

    def occupied_indices(self) -> np.ndarray:
        """(n, 3) global lattice indices of occupied voxels."""
        local = np.argwhere(self.occupancy)
        return local + self.base_index


@dataclass(frozen=True)
class BoundaryMesh:
    vertices: np.ndarray  # (n, 3) mm
    triangles: np.ndarray  # (m, 3) int indices, outward winding
    watertight: bool

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "triangles", tris)
        if len(tris) and (tris.min() < 0 or tris.max() >= len(self.vertices)):
            raise ConfigurationError("triangle index out of range")

    def enclosed_volume(self) -> float:
        """Signed volume (mm^3) by the divergence theorem; positive for
        outward winding."""
        v = self.vertices
        a, b, c = v[self.triangles[:, 0]], v[self.triangles[:, 1]], v[self.triangles[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


# --------------------------------------------------------------------------
# sampling & voxelization
# --------------------------------------------------------------------------


def sample_workspace(model: HandModel, digit: str, n_samples: int, rng_seed: int,
                     rom_override: dict[str, tuple[float, float]] | None = None) -> PointCloud:
    """Fingertip point cloud for one digit over uniform random joint samples."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    if digit not in model.digits:
        raise ConfigurationError(f"unknown digit {digit!r}")
    rom_override = rom_override or {}
    intervals = {}
    for name in model.independent_joints:
        lo, hi = model.joint(name).limits
        if name in rom_override:
            olo, ohi = rom_override[name]
            if olo > ohi:
                raise ConfigurationError(f"override for {name}: empty interval")
            if olo < lo - 1e-12 or ohi > hi + 1e-12:
                raise ConfigurationError(
                    f"override for {name}: [{olo}, {ohi}] outside limits [{lo}, {hi}]")
            intervals[name] = (olo, ohi)
        else:
            intervals[name] = (lo, hi)
    unknown = set(rom_override) - set(intervals)
    if unknown:
        raise ConfigurationError(f"override names unknown or not independent: {sorted(unknown)}")

    rng = np.random.default_rng(rng_seed)
    u = rng.random((n_samples, len(model.independent_joints)))
    lows = np.array([intervals[n][0] for n in model.independent_joints])
    highs = np.array([intervals[n][1] for n in model.independent_joints])
    samples = lows + u * (highs - lows)

    chain = [j.name for j in model.digit_chain_joints(digit) if j.name in model.independent_joints]
    col = {n: i for i, n in enumerate(model.independent_joints)}
    cols = {name: samples[:, col[name]] for name in chain}
    pts = M.fingertip_positions_batch(model, digit, cols)
    return PointCloud(pts, digit, n_samples, rng_seed)


def voxelize(cloud: PointCloud, resolution: float) -> OccupancyGrid:
    """Occupancy grid on the global lattice anchored at the palm origin."""
    if resolution <= 0:
        raise ConfigurationError("resolution must be > 0")
    idx = np.floor(cloud.points / resolution).astype(np.int64)
    lo = idx.min(axis=0)
    hi = idx.max(axis=0)
    dims = hi - lo + 1
    occ = np.zeros(dims, dtype=bool)
    local = idx - lo
    occ[local[:, 0], local[:, 1], local[:, 2]] = True
    return OccupancyGrid(lo * resolution, resolution, occ)


def intersect(a: OccupancyGrid, b: OccupancyGrid) -> OccupancyGrid:
    """Voxelwise intersection of two grids on the shared lattice."""
    if abs(a.resolution - b.resolution) > 1e-12:
        raise ConfigurationError(
            f"resolution mismatch: {a.resolution} vs {b.resolution}")
    base_a, base_b = a.base_index, b.base_index
    lo = np.maximum(base_a, base_b)
    hi = np.minimum(base_a + a.dims, base_b + b.dims)
    if np.any(hi <= lo):
        return OccupancyGrid(lo * a.resolution, a.resolution, np.zeros((1, 1, 1), dtype=bool))
    sa = tuple(slice(l - o, h - o) for l, h, o in zip(lo, hi, base_a))
    sb = tuple(slice(l - o, h - o) for l, h, o in zip(lo, hi, base_b))
    occ = a.occupancy[sa] & b.occupancy[sb]
    return OccupancyGrid(lo * a.resolution, a.resolution, occ)


# --------------------------------------------------------------------------
# boundary extraction
# --------------------------------------------------------------------------

# exposed face quads per axis direction, as corner offsets (voxel units)
_FACE_CORNERS = {
    (1, 0, 0): ((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)),
    (-1, 0, 0): ((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)),
    (0, 1, 0): ((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)),
    (0, -1, 0): ((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)),
    (0, 0, 1): ((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)),
    (0, 0, -1): ((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)),
}


def extract_boundary(grid: OccupancyGrid, smoothing: str = "none") -> BoundaryMesh:
    """Closed surface mesh of the occupied region (voxel faces).

    smoothing="alpha_like" applies volume-preserving Taubin smoothing to
    approximate a rounded alpha-shape-like surface.
    """
    if smoothing not in ("none", "alpha_like"):
        raise ConfigurationError(f"unknown smoothing {smoothing!r}")
    if grid.count == 0:
        raise EmptyGridError("cannot extract boundary of an empty grid")

    occ = np.pad(grid.occupancy, 1, constant_values=False)
    vert_ids: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[int, int, int]] = []
    tris: list[tuple[int, int, int]] = []

    def vid(corner) -> int:
        i = vert_ids.get(corner)
        if i is None:
            i = len(verts)
            vert_ids[corner] = i
            verts.append(corner)
        return i

    filled = np.argwhere(grid.occupancy)
    for v in filled:
        pi = v + 1  # padded index
        for d, corners in _FACE_CORNERS.items():
            if occ[pi[0] + d[0], pi[1] + d[1], pi[2] + d[2]]:
                continue
            ids = [vid((v[0] + c[0], v[1] + c[1], v[2] + c[2])) for c in corners]
            tris.append((ids[0], ids[1], ids[2]))
            tris.append((ids[0], ids[2], ids[3]))

    vertices = (np.array(verts, dtype=np.float64)) * grid.resolution + grid.origin
    triangles = np.array(tris, dtype=np.int64)
    if smoothing == "alpha_like":
        vertices = _taubin_smooth(vertices, triangles, iterations=6)
    return BoundaryMesh(vertices, triangles, watertight=True)


def _taubin_smooth(vertices: np.ndarray, triangles: np.ndarray,
                   iterations: int, lam: float = 0.33, mu: float = -0.34) -> np.ndarray:
    n = len(vertices)
    pairs = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    i, j = pairs[:, 0], pairs[:, 1]
    deg = np.zeros(n)
    np.add.at(deg, i, 1.0)
    np.add.at(deg, j, 1.0)
    v = vertices.copy()
    for _ in range(iterations):
        for factor in (lam, mu):
            acc = np.zeros_like(v)
            np.add.at(acc, i, v[j])
            np.add.at(acc, j, v[i])
            v = v + factor * (acc / deg[:, None] - v)
    return v


# --------------------------------------------------------------------------
# abduction-range study
# --------------------------------------------------------------------------


def abduction_ratio_study(model: HandModel, n_samples: int = DEFAULT_SAMPLES,
                          seed: int = 42, resolution: float = DEFAULT_RESOLUTION,
                          restricted_width: float = 0.2) -> dict:
    """Workspace volume of digits 4/5 with full vs physiological-width branch ROM.

    The restricted run narrows the branch joint to `restricted_width` rad
    centered on its neutral angle; ratio = volume_full / volume_restricted.
    """
    branch = model.branch
    lo, hi = branch.limits
    half = restricted_width / 2.0
    rlo = max(lo, branch.neutral - half)
    rhi = min(hi, branch.neutral + half)
    override = {branch.name: (rlo, rhi)}

    out: dict = {
        "n_samples": n_samples,
        "seed": seed,
        "resolution": resolution,
        "restricted_interval": [rlo, rhi],
        "digits": {},
    }
    union_full = None
    union_restricted = None
    for digit in M.BRANCH_DIGITS:
        cloud_full = sample_workspace(model, digit, n_samples, seed)
        cloud_restr = sample_workspace(model, digit, n_samples, seed, rom_override=override)
        g_full = voxelize(cloud_full, resolution)
        g_restr = voxelize(cloud_restr, resolution)
        out["digits"][digit] = {
            "volume_full": g_full.volume,
            "volume_restricted": g_restr.volume,
            "ratio": g_full.volume / g_restr.volume,
        }
        union_full = g_full if union_full is None else _union(union_full, g_full)
        union_restricted = g_restr if union_restricted is None else _union(union_restricted, g_restr)
    out["union"] = {
        "volume_full": union_full.volume,
        "volume_restricted": union_restricted.volume,
        "ratio": union_full.volume / union_restricted.volume,
    }
    return out


def _union(a: OccupancyGrid, b: OccupancyGrid) -> OccupancyGrid:
    if abs(a.resolution - b.resolution) > 1e-12:
        raise ConfigurationError("resolution mismatch")
    base_a, base_b = a.base_index, b.base_index
    lo = np.minimum(base_a, base_b)
    hi = np.maximum(base_a + a.dims, base_b + b.dims)
    occ = np.zeros(tuple(hi - lo), dtype=bool)
    sa = tuple(slice(o - l, o - l + d) for l, o, d in zip(lo, base_a, a.dims))
    sb = tuple(slice(o - l, o - l + d) for l, o, d in zip(lo, base_b, b.dims))
    occ[sa] |= a.occupancy
    occ[sb] |= b.occupancy
    return OccupancyGrid(lo * a.resolution, a.resolution, occ)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------
#
# Cloud (.htkc): magic "HTKC", u32 version, u64 seed, u64 count,
#   16-byte zero-padded digit name, then count little-endian f32 xyz triples.
# Grid (.htkg): magic "HTKG", u32 version, 3x f64 origin, f64 resolution,
#   3x u32 dims, then packbits of the C-order flattened occupancy.
# All integers little-endian.


def save_cloud(cloud: PointCloud, path) -> None:
    digit = cloud.digit.encode()[:16].ljust(16, b"\0")
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<IQQ", FORMAT_VERSION, cloud.rng_seed, cloud.sample_count))
        f.write(digit)
        f.write(cloud.points.astype("<f4").tobytes())


def load_cloud(path) -> PointCloud:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CLOUD_MAGIC:
            raise ConfigurationError(f"not a cloud file (magic {magic!r})")
        version, seed, count = struct.unpack("<IQQ", f.read(20))
        if version != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported cloud format version {version}")
        digit = f.read(16).rstrip(b"\0").decode()
        pts = np.frombuffer(f.read(count * 12), dtype="<f4").reshape(count, 3)
    return PointCloud(pts.astype(np.float64), digit, count, seed)


def save_grid(grid: OccupancyGrid, path) -> None:
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<3d", *grid.origin))
        f.write(struct.pack("<d", grid.resolution))
        f.write(struct.pack("<3I", *grid.dims))
        f.write(np.packbits(grid.occupancy.reshape(-1)).tobytes())


def load_grid(path) -> OccupancyGrid:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != GRID_MAGIC:
            raise ConfigurationError(f"not a grid file (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported grid format version {version}")
        origin = struct.unpack("<3d", f.read(24))
        (resolution,) = struct.unpack("<d", f.read(8))
        dims = struct.unpack("<3I", f.read(12))
        n = dims[0] * dims[1] * dims[2]
        bits = np.unpackbits(np.frombuffer(f.read((n + 7) // 8), dtype=np.uint8), count=n)
    return OccupancyGrid(np.array(origin), resolution, bits.astype(bool).reshape(dims))


def write_ply(mesh: BoundaryMesh, path) -> None:
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(mesh.vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write(f"element face {len(mesh.triangles)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            f.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            f.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def write_obj(mesh: BoundaryMesh, path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
