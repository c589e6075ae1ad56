"""Grid worlds and the distance queries planners run against.

A scene is an occupancy grid plus its Euclidean signed distance field
(ESDF).  Geodesic fields are built per goal on demand.  Conventions:

- ``cells[row, col]`` is row-major boolean occupancy, True = occupied.
- World frame: x along columns, y along rows, origin at the grid corner,
  so the centre of cell (row, col) is ((col + 0.5) * res, (row + 0.5) * res).
- The outermost ring of cells is always occupied; agents cannot leave.
- Distances are measured between cell centres; sub-cell obstacle geometry
  is not modelled.

All field objects are immutable after construction and safe to share
across concurrent readers.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import ConfigError, ContractViolation, InvalidGoalError, SamplingExhaustedError

# A point is a float64 array of shape (2,) holding (x, y) in meters.
Point2 = np.ndarray

SQRT2 = math.sqrt(2.0)

# Segment sampling step for collision queries, as a fraction of resolution.
# A quarter cell sits well below the thinnest representable obstacle.
COLLISION_STEP_FRACTION = 0.25


def point(x: float, y: float) -> Point2:
    return np.array([float(x), float(y)], dtype=np.float64)


@dataclass(frozen=True)
class OccupancyGrid:
    """Boolean occupancy grid with a closed boundary ring."""

    width: int
    height: int
    resolution: float
    cells: np.ndarray  # (height, width) bool

    def __post_init__(self):
        if self.width < 3 or self.height < 3:
            raise ConfigError(f"grid must be at least 3x3, got {self.width}x{self.height}")
        if not self.resolution > 0:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        if self.cells.shape != (self.height, self.width):
            raise ContractViolation(
                f"cells shape {self.cells.shape} != (height, width) = "
                f"({self.height}, {self.width})"
            )
        ring = np.concatenate(
            [self.cells[0, :], self.cells[-1, :], self.cells[:, 0], self.cells[:, -1]]
        )
        if not ring.all():
            raise ContractViolation("boundary ring must be fully occupied")

    @property
    def extent(self) -> tuple[float, float]:
        """World size (x_max, y_max) in meters."""
        return self.width * self.resolution, self.height * self.resolution

    def cell_of(self, p: Point2) -> tuple[int, int]:
        """(row, col) of the cell containing p; points on the far edge clip inward."""
        col = min(int(p[0] / self.resolution), self.width - 1)
        row = min(int(p[1] / self.resolution), self.height - 1)
        return max(row, 0), max(col, 0)

    def cell_center(self, row: int, col: int) -> Point2:
        return point((col + 0.5) * self.resolution, (row + 0.5) * self.resolution)

    def contains(self, p: Point2) -> bool:
        ex, ey = self.extent
        return 0.0 <= p[0] <= ex and 0.0 <= p[1] <= ey


@dataclass(frozen=True)
class Esdf:
    """Distance to the nearest occupied cell centre, capped at max_dist.

    Occupied cells hold exactly 0 (their nearest occupied centre is their
    own), so ``dist <= 0`` identifies occupied cells and the field is
    1-Lipschitz up to one cell of discretization error.
    """

    width: int
    height: int
    resolution: float
    dist: np.ndarray  # (height, width) float64, meters
    max_dist: float


@dataclass(frozen=True)
class GeodesicField:
    """8-connected shortest-path distance (meters) to a goal cell.

    ``goal`` is snapped to the centre of its containing cell; distances are
    to that centre.  Unreachable cells hold +inf.
    """

    goal: Point2
    resolution: float
    dist: np.ndarray  # (height, width) float64, +inf where unreachable

    def at(self, p: Point2) -> float:
        """Field value of the cell containing p; +inf outside the grid."""
        h, w = self.dist.shape
        col = int(p[0] / self.resolution)
        row = int(p[1] / self.resolution)
        if 0 <= row < h and 0 <= col < w:
            return float(self.dist[row, col])
        return math.inf


@dataclass(frozen=True)
class Scene:
    """Immutable world: grid, derived ESDF, and provenance."""

    grid: OccupancyGrid
    esdf: Esdf
    seed: int
    id: str
    robot_radius: float = 0.15


@dataclass(frozen=True)
class SceneConfig:
    """Parameters for random scene generation.

    obstacle_density is the target occupied fraction of the interior
    (boundary ring excluded); obstacle_shape_mix is the fraction of
    obstacles stamped as discs rather than rectangles.
    """

    width: int = 64
    height: int = 64
    resolution: float = 0.05
    obstacle_density: float = 0.12
    obstacle_shape_mix: float = 0.5
    robot_radius: float = 0.15
    esdf_max_dist: float = 1.0
    # Minimum free separation (meters) kept around each placed obstacle.
    # Zero allows overlaps (dense mazes); positive values give scattered
    # convex clutter with passable gaps, at the cost of capping the
    # achievable density.
    obstacle_gap: float = 0.0

    def validate(self):
        if self.width < 3 or self.height < 3:
            raise ConfigError("scene must be at least 3 cells on each axis")
        if not (0.0 <= self.obstacle_density <= 0.4):
            raise ConfigError(f"obstacle_density must be in [0, 0.4], got {self.obstacle_density}")
        if not (0.0 <= self.obstacle_shape_mix <= 1.0):
            raise ConfigError("obstacle_shape_mix must be in [0, 1]")
        if self.resolution <= 0 or self.robot_radius < 0 or self.esdf_max_dist <= 0:
            raise ConfigError("resolution and esdf_max_dist must be positive")
        if self.obstacle_gap < 0:
            raise ConfigError("obstacle_gap must be nonnegative")


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def build_esdf(grid: OccupancyGrid, max_dist: float) -> Esdf:
    """Exact Euclidean distance to the nearest occupied cell centre.

    Uses the exact distance transform's nearest-obstacle indices, then
    takes sqrt of the integer squared offset, so results are bit-identical
    to a brute-force nearest-occupied scan.  Values are clamped to
    max_dist and are exactly 0 on occupied cells.
    """
    occupied = grid.cells
    if occupied.all():
        dist = np.zeros_like(occupied, dtype=np.float64)
        return Esdf(grid.width, grid.height, grid.resolution, dist, max_dist)
    idx = distance_transform_edt(~occupied, return_distances=False, return_indices=True)
    rows, cols = np.indices(occupied.shape)
    dr = rows - idx[0]
    dc = cols - idx[1]
    sq = (dr * dr + dc * dc).astype(np.float64)
    dist = np.sqrt(sq) * grid.resolution
    np.minimum(dist, max_dist, out=dist)
    dist.setflags(write=False)
    return Esdf(grid.width, grid.height, grid.resolution, dist, max_dist)


_NEIGHBORS_8 = [
    (-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
    (-1, -1, SQRT2), (-1, 1, SQRT2), (1, -1, SQRT2), (1, 1, SQRT2),
]


def geodesic_field(grid: OccupancyGrid, goal: Point2) -> GeodesicField:
    """8-connected shortest-path field over free cells toward ``goal``.

    Axis steps cost ``resolution``, diagonal steps ``sqrt(2) * resolution``.
    Raises InvalidGoalError if the goal cell is occupied or out of bounds.
    """
    if not grid.contains(goal):
        raise InvalidGoalError(f"goal {goal} outside grid extent {grid.extent}")
    grow, gcol = grid.cell_of(goal)
    if grid.cells[grow, gcol]:
        raise InvalidGoalError(f"goal cell ({grow}, {gcol}) is occupied")

    h, w = grid.cells.shape
    free = ~grid.cells
    src_list, dst_list, w_list = [], [], []
    for dr, dc, step in _NEIGHBORS_8:
        r0, r1 = max(0, -dr), min(h, h - dr)
        c0, c1 = max(0, -dc), min(w, w - dc)
        ok = free[r0:r1, c0:c1] & free[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        rr, cc = np.nonzero(ok)
        rr = rr + r0
        cc = cc + c0
        src_list.append(rr * w + cc)
        dst_list.append((rr + dr) * w + (cc + dc))
        w_list.append(np.full(rr.shape, step * grid.resolution))
    n = h * w
    graph = csr_matrix(
        (np.concatenate(w_list), (np.concatenate(src_list), np.concatenate(dst_list))),
        shape=(n, n),
    )
    dist = dijkstra(graph, directed=False, indices=grow * w + gcol).reshape(h, w)
    dist[grid.cells] = np.inf
    dist.setflags(write=False)
    return GeodesicField(grid.cell_center(grow, gcol), grid.resolution, dist)


def _propose_rect(shape, rng: np.random.Generator):
    h, w = shape
    rh = int(rng.integers(2, 7))
    rw = int(rng.integers(2, 7))
    r0 = int(rng.integers(1, max(2, h - 1 - rh)))
    c0 = int(rng.integers(1, max(2, w - 1 - rw)))
    mask = np.zeros(shape, dtype=bool)
    mask[r0:min(r0 + rh, h - 1), c0:min(c0 + rw, w - 1)] = True
    return mask


def _propose_disc(shape, rng: np.random.Generator):
    h, w = shape
    rad = int(rng.integers(1, 4))
    cr = int(rng.integers(1 + rad, max(2 + rad, h - 1 - rad)))
    cc = int(rng.integers(1 + rad, max(2 + rad, w - 1 - rad)))
    rr, ccm = np.ogrid[:h, :w]
    mask = (rr - cr) ** 2 + (ccm - cc) ** 2 <= rad * rad
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    return mask


def _respects_gap(cells: np.ndarray, proposal: np.ndarray, gap_cells: int) -> bool:
    """True when no existing occupied cell lies within gap_cells (Chebyshev,
    which lower-bounds Euclidean) of the proposal's bounding box."""
    rows, cols = np.nonzero(proposal)
    r0 = max(rows.min() - gap_cells, 0)
    r1 = min(rows.max() + gap_cells + 1, cells.shape[0])
    c0 = max(cols.min() - gap_cells, 0)
    c1 = min(cols.max() + gap_cells + 1, cells.shape[1])
    return not cells[r0:r1, c0:c1].any()


def generate_scene(seed: int, cfg: SceneConfig) -> Scene:
    """Deterministically generate a random scene from (seed, cfg).

    Obstacles (rectangles and discs, mixed per cfg.obstacle_shape_mix) are
    stamped until the interior occupied fraction reaches
    cfg.obstacle_density or placement attempts run out.  With
    obstacle_gap = 0 overlaps are allowed and the density target is always
    met; a positive gap keeps that much free space around every obstacle
    (and off the boundary walls), capping the achievable density.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    cells = np.zeros((cfg.height, cfg.width), dtype=bool)
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True

    gap_cells = int(math.ceil(cfg.obstacle_gap / cfg.resolution))
    interior = (cfg.height - 2) * (cfg.width - 2)
    if interior > 0 and cfg.obstacle_density > 0:
        tries = 0
        while tries < 4000:
            frac = cells[1:-1, 1:-1].sum() / interior
            if frac >= cfg.obstacle_density:
                break
            tries += 1
            if rng.random() < cfg.obstacle_shape_mix:
                proposal = _propose_disc(cells.shape, rng)
            else:
                proposal = _propose_rect(cells.shape, rng)
            if gap_cells > 0 and not _respects_gap(cells, proposal, gap_cells):
                continue
            cells |= proposal

    cells.setflags(write=False)
    grid = OccupancyGrid(cfg.width, cfg.height, cfg.resolution, cells)
    esdf = build_esdf(grid, cfg.esdf_max_dist)
    return Scene(
        grid=grid,
        esdf=esdf,
        seed=int(seed),
        id=f"scene-{int(seed)}",
        robot_radius=cfg.robot_radius,
    )


def inflated_grid(grid: OccupancyGrid, esdf: Esdf, clearance: float) -> OccupancyGrid:
    """Grid with every cell of ESDF < clearance marked occupied.

    Used for planning with a safety margin.  If inflation would swallow the
    whole interior the result simply has no free cells beyond the contract
    of OccupancyGrid (callers must handle unreachable fields).
    """
    cells = grid.cells | (esdf.dist < clearance)
    cells.setflags(write=False)
    return OccupancyGrid(grid.width, grid.height, grid.resolution, cells)


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

def query_esdf_batch(esdf: Esdf, pts: np.ndarray) -> np.ndarray:
    """Bilinear ESDF lookup for an (n, 2) array of points.

    Out-of-bounds points are treated as occupied and return 0.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    res = esdf.resolution
    ex, ey = esdf.width * res, esdf.height * res
    inside = (
        (pts[:, 0] >= 0.0) & (pts[:, 0] <= ex) & (pts[:, 1] >= 0.0) & (pts[:, 1] <= ey)
    )
    gx = np.clip(pts[:, 0] / res - 0.5, 0.0, esdf.width - 1.0)
    gy = np.clip(pts[:, 1] / res - 0.5, 0.0, esdf.height - 1.0)
    x0 = np.floor(gx).astype(np.intp)
    y0 = np.floor(gy).astype(np.intp)
    x1 = np.minimum(x0 + 1, esdf.width - 1)
    y1 = np.minimum(y0 + 1, esdf.height - 1)
    fx = gx - x0
    fy = gy - y0
    d = esdf.dist
    val = (
        d[y0, x0] * (1 - fx) * (1 - fy)
        + d[y0, x1] * fx * (1 - fy)
        + d[y1, x0] * (1 - fx) * fy
        + d[y1, x1] * fx * fy
    )
    return np.where(inside, val, 0.0)


def query_esdf(esdf: Esdf, p: Point2) -> float:
    return float(query_esdf_batch(esdf, np.asarray(p).reshape(1, 2))[0])


@dataclass(frozen=True)
class CollisionResult:
    hit: bool
    first_hit_index: int | None = None


def _segment_samples(waypoints: np.ndarray, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Sample points along the waypoint chain at spacing <= step.

    Returns (points (n, 2), owner (n,)) where owner[i] is the index of the
    waypoint ending the segment that produced sample i (0 for the first
    point itself).
    """
    pts = [waypoints[0][None, :]]
    owners = [np.zeros(1, dtype=np.intp)]
    for i in range(1, len(waypoints)):
        a, b = waypoints[i - 1], waypoints[i]
        seg_len = float(np.hypot(*(b - a)))
        n = max(1, int(math.ceil(seg_len / step)))
        ts = np.linspace(0.0, 1.0, n + 1)[1:, None]
        pts.append(a[None, :] + ts * (b - a)[None, :])
        owners.append(np.full(n, i, dtype=np.intp))
    return np.concatenate(pts), np.concatenate(owners)


def collision_check(
    esdf: Esdf, waypoints, robot_radius: float
) -> CollisionResult:
    """Check a waypoint chain for clearance violations.

    Each inter-waypoint segment is sampled at spacing <= resolution / 4
    (endpoints included); a hit is any sample whose interpolated ESDF value
    falls below robot_radius.  first_hit_index is the index of the waypoint
    terminating the offending segment (0 if the first waypoint itself hits).
    """
    wp = np.asarray(waypoints, dtype=np.float64).reshape(-1, 2)
    if len(wp) < 1:
        raise ContractViolation("collision_check requires at least one waypoint")
    step = esdf.resolution * COLLISION_STEP_FRACTION
    pts, owners = _segment_samples(wp, step)
    vals = query_esdf_batch(esdf, pts)
    bad = vals < robot_radius
    if not bad.any():
        return CollisionResult(hit=False, first_hit_index=None)
    return CollisionResult(hit=True, first_hit_index=int(owners[int(np.argmax(bad))]))


def first_contact(
    esdf: Esdf, a: Point2, b: Point2, robot_radius: float
) -> tuple[Point2, bool]:
    """March from a toward b; stop at the last safe sample before contact.

    Returns (reached_point, hit).  If a itself violates clearance the agent
    does not move.  Sampling spacing matches collision_check.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    step = esdf.resolution * COLLISION_STEP_FRACTION
    seg_len = float(np.hypot(*(b - a)))
    n = max(1, int(math.ceil(seg_len / step)))
    ts = np.linspace(0.0, 1.0, n + 1)
    pts = a[None, :] + ts[:, None] * (b - a)[None, :]
    vals = query_esdf_batch(esdf, pts)
    bad = vals < robot_radius
    if not bad.any():
        return b.copy(), False
    k = int(np.argmax(bad))
    return pts[max(k - 1, 0)].copy(), True


def raycast(
    grid: OccupancyGrid,
    origin: Point2,
    heading: float = 0.0,
    n_rays: int = 16,
    fov: float = math.radians(240.0),
    max_range: float = 3.0,
) -> np.ndarray:
    """Distances to the first occupied cell along a fan of rays.

    Rays are evenly spaced over [heading - fov/2, heading + fov/2]
    (endpoints included) and marched at a quarter-cell step; distances are
    clamped to [0, max_range].  Leaving the grid counts as a hit.
    """
    angles = np.linspace(heading - fov / 2.0, heading + fov / 2.0, n_rays)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (R, 2)
    step = grid.resolution * 0.25
    ts = np.arange(0.0, max_range + step, step)
    ts[-1] = min(ts[-1], max_range)
    pts = origin[None, None, :] + ts[None, :, None] * dirs[:, None, :]  # (R, S, 2)
    res = grid.resolution
    cols = np.floor(pts[..., 0] / res).astype(np.intp)
    rows = np.floor(pts[..., 1] / res).astype(np.intp)
    oob = (cols < 0) | (cols >= grid.width) | (rows < 0) | (rows >= grid.height)
    cols = np.clip(cols, 0, grid.width - 1)
    rows = np.clip(rows, 0, grid.height - 1)
    hit = grid.cells[rows, cols] | oob  # (R, S)
    any_hit = hit.any(axis=1)
    first = np.argmax(hit, axis=1)
    dist = np.where(any_hit, ts[first], max_range)
    return np.clip(dist, 0.0, max_range)


# ---------------------------------------------------------------------------
# Start/goal sampling
# ---------------------------------------------------------------------------

def sample_start_goal(
    scene: Scene,
    rng: np.random.Generator,
    distance_range: tuple[float, float],
    max_tries: int = 200,
) -> tuple[Point2, Point2]:
    """Draw a collision-free (start, goal) pair at the requested difficulty.

    Both points keep ESDF clearance >= robot_radius and both the Euclidean
    and geodesic start-goal distances fall inside distance_range (the
    geodesic one guarantees reachability).  Raises SamplingExhaustedError
    when no pair is found within max_tries.
    """
    lo, hi = distance_range
    if not (0 < lo <= hi):
        raise ConfigError(f"invalid distance range {distance_range}")
    r = scene.robot_radius
    safe = np.argwhere(scene.esdf.dist >= r)
    if len(safe) < 2:
        raise SamplingExhaustedError("scene has no safe free space")
    res = scene.grid.resolution
    for _ in range(max_tries):
        i, j = rng.integers(0, len(safe), size=2)
        jitter = rng.uniform(-0.3 * res, 0.3 * res, size=(2, 2))
        start = scene.grid.cell_center(*safe[i]) + jitter[0]
        goal = scene.grid.cell_center(*safe[j]) + jitter[1]
        if query_esdf(scene.esdf, start) < r or query_esdf(scene.esdf, goal) < r:
            continue
        euclid = float(np.hypot(*(goal - start)))
        if not (lo <= euclid <= hi):
            continue
        geo = geodesic_field(scene.grid, goal)
        d = geo.at(start)
        if math.isfinite(d) and lo <= d <= hi:
            return start, goal
    raise SamplingExhaustedError(
        f"no start/goal pair within {distance_range} m after {max_tries} tries"
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    packed = np.packbits(scene.grid.cells.reshape(-1).astype(np.uint8))
    return {
        "id": scene.id,
        "seed": scene.seed,
        "resolution": scene.grid.resolution,
        "width": scene.grid.width,
        "height": scene.grid.height,
        "occupancy": base64.b64encode(packed.tobytes()).decode("ascii"),
        "robot_radius": scene.robot_radius,
    }


def scene_from_dict(data: dict, esdf_max_dist: float = 1.0) -> Scene:
    width = int(data["width"])
    height = int(data["height"])
    raw = base64.b64decode(data["occupancy"])
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[: width * height]
    cells = bits.astype(bool).reshape(height, width)
    cells.setflags(write=False)
    grid = OccupancyGrid(width, height, float(data["resolution"]), cells)
    esdf = build_esdf(grid, esdf_max_dist)
    return Scene(
        grid=grid,
        esdf=esdf,
        seed=int(data["seed"]),
        id=str(data["id"]),
        robot_radius=float(data["robot_radius"]),
    )


def save_scene(scene: Scene, path):
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh, sort_keys=True, indent=None, separators=(",", ":"))
        fh.write("\n")


def load_scene(path, esdf_max_dist: float = 1.0) -> Scene:
    with open(path) as fh:
        return scene_from_dict(json.load(fh), esdf_max_dist=esdf_max_dist)
