"""Vehicle counting from feature-point trajectories and hue frames.

Per frame, every trajectory cluster proposes a fixed-size rectangle around its
centroid. Pixels in it score -1 where they match the adaptive background and
+1 elsewhere; the maximum-sum sub-rectangle bounds the moving object, and
intersecting sub-rectangles are joined with a disjoint-set forest into one
box per vehicle. A vehicle is counted when its box centroid first enters the
virtual zone.

Coordinates: ``x`` is the column and ``y`` the row; frame ``t`` is an index
into the hue frame sequence.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import ShapeError
from .disjoint import DisjointSet, link_components
from .tensor import format_pfmap, parse_pfmap


# ---------------------------------------------------------------------------
# trajectories and clustering

@dataclass
class Trajectory:
    id: int
    points: np.ndarray  # N x 3: t, x, y

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 2:
            raise ValueError(f"trajectory {self.id} needs at least 2 points")
        if np.any(np.diff(self.points[:, 0]) <= 0):
            raise ValueError(f"trajectory {self.id}: frame indices must strictly increase")

    @property
    def frames(self) -> np.ndarray:
        return self.points[:, 0].astype(np.int64)


@dataclass
class ClusterParams:
    angle_thresh: float = 0.35  # radians
    dist_thresh: float = 80.0
    parallel_thresh: float = 4.0

    def __post_init__(self):
        if min(self.angle_thresh, self.dist_thresh, self.parallel_thresh) <= 0:
            raise ValueError("cluster thresholds must be positive")


def _heading(xy: np.ndarray) -> float | None:
    step = np.diff(xy, axis=0).mean(axis=0)
    if np.hypot(*step) < 1e-12:
        return None
    return math.atan2(step[1], step[0])


def trajectories_linked(a: Trajectory, b: Trajectory, params: ClusterParams) -> bool:
    """Same-object test over the common frame window.

    Headings (mean step direction) must agree within ``angle_thresh``; the
    pointwise distance must average at most ``dist_thresh`` and deviate by at
    most ``parallel_thresh`` (rigid co-motion keeps the distance steady).
    """
    common, ia, ib = np.intersect1d(a.frames, b.frames, assume_unique=True, return_indices=True)
    if len(common) == 0:
        return False
    pa, pb = a.points[ia, 1:], b.points[ib, 1:]
    if len(common) >= 2:
        ha, hb = _heading(pa), _heading(pb)
    else:
        ha, hb = _heading(a.points[:, 1:]), _heading(b.points[:, 1:])
    if (ha is None) != (hb is None):
        return False
    if ha is not None:
        diff = abs((ha - hb + math.pi) % (2 * math.pi) - math.pi)
        if diff > params.angle_thresh:
            return False
    d = np.hypot(*(pa - pb).T)
    return d.mean() <= params.dist_thresh and d.std() <= params.parallel_thresh


def cluster_trajectories(trajectories, params: ClusterParams | None = None) -> list[list[int]]:
    """Connected components of the link graph, as lists of trajectory ids."""
    params = params or ClusterParams()
    trajs = list(trajectories)
    if not trajs:
        raise ValueError("no trajectories to cluster")
    groups = link_components(len(trajs), lambda i, j: trajectories_linked(trajs[i], trajs[j], params))
    return [[trajs[i].id for i in g] for g in groups]


# ---------------------------------------------------------------------------
# adaptive background

def hue_distance(a, b):
    d = np.abs(np.asarray(a) - np.asarray(b)) % 1.0
    return np.minimum(d, 1.0 - d)


@dataclass
class BackgroundModel:
    """Per-pixel background hue ``H`` with a vote counter ``C`` capped at ``c_max``."""

    shape: tuple[int, int]
    c_max: int = 100
    hue_tol: float = 0.05
    H: np.ndarray = field(default=None, repr=False)
    C: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.c_max < 1:
            raise ValueError("c_max must be positive")
        if self.H is None:
            self.H = np.zeros(self.shape)
        if self.C is None:
            self.C = np.zeros(self.shape, dtype=np.int64)

    def matches(self, hues) -> np.ndarray:
        return hue_distance(self.H, hues) <= self.hue_tol


def update_background(model: BackgroundModel, hues, moving=None) -> BackgroundModel:
    """Apply the three counter rules to every non-moving pixel, in place.

    * ``C == 0``: adopt the current hue, ``C = 1``.
    * ``C > 0`` and hue differs: ``C -= 1``.
    * ``0 < C < c_max`` and hue matches: ``C += 1``, adopt the current hue.
    """
    hues = np.asarray(hues, dtype=np.float64)
    if hues.shape != model.H.shape:
        raise ShapeError(f"frame shape {hues.shape} != background shape {model.H.shape}")
    still = np.ones(hues.shape, dtype=bool) if moving is None else ~np.asarray(moving, dtype=bool)
    if still.shape != hues.shape:
        raise ShapeError("moving mask does not match the frame")
    C = model.C
    match = model.matches(hues)
    empty = still & (C == 0)
    differ = still & (C > 0) & ~match
    grow = still & (C > 0) & (C < model.c_max) & match
    model.H[empty] = hues[empty]
    C[empty] = 1
    C[differ] -= 1
    C[grow] += 1
    model.H[grow] = hues[grow]
    return model


# ---------------------------------------------------------------------------
# rectangles

@dataclass(frozen=True, order=True)
class Rect:
    row0: int
    col0: int
    row1: int
    col1: int  # inclusive

    def __post_init__(self):
        if self.row0 > self.row1 or self.col0 > self.col1:
            raise ValueError(f"rect corners out of order: {self}")

    @property
    def height(self) -> int:
        return self.row1 - self.row0 + 1

    @property
    def width(self) -> int:
        return self.col1 - self.col0 + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def center(self) -> tuple[float, float]:
        return (self.row0 + self.row1) / 2.0, (self.col0 + self.col1) / 2.0

    def intersects(self, other: "Rect") -> bool:
        return (self.row0 <= other.row1 and other.row0 <= self.row1
                and self.col0 <= other.col1 and other.col0 <= self.col1)

    def contains_point(self, row: float, col: float) -> bool:
        return self.row0 <= row <= self.row1 and self.col0 <= col <= self.col1

    def shift(self, drow: int, dcol: int) -> "Rect":
        return Rect(self.row0 + drow, self.col0 + dcol, self.row1 + drow, self.col1 + dcol)


def bounding_rect(rects) -> Rect:
    rects = list(rects)
    return Rect(min(r.row0 for r in rects), min(r.col0 for r in rects),
                max(r.row1 for r in rects), max(r.col1 for r in rects))


def score_rect(model: BackgroundModel, hues, rect: Rect, positive=1, negative=-1) -> np.ndarray:
    """``negative`` where the pixel matches a confident background hue, ``positive`` elsewhere."""
    hues = np.asarray(hues, dtype=np.float64)
    h, w = model.H.shape
    if hues.shape != (h, w):
        raise ShapeError(f"frame shape {hues.shape} != background shape {(h, w)}")
    if rect.row0 < 0 or rect.col0 < 0 or rect.row1 >= h or rect.col1 >= w:
        raise ValueError(f"{rect} lies outside the {h} x {w} frame")
    sl = (slice(rect.row0, rect.row1 + 1), slice(rect.col0, rect.col1 + 1))
    bg = (hue_distance(model.H[sl], hues[sl]) <= model.hue_tol) & (model.C[sl] > 0)
    dtype = np.result_type(positive, negative)
    return np.where(bg, negative, positive).astype(dtype)


def prefix_sums(grid) -> np.ndarray:
    """``S[i, j]`` = sum of ``grid[:i, :j]``; shape ``(h + 1) x (w + 1)`` with a zero border."""
    g = np.asarray(grid)
    if g.ndim != 2 or g.size == 0:
        raise ShapeError("prefix_sums needs a nonempty 2-d grid")
    S = np.zeros((g.shape[0] + 1, g.shape[1] + 1), dtype=np.result_type(g, np.int64))
    S[1:, 1:] = g.cumsum(axis=0).cumsum(axis=1)
    return S


def rect_sum(S: np.ndarray, rect: Rect):
    """Sum over an inclusive rectangle in O(1) by inclusion-exclusion."""
    return (S[rect.row1 + 1, rect.col1 + 1] - S[rect.row0, rect.col1 + 1]
            - S[rect.row1 + 1, rect.col0] + S[rect.row0, rect.col0])


def max_subrectangle(grid) -> tuple[Rect, float]:
    """Maximum-sum sub-rectangle in O(h^2 w).

    Every (top, bottom) row pair collapses to a 1-d column-sum array solved by
    Kadane's scan; all pairs are scanned together, one column at a time.
    Ties go to the smallest area, then the lexicographically smallest
    ``(row0, col0, row1, col1)``.
    """
    g = np.asarray(grid)
    if g.ndim != 2 or g.size == 0:
        raise ShapeError("max_subrectangle needs a nonempty 2-d grid")
    h, w = g.shape
    top, bottom = np.triu_indices(h)
    cum = np.vstack([np.zeros((1, w), dtype=g.dtype), g.cumsum(axis=0)])
    cols = cum[bottom + 1] - cum[top]  # pairs x w
    best = np.empty_like(cols)
    start = np.empty(cols.shape, dtype=np.int64)
    run = cols[:, 0].copy()
    run_start = np.zeros(len(top), dtype=np.int64)
    best[:, 0], start[:, 0] = run, run_start
    for j in range(1, w):
        restart = run <= 0  # restarting keeps the shortest interval among equal sums
        run = np.where(restart, cols[:, j], run + cols[:, j])
        run_start = np.where(restart, j, run_start)
        best[:, j], start[:, j] = run, run_start
    top_sum = best.max()
    pair, end = np.nonzero(best == top_sum)
    s = start[pair, end]
    area = (bottom[pair] - top[pair] + 1) * (end - s + 1)
    keys = np.lexsort((end, bottom[pair], s, top[pair], area))
    k = keys[0]
    rect = Rect(int(top[pair[k]]), int(s[k]), int(bottom[pair[k]]), int(end[k]))
    value = top_sum.item()
    return rect, value


def merge_rects(rects) -> list[tuple[Rect, list[int]]]:
    """Join transitively intersecting rectangles; returns ``(bounding box, member indices)``."""
    rects = list(rects)
    groups = link_components(len(rects), lambda i, j: rects[i].intersects(rects[j]))
    return [(bounding_rect(rects[i] for i in g), g) for g in groups]


# ---------------------------------------------------------------------------
# counting

@dataclass
class CountParams:
    cluster: ClusterParams = field(default_factory=ClusterParams)
    rect_height: int = 64
    rect_width: int = 96
    c_max: int = 100
    hue_tol: float = 0.05
    positive: int = 1
    negative: int = -1


@dataclass
class VehicleStamp:
    vehicle_id: int
    entry_frame: int
    exit_frame: int


@dataclass
class CountResult:
    count: int
    stamps: list[VehicleStamp]
    clusters: list[list[int]]

    def stamps_csv(self) -> str:
        lines = ["vehicle_id,entry_frame,exit_frame"]
        lines += [f"{s.vehicle_id},{s.entry_frame},{s.exit_frame}" for s in self.stamps]
        return "\n".join(lines) + "\n"


def _initial_rect(center_row: float, center_col: float, params: CountParams, shape) -> Rect | None:
    h, w = shape
    r0 = int(round(center_row - params.rect_height / 2))
    c0 = int(round(center_col - params.rect_width / 2))
    r1, c1 = r0 + params.rect_height - 1, c0 + params.rect_width - 1
    r0, c0, r1, c1 = max(r0, 0), max(c0, 0), min(r1, h - 1), min(c1, w - 1)
    if r0 > r1 or c0 > c1:
        return None
    return Rect(r0, c0, r1, c1)


def count_vehicles(trajectories, frames, zone: Rect, params: CountParams | None = None) -> CountResult:
    """Count vehicles whose merged box centroid enters ``zone``.

    ``frames`` is a sequence of hue grids indexed by frame number. Scores use
    the background learned from earlier frames; the background is then
    updated outside this frame's cluster rectangles. Vehicle identity is the
    union of every cluster ever merged with it, and each identity is counted
    at most once.
    """
    params = params or CountParams()
    trajs = list(trajectories)
    frames = list(frames)
    if not trajs or not frames:
        return CountResult(0, [], [])
    clusters = cluster_trajectories(trajs, params.cluster)
    by_id = {t.id: t for t in trajs}
    shape = np.asarray(frames[0]).shape
    model = BackgroundModel(shape, params.c_max, params.hue_tol)

    # frame -> cluster -> list of (x, y)
    positions: dict[int, dict[int, list[np.ndarray]]] = {}
    for ci, members in enumerate(clusters):
        for tid in members:
            for t, x, y in by_id[tid].points:
                positions.setdefault(int(t), {}).setdefault(ci, []).append((x, y))

    identity = DisjointSet(len(clusters))
    record_of: dict[int, int] = {}  # identity root -> index into stamps
    stamps: list[VehicleStamp] = []

    for t, hues in enumerate(frames):
        hues = np.asarray(hues, dtype=np.float64)
        active = positions.get(t, {})
        moving = np.zeros(shape, dtype=bool)
        boxes, owners = [], []
        for ci in sorted(active):
            pts = np.asarray(active[ci])
            rect = _initial_rect(pts[:, 1].mean(), pts[:, 0].mean(), params, shape)
            if rect is None:
                continue
            moving[rect.row0:rect.row1 + 1, rect.col0:rect.col1 + 1] = True
            scores = score_rect(model, hues, rect, params.positive, params.negative)
            sub, total = max_subrectangle(scores)
            if total <= 0:
                continue
            boxes.append(sub.shift(rect.row0, rect.col0))
            owners.append(ci)
        for box, members in merge_rects(boxes):
            cis = [owners[m] for m in members]
            roots = {identity.find(c) for c in cis}
            recs = sorted(record_of[r] for r in roots if r in record_of)
            for c in cis[1:]:
                identity.union(cis[0], c)
            root = identity.find(cis[0])
            if recs:
                record_of[root] = recs[0]
            if zone.contains_point(*box.center):
                if root not in record_of:
                    record_of[root] = len(stamps)
                    stamps.append(VehicleStamp(len(stamps), t, t))
                stamps[record_of[root]].exit_frame = t
        update_background(model, hues, moving)
    return CountResult(len(stamps), stamps, clusters)


# ---------------------------------------------------------------------------
# synthetic scenes and file formats

@dataclass
class Scene:
    trajectories: list[Trajectory]
    frames: list[np.ndarray]
    zone: Rect
    true_count: int | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class SceneParams:
    n_vehicles: int = 10
    seed: int = 0
    lanes: int = 3
    lane_spacing: int = 110
    width: int = 400
    warmup: int = 5
    points_per_vehicle: tuple[int, int] = (4, 6)
    jitter: float = 0.3
    hue_noise: float = 0.01


def synthesize_scene(p: SceneParams) -> Scene:
    """Rigid vehicles crossing a static background along horizontal lanes.

    Adjacent lanes run in opposite directions at different speeds; vehicles in
    one lane keep a headway larger than the proposal rectangle. Background
    hues lie in [0, 0.25), vehicle hues in [0.45, 0.75).
    """
    rng = np.random.default_rng(p.seed)
    height = p.lanes * p.lane_spacing
    base = rng.uniform(0.0, 0.25, size=(height, p.width))
    speeds = [5.0 + (k % 3) for k in range(p.lanes)]
    lane_free = [p.warmup] * p.lanes  # earliest start frame per lane
    vehicles = []
    for v in range(p.n_vehicles):
        lane = v % p.lanes
        vh, vw = int(rng.integers(24, 33)), int(rng.integers(40, 57))
        speed = speeds[lane]
        start = lane_free[lane] + int(rng.integers(0, 6))
        lane_free[lane] = start + int(math.ceil((160 + vw) / speed))
        direction = 1 if lane % 2 == 0 else -1
        vehicles.append(dict(lane=lane, h=vh, w=vw, speed=speed, start=start, dir=direction,
                             hue=rng.uniform(0.45, 0.75)))
    n_frames = max(v["start"] for v in vehicles) + int(math.ceil((p.width + 120) / min(speeds))) + 2 \
        if vehicles else p.warmup + 10

    def center(v, t):
        travelled = (t - v["start"]) * v["speed"]
        col = -v["w"] / 2 + travelled if v["dir"] > 0 else p.width + v["w"] / 2 - travelled
        row = v["lane"] * p.lane_spacing + p.lane_spacing / 2
        return row, col

    frames = []
    for t in range(n_frames):
        f = base + rng.uniform(-p.hue_noise, p.hue_noise, size=base.shape)
        for v in vehicles:
            if t < v["start"]:
                continue
            r, c = center(v, t)
            r0, r1 = int(round(r - v["h"] / 2)), int(round(r + v["h"] / 2))
            c0, c1 = int(round(c - v["w"] / 2)), int(round(c + v["w"] / 2))
            r0, c0, r1, c1 = max(r0, 0), max(c0, 0), min(r1, height), min(c1, p.width)
            if r0 < r1 and c0 < c1:
                f[r0:r1, c0:c1] = v["hue"]
        frames.append(np.mod(f, 1.0))

    trajectories = []
    for v in vehicles:
        k = int(rng.integers(p.points_per_vehicle[0], p.points_per_vehicle[1] + 1))
        offsets = np.column_stack([
            rng.uniform(-0.45 * v["w"], 0.45 * v["w"], k),
            rng.uniform(-0.45 * v["h"], 0.45 * v["h"], k),
        ])
        for dx, dy in offsets:
            pts = []
            for t in range(v["start"], n_frames):
                r, c = center(v, t)
                x = c + dx + rng.normal(0, p.jitter)
                y = r + dy + rng.normal(0, p.jitter)
                if 0 <= x < p.width and 0 <= y < height:
                    pts.append((t, x, y))
            if len(pts) >= 2:
                trajectories.append(Trajectory(len(trajectories), pts))
    zone = Rect(0, p.width // 2 - 20, height - 1, p.width // 2 + 20)
    return Scene(trajectories, frames, zone, p.n_vehicles, {"scene_params": asdict(p)})


def write_trajectories_csv(path, trajectories) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "id", "x", "y"])
        for tr in trajectories:
            for t, x, y in tr.points:
                w.writerow([int(t), tr.id, repr(float(x)), repr(float(y))])


def read_trajectories_csv(path) -> list[Trajectory]:
    pts: dict[int, list[tuple[float, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "id", "x", "y"]:
            raise ValueError(f"{path}:1: expected header t,id,x,y")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                t, tid, x, y = int(row[0]), int(row[1]), float(row[2]), float(row[3])
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed trajectory row {row!r}") from None
            pts.setdefault(tid, []).append((t, x, y))
    out = []
    for tid in sorted(pts):
        points = sorted(pts[tid])
        if len(points) >= 2:
            out.append(Trajectory(tid, points))
    return out


def write_scene(scene: Scene, directory) -> None:
    """``scene.json`` + ``trajectories.csv`` + ``frames/frame_NNNNN.pfm``."""
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    write_trajectories_csv(d / "trajectories.csv", scene.trajectories)
    for t, f in enumerate(scene.frames):
        (d / "frames" / f"frame_{t:05d}.pfm").write_text(format_pfmap(f))
    meta = {"zone": asdict(scene.zone), "n_frames": len(scene.frames),
            "true_count": scene.true_count, **scene.meta}
    (d / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_scene(directory) -> Scene:
    d = Path(directory)
    meta = json.loads((d / "scene.json").read_text())
    frames = [parse_pfmap(p.read_text()) for p in sorted((d / "frames").glob("*.pfm"))]
    traj_path = d / "trajectories.csv"
    trajectories = read_trajectories_csv(traj_path) if traj_path.exists() else []
    return Scene(trajectories, frames, Rect(**meta["zone"]), meta.get("true_count"), meta)
