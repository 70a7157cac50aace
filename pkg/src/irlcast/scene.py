"""Scenario data model, synthetic scene generation, and grid quantization.

Coordinate conventions: x is east, y is north, in meters.  The drivable
mask (and everything derived from it) lives on a grid anchored to the
target agent: after `to_target_frame` the target's last observed position
sits at the grid center heading +x, and grid cell (row, col) indexes
(north-offset, east-offset).  Generated scenarios store their vector data
(lanes, tracks, futures) under a random rigid placement; the mask is built
in the target frame directly, so normalization never resamples it.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class ScenarioError(ValueError):
    pass


class ParseError(ScenarioError):
    def __init__(self, field_name: str, message: str | None = None):
        self.field_name = field_name
        super().__init__(message or f"scenario file is missing or has a malformed field: {field_name!r}")


# ---------------------------------------------------------------------------
# grid geometry


@dataclass(frozen=True)
class GridSpec:
    side: int
    resolution: float

    @property
    def extent(self) -> float:
        return self.side * self.resolution

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        half = self.extent / 2.0
        c = int(math.floor((x + half) / self.resolution))
        r = int(math.floor((y + half) / self.resolution))
        return r, c

    def in_bounds(self, r: int, c: int) -> bool:
        return 0 <= r < self.side and 0 <= c < self.side

    def contains(self, x: float, y: float) -> bool:
        half = self.extent / 2.0
        return -half <= x < half and -half <= y < half

    def center(self, r: int, c: int) -> tuple[float, float]:
        half = self.extent / 2.0
        return ((c + 0.5) * self.resolution - half,
                (r + 0.5) * self.resolution - half)

    def cell_centers(self) -> np.ndarray:
        """(side*side, 2) array of cell centers in row-major order."""
        idx = np.arange(self.side)
        half = self.extent / 2.0
        xs = (idx + 0.5) * self.resolution - half
        cc, rr = np.meshgrid(xs, xs)  # rr varies along rows (y), cc along cols (x)
        return np.stack([cc.ravel(), rr.ravel()], axis=1)

    def flat(self, r: int, c: int) -> int:
        return r * self.side + c


# ---------------------------------------------------------------------------
# domain types


@dataclass(eq=False)
class LaneSegment:
    id: int
    centerline: np.ndarray            # (M, 2) meters
    pre: list[int] = field(default_factory=list)
    suc: list[int] = field(default_factory=list)
    left: int | None = None
    right: int | None = None

    def __eq__(self, other):
        return (isinstance(other, LaneSegment)
                and self.id == other.id
                and np.array_equal(self.centerline, other.centerline)
                and self.pre == other.pre and self.suc == other.suc
                and self.left == other.left and self.right == other.right)


@dataclass(eq=False)
class AgentTrack:
    id: int
    is_target: bool
    track: np.ndarray                 # (t_p, 4): t, x, y, valid

    def __eq__(self, other):
        return (isinstance(other, AgentTrack)
                and self.id == other.id
                and self.is_target == other.is_target
                and np.array_equal(self.track, other.track))

    def last_valid(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Last two valid (x, y) samples, newest last; None if < 1 valid."""
        valid = self.track[self.track[:, 3] > 0.5]
        if valid.shape[0] == 0:
            return None
        if valid.shape[0] == 1:
            return valid[-1, 1:3], valid[-1, 1:3]
        return valid[-2, 1:3], valid[-1, 1:3]


@dataclass(eq=False)
class Scenario:
    id: str
    lanes: list[LaneSegment]
    drivable_mask: np.ndarray         # (grid_side, grid_side) bool, target frame
    agents: list[AgentTrack]
    gt_future: np.ndarray | None = None   # (t_f, 3): t, x, y
    mode_label: str | None = None
    resolution_m: float = 1.0
    grid_side: int = 50
    metadata: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        gt_eq = ((self.gt_future is None and other.gt_future is None)
                 or (self.gt_future is not None and other.gt_future is not None
                     and np.array_equal(self.gt_future, other.gt_future)))
        return (self.id == other.id
                and self.resolution_m == other.resolution_m
                and self.grid_side == other.grid_side
                and self.lanes == other.lanes
                and np.array_equal(self.drivable_mask, other.drivable_mask)
                and self.agents == other.agents
                and gt_eq
                and self.mode_label == other.mode_label
                and self.metadata == other.metadata)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_side, self.resolution_m)

    def target(self) -> AgentTrack:
        targets = [a for a in self.agents if a.is_target]
        if len(targets) != 1:
            raise ScenarioError(
                f"scenario {self.id!r} must have exactly one target agent, "
                f"found {len(targets)}")
        return targets[0]

    def validate(self) -> "Scenario":
        self.target()
        if self.drivable_mask.shape != (self.grid_side, self.grid_side):
            raise ScenarioError(
                f"drivable_mask shape {self.drivable_mask.shape} does not "
                f"match grid_side {self.grid_side}")
        ids = {ln.id for ln in self.lanes}
        for ln in self.lanes:
            if ln.centerline.shape[0] < 2:
                raise ScenarioError(f"lane {ln.id} has < 2 centerline points")
            refs = set(ln.pre) | set(ln.suc)
            refs |= {x for x in (ln.left, ln.right) if x is not None}
            if not refs <= ids:
                raise ScenarioError(f"lane {ln.id} references unknown lane ids")
        return self


@dataclass
class Demonstration:
    """A ground-truth future quantized to 8-connected coarse-grid cells."""

    states: list[int]                 # flat indices r * side + c
    ended: bool
    clamped: bool = False


# ---------------------------------------------------------------------------
# generation


@dataclass
class GeneratorParams:
    speed_range: tuple = (2.0, 8.0)
    noise_sigma: float = 0.15
    block_prob: float = 0.3
    lane_halfwidth: float = 2.0
    junction_range: tuple = (6.0, 12.0)
    turn_radius: float = 6.0
    neighbor_range: tuple = (1, 3)
    t_p: int = 20
    t_f: int = 30
    dt: float = 0.1

    def validate(self) -> "GeneratorParams":
        lo, hi = self.speed_range
        if not (2.0 <= lo <= hi <= 15.0):
            raise ScenarioError("speed_range must lie within [2, 15] m/s")
        if not (0.0 <= self.noise_sigma <= 0.5):
            raise ScenarioError("noise_sigma must lie within [0, 0.5] m")
        if not (0.0 <= self.block_prob <= 1.0):
            raise ScenarioError("block_prob must lie within [0, 1]")
        return self


KINDS = ("straight", "curve", "t_junction", "crossing")

_ROAD_REACH = 35.0   # lane polylines extend past the grid edge


def _resample(points: np.ndarray, step: float) -> np.ndarray:
    """Resample a polyline at uniform arc-length steps (keeps endpoints)."""
    seg = np.diff(points, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    total = lens.sum()
    n = max(2, int(round(total / step)) + 1)
    targets = np.linspace(0.0, total, n)
    return np.stack([_point_at(points, lens, s) for s in targets])


def _point_at(points: np.ndarray, seg_lens: np.ndarray, s: float) -> np.ndarray:
    """Point at arc length s along the polyline (clamped to its ends)."""
    if s <= 0:
        return points[0].copy()
    acc = 0.0
    for i, ln in enumerate(seg_lens):
        if acc + ln >= s:
            frac = 0.0 if ln == 0 else (s - acc) / ln
            return points[i] + frac * (points[i + 1] - points[i])
        acc += ln
    return points[-1].copy()


def _arc(start: np.ndarray, radius: float, left: bool, step: float = 0.5):
    """Quarter-turn arc starting at `start` heading +x."""
    sign = 1.0 if left else -1.0
    angles = np.linspace(0.0, math.pi / 2.0, max(4, int(radius * math.pi / 2 / step)))
    xs = start[0] + radius * np.sin(angles)
    ys = start[1] + sign * radius * (1.0 - np.cos(angles))
    return np.stack([xs, ys], axis=1)


def _mode_paths(kind: str, rng: np.random.Generator, p: GeneratorParams):
    """Full drive paths per maneuver, each from x=-_ROAD_REACH through its exit."""
    d_j = float(rng.uniform(*p.junction_range))
    r = p.turn_radius
    approach = np.array([[-_ROAD_REACH, 0.0], [d_j, 0.0]])

    def with_approach(exit_pts):
        return np.vstack([approach[:-1], exit_pts])

    straight = with_approach(np.array([[d_j, 0.0], [_ROAD_REACH, 0.0]]))
    left_arc = _arc(np.array([d_j, 0.0]), r, left=True)
    left = with_approach(np.vstack([left_arc, [[d_j + r, _ROAD_REACH]]]))
    right_arc = _arc(np.array([d_j, 0.0]), r, left=False)
    right = with_approach(np.vstack([right_arc, [[d_j + r, -_ROAD_REACH]]]))

    if kind == "straight":
        modes = {"straight": straight}
    elif kind == "curve":
        side = "left" if rng.random() < 0.5 else "right"
        modes = {f"curve_{side}": left if side == "left" else right}
    elif kind == "t_junction":
        layout = ["straight_left", "straight_right", "left_right"][int(rng.integers(3))]
        pick = {"straight": straight, "left": left, "right": right}
        modes = {name: pick[name] for name in layout.split("_")}
    elif kind == "crossing":
        modes = {"straight": straight, "left": left, "right": right}
    else:
        raise ScenarioError(f"unknown scenario kind {kind!r}")
    return d_j, modes


def _corridor_cells(grid: GridSpec, paths: list[np.ndarray], halfwidth: float) -> np.ndarray:
    """Boolean grid of cells whose center is within halfwidth of any path."""
    from scipy.spatial import cKDTree

    pts = np.vstack([_resample(pth, 0.4) for pth in paths])
    tree = cKDTree(pts)
    centers = grid.cell_centers()
    dist, _ = tree.query(centers)
    return (dist <= halfwidth).reshape(grid.side, grid.side)


def _arc_offset_of_origin(path: np.ndarray) -> float:
    """Arc length along the path at which it passes closest to the origin."""
    dense = _resample(path, 0.25)
    seg = np.diff(dense, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    i = int(np.argmin(np.hypot(dense[:, 0], dense[:, 1])))
    return float(cum[i])


def _walk(path: np.ndarray, s0: float, offsets: np.ndarray) -> np.ndarray:
    seg = np.diff(path, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    return np.stack([_point_at(path, lens, s0 + o) for o in offsets])


def _exit_arc_length(path: np.ndarray, s0: float, half: float) -> float:
    """Arc length from s0 until the path leaves the |x|,|y| < half box."""
    dense = _resample(path, 0.25)
    seg = np.diff(dense, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    outside = np.maximum(np.abs(dense[:, 0]), np.abs(dense[:, 1])) >= half
    beyond = np.flatnonzero(outside & (cum > s0))
    if beyond.size == 0:
        return float(cum[-1] - s0)
    return float(cum[beyond[0]] - s0)


def generate_scenario(kind: str, params: GeneratorParams, seed: int) -> Scenario:
    """Build a synthetic scenario; deterministic in (kind, params, seed)."""
    params.validate()
    if kind not in KINDS:
        raise ScenarioError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng(seed)
    grid = GridSpec(50, 1.0)

    d_j, modes = _mode_paths(kind, rng, params)
    mode_names = list(modes)

    # per-mode corridors and exclusive cells (used for blockage + what-if tests)
    corridors = {m: _corridor_cells(grid, [modes[m]], params.lane_halfwidth)
                 for m in mode_names}
    exclusive = {}
    for m in mode_names:
        others = np.zeros((grid.side, grid.side), dtype=bool)
        for o in mode_names:
            if o != m:
                others |= corridors[o]
        exclusive[m] = corridors[m] & ~others

    blocked_mode = None
    feasible = list(mode_names)
    if len(mode_names) > 1 and rng.random() < params.block_prob:
        blocked_mode = mode_names[int(rng.integers(len(mode_names)))]
        feasible = [m for m in mode_names if m != blocked_mode]

    drivable = np.zeros((grid.side, grid.side), dtype=bool)
    for m in mode_names:
        drivable |= corridors[m]
    if blocked_mode is not None:
        drivable &= ~exclusive[blocked_mode]

    gt_mode = feasible[int(rng.integers(len(feasible)))]
    path = modes[gt_mode]
    s0 = _arc_offset_of_origin(path)

    # target speed, capped so the 3 s future stays inside the grid
    lo, hi = params.speed_range
    margin = 2.0
    reach = _exit_arc_length(path, s0, grid.extent / 2.0 - margin)
    v_cap = reach / (params.t_f * params.dt)
    v = float(rng.uniform(lo, min(hi, max(lo, v_cap))))
    v = min(v, v_cap)

    # history: noisy except the last two samples, which pin position/heading
    hist_off = np.arange(-(params.t_p - 1), 1) * v * params.dt
    hist = _walk(path, s0, hist_off)
    noise = rng.normal(0.0, params.noise_sigma, size=hist.shape)
    noise[-2:] = 0.0
    hist = hist + noise
    t_idx = np.arange(-(params.t_p - 1), 1, dtype=float)
    target_track = np.column_stack([t_idx, hist, np.ones(params.t_p)])

    fut_off = np.arange(1, params.t_f + 1) * v * params.dt
    fut = _walk(path, s0, fut_off)
    fut = fut + rng.normal(0.0, params.noise_sigma, size=fut.shape)
    lim = grid.extent / 2.0 - 0.05
    fut = np.clip(fut, -lim, lim)
    gt = np.column_stack([np.arange(1, params.t_f + 1, dtype=float), fut])

    # neighbor agents on random maneuvers, offset along the path
    agents = [AgentTrack(id=0, is_target=True, track=target_track)]
    n_nb = int(rng.integers(params.neighbor_range[0], params.neighbor_range[1] + 1))
    for k in range(n_nb):
        nb_mode = mode_names[int(rng.integers(len(mode_names)))]
        nb_path = modes[nb_mode]
        nb_v = float(rng.uniform(lo, hi))
        nb_s = _arc_offset_of_origin(nb_path) + float(rng.uniform(-18.0, 18.0))
        nb_hist = _walk(nb_path, nb_s, np.arange(-(params.t_p - 1), 1) * nb_v * params.dt)
        nb_hist = nb_hist + rng.normal(0.0, params.noise_sigma, size=nb_hist.shape)
        agents.append(AgentTrack(
            id=k + 1, is_target=False,
            track=np.column_stack([t_idx, nb_hist, np.ones(params.t_p)])))

    # lanes: approach + one lane per maneuver exit, linked by connectivity
    lanes = []
    approach_line = _resample(np.array([[-_ROAD_REACH, 0.0], [d_j, 0.0]]), 2.5)
    lanes.append(LaneSegment(id=0, centerline=approach_line,
                             suc=list(range(1, len(mode_names) + 1))))
    for i, m in enumerate(mode_names):
        exit_line = _resample(modes[m], 2.5)
        keep = exit_line[:, 0] >= d_j - 1e-9
        exit_line = exit_line[keep] if keep.sum() >= 2 else exit_line[-2:]
        lanes.append(LaneSegment(id=i + 1, centerline=exit_line, pre=[0]))

    # random rigid placement of all vector data (mask stays target-anchored)
    phi = float(rng.uniform(0.0, 2.0 * math.pi))
    shift = rng.uniform(-40.0, 40.0, size=2)
    rot = np.array([[math.cos(phi), -math.sin(phi)],
                    [math.sin(phi), math.cos(phi)]])

    def place(xy: np.ndarray) -> np.ndarray:
        return xy @ rot.T + shift

    for ln in lanes:
        ln.centerline = place(ln.centerline)
    for ag in agents:
        ag.track[:, 1:3] = place(ag.track[:, 1:3])
    gt[:, 1:3] = place(gt[:, 1:3])

    meta = {
        "kind": kind,
        "feasible_modes": feasible,
        "all_modes": mode_names,
        "gt_mode": gt_mode,
        "blocked_mode": blocked_mode,
        "speed": v,
        "mode_cells": {m: sorted(map(list, np.argwhere(exclusive[m]).tolist()))
                       for m in mode_names},
        "heading_fallback": False,
    }
    return Scenario(
        id=f"{kind}-{seed}",
        lanes=lanes,
        drivable_mask=drivable,
        agents=agents,
        gt_future=gt,
        mode_label=gt_mode,
        metadata=meta,
    ).validate()


# ---------------------------------------------------------------------------
# normalization


def to_target_frame(s: Scenario) -> Scenario:
    """Re-express vector data with the target's last position at the grid
    center and its heading along +x.  The drivable mask is already anchored
    to that frame, so it passes through untouched.  Pure; returns a copy."""
    target = s.target()
    lv = target.last_valid()
    if lv is None:
        raise ScenarioError(f"target of scenario {s.id!r} has no valid samples")
    prev, last = lv
    d = last - prev
    fallback = bool(np.hypot(d[0], d[1]) < 1e-9)
    theta = 0.0 if fallback else math.atan2(d[1], d[0])
    rot = np.array([[math.cos(-theta), -math.sin(-theta)],
                    [math.sin(-theta), math.cos(-theta)]])

    def xform(xy: np.ndarray) -> np.ndarray:
        return (xy - last) @ rot.T

    lanes = [LaneSegment(id=ln.id, centerline=xform(ln.centerline),
                         pre=list(ln.pre), suc=list(ln.suc),
                         left=ln.left, right=ln.right) for ln in s.lanes]
    agents = []
    for ag in s.agents:
        track = ag.track.copy()
        track[:, 1:3] = xform(track[:, 1:3])
        agents.append(AgentTrack(id=ag.id, is_target=ag.is_target, track=track))
    gt = None
    if s.gt_future is not None:
        gt = s.gt_future.copy()
        gt[:, 1:3] = xform(gt[:, 1:3])
        grid = s.grid
        half = grid.extent / 2.0
        if np.any(np.abs(gt[:, 1:3]) > half):
            warnings.warn(f"scenario {s.id!r}: gt_future leaves the grid "
                          "extent after normalization")
    meta = dict(s.metadata)
    meta["heading_fallback"] = fallback
    return Scenario(id=s.id, lanes=lanes, drivable_mask=s.drivable_mask.copy(),
                    agents=agents, gt_future=gt, mode_label=s.mode_label,
                    resolution_m=s.resolution_m, grid_side=s.grid_side,
                    metadata=meta)


# ---------------------------------------------------------------------------
# quantization


_STEPS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def quantize_future(points: np.ndarray, grid: GridSpec, horizon: int) -> Demonstration:
    """Quantize (n, 2) positions into an 8-connected coarse cell sequence.

    Consecutive duplicates collapse, gaps are bridged by the shortest
    8-connected walk (diagonal first), out-of-extent points clamp to the
    boundary (flagged), and the result truncates to `horizon` states.
    `ended` is True when the input ran out before filling the horizon.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] != 2:
        raise ScenarioError("quantize_future requires a non-empty (n, 2) array")
    clamped = False
    cells: list[tuple[int, int]] = []
    for x, y in pts:
        r, c = grid.cell_of(x, y)
        rr = min(max(r, 0), grid.side - 1)
        cc = min(max(c, 0), grid.side - 1)
        if (rr, cc) != (r, c):
            clamped = True
        cells.append((rr, cc))

    states: list[tuple[int, int]] = []
    truncated = False
    for cell in cells:
        if states and cell == states[-1]:
            continue
        if not states:
            states.append(cell)
            continue
        r, c = states[-1]
        while (r, c) != cell:
            r += int(np.sign(cell[0] - r))
            c += int(np.sign(cell[1] - c))
            states.append((r, c))
            if len(states) >= horizon:
                truncated = True
                break
        if truncated:
            break
    states = states[:horizon]
    return Demonstration(
        states=[grid.flat(r, c) for r, c in states],
        ended=(not truncated) and len(states) < horizon,
        clamped=clamped)


def demonstration_is_valid(demo: Demonstration, side: int) -> bool:
    """8-connectivity and no consecutive duplicates."""
    for a, b in zip(demo.states, demo.states[1:]):
        ra, ca = divmod(a, side)
        rb, cb = divmod(b, side)
        if (ra, ca) == (rb, cb):
            return False
        if max(abs(ra - rb), abs(ca - cb)) != 1:
            return False
    return True


# ---------------------------------------------------------------------------
# file I/O


def scenario_to_dict(s: Scenario) -> dict:
    doc = {
        "id": s.id,
        "resolution_m": s.resolution_m,
        "grid_side": s.grid_side,
        "lanes": [{
            "id": ln.id,
            "centerline": ln.centerline.tolist(),
            "pre": list(ln.pre),
            "suc": list(ln.suc),
            "left": ln.left,
            "right": ln.right,
        } for ln in s.lanes],
        "drivable_mask": s.drivable_mask.astype(bool).tolist(),
        "agents": [{
            "id": ag.id,
            "is_target": ag.is_target,
            "track": ag.track.tolist(),
        } for ag in s.agents],
        "gt_future": None if s.gt_future is None else s.gt_future.tolist(),
        "mode_label": s.mode_label,
    }
    if s.metadata:
        doc["metadata"] = s.metadata
    return doc


def save_scenario(s: Scenario, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(s), fh)
        fh.write("\n")


_KNOWN_FIELDS = {"id", "resolution_m", "grid_side", "lanes", "drivable_mask",
                 "agents", "gt_future", "mode_label", "metadata"}
_REQUIRED_FIELDS = ("id", "lanes", "drivable_mask", "agents")


def scenario_from_dict(doc: dict) -> Scenario:
    unknown = set(doc) - _KNOWN_FIELDS
    if unknown:
        warnings.warn(f"ignoring unknown scenario fields: {sorted(unknown)}")
    for name in _REQUIRED_FIELDS:
        if name not in doc:
            raise ParseError(name)
    try:
        lanes = [LaneSegment(
            id=int(ln["id"]),
            centerline=np.asarray(ln["centerline"], dtype=float),
            pre=[int(x) for x in ln.get("pre", [])],
            suc=[int(x) for x in ln.get("suc", [])],
            left=None if ln.get("left") is None else int(ln["left"]),
            right=None if ln.get("right") is None else int(ln["right"]),
        ) for ln in doc["lanes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError("lanes", f"malformed 'lanes' entry: {exc}") from exc
    try:
        agents = [AgentTrack(
            id=int(ag["id"]),
            is_target=bool(ag["is_target"]),
            track=np.asarray(ag["track"], dtype=float),
        ) for ag in doc["agents"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError("agents", f"malformed 'agents' entry: {exc}") from exc
    mask = np.asarray(doc["drivable_mask"], dtype=bool)
    gt = doc.get("gt_future")
    scenario = Scenario(
        id=str(doc["id"]),
        lanes=lanes,
        drivable_mask=mask,
        agents=agents,
        gt_future=None if gt is None else np.asarray(gt, dtype=float),
        mode_label=doc.get("mode_label"),
        resolution_m=float(doc.get("resolution_m", 1.0)),
        grid_side=int(doc.get("grid_side", mask.shape[0] if mask.ndim == 2 else 50)),
        metadata=doc.get("metadata", {}),
    )
    return scenario.validate()


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError("document", f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("document", "scenario file must hold a JSON object")
    return scenario_from_dict(doc)
