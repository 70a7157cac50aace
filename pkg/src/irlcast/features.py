"""Feature networks for lanes, drivable nodes, and agents.

All encoders run on the manual-backprop tape so that every parameter
gradient is checkable against finite differences.  Parameter-independent
geometry (adjacency powers, neighbor tables, distance gates, grid
assignment) is precomputed once per scenario into a SceneEncoding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .config import RunConfig
from .nnops import ContractViolation, ParamStore, Tape, init_linear, init_mlp, linear, mlp
from .scene import GridSpec, Scenario


# ---------------------------------------------------------------------------
# static per-scenario geometry


@dataclass
class SceneEncoding:
    lane_v: np.ndarray            # (N_l, 2) lane node midpoints
    lane_dv: np.ndarray           # (N_l, 2) segment displacements
    adj_pre: list                 # boolean reachability per dilation (sparse)
    adj_suc: list
    adj_left: sparse.csr_matrix
    adj_right: sparse.csr_matrix
    agent_inputs: np.ndarray      # (N_a, t_p * 4): dx, dy, speed, valid
    agent_pos: np.ndarray         # (N_a, 2) last valid positions
    zeroed_agents: list           # indices whose track had no valid sample
    driv_xy: np.ndarray           # (N_d, 2) drivable node positions
    driv_nbr_idx: np.ndarray      # (N_d, M) padded neighbor table
    driv_nbr_valid: np.ndarray    # (N_d, M)
    gate_a2l: sparse.csr_matrix   # (N_l, N_a)
    gate_l2d: sparse.csr_matrix   # (N_d, N_l)
    gate_l2a: sparse.csr_matrix   # (N_a, N_l)
    gate_a2a: sparse.csr_matrix   # (N_a, N_a)
    assign_idx: np.ndarray        # (fine cells,) nearest drivable node or -1
    assign_valid: np.ndarray
    fine_grid: GridSpec = field(default=None)
    drivable_mask: np.ndarray = field(default=None)

    @property
    def n_lane_nodes(self) -> int:
        return self.lane_v.shape[0]

    @property
    def n_drivable(self) -> int:
        return self.driv_xy.shape[0]


def lane_nodes(scenario: Scenario) -> tuple[np.ndarray, np.ndarray, list]:
    """Segment-midpoint lane nodes: positions, displacements, owning lane ids."""
    vs, dvs, owners = [], [], []
    for ln in scenario.lanes:
        if ln.centerline.shape[0] < 2:
            warnings.warn(f"lane {ln.id} has < 2 centerline points; skipped")
            continue
        mids = 0.5 * (ln.centerline[:-1] + ln.centerline[1:])
        disp = np.diff(ln.centerline, axis=0)
        vs.append(mids)
        dvs.append(disp)
        owners.extend([ln.id] * mids.shape[0])
    if not vs:
        return np.zeros((0, 2)), np.zeros((0, 2)), []
    return np.vstack(vs), np.vstack(dvs), owners


def _bool_power(adj: sparse.csr_matrix, power: int) -> sparse.csr_matrix:
    """Boolean reachability in exactly `power` hops."""
    result = adj.copy()
    result.data[:] = 1.0
    done = 1
    while done < power:
        result = result @ adj
        result.data[:] = 1.0
        done += 1
    result.eliminate_zeros()
    return result.tocsr()


def _lane_adjacency(scenario: Scenario, owners: list, lane_v: np.ndarray,
                    dilations: tuple) -> tuple[list, list, sparse.csr_matrix, sparse.csr_matrix]:
    n = len(owners)
    by_lane: dict[int, list[int]] = {}
    for idx, lid in enumerate(owners):
        by_lane.setdefault(lid, []).append(idx)
    lanes_by_id = {ln.id: ln for ln in scenario.lanes}

    suc_pairs = []
    for lid, nodes in by_lane.items():
        for a, b in zip(nodes, nodes[1:]):
            suc_pairs.append((a, b))
        last = nodes[-1]
        for nxt in lanes_by_id[lid].suc:
            if nxt in by_lane:
                suc_pairs.append((last, by_lane[nxt][0]))
        first = nodes[0]
        for prv in lanes_by_id[lid].pre:
            if prv in by_lane:
                suc_pairs.append((by_lane[prv][-1], first))

    def mat(pairs):
        if not pairs:
            return sparse.csr_matrix((n, n))
        rows, cols = zip(*pairs)
        return sparse.csr_matrix(
            (np.ones(len(pairs)), (rows, cols)), shape=(n, n))

    suc1 = mat(suc_pairs)
    pre1 = suc1.T.tocsr()
    adj_suc = [(_bool_power(suc1, d) if suc1.nnz else suc1) for d in dilations]
    adj_pre = [(_bool_power(pre1, d) if pre1.nnz else pre1) for d in dilations]

    left_pairs, right_pairs = [], []
    for lid, nodes in by_lane.items():
        ln = lanes_by_id[lid]
        for side_id, pairs in ((ln.left, left_pairs), (ln.right, right_pairs)):
            if side_id is None or side_id not in by_lane:
                continue
            other = np.array(by_lane[side_id])
            tree = cKDTree(lane_v[other])
            dist, j = tree.query(lane_v[nodes])
            for i, node in enumerate(nodes):
                if dist[i] <= 6.0:
                    pairs.append((node, int(other[j[i]])))
    return adj_pre, adj_suc, mat(left_pairs), mat(right_pairs)


def _distance_gate(dst_xy: np.ndarray, src_xy: np.ndarray, radius: float,
                   exclude_diag: bool = False) -> sparse.csr_matrix:
    """Weights max(0, 1 - d/radius) for pairs within `radius` meters."""
    n_dst, n_src = dst_xy.shape[0], src_xy.shape[0]
    if n_dst == 0 or n_src == 0:
        return sparse.csr_matrix((n_dst, n_src))
    tree = cKDTree(src_xy)
    rows, cols, vals = [], [], []
    for i, neighbors in enumerate(tree.query_ball_point(dst_xy, radius)):
        for j in neighbors:
            if exclude_diag and i == j:
                continue
            d = float(np.hypot(*(dst_xy[i] - src_xy[j])))
            w = max(0.0, 1.0 - d / radius)
            if w > 0.0:
                rows.append(i)
                cols.append(j)
                vals.append(w)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_dst, n_src))


def drivable_neighbor_table(mask: np.ndarray, dilations: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eight-neighbor dilated connections among drivable cells.

    Returns (node xy index grid -> node ids, padded idx table, valid table).
    """
    side = mask.shape[0]
    node_of = np.full(mask.shape, -1, dtype=int)
    coords = np.argwhere(mask)
    node_of[coords[:, 0], coords[:, 1]] = np.arange(coords.shape[0])
    offsets = [(dr * d, dc * d)
               for d in dilations
               for dr, dc in [(-1, -1), (-1, 0), (-1, 1), (0, -1),
                              (0, 1), (1, -1), (1, 0), (1, 1)]]
    m = len(offsets)
    idx = np.full((coords.shape[0], m), -1, dtype=int)
    for k, (dr, dc) in enumerate(offsets):
        rr = coords[:, 0] + dr
        cc = coords[:, 1] + dc
        ok = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side)
        ok_idx = np.where(ok)[0]
        idx[ok_idx, k] = node_of[rr[ok_idx], cc[ok_idx]]
    valid = idx >= 0
    return node_of, idx, valid


def assign_indices(node_xy: np.ndarray, grid: GridSpec,
                   mask: np.ndarray | None = None,
                   max_dist: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Nearest drivable node per cell center, valid only within max_dist.

    Cells marked undrivable by `mask` are forced invalid so their feature
    rows are exactly zero.
    """
    centers = grid.cell_centers()
    if node_xy.shape[0] == 0:
        return np.full(centers.shape[0], -1, dtype=int), np.zeros(centers.shape[0], dtype=bool)
    tree = cKDTree(node_xy)
    dist, idx = tree.query(centers)
    valid = dist <= max_dist + 1e-12
    if mask is not None:
        valid &= mask.ravel()
    return np.where(valid, idx, -1), valid


def agent_input_matrix(scenario: Scenario, t_p: int,
                       dt: float = 0.1) -> tuple[np.ndarray, np.ndarray, list]:
    """Per-agent flattened (dx, dy, speed, valid) history, target row first.

    Displacements are expressed as velocities (divided by dt) so the speed
    signal enters the encoder at unit-ish scale.
    """
    agents = sorted(scenario.agents, key=lambda a: (not a.is_target, a.id))
    feats = np.zeros((len(agents), t_p * 4))
    pos = np.zeros((len(agents), 2))
    zeroed = []
    for i, ag in enumerate(agents):
        track = ag.track
        n = min(t_p, track.shape[0])
        xy = track[-n:, 1:3]
        valid = track[-n:, 3]
        if not np.any(valid > 0.5):
            zeroed.append(i)
            continue
        deltas = np.zeros_like(xy)
        deltas[1:] = np.diff(xy, axis=0) / dt
        speed = np.hypot(deltas[:, 0], deltas[:, 1])
        block = np.column_stack([deltas, speed, valid])
        feats[i, -n * 4:] = block.ravel()
        last = xy[valid > 0.5][-1]
        pos[i] = last
    return feats, pos, zeroed


def prepare_scene(scenario: Scenario, cfg: RunConfig,
                  mask_override: np.ndarray | None = None) -> SceneEncoding:
    """All parameter-independent structure for one normalized scenario."""
    mask = scenario.drivable_mask if mask_override is None else mask_override
    grid = scenario.grid
    lane_v, lane_dv, owners = lane_nodes(scenario)
    adj_pre, adj_suc, adj_left, adj_right = _lane_adjacency(
        scenario, owners, lane_v, cfg.lane_dilations)
    agent_inputs, agent_pos, zeroed = agent_input_matrix(scenario, cfg.t_p,
                                                         cfg.dt)

    driv_xy = grid.cell_centers()[mask.ravel()]
    _, nbr_idx, nbr_valid = drivable_neighbor_table(mask, cfg.drivable_dilations)
    assign_idx, assign_valid = assign_indices(driv_xy, grid, mask)

    r = cfg.gate_radius
    return SceneEncoding(
        lane_v=lane_v, lane_dv=lane_dv,
        adj_pre=adj_pre, adj_suc=adj_suc,
        adj_left=adj_left, adj_right=adj_right,
        agent_inputs=agent_inputs, agent_pos=agent_pos, zeroed_agents=zeroed,
        driv_xy=driv_xy, driv_nbr_idx=nbr_idx, driv_nbr_valid=nbr_valid,
        gate_a2l=_distance_gate(lane_v, agent_pos, r),
        gate_l2d=_distance_gate(driv_xy, lane_v, r),
        gate_l2a=_distance_gate(agent_pos, lane_v, r),
        gate_a2a=_distance_gate(agent_pos, agent_pos, r, exclude_diag=True),
        assign_idx=assign_idx, assign_valid=assign_valid,
        fine_grid=grid, drivable_mask=mask,
    )


# ---------------------------------------------------------------------------
# parameter registration


def init_stage1_params(store: ParamStore, cfg: RunConfig,
                       rng: np.random.Generator) -> None:
    w = cfg.widths
    init_mlp(store, "lane.psi1", [2, w.lane, w.lane], rng)
    init_mlp(store, "lane.psi2", [2, w.lane, w.lane], rng)
    _init_lane_conv(store, "lane.conv", w.lane, cfg.lane_dilations, rng)
    init_mlp(store, "agent.enc", [cfg.t_p * 4, w.agent, w.agent], rng)
    init_linear(store, "driv.in", 2, w.drivable, rng)
    _init_point_da(store, "driv.point", w.drivable, rng)
    init_linear(store, "fuse.a2l", w.agent, w.lane, rng)
    _init_lane_conv(store, "fuse.l2l", w.lane, cfg.lane_dilations, rng)
    init_linear(store, "fuse.l2d", w.lane, w.drivable, rng)
    _init_point_da(store, "fuse.d2d", w.drivable, rng)
    init_linear(store, "fuse.l2a", w.lane, w.agent, rng)
    init_linear(store, "fuse.a2a", w.agent, w.agent, rng)
    init_mlp(store, "down.mlp", [w.drivable, w.coarse, w.coarse], rng)
    init_mlp(store, "head.mlp", [w.coarse, w.coarse, 2], rng)


def _init_lane_conv(store: ParamStore, prefix: str, width: int,
                    dilations: tuple, rng: np.random.Generator) -> None:
    scale = np.sqrt(1.0 / width)
    for d in dilations:
        store.add(f"{prefix}.pre{d}", rng.standard_normal((width, width)) * scale)
        store.add(f"{prefix}.suc{d}", rng.standard_normal((width, width)) * scale)
    for name in ("left", "right", "self"):
        store.add(f"{prefix}.{name}", rng.standard_normal((width, width)) * scale)


def _init_point_da(store: ParamStore, prefix: str, width: int,
                   rng: np.random.Generator) -> None:
    init_mlp(store, f"{prefix}.nbr", [width, width, width], rng)
    init_mlp(store, f"{prefix}.fuse", [2 * width, width, width], rng)


def stage1_shapes(cfg: RunConfig) -> dict:
    probe = ParamStore()
    init_stage1_params(probe, cfg, np.random.default_rng(0))
    return {name: probe.get(name).shape for name in probe.names()}


# ---------------------------------------------------------------------------
# encoders


def encode_lane_nodes(t: Tape, store: ParamStore, enc: SceneEncoding):
    """u_i = psi1(segment displacement) + psi2(node position)."""
    if enc.n_lane_nodes == 0:
        width = store.get("lane.psi1.0.W").shape[1]
        return t.const(np.zeros((0, width)))
    u1 = mlp(t, t.const(enc.lane_dv), store, "lane.psi1")
    u2 = mlp(t, t.const(enc.lane_v), store, "lane.psi2")
    return t.add(u1, u2)


def lane_conv(t: Tape, store: ParamStore, prefix: str, u, enc: SceneEncoding,
              dilations: tuple, activation: bool = True):
    """Multi-scale dilated lane-graph convolution.

    out = sum_d (pre^d U W_pre_d + suc^d U W_suc_d)
        + left U W_left + right U W_right + U W_self, then ReLU.
    """
    if u.value.shape[0] == 0:
        return u
    out = t.matmul(u, t.param(store, f"{prefix}.self"))
    for d, a_pre, a_suc in zip(dilations, enc.adj_pre, enc.adj_suc):
        if a_pre.nnz:
            out = t.add(out, t.spmm(a_pre, t.matmul(u, t.param(store, f"{prefix}.pre{d}"))))
        if a_suc.nnz:
            out = t.add(out, t.spmm(a_suc, t.matmul(u, t.param(store, f"{prefix}.suc{d}"))))
    if enc.adj_left.nnz:
        out = t.add(out, t.spmm(enc.adj_left, t.matmul(u, t.param(store, f"{prefix}.left"))))
    if enc.adj_right.nnz:
        out = t.add(out, t.spmm(enc.adj_right, t.matmul(u, t.param(store, f"{prefix}.right"))))
    return t.relu(out) if activation else out


def point_da(t: Tape, store: ParamStore, prefix: str, feats, nbr_idx, nbr_valid):
    """PointNet-style drivable update: shared MLP over neighbors, max-pool,
    concat with the node's own feature, then a fusion MLP.  Isolated nodes
    pool a zero vector."""
    transformed = mlp(t, feats, store, f"{prefix}.nbr")
    pooled = t.neighbor_max(transformed, nbr_idx, nbr_valid)
    fused = t.concat([pooled, feats], axis=1)
    return mlp(t, fused, store, f"{prefix}.fuse")


def encode_drivable(t: Tape, store: ParamStore, enc: SceneEncoding):
    if enc.n_drivable == 0:
        return t.const(np.zeros((0, store.get("driv.in.W").shape[1])))
    base = linear(t, t.const(enc.driv_xy), store, "driv.in")
    return point_da(t, store, "driv.point", base, enc.driv_nbr_idx, enc.driv_nbr_valid)


def encode_agent_history(t: Tape, store: ParamStore, enc: SceneEncoding):
    """Two-layer perceptron over flattened per-step (dx, dy, speed, valid)."""
    return mlp(t, t.const(enc.agent_inputs), store, "agent.enc")


def _cross_message(t: Tape, store: ParamStore, prefix: str, dst, src, gate):
    """dst + gate-weighted sum of transformed source rows.

    Zero gates leave the destination features exactly unchanged.
    """
    if gate.nnz == 0 or src.value.shape[0] == 0:
        return dst
    return t.add(dst, t.spmm(gate, t.relu(linear(t, src, store, prefix))))


def fuse_features(t: Tape, store: ParamStore, enc: SceneEncoding, c_a, c_l, c_d,
                  dilations: tuple):
    """One round each of A2L, L2L, L2D, D2D, L2A, A2A message passing.

    Cross-set messages are distance-gated weighted sums over neighbors
    within the gate radius; L2L reuses the lane convolution and D2D the
    PointNet-style update.  With no lanes only D2D and A2A run.
    """
    have_lanes = c_l.value.shape[0] > 0
    if have_lanes:
        c_l = _cross_message(t, store, "fuse.a2l", c_l, c_a, enc.gate_a2l)
        c_l = lane_conv(t, store, "fuse.l2l", c_l, enc, dilations)
        if c_d.value.shape[0] > 0:
            c_d = _cross_message(t, store, "fuse.l2d", c_d, c_l, enc.gate_l2d)
    if c_d.value.shape[0] > 0:
        c_d = point_da(t, store, "fuse.d2d", c_d, enc.driv_nbr_idx, enc.driv_nbr_valid)
    if have_lanes:
        c_a = _cross_message(t, store, "fuse.l2a", c_a, c_l, enc.gate_l2a)
    c_a = _cross_message(t, store, "fuse.a2a", c_a, c_a, enc.gate_a2a)
    return c_a, c_l, c_d
