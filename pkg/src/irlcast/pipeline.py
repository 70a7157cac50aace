"""End-to-end prediction pipeline: encode, infer rewards, solve the MDP,
sample and cluster plans, decode Bezier proposals, refine, and fuse."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bezier import time_parameterize
from .config import RunConfig
from .features import prepare_scene
from .irl import MdpSpec, expected_svf, soft_value_iteration
from .models import Stage1Model, Stage2Model
from .nnops import Tape
from .refine import fuse_probabilities, gather_fine_features, refine_forward
from .sampler import cluster, plan_feature, plan_to_polyline, sample_plans, state_embedding
from .scene import GridSpec, Scenario, quantize_future, to_target_frame


@dataclass
class Prediction:
    scenario_id: str
    trajectories: np.ndarray        # (K', t_f, 2) refined
    proposals: np.ndarray           # (K', t_f, 2) pre-refinement
    probabilities: np.ndarray       # fused, sums to 1
    p_cls: np.ndarray
    p_mcmc: np.ndarray
    curves: list                    # control point arrays per mode
    reward: np.ndarray              # (side, side)
    terminal: np.ndarray
    svf: np.ndarray                 # (side, side)
    plans: list                     # sampled Plan objects
    cluster_labels: np.ndarray
    gt_future: np.ndarray | None
    k_requested: int
    collapsed: bool
    v0: float
    timing_ms: float = 0.0
    heading_fallback: bool = False
    mode_endpoint_cells: list = field(default_factory=list)


def estimate_speed(scenario: Scenario, dt: float, window: int = 8) -> float:
    """Target speed from a least-squares velocity fit over recent history.

    Fitting a linear motion model over up to `window` valid samples keeps
    per-sample observation noise from leaking into the constant-speed
    parameterization (a single-step difference would amplify it by 1/dt).
    """
    track = scenario.target().track
    valid = track[track[:, 3] > 0.5]
    if valid.shape[0] == 0:
        return 0.0
    recent = valid[-window:]
    if recent.shape[0] < 2:
        return 0.0
    t = recent[:, 0] * dt
    t = t - t.mean()
    denom = float((t * t).sum())
    if denom <= 0:
        return 0.0
    vx = float((t * (recent[:, 1] - recent[:, 1].mean())).sum() / denom)
    vy = float((t * (recent[:, 2] - recent[:, 2].mean())).sum() / denom)
    return float(np.hypot(vx, vy))


def effective_scenario(scenario: Scenario, blocked_cells) -> Scenario:
    """Copy of the scenario with the listed fine-grid cells set undrivable."""
    mask = scenario.drivable_mask.copy()
    for r, c in blocked_cells:
        mask[r, c] = False
    out = Scenario(id=scenario.id, lanes=scenario.lanes, drivable_mask=mask,
                   agents=scenario.agents, gt_future=scenario.gt_future,
                   mode_label=scenario.mode_label,
                   resolution_m=scenario.resolution_m,
                   grid_side=scenario.grid_side,
                   metadata=dict(scenario.metadata))
    return out


class Predictor:
    """Frozen two-stage model plus the sampling/decoding machinery."""

    def __init__(self, cfg: RunConfig, stage1: Stage1Model, stage2: Stage2Model):
        self.cfg = cfg
        self.stage1 = stage1
        self.stage2 = stage2
        self.mdp = MdpSpec(side=cfg.coarse_side, horizon=cfg.horizon)

    @classmethod
    def load(cls, cfg: RunConfig, stage1_path: str, stage2_path: str) -> "Predictor":
        return cls(cfg, Stage1Model.load(stage1_path, cfg),
                   Stage2Model.load(stage2_path, cfg))

    def coarse_grid(self) -> GridSpec:
        return GridSpec(self.cfg.coarse_side, self.cfg.coarse_resolution())

    def predict(self, scenario: Scenario, seed: int, k: int | None = None,
                l: int | None = None, blocked_cells=None) -> Prediction:
        t0 = time.perf_counter()
        cfg = self.cfg
        k = k or cfg.modes
        l = l or cfg.oversample
        if blocked_cells:
            scenario = effective_scenario(scenario, blocked_cells)
        norm = to_target_frame(scenario)
        enc = prepare_scene(norm, cfg)
        fwd = self.stage1.forward(enc)

        _, policy = soft_value_iteration(
            fwd.reward.transient.ravel(), fwd.reward.terminal.ravel(),
            self.mdp, mode=cfg.vi_mode, n_sweeps=cfg.vi_sweeps, tol=cfg.vi_tol)

        coarse_grid = self.coarse_grid()
        s_init = coarse_grid.flat(*coarse_grid.cell_of(0.0, 0.0))
        svf = expected_svf(policy, self.mdp, s_init)
        batch = sample_plans(policy, self.mdp, s_init, l, seed)

        v0 = estimate_speed(norm, cfg.dt)
        trajs = [time_parameterize(plan_to_polyline(p, coarse_grid), v0,
                                   cfg.t_f, cfg.dt)
                 for p in batch.plans]
        clusters = cluster(trajs, k, seed, degree=cfg.bezier_degree)

        proposals = np.stack([rep.positions for rep in clusters.representatives])
        k_eff = proposals.shape[0]

        tape = Tape()
        contexts = []
        plan_feats = []
        hist = norm.target().track[:, 1:3]
        for j in range(k_eff):
            complete = np.vstack([hist, proposals[j]])
            contexts.append(gather_fine_features(
                tape, self.stage2.store, complete, fwd.fine, norm.grid, fwd.h0))
            rep_plan = batch.plans[clusters.representative_plans[j]]
            emb = state_embedding(tape, self.stage2.store, rep_plan.states,
                                  fwd.coarse, fwd.reward.transient,
                                  cfg.coarse_side)
            plan_feats.append(plan_feature(tape, emb))
        ctx_node = tape.concat(contexts, axis=0)
        pf_node = tape.concat(plan_feats, axis=0)
        traj_node, p_cls_node = refine_forward(tape, self.stage2, ctx_node,
                                               pf_node, proposals)
        p_cls = p_cls_node.value.copy()
        fused = fuse_probabilities(p_cls, clusters.p_mcmc)

        endpoint_cells = [list(coarse_grid.cell_of(*traj_node.value[j, -1]))
                          for j in range(k_eff)]
        gt = None
        if norm.gt_future is not None:
            gt = norm.gt_future[:, 1:3].copy()
        elapsed = ((time.perf_counter() - t0) * 1000.0
                   if cfg.record_timing else 0.0)
        return Prediction(
            scenario_id=scenario.id,
            trajectories=traj_node.value.copy(),
            proposals=proposals,
            probabilities=fused,
            p_cls=p_cls,
            p_mcmc=clusters.p_mcmc.copy(),
            curves=[rep.curve.control_points for rep in clusters.representatives],
            reward=fwd.reward.transient,
            terminal=fwd.reward.terminal,
            svf=svf.mu.reshape(cfg.coarse_side, cfg.coarse_side),
            plans=batch.plans,
            cluster_labels=clusters.labels,
            gt_future=gt,
            k_requested=k,
            collapsed=clusters.collapsed,
            v0=v0,
            timing_ms=elapsed,
            heading_fallback=bool(norm.metadata.get("heading_fallback", False)),
            mode_endpoint_cells=endpoint_cells,
        )

    def demo_for(self, scenario: Scenario) -> tuple:
        """Normalized scenario plus its quantized demonstration."""
        norm = to_target_frame(scenario)
        if norm.gt_future is None:
            raise ValueError(f"scenario {scenario.id!r} has no gt_future")
        pts = np.vstack([[0.0, 0.0], norm.gt_future[:, 1:3]])
        demo = quantize_future(pts, self.coarse_grid(), self.cfg.horizon)
        return norm, demo


# ---------------------------------------------------------------------------
# plan decimation for payloads


def decimate_plans(plans: list, limit: int, seed: int) -> list:
    """Probability-weighted sample of at most `limit` plans (deterministic)."""
    if len(plans) <= limit:
        return list(plans)
    logw = np.array([p.log_prob for p in plans])
    w = np.exp(logw - logw.max())
    w = w / w.sum()
    rng = np.random.default_rng([seed, 0xDEC1])
    idx = rng.choice(len(plans), size=limit, replace=False, p=w)
    return [plans[i] for i in sorted(idx)]


def coarse_cells_of_fine(cells, fine_side: int, coarse_side: int):
    """Map fine-grid (r, c) cells onto the coarse grid (deduplicated)."""
    factor = fine_side // coarse_side
    out = {(r // factor, c // factor) for r, c in cells}
    return sorted(out)
