"""Fine-scale refinement, probability fusion, and the stage-2 losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .nnops import ContractViolation, ParamStore, Tape, mlp
from .scene import GridSpec


@dataclass
class RefinedPrediction:
    trajectories: np.ndarray    # (K, t_f, 2) proposals + offsets
    offsets: np.ndarray         # (K, t_f, 2)
    p_cls: np.ndarray           # (K,) softmax classification probabilities
    p_fused: np.ndarray         # (K,) hybrid probabilities


@dataclass
class LossReport:
    reg_proposal: float
    reg_trajectory: float
    reg_goal: float
    cls: float
    total: float
    k_star: int


def pool_fine_features(trajectory: np.ndarray, fine: np.ndarray,
                       grid: GridSpec) -> np.ndarray:
    """Average fine-grid feature along a trajectory (nearest cell per point).

    Points outside the grid contribute zero rows.
    """
    rows = np.zeros((trajectory.shape[0], fine.shape[2]))
    for i, (x, y) in enumerate(trajectory):
        if grid.contains(x, y):
            r, c = grid.cell_of(x, y)
            rows[i] = fine[r, c]
    return rows.mean(axis=0)


def gather_fine_features(t: Tape, store: ParamStore, complete: np.ndarray,
                         fine: np.ndarray, grid: GridSpec, h0: np.ndarray):
    """Context vector for one mode: (pooled fine features, agent feature,
    location embedding of the complete observed+proposed trajectory).

    Coordinates are scaled by the grid half-extent before the embedding so
    the perceptron sees unit-scale inputs.
    """
    pooled = t.const(pool_fine_features(complete, fine, grid)[None, :])
    agent = t.const(h0[None, :])
    scaled = complete / (grid.extent / 2.0)
    loc = mlp(t, t.const(scaled.ravel()[None, :]), store, "refine.loc")
    return t.concat([pooled, agent, loc], axis=1)


def fuse_probabilities(p_cls: np.ndarray, p_mcmc: np.ndarray) -> np.ndarray:
    """Normalized elementwise product of the two probability vectors."""
    p_cls = np.asarray(p_cls, dtype=float)
    p_mcmc = np.asarray(p_mcmc, dtype=float)
    if p_cls.shape != p_mcmc.shape:
        raise ContractViolation("probability vectors must share length")
    if np.any(p_cls < 0) or np.any(p_mcmc < 0):
        raise ContractViolation("probabilities must be nonnegative")
    prod = p_cls * p_mcmc
    z = prod.sum()
    if z <= 0.0:
        warnings.warn("all fused probability products are zero; "
                      "falling back to classification probabilities")
        return p_cls.copy()
    return prod / z


def huber(x) -> np.ndarray | float:
    """Smooth-l1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(x, dtype=float)
    out = np.where(np.abs(x) < 1.0, 0.5 * x * x, np.abs(x) - 0.5)
    return float(out) if out.ndim == 0 else out


def select_wta(predictions: np.ndarray, gt: np.ndarray) -> int:
    """Index of the candidate with the smallest final displacement error."""
    endpoints = predictions[:, -1, :]
    dist = np.hypot(*(endpoints - gt[-1]).T)
    return int(np.argmin(dist))   # argmin takes the lowest index on ties


def regression_losses(predictions: np.ndarray, proposals: np.ndarray,
                      gt: np.ndarray, k_star: int) -> tuple[float, float, float]:
    """Huber losses of (proposal k*, refined k*, refined endpoint k*)."""
    def traj_loss(traj):
        d = np.hypot(*(traj - gt).T)
        return float(huber(d).mean())

    reg_p = traj_loss(proposals[k_star])
    reg_t = traj_loss(predictions[k_star])
    reg_g = float(huber(np.hypot(*(predictions[k_star, -1] - gt[-1]))))
    return reg_p, reg_t, reg_g


def hinge_loss(p_cls: np.ndarray, k_star: int, margin: float) -> float:
    """Max-margin loss pushing the winning mode's probability up."""
    if margin <= 0:
        raise ContractViolation("hinge margin must be positive")
    k = p_cls.shape[0]
    if k <= 1:
        return 0.0
    others = np.delete(p_cls, k_star)
    return float(np.maximum(others - p_cls[k_star] + margin, 0.0).sum() / (k - 1))


def total_loss(reg_p: float, reg_t: float, reg_g: float, cls: float,
               alpha: float = 1.0, beta: float = 1.0, gamma: float = 3.0) -> float:
    return reg_p + alpha * reg_t + beta * reg_g + gamma * cls


# ---------------------------------------------------------------------------
# tape-side loss assembly (training path)


def refine_forward(t: Tape, model, contexts, plan_feats, proposals: np.ndarray):
    """Run the shared trunk and heads over all K modes at once.

    contexts: (K, z) tape node; plan_feats: (K, p) tape node.
    Returns (trajectory node (K, t_f, 2), p_cls node (K,)).
    """
    k, t_f = proposals.shape[0], proposals.shape[1]
    h = model.trunk(t, contexts)
    offsets, logits = model.heads(t, h, plan_feats)
    traj = t.add(t.reshape(offsets, (k, t_f, 2)), t.const(proposals))
    p_cls = t.softmax1d(logits)
    return traj, p_cls


def loss_nodes(t: Tape, traj_node, p_cls_node, proposals: np.ndarray,
               gt: np.ndarray, margin: float,
               alpha: float = 1.0, beta: float = 1.0, gamma: float = 3.0):
    """Total-loss tape node with the WTA rule; returns (node, LossReport)."""
    k, t_f = proposals.shape[0], proposals.shape[1]
    k_star = select_wta(traj_node.value, gt)

    winner = t.reshape(t.rows(traj_node, [k_star]), (t_f, 2))
    diff = t.sub(winner, t.const(gt))
    dist = t.sqrt(t.sum_axis(t.square(diff), 1))
    reg_t = t.scale(t.sum_all(t.huber(dist)), 1.0 / t_f)
    end_diff = t.sub(t.rows(winner, [t_f - 1]), t.const(gt[-1][None, :]))
    end_dist = t.sqrt(t.sum_axis(t.square(end_diff), 1))
    reg_g = t.sum_all(t.huber(end_dist))

    reg_p = float(huber(np.hypot(*(proposals[k_star] - gt).T)).mean())

    if k > 1:
        pk = t.rows(p_cls_node, [k_star])
        margins = t.add(t.sub(p_cls_node, pk), t.const(np.array(margin)))
        mask = np.ones(k)
        mask[k_star] = 0.0
        cls = t.scale(t.sum_all(t.mul(t.relu(margins), t.const(mask))),
                      1.0 / (k - 1))
    else:
        cls = t.const(np.array(0.0))

    total = t.add(t.add(t.scale(reg_t, alpha), t.scale(reg_g, beta)),
                  t.scale(cls, gamma))
    total = t.add(total, t.const(np.array(reg_p)))
    report = LossReport(
        reg_proposal=reg_p,
        reg_trajectory=float(reg_t.value),
        reg_goal=float(reg_g.value),
        cls=float(cls.value),
        total=float(total.value),
        k_star=k_star,
    )
    return total, report
