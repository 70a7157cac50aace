"""Feature adaptor: vectorized drivable features into the reward grid.

Drivable-node features are scattered onto the fine grid (zero rows for
cells without a nearby node), pooled 2x2 and compressed to the coarse MDP
grid, and mapped per cell to a bounded transient reward plus an
unconstrained terminal reward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnops import ContractViolation, ParamStore, Tape, mlp


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class RewardMaps:
    transient: np.ndarray   # (side, side), everywhere <= -r_min
    terminal: np.ndarray    # (side, side)
    r_min: float


def assign_to_grid(t: Tape, c_d, assign_idx, assign_valid, side: int):
    """Scatter drivable-node features into an (side, side, F) fine grid.

    Each cell takes its nearest drivable node's feature when one lies
    within the assignment distance; all other cells (in particular every
    undrivable one) hold exactly the zero vector.
    """
    if c_d.value.shape[0] == 0:
        width = 1 if c_d.value.ndim < 2 else c_d.value.shape[1]
        return t.const(np.zeros((side, side, width)))
    flat = t.rows_or_zero(c_d, assign_idx, assign_valid)
    return t.reshape(flat, (side, side, c_d.value.shape[1]))


def downsample(t: Tape, store: ParamStore, fine):
    """2x2 average pooling followed by a pointwise two-layer perceptron."""
    h, w, f = fine.value.shape
    if h % 2 or w % 2:
        raise ContractViolation("fine grid dims must be divisible by 2")
    pooled = t.avg_pool2x2(fine)
    flat = t.reshape(pooled, (h // 2 * (w // 2), f))
    return mlp(t, flat, store, "down.mlp")


def reward_head(t: Tape, store: ParamStore, coarse, r_min: float,
                terminal_cap: float = 8.0):
    """Per-cell perceptron -> (transient, terminal) reward channels.

    The transient channel is mapped through x -> -r_min - softplus(x) so it
    is bounded above by -r_min; the terminal channel is squashed into
    +-terminal_cap.  Both bounds together guarantee the stationary soft
    value iteration meets its 50-sweep residual budget.

    Returns tape nodes (R, Rg), each flat over cells.
    """
    raw = mlp(t, coarse, store, "head.mlp")
    r = t.neg(t.add(t.softplus(t.col(raw, 0)), t.const(np.array(r_min))))
    rg = t.tanh_squash(t.col(raw, 1), terminal_cap)
    if not (np.all(np.isfinite(r.value)) and np.all(np.isfinite(rg.value))):
        raise TrainingDivergedError(
            "reward head produced non-finite values; "
            f"coarse feature range [{coarse.value.min():.3g}, {coarse.value.max():.3g}], "
            f"raw range [{raw.value.min():.3g}, {raw.value.max():.3g}]")
    return r, rg


def reward_maps_from_nodes(r_node, rg_node, side: int, r_min: float) -> RewardMaps:
    return RewardMaps(transient=r_node.value.reshape(side, side).copy(),
                      terminal=rg_node.value.reshape(side, side).copy(),
                      r_min=r_min)
