"""Oversampled policy rollouts, plan embeddings, and trajectory clustering."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .bezier import fit_proposal
from .irl import END, MOVES, MdpSpec, N_MOVES, PolicyTable
from .nnops import ContractViolation, ParamStore, Tape, mlp
from .scene import GridSpec


@dataclass
class Plan:
    states: tuple          # flat coarse-cell indices, length <= horizon
    log_prob: float
    ended: bool


@dataclass
class PlanBatch:
    plans: list
    seed: int

    def __len__(self) -> int:
        return len(self.plans)


def sample_plans(policy: PolicyTable, mdp: MdpSpec, s_init: int, L: int,
                 seed: int) -> PlanBatch:
    """L independent ancestral rollouts of the policy from s_init.

    Plan i draws its own generator from (seed, i), so each plan is
    reproducible regardless of batch size or execution order.  Rollouts
    stop when the end action is drawn or the horizon is reached.
    """
    h = mdp.horizon
    uniforms = np.empty((L, h))
    for i in range(L):
        uniforms[i] = np.random.default_rng([seed, i]).random(h)

    states = np.full(L, s_init, dtype=int)
    alive = np.ones(L, dtype=bool)
    logp = np.zeros(L)
    ended = np.zeros(L, dtype=bool)
    seqs = [[s_init] for _ in range(L)]

    for pos in range(1, h + 1):
        if not alive.any():
            break
        pi = policy.at(pos)
        rows = pi[states[alive]]
        cum = np.cumsum(rows, axis=1)
        u = uniforms[alive, pos - 1] * cum[:, -1]
        acts = np.minimum((u[:, None] >= cum).sum(axis=1), END)
        live_idx = np.flatnonzero(alive)
        probs = np.log(np.maximum(
            rows[np.arange(rows.shape[0]), acts], 1e-300))
        finishing = acts == END
        ended[live_idx[finishing]] = True
        alive[live_idx[finishing]] = False
        logp[live_idx[finishing]] += probs[finishing]
        moving = live_idx[~finishing]
        if pos == h:
            # a move drawn at the last position is discarded: the rollout
            # truncates and the draw never shapes the plan
            alive[moving] = False
            continue
        logp[moving] += probs[~finishing]
        nxt = mdp.transitions[states[moving], acts[~finishing]]
        states[moving] = nxt
        for j, s in zip(moving, nxt):
            seqs[j].append(int(s))

    plans = [Plan(states=tuple(seqs[i]), log_prob=float(logp[i]),
                  ended=bool(ended[i])) for i in range(L)]
    return PlanBatch(plans=plans, seed=seed)


def plan_to_polyline(plan: Plan, grid: GridSpec) -> np.ndarray:
    """Cell centers of the plan's state sequence, in meters."""
    return np.array([grid.center(*divmod(s, grid.side)) for s in plan.states])


# ---------------------------------------------------------------------------
# state / plan embeddings (tape-based; trained in stage 2)


def state_embedding(t: Tape, store: ParamStore, states, coarse: np.ndarray,
                    reward: np.ndarray, side: int):
    """e(s) = f1(coarse features) ++ f2(reward) ++ f3(grid coordinates).

    Coordinates enter f3 scaled to [-1, 1] for unit-scale conditioning.
    """
    states = np.asarray(states, dtype=int)
    ctx = coarse[states]
    rew = reward.ravel()[states][:, None]
    coords = np.stack(np.divmod(states, side), axis=1).astype(float)
    coords = 2.0 * coords / max(side - 1, 1) - 1.0
    e1 = mlp(t, t.const(ctx), store, "embed.f1")
    e2 = mlp(t, t.const(rew), store, "embed.f2")
    e3 = mlp(t, t.const(coords), store, "embed.f3")
    return t.concat([e1, e2, e3], axis=1)


def plan_feature(t: Tape, embeddings):
    """Fixed-width plan summary: (mean over states, first, last) stacked."""
    n = embeddings.value.shape[0]
    if n == 0:
        raise ContractViolation("plan_feature requires a non-empty plan")
    mean = t.mean0(embeddings)
    first = t.rows(embeddings, [0])
    last = t.rows(embeddings, [n - 1])
    return t.concat([t.reshape(mean, (1, -1)), first, last], axis=1)


# ---------------------------------------------------------------------------
# clustering


@dataclass
class ClusterResult:
    labels: np.ndarray            # (L,) cluster id per trajectory
    counts: np.ndarray            # (K,) member counts
    p_mcmc: np.ndarray            # counts / L
    members: list = field(default_factory=list)   # list of index arrays
    representatives: list = field(default_factory=list)  # TrajectoryProposal
    representative_plans: list = field(default_factory=list)  # member index
    collapsed: bool = False

    @property
    def k(self) -> int:
        return len(self.counts)


def _descriptor(traj: np.ndarray, n_points: int = 6) -> np.ndarray:
    idx = np.linspace(0, traj.shape[0] - 1, n_points).round().astype(int)
    return traj[idx].ravel()


def _farthest_point_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    first = int(rng.integers(x.shape[0]))
    seeds = [first]
    d = np.linalg.norm(x - x[first], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d))   # argmax takes the lowest index on ties
        seeds.append(nxt)
        d = np.minimum(d, np.linalg.norm(x - x[nxt], axis=1))
    return np.array(seeds)


def lloyd_iterations(x: np.ndarray, centers: np.ndarray,
                     max_iter: int = 100) -> tuple[np.ndarray, np.ndarray, list]:
    """Standard Lloyd iterations; returns (labels, centers, WCSS history)."""
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(x.shape[0]), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(centers.shape[0]):
            member = x[labels == j]
            if member.shape[0]:
                centers[j] = member.mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(x.shape[0]), labels]))
                centers[j] = x[far]
    return labels, centers, history


def cluster(trajectories: list, k: int, seed: int,
            degree: int = 5) -> ClusterResult:
    """K-means over trajectories downsampled to 6 evenly spaced points.

    Representatives are the member-mean trajectories refit through the
    Bezier fitter; mode probabilities are member proportions.  If fewer
    than k distinct trajectories exist the result collapses to K' < k
    clusters (flagged).
    """
    L = len(trajectories)
    if L < k:
        raise ContractViolation(f"need at least k={k} trajectories, got {L}")
    x = np.stack([_descriptor(tr) for tr in trajectories])
    uniq = np.unique(x, axis=0)
    collapsed = uniq.shape[0] < k
    k_eff = min(k, uniq.shape[0])
    if collapsed:
        warnings.warn(f"only {uniq.shape[0]} distinct trajectories; "
                      f"returning {k_eff} clusters")

    rng = np.random.default_rng(seed)
    if k_eff == uniq.shape[0]:
        centers = uniq.astype(float).copy()
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        history = [0.0]
    else:
        seeds = _farthest_point_seeds(x, k_eff, rng)
        labels, centers, history = lloyd_iterations(x, x[seeds].astype(float).copy())

    counts = np.bincount(labels, minlength=k_eff)
    order = np.argsort(-counts, kind="stable")   # most populated mode first
    remap = np.empty_like(order)
    remap[order] = np.arange(k_eff)
    labels = remap[labels]
    counts = counts[order]

    members, reps, rep_plans = [], [], []
    for j in range(k_eff):
        idx = np.flatnonzero(labels == j)
        members.append(idx)
        mean_traj = np.mean([trajectories[i] for i in idx], axis=0)
        proposal = fit_proposal(mean_traj, degree)
        proposal.cluster_id = j
        reps.append(proposal)
        center = np.mean(x[idx], axis=0)
        dist = np.linalg.norm(x[idx] - center, axis=1)
        rep_plans.append(int(idx[int(np.argmin(dist))]))
    return ClusterResult(labels=labels, counts=counts,
                         p_mcmc=counts.astype(float) / L,
                         members=members, representatives=reps,
                         representative_plans=rep_plans, collapsed=collapsed,
                         )
