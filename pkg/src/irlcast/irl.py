"""MaxEnt IRL on the coarse grid MDP.

The MDP has one state per coarse cell plus an absorbing sink.  Actions are
the eight compass moves and `end`; moves off the grid are invalid and are
excluded from every log-sum-exp.  The `end` action pays the terminal reward
and routes to the sink; at the last plan position of the finite-horizon
model it is the only valid action, so every plan of length m <= H carries
weight exp(sum of transient rewards + terminal reward at its last state).

Two solver modes share one interface: `stationary` is the production
approximate iteration (fixed-point sweeps of the soft Bellman update) and
`finite_horizon` is the exact time-indexed backward pass used as the
testing oracle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nnops import ContractViolation

MOVES = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
N_MOVES = 8
END = 8
N_ACTIONS = 9


class SizeGuardError(ValueError):
    """Raised when the enumeration oracle is asked for too large an instance."""


class NonConvergenceWarning(UserWarning):
    def __init__(self, residual: float, sweeps: int):
        self.residual = residual
        self.sweeps = sweeps
        super().__init__(f"stationary soft value iteration residual "
                         f"{residual:.3e} after {sweeps} sweeps")


@dataclass
class MdpSpec:
    side: int = 25
    horizon: int = 25
    transitions: np.ndarray = field(init=False)   # (S, 8) int, -1 invalid
    valid: np.ndarray = field(init=False)         # (S, 8) bool

    def __post_init__(self):
        s = self.side
        n = s * s
        trans = np.full((n, N_MOVES), -1, dtype=int)
        rr, cc = np.divmod(np.arange(n), s)
        for a, (dr, dc) in enumerate(MOVES):
            nr, nc = rr + dr, cc + dc
            ok = (0 <= nr) & (nr < s) & (0 <= nc) & (nc < s)
            trans[ok, a] = nr[ok] * s + nc[ok]
        self.transitions = trans
        self.valid = trans >= 0

    @property
    def n_states(self) -> int:
        return self.side * self.side

    def action_between(self, a: int, b: int) -> int | None:
        ra, ca = divmod(a, self.side)
        rb, cb = divmod(b, self.side)
        delta = (rb - ra, cb - ca)
        if delta in MOVES:
            return MOVES.index(delta)
        return None


@dataclass
class SoftValues:
    mode: str
    V: np.ndarray      # (S,) stationary or (H, S) finite-horizon (index pos-1)
    Q: np.ndarray      # (S, 9) or (H, S, 9)
    residual: float = math.inf
    sweeps: int = 0


@dataclass
class PolicyTable:
    mode: str
    pi: np.ndarray     # (S, 9) stationary or (H, S, 9) finite-horizon
    horizon: int

    def at(self, pos: int) -> np.ndarray:
        """Action distribution table at plan position pos (1-based)."""
        if self.mode == "stationary":
            return self.pi
        return self.pi[pos - 1]


@dataclass
class SvfTable:
    occupancy: np.ndarray   # (H, S): distribution over states at each position
    mu: np.ndarray          # (S,): summed occupancy over positions
    end_mass: np.ndarray    # (H,): probability of ending at each position
    end_freq: np.ndarray    # (S,): probability of ending at each state

    def conservation_error(self) -> float:
        """Worst |occupancy + cumulative end mass - 1| over positions."""
        alive = self.occupancy.sum(axis=1)
        prior_ends = np.concatenate([[0.0], np.cumsum(self.end_mass)[:-1]])
        return float(np.abs(alive + prior_ends - 1.0).max())


def _masked_q(R: np.ndarray, Rg: np.ndarray, V_next: np.ndarray,
              mdp: MdpSpec) -> np.ndarray:
    """Q over all 9 actions with invalid moves at -inf."""
    q = np.full((mdp.n_states, N_ACTIONS), -np.inf)
    safe = np.where(mdp.valid, mdp.transitions, 0)
    moves = R[:, None] + V_next[safe]
    q[:, :N_MOVES] = np.where(mdp.valid, moves, -np.inf)
    q[:, END] = R + Rg
    return q


def _logsumexp_rows(q: np.ndarray) -> np.ndarray:
    m = q.max(axis=1)
    return m + np.log(np.exp(q - m[:, None]).sum(axis=1))


def soft_value_iteration(R: np.ndarray, Rg: np.ndarray, mdp: MdpSpec,
                         mode: str = "stationary", n_sweeps: int = 50,
                         tol: float = 1e-6) -> tuple[SoftValues, PolicyTable]:
    """Soft (log-sum-exp) value iteration over the grid MDP.

    R, Rg: flat (S,) transient and terminal rewards.  `stationary` runs up
    to n_sweeps fixed-point sweeps from V = -inf with the end action
    re-anchored at R + Rg every sweep, stopping early once the sup-residual
    drops below tol; `finite_horizon` is the exact time-indexed backward
    pass over the full horizon.
    """
    R = np.asarray(R, dtype=float).ravel()
    Rg = np.asarray(Rg, dtype=float).ravel()
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(Rg))):
        raise ContractViolation("rewards must be finite")

    if mode == "stationary":
        V = np.full(mdp.n_states, -np.inf)
        residual = math.inf
        q = None
        sweeps = 0
        for i in range(n_sweeps):
            q = _masked_q(R, Rg, V, mdp)
            v_new = _logsumexp_rows(q)
            residual = float(np.abs(v_new - V).max()) if i > 0 else math.inf
            V = v_new
            sweeps = i + 1
            if residual <= tol:
                break
        if residual > tol:
            warnings.warn(NonConvergenceWarning(residual, sweeps))
        pi = np.exp(q - V[:, None])
        pi[~np.isfinite(q)] = 0.0
        values = SoftValues(mode=mode, V=V, Q=q, residual=residual, sweeps=sweeps)
        return values, PolicyTable(mode=mode, pi=pi, horizon=mdp.horizon)

    if mode == "finite_horizon":
        h = mdp.horizon
        Vs = np.empty((h, mdp.n_states))
        Qs = np.full((h, mdp.n_states, N_ACTIONS), -np.inf)
        pis = np.zeros((h, mdp.n_states, N_ACTIONS))
        Vs[h - 1] = R + Rg
        Qs[h - 1, :, END] = R + Rg
        pis[h - 1, :, END] = 1.0
        for pos in range(h - 1, 0, -1):
            q = _masked_q(R, Rg, Vs[pos], mdp)
            Vs[pos - 1] = _logsumexp_rows(q)
            Qs[pos - 1] = q
            pi = np.exp(q - Vs[pos - 1][:, None])
            pi[~np.isfinite(q)] = 0.0
            pis[pos - 1] = pi
        values = SoftValues(mode=mode, V=Vs, Q=Qs, residual=0.0, sweeps=h)
        return values, PolicyTable(mode=mode, pi=pis, horizon=h)

    raise ContractViolation(f"unknown soft VI mode {mode!r}")


def enumerate_path_distribution(R: np.ndarray, Rg: np.ndarray, mdp: MdpSpec,
                                horizon: int, s_init: int) -> dict:
    """Exact plan distribution by exhaustive enumeration (test oracle).

    Returns {state tuple: probability}.  Every plan of length m <= horizon
    carries weight exp(sum of R over its states + Rg at its last state).
    Guarded to side <= 5 and horizon <= 6.
    """
    if mdp.side > 5 or horizon > 6:
        raise SizeGuardError(
            f"enumeration limited to side<=5, horizon<=6 "
            f"(got side={mdp.side}, horizon={horizon})")
    R = np.asarray(R, dtype=float).ravel()
    Rg = np.asarray(Rg, dtype=float).ravel()
    weights: dict[tuple, float] = {}

    def rec(s: int, pos: int, prefix: tuple, acc: float):
        acc = acc + R[s]
        prefix = prefix + (s,)
        weights[prefix] = acc + Rg[s]
        if pos < horizon:
            for a in range(N_MOVES):
                if mdp.valid[s, a]:
                    rec(mdp.transitions[s, a], pos + 1, prefix, acc)

    rec(s_init, 1, (), 0.0)
    vals = np.array(list(weights.values()))
    m = vals.max()
    z = m + math.log(np.exp(vals - m).sum())
    return {plan: math.exp(w - z) for plan, w in weights.items()}


def expected_svf(policy: PolicyTable, mdp: MdpSpec, s_init: int,
                 horizon: int | None = None) -> SvfTable:
    """Expected state-visitation frequencies by forward dynamic programming."""
    h = horizon or mdp.horizon
    n = mdp.n_states
    occupancy = np.zeros((h, n))
    end_mass = np.zeros(h)
    end_freq = np.zeros(n)
    d = np.zeros(n)
    d[s_init] = 1.0
    for pos in range(1, h + 1):
        pi = policy.at(pos)
        occupancy[pos - 1] = d
        ends = d * pi[:, END]
        end_mass[pos - 1] = ends.sum()
        end_freq += ends
        if pos < h:
            nxt = np.zeros(n)
            for a in range(N_MOVES):
                ok = mdp.valid[:, a]
                np.add.at(nxt, mdp.transitions[ok, a], d[ok] * pi[ok, a])
            d = nxt
    return SvfTable(occupancy=occupancy, mu=occupancy.sum(axis=0),
                    end_mass=end_mass, end_freq=end_freq)


def demo_svf(demos: list, mdp: MdpSpec) -> SvfTable:
    """Average visitation counts over demonstrations.

    A demonstration that ended contributes an end event at its final state;
    one that ran the full horizon ends there by exhaustion, which the
    finite-horizon model also counts as an end event.
    """
    if not demos:
        raise ContractViolation("demo_svf requires a non-empty demo list")
    h = mdp.horizon
    n = mdp.n_states
    occupancy = np.zeros((h, n))
    end_mass = np.zeros(h)
    end_freq = np.zeros(n)
    for demo in demos:
        if len(demo.states) > h:
            raise ContractViolation("demonstration longer than the horizon")
        for pos, s in enumerate(demo.states, start=1):
            occupancy[pos - 1, s] += 1.0
        last_pos = len(demo.states)
        if demo.ended or last_pos == h:
            end_mass[last_pos - 1] += 1.0
            end_freq[demo.states[-1]] += 1.0
    k = float(len(demos))
    return SvfTable(occupancy=occupancy / k, mu=occupancy.sum(axis=0) / k,
                    end_mass=end_mass / k, end_freq=end_freq / k)


def irl_gradient(mu_demo: SvfTable, mu_policy: SvfTable) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the demo log-likelihood w.r.t. (R, Rg): visitation gaps."""
    if mu_demo.mu.shape != mu_policy.mu.shape:
        raise ContractViolation("SVF tables have mismatched shapes")
    return (mu_demo.mu - mu_policy.mu, mu_demo.end_freq - mu_policy.end_freq)


def log_likelihood(demos: list, policy: PolicyTable, mdp: MdpSpec) -> float:
    """Mean over demos of the summed log-probability of their actions."""
    if not demos:
        raise ContractViolation("log_likelihood requires a non-empty demo list")
    total = 0.0
    for di, demo in enumerate(demos):
        ll = 0.0
        for pos, (a, b) in enumerate(zip(demo.states, demo.states[1:]), start=1):
            act = mdp.action_between(a, b)
            if act is None:
                raise ContractViolation(
                    f"demo {di} step {pos}: {a} -> {b} is not a valid action")
            p = policy.at(pos)[a, act]
            ll += math.log(p) if p > 0 else -math.inf
        last_pos = len(demo.states)
        if demo.ended or (policy.mode == "finite_horizon" and last_pos == policy.horizon):
            p = policy.at(last_pos)[demo.states[-1], END]
            ll += math.log(p) if p > 0 else -math.inf
        total += ll
    return total / len(demos)
