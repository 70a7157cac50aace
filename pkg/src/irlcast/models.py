"""Stage-1 (reward) and stage-2 (refinement) model wiring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig, Widths, config_from_dict
from .features import (SceneEncoding, encode_agent_history, encode_drivable,
                       encode_lane_nodes, fuse_features, init_stage1_params,
                       lane_conv, stage1_shapes)
from .gridmap import RewardMaps, assign_to_grid, downsample, reward_head, reward_maps_from_nodes
from .nnops import (ParamStore, Tape, init_linear, init_mlp, linear,
                    load_checkpoint, mlp, save_checkpoint)


@dataclass
class Stage1Forward:
    tape: Tape
    r: object            # (S,) tape node, transient reward
    rg: object           # (S,) tape node, terminal reward
    h0: np.ndarray       # target agent feature after fusion
    fine: np.ndarray     # (side, side, F_d) fine feature grid
    coarse: np.ndarray   # (cells, F_c)
    reward: RewardMaps


class Stage1Model:
    def __init__(self, cfg: RunConfig, store: ParamStore | None = None,
                 seed: int | None = None):
        self.cfg = cfg
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(cfg.seed if seed is None else seed)
            init_stage1_params(store, cfg, rng)
        self.store = store

    def forward(self, enc: SceneEncoding) -> Stage1Forward:
        t = Tape()
        cfg = self.cfg
        u = encode_lane_nodes(t, self.store, enc)
        c_l = lane_conv(t, self.store, "lane.conv", u, enc, cfg.lane_dilations)
        c_d = encode_drivable(t, self.store, enc)
        c_a = encode_agent_history(t, self.store, enc)
        c_a, c_l, c_d = fuse_features(t, self.store, enc, c_a, c_l, c_d,
                                      cfg.lane_dilations)
        fine = assign_to_grid(t, c_d, enc.assign_idx, enc.assign_valid,
                              cfg.fine_side)
        coarse = downsample(t, self.store, fine)
        r, rg = reward_head(t, self.store, coarse, cfg.r_min, cfg.terminal_cap)
        reward = reward_maps_from_nodes(r, rg, cfg.coarse_side, cfg.r_min)
        return Stage1Forward(tape=t, r=r, rg=rg,
                             h0=c_a.value[0].copy(),
                             fine=fine.value.copy(),
                             coarse=coarse.value.copy(),
                             reward=reward)

    def backward_from_reward_grads(self, fwd: Stage1Forward,
                                   d_r: np.ndarray, d_rg: np.ndarray) -> None:
        """Chain externally supplied dLoss/d(R, Rg) into parameter grads."""
        t = fwd.tape
        pseudo = t.add(t.sum_all(t.mul(fwd.r, t.const(d_r.ravel()))),
                       t.sum_all(t.mul(fwd.rg, t.const(d_rg.ravel()))))
        t.backward(pseudo)

    def save(self, path: str) -> None:
        save_checkpoint(path, self.store, widths=self.cfg.widths.as_dict(),
                        extra={"stage": 1})

    @classmethod
    def load(cls, path: str, cfg: RunConfig) -> "Stage1Model":
        expected = {k: v for k, v in stage1_shapes(cfg).items()}
        store, _, _ = load_checkpoint(path, expected_shapes=expected)
        return cls(cfg, store=store)


# ---------------------------------------------------------------------------
# stage 2


def init_stage2_params(store: ParamStore, cfg: RunConfig,
                       rng: np.random.Generator) -> None:
    w = cfg.widths
    init_mlp(store, "embed.f1", [w.coarse, w.embed_ctx, w.embed_ctx], rng)
    init_mlp(store, "embed.f2", [1, w.embed_reward, w.embed_reward], rng)
    init_mlp(store, "embed.f3", [2, w.embed_coord, w.embed_coord], rng)
    loc_in = (cfg.t_p + cfg.t_f) * 2
    init_mlp(store, "refine.loc", [loc_in, w.location, w.location], rng)
    z_dim = w.drivable + w.agent + w.location
    init_linear(store, "refine.proj", z_dim, w.refine, rng)
    for i in (1, 2):
        init_mlp(store, f"refine.res{i}", [w.refine, w.refine, w.refine], rng)
    # the regression head carries no bias: a bias term can only express a
    # mode-independent shift, which is direction-wrong for turning modes
    # and absorbs the gradient that should train the context weights
    store.add("refine.reg.W", np.zeros((w.refine, 2 * cfg.t_f)))
    plan_dim = 3 * (w.embed_ctx + w.embed_reward + w.embed_coord)
    init_linear(store, "refine.cls", w.refine + plan_dim, 1, rng, zero=True)


def stage2_shapes(cfg: RunConfig) -> dict:
    probe = ParamStore()
    init_stage2_params(probe, cfg, np.random.default_rng(0))
    return {name: probe.get(name).shape for name in probe.names()}


class Stage2Model:
    def __init__(self, cfg: RunConfig, store: ParamStore | None = None,
                 seed: int | None = None):
        self.cfg = cfg
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng((cfg.seed if seed is None else seed) + 1)
            init_stage2_params(store, cfg, rng)
        self.store = store

    def trunk(self, t: Tape, z):
        """Projection plus two residual perceptron blocks."""
        h = t.relu(linear(t, z, self.store, "refine.proj"))
        for i in (1, 2):
            h = t.add(h, mlp(t, h, self.store, f"refine.res{i}"))
        return h

    def heads(self, t: Tape, h, plan_feats):
        """Regression offsets (K, 2*t_f) and classification logits (K,)."""
        offsets = t.matmul(h, t.param(self.store, "refine.reg.W"))
        logits = t.col(linear(t, t.concat([h, plan_feats], axis=1),
                              self.store, "refine.cls"), 0)
        return offsets, logits

    def save(self, path: str) -> None:
        save_checkpoint(path, self.store, widths=self.cfg.widths.as_dict(),
                        extra={"stage": 2})

    @classmethod
    def load(cls, path: str, cfg: RunConfig) -> "Stage2Model":
        store, _, _ = load_checkpoint(path, expected_shapes=stage2_shapes(cfg))
        return cls(cfg, store=store)
