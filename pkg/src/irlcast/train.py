"""Two-phase training: reward learning first, refinement second."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .bezier import time_parameterize
from .config import RunConfig
from .features import prepare_scene
from .gridmap import TrainingDivergedError
from .irl import (MdpSpec, NonConvergenceWarning, demo_svf, expected_svf,
                  irl_gradient, log_likelihood, soft_value_iteration)
from .models import Stage1Model, Stage2Model
from .nnops import Tape, make_optimizer
from .pipeline import Predictor, estimate_speed
from .refine import gather_fine_features, loss_nodes, refine_forward
from .sampler import cluster, plan_feature, plan_to_polyline, sample_plans, state_embedding
from .scene import GridSpec, Scenario, quantize_future, to_target_frame


def _epoch_lr(base: float, epoch: int, cfg: RunConfig) -> float:
    """Linear warmup to the base rate, then per-epoch exponential decay."""
    if epoch <= cfg.warmup_epochs:
        return base * epoch / (cfg.warmup_epochs + 1)
    return base * cfg.lr_decay ** (epoch - cfg.warmup_epochs - 1)


def _snapshot(store, optimizer):
    tensors = {k: v.copy() for k, v in store.tensors.items()}
    opt_state = None
    if hasattr(optimizer, "m"):
        opt_state = ({k: v.copy() for k, v in optimizer.m.items()},
                     {k: v.copy() for k, v in optimizer.v.items()},
                     optimizer.t)
    return tensors, opt_state


def _restore(store, optimizer, snap) -> None:
    tensors, opt_state = snap
    for k, v in tensors.items():
        store.tensors[k][...] = v
    if opt_state is not None:
        m, v_, t = opt_state
        optimizer.m = {k: val.copy() for k, val in m.items()}
        optimizer.v = {k: val.copy() for k, val in v_.items()}
        optimizer.t = t


def _write_csv(path: str, columns: tuple, rows: list) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass
class PreparedScenario:
    scenario: Scenario       # normalized
    encoding: object
    demo: object
    s_init: int


def prepare_corpus(scenarios: list, cfg: RunConfig) -> list:
    coarse = GridSpec(cfg.coarse_side, cfg.coarse_resolution())
    s_init = coarse.flat(*coarse.cell_of(0.0, 0.0))
    prepared = []
    for scenario in scenarios:
        norm = to_target_frame(scenario)
        if norm.gt_future is None:
            raise ValueError(f"scenario {scenario.id!r} has no gt_future")
        pts = np.vstack([[0.0, 0.0], norm.gt_future[:, 1:3]])
        demo = quantize_future(pts, coarse, cfg.horizon)
        prepared.append(PreparedScenario(
            scenario=norm, encoding=prepare_scene(norm, cfg), demo=demo,
            s_init=s_init))
    return prepared


IRL_LOG_COLUMNS = ("epoch", "mean_nll", "grad_norm", "wall_ms")


def _corpus_nll(model: Stage1Model, prepared: list, mdp: MdpSpec,
                cfg: RunConfig) -> float:
    total = 0.0
    for item in prepared:
        fwd = model.forward(item.encoding)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergenceWarning)
            _, policy = soft_value_iteration(
                fwd.reward.transient.ravel(), fwd.reward.terminal.ravel(),
                mdp, mode=cfg.vi_mode, n_sweeps=cfg.vi_sweeps, tol=cfg.vi_tol)
        total += -log_likelihood([item.demo], policy, mdp)
    return total / len(prepared)


def train_irl(scenarios: list, cfg: RunConfig, checkpoint_path: str | None = None,
              log_path: str | None = None,
              model: Stage1Model | None = None) -> tuple[Stage1Model, list]:
    """Stage-1 reward learning by maximum-entropy gradient matching.

    Per scenario: encode, adapt to the grid, infer rewards, run soft value
    iteration, and push the demo-vs-policy visitation gap back through the
    reward head.  Deterministic given (corpus, config).  The log holds one
    pre-training row (epoch 0) and one row per epoch, each evaluated on the
    whole corpus after that epoch's updates.
    """
    model = model or Stage1Model(cfg)
    mdp = MdpSpec(side=cfg.coarse_side, horizon=cfg.horizon)
    prepared = prepare_corpus(scenarios, cfg)
    optimizer = make_optimizer(cfg.optimizer, cfg.irl_lr)
    order_rng = np.random.default_rng([cfg.seed, 0x1A1])

    rows = [(0, _corpus_nll(model, prepared, mdp, cfg), 0.0, 0.0)]
    last_nll = rows[0][1]
    rejected_streak = 0
    lr_scale = 1.0
    for epoch in range(1, cfg.irl_epochs + 1):
        t0 = time.perf_counter()
        optimizer.lr = _epoch_lr(cfg.irl_lr, epoch, cfg) * lr_scale
        snap = _snapshot(model.store, optimizer)
        order = order_rng.permutation(len(prepared))
        grad_norm_acc = 0.0
        for start in range(0, len(order), cfg.irl_batch):
            batch = sorted(order[start:start + cfg.irl_batch])
            model.store.zero_grads()
            for idx in batch:
                item = prepared[idx]
                fwd = model.forward(item.encoding)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", NonConvergenceWarning)
                    _, policy = soft_value_iteration(
                        fwd.reward.transient.ravel(),
                        fwd.reward.terminal.ravel(), mdp,
                        mode=cfg.vi_mode, n_sweeps=cfg.vi_sweeps, tol=cfg.vi_tol)
                mu_policy = expected_svf(policy, mdp, item.s_init)
                mu_demo = demo_svf([item.demo], mdp)
                d_r, d_rg = irl_gradient(mu_demo, mu_policy)
                # minimize the NLL: descend on -(demo - policy) gaps
                model.backward_from_reward_grads(fwd, -d_r, -d_rg)
            for g in model.store.grads.values():
                g /= len(batch)
            grad_norm_acc += model.store.grad_norm()
            if cfg.irl_lr != 0.0:
                optimizer.step(model.store)
        mean_nll = _corpus_nll(model, prepared, mdp, cfg)
        if mean_nll > last_nll and cfg.irl_lr != 0.0:
            # epoch-level backtracking: reject the step, retry smaller
            _restore(model.store, optimizer, snap)
            lr_scale *= 0.5
            rejected_streak += 1
            if rejected_streak >= 10:
                raise TrainingDivergedError(
                    f"mean NLL rose for {rejected_streak} consecutive epochs "
                    f"(epoch {epoch}, nll {mean_nll:.4f}, best {last_nll:.4f})")
            mean_nll = last_nll
        else:
            rejected_streak = 0
        last_nll = mean_nll
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_timing else 0.0
        rows.append((epoch, mean_nll, float(grad_norm_acc), wall))
    if checkpoint_path:
        model.save(checkpoint_path)
    if log_path:
        _write_csv(log_path, IRL_LOG_COLUMNS, rows)
    return model, rows


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class RefineSample:
    proposals: np.ndarray       # (K', t_f, 2)
    complete: np.ndarray        # (K', t_p + t_f, 2) observed + proposal
    pooled_h0: np.ndarray       # constant stage-1 context per mode is built
    coarse: np.ndarray          # (cells, F_c)
    reward: np.ndarray          # (side, side)
    fine: np.ndarray
    h0: np.ndarray
    rep_states: list            # per-mode representative plan states
    p_mcmc: np.ndarray
    gt: np.ndarray              # (t_f, 2)
    grid: GridSpec


def prepare_refine_samples(scenarios: list, stage1: Stage1Model,
                           cfg: RunConfig) -> list:
    """Frozen stage-1 artifacts per scenario: proposals, contexts, targets.

    Each scenario contributes `refine_sample_draws` independent rollout
    batches so the refiner sees a wider spread of proposal/target pairs.
    """
    mdp = MdpSpec(side=cfg.coarse_side, horizon=cfg.horizon)
    coarse_grid = GridSpec(cfg.coarse_side, cfg.coarse_resolution())
    s_init = coarse_grid.flat(*coarse_grid.cell_of(0.0, 0.0))
    samples = []
    for scenario in scenarios:
        norm = to_target_frame(scenario)
        if norm.gt_future is None:
            raise ValueError(f"scenario {scenario.id!r} has no gt_future")
        enc = prepare_scene(norm, cfg)
        fwd = stage1.forward(enc)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergenceWarning)
            _, policy = soft_value_iteration(
                fwd.reward.transient.ravel(), fwd.reward.terminal.ravel(),
                mdp, mode=cfg.vi_mode, n_sweeps=cfg.vi_sweeps, tol=cfg.vi_tol)
        v0 = estimate_speed(norm, cfg.dt)
        hist = norm.target().track[:, 1:3]
        for draw in range(max(1, cfg.refine_sample_draws)):
            seed = cfg.seed if draw == 0 else int(
                np.random.default_rng([cfg.seed, 0xD4A, draw]).integers(2 ** 31))
            batch = sample_plans(policy, mdp, s_init, cfg.oversample, seed)
            trajs = [time_parameterize(plan_to_polyline(p, coarse_grid), v0,
                                       cfg.t_f, cfg.dt) for p in batch.plans]
            clusters = cluster(trajs, cfg.modes, seed, degree=cfg.bezier_degree)
            proposals = np.stack([r.positions for r in clusters.representatives])
            complete = np.stack([np.vstack([hist, proposals[j]])
                                 for j in range(proposals.shape[0])])
            samples.append(RefineSample(
                proposals=proposals, complete=complete, pooled_h0=fwd.h0,
                coarse=fwd.coarse, reward=fwd.reward.transient, fine=fwd.fine,
                h0=fwd.h0,
                rep_states=[batch.plans[i].states
                            for i in clusters.representative_plans],
                p_mcmc=clusters.p_mcmc, gt=norm.gt_future[:, 1:3].copy(),
                grid=norm.grid))
    return samples


REFINE_LOG_COLUMNS = ("step", "reg_p", "reg_t", "reg_g", "cls", "total")


def _refine_loss(model: Stage2Model, sample: RefineSample, cfg: RunConfig):
    t = Tape()
    contexts, plan_feats = [], []
    for j in range(sample.proposals.shape[0]):
        contexts.append(gather_fine_features(
            t, model.store, sample.complete[j], sample.fine, sample.grid,
            sample.h0))
        emb = state_embedding(t, model.store, sample.rep_states[j],
                              sample.coarse, sample.reward, cfg.coarse_side)
        plan_feats.append(plan_feature(t, emb))
    traj, p_cls = refine_forward(t, model, t.concat(contexts, axis=0),
                                 t.concat(plan_feats, axis=0), sample.proposals)
    total, report = loss_nodes(t, traj, p_cls, sample.proposals, sample.gt,
                               cfg.hinge_margin)
    return t, total, report


def _refine_corpus_loss(model: Stage2Model, samples: list, cfg: RunConfig) -> float:
    total = 0.0
    for sample in samples:
        _, node, _ = _refine_loss(model, sample, cfg)
        total += float(node.value)
    return total / len(samples)


def train_refiner(scenarios: list, stage1: Stage1Model, cfg: RunConfig,
                  checkpoint_path: str | None = None,
                  log_path: str | None = None,
                  model: Stage2Model | None = None,
                  samples: list | None = None) -> tuple[Stage2Model, list]:
    """Stage-2 training of the refinement and classification heads.

    Uses the same epoch-level backtracking as stage 1: an epoch that raises
    the corpus-mean loss is rejected and retried at half the rate; ten
    consecutive rejections abort as divergence.
    """
    model = model or Stage2Model(cfg)
    if samples is None:
        samples = prepare_refine_samples(scenarios, stage1, cfg)
    optimizer = make_optimizer(cfg.optimizer, cfg.refine_lr,
                               weight_decay=cfg.refine_weight_decay)
    order_rng = np.random.default_rng([cfg.seed, 0x2B2])

    rows = []
    step = 0
    last_loss = _refine_corpus_loss(model, samples, cfg)
    lr_scale = 1.0
    rejected_streak = 0
    for epoch in range(1, cfg.refine_epochs + 1):
        optimizer.lr = _epoch_lr(cfg.refine_lr, epoch, cfg) * lr_scale
        snap = _snapshot(model.store, optimizer)
        order = order_rng.permutation(len(samples))
        epoch_rows = []
        for start in range(0, len(order), cfg.refine_batch):
            batch = sorted(order[start:start + cfg.refine_batch])
            model.store.zero_grads()
            agg = np.zeros(5)
            for idx in batch:
                tape, total, rep = _refine_loss(model, samples[idx], cfg)
                tape.backward(total)
                agg += (rep.reg_proposal, rep.reg_trajectory, rep.reg_goal,
                        rep.cls, rep.total)
            for g in model.store.grads.values():
                g /= len(batch)
            if cfg.refine_lr != 0.0:
                optimizer.step(model.store)
            agg /= len(batch)
            epoch_rows.append((step, *[float(v) for v in agg]))
            step += 1
        mean_loss = _refine_corpus_loss(model, samples, cfg)
        if mean_loss > last_loss and cfg.refine_lr != 0.0:
            _restore(model.store, optimizer, snap)
            lr_scale *= 0.5
            rejected_streak += 1
            step -= len(epoch_rows)
            if rejected_streak >= 10:
                raise TrainingDivergedError(
                    f"refine loss rose for {rejected_streak} consecutive "
                    f"epochs (epoch {epoch}, loss {mean_loss:.4f}, "
                    f"best {last_loss:.4f})")
            continue
        rejected_streak = 0
        last_loss = mean_loss
        rows.extend(epoch_rows)
    if checkpoint_path:
        model.save(checkpoint_path)
    if log_path:
        _write_csv(log_path, REFINE_LOG_COLUMNS, rows)
    return model, rows


def build_predictor(stage1: Stage1Model, stage2: Stage2Model,
                    cfg: RunConfig) -> Predictor:
    return Predictor(cfg, stage1, stage2)
