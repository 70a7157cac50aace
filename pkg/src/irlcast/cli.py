"""Command-line entry point: generation, training, prediction, evaluation,
rendering, masking, the what-if service, and benchmarking."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from .config import ConfigError, RunConfig, config_from_dict, dump_config, load_config
from .covariate import covariate_shift_report
from .metrics import evaluate_corpus
from .models import Stage1Model, Stage2Model
from .pipeline import Predictor, decimate_plans
from .render import render_scenario
from .scene import (GeneratorParams, KINDS, Scenario, generate_scenario,
                    load_scenario, save_scenario)
from .train import train_irl, train_refiner


class CliError(RuntimeError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for name in ("seed", "irl_epochs", "irl_lr", "refine_epochs", "refine_lr",
                 "oversample", "modes", "vi_mode"):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "record_timing", False):
        overrides["record_timing"] = True
    if overrides:
        merged = dataclasses.asdict(cfg)
        merged.update(overrides)
        cfg = config_from_dict(merged)
    return cfg.validate()


def _log_provenance(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    dump_config(cfg, os.path.join(out_dir, "run_config.json"))


def _load_corpus(path: str) -> list:
    if os.path.isdir(path):
        files = sorted(f for f in os.listdir(path)
                       if f.endswith(".json") and f != "run_config.json")
        if not files:
            raise CliError("empty-corpus", f"no scenario files in {path!r}")
        return [load_scenario(os.path.join(path, f)) for f in files]
    return [load_scenario(path)]


def _predictor(args, cfg: RunConfig) -> Predictor:
    if not os.path.exists(args.stage1):
        raise CliError("missing-checkpoint", f"stage-1 checkpoint {args.stage1!r} not found")
    if not os.path.exists(args.stage2):
        raise CliError("missing-checkpoint", f"stage-2 checkpoint {args.stage2!r} not found")
    return Predictor.load(cfg, args.stage1, args.stage2)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    if args.kind not in KINDS:
        raise CliError("bad-kind", f"unknown kind {args.kind!r}; expected one of {KINDS}")
    params = GeneratorParams(block_prob=args.block_prob,
                             noise_sigma=args.noise_sigma)
    os.makedirs(args.out, exist_ok=True)
    _log_provenance(cfg, args.out)
    for i in range(args.count):
        scenario = generate_scenario(args.kind, params, seed=args.seed + i)
        save_scenario(scenario, os.path.join(
            args.out, f"{scenario.id}.json"))
    print(f"wrote {args.count} scenarios to {args.out}")
    return 0


def cmd_train_irl(args) -> int:
    cfg = _resolve_config(args)
    corpus = _load_corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    _log_provenance(cfg, args.out)
    ckpt = os.path.join(args.out, "stage1.json")
    log = os.path.join(args.out, "irl_log.csv")
    _, rows = train_irl(corpus, cfg, checkpoint_path=ckpt, log_path=log)
    print(f"stage-1 checkpoint: {ckpt}; nll {rows[0][1]:.3f} -> {rows[-1][1]:.3f}")
    return 0


def cmd_train_refine(args) -> int:
    cfg = _resolve_config(args)
    corpus = _load_corpus(args.corpus)
    stage1 = Stage1Model.load(args.stage1, cfg)
    os.makedirs(args.out, exist_ok=True)
    _log_provenance(cfg, args.out)
    ckpt = os.path.join(args.out, "stage2.json")
    log = os.path.join(args.out, "refine_log.csv")
    _, rows = train_refiner(corpus, stage1, cfg, checkpoint_path=ckpt, log_path=log)
    print(f"stage-2 checkpoint: {ckpt}; loss {rows[0][5]:.3f} -> {rows[-1][5]:.3f}")
    return 0


def prediction_payload(pred, cfg: RunConfig, seed: int,
                       full_plans: bool = False) -> dict:
    plans = list(pred.plans) if full_plans else decimate_plans(
        pred.plans, cfg.plan_payload_limit, seed)
    side = cfg.coarse_side
    return {
        "scenario_id": pred.scenario_id,
        "k": int(pred.trajectories.shape[0]),
        "k_requested": pred.k_requested,
        "collapsed": pred.collapsed,
        "trajectories": pred.trajectories.tolist(),
        "proposals": pred.proposals.tolist(),
        "probabilities": pred.probabilities.tolist(),
        "p_cls": pred.p_cls.tolist(),
        "p_mcmc": pred.p_mcmc.tolist(),
        "curves": [c.tolist() for c in pred.curves],
        "reward": pred.reward.tolist(),
        "terminal": pred.terminal.tolist(),
        "svf": pred.svf.tolist(),
        "plans": [{"cells": [list(divmod(s, side)) for s in p.states],
                   "log_prob": p.log_prob, "ended": p.ended} for p in plans],
        "decimated": not full_plans and len(plans) < len(pred.plans),
        "grid": {"coarse_side": side,
                 "coarse_resolution": cfg.coarse_resolution(),
                 "fine_side": cfg.fine_side,
                 "fine_resolution": cfg.fine_resolution},
        "v0": pred.v0,
        "seed": seed,
        "timing_ms": pred.timing_ms,
    }


def cmd_predict(args) -> int:
    cfg = _resolve_config(args)
    scenario = load_scenario(args.scenario)
    predictor = _predictor(args, cfg)
    pred = predictor.predict(scenario, seed=args.seed if args.seed is not None else cfg.seed)
    payload = prediction_payload(pred, cfg, args.seed or cfg.seed,
                                 full_plans=args.full_plans)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")
    print(f"wrote predictions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    corpus = _load_corpus(args.corpus)
    predictor = _predictor(args, cfg)
    report = evaluate_corpus(predictor, corpus, k=args.K or cfg.modes,
                             seed=args.seed if args.seed is not None else cfg.seed,
                             csv_path=args.out,
                             record_timing=cfg.record_timing)
    summary = report.summary()
    print(f"evaluated {summary['count']} scenarios (skipped {summary['skipped']}): "
          f"minADE={summary['minADE']:.4f} minFDE={summary['minFDE']:.4f} "
          f"MR={summary['MR']:.4f} brier_minFDE={summary['brier_minFDE']:.4f}")
    return 0


def cmd_render(args) -> int:
    cfg = _resolve_config(args)
    scenario = load_scenario(args.scenario)
    pred = None
    if args.stage1 and args.stage2:
        predictor = _predictor(args, cfg)
        pred = predictor.predict(scenario, seed=args.seed if args.seed is not None else cfg.seed)
    render_scenario(scenario, pred, svg_path=args.out,
                    png_path=args.png)
    print(f"wrote {args.out}")
    return 0


def _parse_cells(spec: str) -> list:
    cells = []
    for token in spec.split(";"):
        token = token.strip()
        if not token:
            continue
        parts = token.split(",")
        if len(parts) != 2:
            raise CliError("bad-cells", f"cell {token!r} is not 'row,col'")
        try:
            cells.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise CliError("bad-cells", f"cell {token!r} is not integer 'row,col'") from exc
    if not cells:
        raise CliError("bad-cells", "no cells given")
    return cells


def cmd_mask(args) -> int:
    scenario = load_scenario(args.scenario)
    cells = _parse_cells(args.cells)
    mask = scenario.drivable_mask.copy()
    for r, c in cells:
        if not (0 <= r < scenario.grid_side and 0 <= c < scenario.grid_side):
            raise CliError("cell-out-of-range", f"cell ({r},{c}) outside the grid")
        mask[r, c] = False
    masked = Scenario(id=scenario.id, lanes=scenario.lanes, drivable_mask=mask,
                      agents=scenario.agents, gt_future=scenario.gt_future,
                      mode_label=scenario.mode_label,
                      resolution_m=scenario.resolution_m,
                      grid_side=scenario.grid_side,
                      metadata={**scenario.metadata,
                                "masked_cells": [list(c) for c in cells]})
    save_scenario(masked, args.out)
    print(f"wrote masked scenario to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = _resolve_config(args)
    app = create_app(args.corpus, args.stage1, args.stage2, cfg)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_bench(args) -> int:
    from .features import prepare_scene
    from .irl import MdpSpec, expected_svf, soft_value_iteration
    from .sampler import sample_plans
    from .scene import to_target_frame

    cfg = _resolve_config(args)
    scenario = load_scenario(args.scenario)
    predictor = _predictor(args, cfg)
    norm = to_target_frame(scenario)
    enc = prepare_scene(norm, cfg)
    mdp = MdpSpec(side=cfg.coarse_side, horizon=cfg.horizon)
    import warnings

    from .irl import NonConvergenceWarning

    rows = []

    def timed(name, fn, repeat=args.repeat):
        best = float("inf")
        out = None
        for _ in range(repeat):
            t0 = time.perf_counter()
            out = fn()
            best = min(best, (time.perf_counter() - t0) * 1000.0)
        rows.append((name, best))
        return out

    fwd = timed("stage1_forward", lambda: predictor.stage1.forward(enc))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        _, policy = timed("soft_value_iteration", lambda: soft_value_iteration(
            fwd.reward.transient.ravel(), fwd.reward.terminal.ravel(), mdp,
            mode=cfg.vi_mode, n_sweeps=cfg.vi_sweeps, tol=cfg.vi_tol))
    grid = predictor.coarse_grid()
    s_init = grid.flat(*grid.cell_of(0.0, 0.0))
    timed("expected_svf", lambda: expected_svf(policy, mdp, s_init))
    timed("sample_plans", lambda: sample_plans(policy, mdp, s_init,
                                               cfg.oversample, cfg.seed))
    timed("full_predict", lambda: predictor.predict(scenario, seed=cfg.seed),
          repeat=max(1, args.repeat // 2))
    width = max(len(r[0]) for r in rows)
    print(f"{'stage':<{width}}  best_ms")
    for name, ms in rows:
        print(f"{name:<{width}}  {ms:8.2f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irlcast",
        description="Grid MaxEnt-IRL multimodal trajectory forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file (flags override)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--record-timing", action="store_true",
                       help="fill wall_ms/timing fields with measured times "
                            "(makes outputs non byte-stable)")

    p = sub.add_parser("gen", help="generate a synthetic scenario corpus")
    common(p)
    p.add_argument("--kind", required=True,
                   help="one of: " + ", ".join(KINDS))
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--block-prob", type=float, default=0.3)
    p.add_argument("--noise-sigma", type=float, default=0.15)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train-irl", help="stage-1 reward learning")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--irl-epochs", type=int, dest="irl_epochs")
    p.add_argument("--irl-lr", type=float, dest="irl_lr")
    p.add_argument("--vi-mode", dest="vi_mode", choices=("stationary", "finite_horizon"))
    p.set_defaults(fn=cmd_train_irl)

    p = sub.add_parser("train-refine", help="stage-2 refinement training")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--refine-epochs", type=int, dest="refine_epochs")
    p.add_argument("--refine-lr", type=float, dest="refine_lr")
    p.set_defaults(fn=cmd_train_refine)

    p = sub.add_parser("predict", help="run the full pipeline on one scenario")
    common(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--full-plans", action="store_true")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="metric report over a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-K", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="layered SVG of a scenario (+prediction)")
    common(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--stage1")
    p.add_argument("--stage2")
    p.add_argument("--out", required=True)
    p.add_argument("--png", help="also write a PNG")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("mask", help="copy a scenario with cells set undrivable")
    p.add_argument("--scenario", required=True)
    p.add_argument("--cells", required=True,
                   help="semicolon-separated row,col pairs, e.g. '12,13;12,14'")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_mask)

    p = sub.add_parser("serve", help="run the what-if HTTP service")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("bench", help="timing table for the heavy stages")
    common(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--repeat", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, OSError, ValueError) as exc:
        code = getattr(exc, "code", exc.__class__.__name__)
        line = json.dumps({"error": str(code), "message": str(exc)})
        print(line, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
