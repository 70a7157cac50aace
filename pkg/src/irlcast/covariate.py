"""Drivable-area-change harness: block a junction arm, re-predict, and
measure how much plan and probability mass abandons the blocked region."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pipeline import Predictor, coarse_cells_of_fine
from .scene import Scenario


@dataclass
class ShiftReport:
    scenario_id: str
    blocked_mode: str
    blocked_fraction_before: float   # plans entering blocked cells, unblocked run
    blocked_fraction_after: float    # same at the same seed, arm blocked
    mass_before: float               # fused probability on modes ending in the region
    mass_after: float


def _plan_fraction_in(plans, blocked_coarse: set, side: int) -> float:
    if not plans:
        return 0.0
    hits = 0
    for plan in plans:
        cells = {divmod(s, side) for s in plan.states}
        if cells & blocked_coarse:
            hits += 1
    return hits / len(plans)


def _endpoint_mass(prediction, blocked_coarse: set) -> float:
    mass = 0.0
    for j, cell in enumerate(prediction.mode_endpoint_cells):
        if tuple(cell) in blocked_coarse:
            mass += float(prediction.probabilities[j])
    return mass


def blocked_region(scenario: Scenario, fine_cells: list, cfg) -> set:
    """Coarse cells whose drivable area is entirely removed by the blockage.

    A coarse cell straddling the junction keeps drivable fine cells of the
    surviving arms, so it stays enterable and is not part of the region.
    """
    factor = cfg.fine_side // cfg.coarse_side
    mask = scenario.drivable_mask
    remaining = mask.copy()
    for r, c in fine_cells:
        remaining[r, c] = False
    region = set()
    for r, c in fine_cells:
        if not mask[r, c]:
            continue
        cr, cc = r // factor, c // factor
        block = remaining[cr * factor:(cr + 1) * factor,
                          cc * factor:(cc + 1) * factor]
        if not block.any():
            region.add((cr, cc))
    return region


def pick_arm_to_block(prediction, scenario: Scenario,
                      cfg) -> tuple[str, list, set]:
    """Choose the feasible arm carrying the most unblocked probability mass.

    Returns (mode name, blocked fine cells, blocked coarse region).  Ties
    and the all-zero case fall back to the first feasible arm.
    """
    mode_cells = scenario.metadata["mode_cells"]
    feasible = scenario.metadata["feasible_modes"]
    best, best_mass = None, -1.0
    for mode in feasible:
        cells = [tuple(c) for c in mode_cells[mode]]
        mass = _endpoint_mass(prediction, blocked_region(scenario, cells, cfg))
        if mass > best_mass:
            best, best_mass = mode, mass
    cells = [tuple(c) for c in mode_cells[best]]
    return best, cells, blocked_region(scenario, cells, cfg)


def covariate_shift_report(predictor: Predictor, scenario: Scenario,
                           seed: int) -> ShiftReport:
    """Block the dominant arm of a junction scenario and re-predict."""
    before = predictor.predict(scenario, seed=seed)
    mode, fine_cells, coarse_cells = pick_arm_to_block(
        before, scenario, predictor.cfg)
    after = predictor.predict(scenario, seed=seed, blocked_cells=fine_cells)
    side = predictor.cfg.coarse_side
    return ShiftReport(
        scenario_id=scenario.id,
        blocked_mode=mode,
        blocked_fraction_before=_plan_fraction_in(before.plans, coarse_cells, side),
        blocked_fraction_after=_plan_fraction_in(after.plans, coarse_cells, side),
        mass_before=_endpoint_mass(before, coarse_cells),
        mass_after=_endpoint_mass(after, coarse_cells),
    )
