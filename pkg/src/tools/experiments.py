"""Simulation and ablation MCP tools."""
from typing import Any, Dict, List, Optional

from ..config import mcp
from ..errors import DegenerateSampleError
from ..pipeline import ExperimentConfig, Variant, run_ablation_suite, simulate
from ..qwbe import QwbeParams
from ..simulator import fixture_names, load_landscape
from ..stats import ablation_summary, paired_fsp_test


def _config(fixture: str, seed: int, variant: str, dataset_id: str) -> ExperimentConfig:
    if fixture not in fixture_names():
        raise ValueError(f"Unknown landscape {fixture!r}; available: {', '.join(fixture_names())}")
    landscape = load_landscape(fixture)
    return ExperimentConfig(
        dataset_id=dataset_id,
        proposal_ids=tuple(landscape.proposal_ids),
        qwbe_params=QwbeParams(proposal_budget=max(3, len(landscape.proposal_ids))),
        seed=seed,
        variant=Variant(variant),
        landscape=landscape,
    )


@mcp.tool()
def run_simulation(
    fixture: str = "one_good_arm",
    seed: int = 0,
    variant: str = "full",
    dataset_id: str = "synthetic",
) -> Dict[str, Any]:
    """
    Run one research loop against a bundled synthetic landscape.

    Parameters:
    -----------
    fixture : str
        Landscape name. Bundled: one_good_arm, all_bad_arms, multi_cause_failure, dataset16_like.
    seed : int
        Run seed; the same seed always reproduces the same run.
    variant : str
        full, minus_qwbe, minus_lrm or minus_ddf.

    Returns:
    --------
    Dict[str, Any]
        The run's summary row (win, fsp, nodes, best_dice, best_hd95, delta_dice)
        plus the cycle digests and, for a winning run, the evidence bundle.

    Example Usage:
    --------------
        "Simulate the one-good-arm landscape with seed 3"
        "Does the run without divergent feedback still win on multi_cause_failure?"
    """
    record = simulate(_config(fixture, seed, variant, dataset_id))
    result = record.summary_row()
    result["baseline"] = record.baseline_name
    result["digests"] = [d.to_dict() for d in record.digests]
    result["evidence"] = record.evidence.to_dict() if record.evidence is not None else None
    return result


@mcp.tool()
def run_ablation(
    fixture: str = "one_good_arm",
    variants: Optional[List[str]] = None,
    seeds: int = 20,
    workers: int = 1,
) -> Dict[str, Any]:
    """
    Compare the full loop with its ablated variants over many seeds.

    Parameters:
    -----------
    fixture : str
        Landscape name (see run_simulation).
    variants : List[str], optional
        Variants to run. Defaults to all four.
    seeds : int
        Number of seeds per variant (seeds 0..seeds-1).

    Returns:
    --------
    Dict[str, Any]
        - summary: per variant runs, wins, win_rate, mean_delta_dice_pp, mean_fsp, mean_nodes
        - fsp_tests: for each non-full variant, the one-sided signed-rank test that it
          needs more trials than the full loop (absent when the samples are identical)
    """
    if seeds < 1:
        raise ValueError("seeds must be at least 1")
    chosen = [Variant(v) for v in (variants or [v.value for v in Variant])]
    config = _config(fixture, 0, Variant.FULL.value, "synthetic")
    records = run_ablation_suite(config, chosen, list(range(seeds)), workers=workers)
    rows = [r.summary_row() for r in records]

    budget = config.qwbe_params.proposal_budget * config.qwbe_params.iteration_budget
    full = [r for r in rows if r["variant"] == Variant.FULL.value]
    tests = {}
    for variant in chosen:
        if variant is Variant.FULL or not full:
            continue
        other = [r for r in rows if r["variant"] == variant.value]
        try:
            tests[variant.value] = paired_fsp_test(full, other, budget).to_dict()
        except DegenerateSampleError:
            tests[variant.value] = None
    return {"summary": [s.to_dict() for s in ablation_summary(rows)], "fsp_tests": tests}


@mcp.tool()
def list_landscapes() -> List[str]:
    """
    List the bundled synthetic landscapes usable as `fixture` in run_simulation and run_ablation.
    """
    return fixture_names()
